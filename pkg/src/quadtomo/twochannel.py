"""Two-channel detection: the signal split onto two independently noisy chains.

With thermal noise photon numbers ``N1, N2`` the pair distribution
factorizes into an amplitude mean ``Sbar`` distributed as the broadened QPD
``W(Sbar, s)`` and an independent Gaussian difference ``delta = S1 - S2``
with ``E|delta|^2 = 2 N_tot``, where

    N_tot = N1 + N2 + 2,   s = -1 - (4 N1 N2 + 2 N1 + 2 N2) / N_tot,
    Sbar  = w2 S1 + w1 S2,  w_i = (N_i + 1) / N_tot.

The noisier channel gets the smaller weight in ``Sbar``.  Cross moments
``<conj(S1)^m S2^n>`` equal the normally ordered signal moments regardless of
the noise, and the pair distribution is a positive P function of the signal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import factorial

from .moments import MIN_SAMPLES, MomentTable, moments_to_density
from .phasespace import PhaseGrid, qpd_at
from .simulate import _QSampler, _run_blocks, complex_normal, seed_tag

@dataclass(frozen=True)
class NoisePair:
    N1: float = 0.0
    N2: float = 0.0

    def __post_init__(self):
        if self.N1 < 0 or self.N2 < 0:
            raise ValueError("noise photon numbers must be non-negative")

    @property
    def N_tot(self) -> float:
        return self.N1 + self.N2 + 2.0

    @property
    def s(self) -> float:
        return -1.0 - (4 * self.N1 * self.N2 + 2 * self.N1 + 2 * self.N2) / self.N_tot

    @property
    def w1(self) -> float:
        return (self.N1 + 1.0) / self.N_tot

    @property
    def w2(self) -> float:
        return (self.N2 + 1.0) / self.N_tot

    def mean_amplitude(self, S1, S2):
        """``Sbar = w2 S1 + w1 S2``."""
        return self.w2 * np.asarray(S1) + self.w1 * np.asarray(S2)


@dataclass
class TwoChannelRecord:
    S1: np.ndarray
    S2: np.ndarray
    noise: NoisePair
    seed: int | None = None

    def __post_init__(self):
        self.S1 = np.asarray(self.S1, dtype=complex).ravel()
        self.S2 = np.asarray(self.S2, dtype=complex).ravel()
        if self.S1.shape != self.S2.shape:
            raise ValueError("channels must have equal length")

    @property
    def count(self) -> int:
        return int(self.S1.size)

    @property
    def pairs(self) -> np.ndarray:
        return np.column_stack([self.S1, self.S2])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# N1={self.noise.N1!r} N2={self.noise.N2!r} seed={seed_tag(self.seed)}\n")
            fh.write("re1,im1,re2,im2\n")
            cols = [self.S1.real, self.S1.imag, self.S2.real, self.S2.imag]
            np.savetxt(fh, np.column_stack(cols), delimiter=",", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "TwoChannelRecord":
        with open(path) as fh:
            meta = {}
            for item in fh.readline().lstrip("#").split():
                k, v = item.split("=", 1)
                meta[k] = v
            data = np.loadtxt(fh, delimiter=",", skiprows=1, ndmin=2)
        seed = meta.get("seed", "None")
        seed = None if seed == "None" else int(seed) if seed.isdigit() else seed
        noise = NoisePair(float(meta["N1"]), float(meta["N2"]))
        return cls(data[:, 0] + 1j * data[:, 1], data[:, 2] + 1j * data[:, 3], noise, seed)


def sample_two_channel(rho_a, noise: NoisePair, n: int, seed=None, n_jobs: int = 1) -> TwoChannelRecord:
    """Draw ``n`` pairs from the factorized pair distribution.

    ``Sbar = alpha + conj(gamma)`` with ``alpha ~ Q`` and ``E|gamma|^2 = (-1-s)/2``;
    ``delta`` is independent with ``E|delta|^2 = 2 N_tot``; then
    ``S1 = Sbar + w1 delta`` and ``S2 = Sbar - w2 delta``.
    """
    if n < 1:
        raise ValueError("need at least one pair")
    sampler = _QSampler(rho_a)
    extra = (-1.0 - noise.s) / 2.0

    def block(size, rng):
        alpha = sampler.draw(size, rng)
        sbar = alpha + np.conj(complex_normal(rng, size, extra)) if extra > 0 else alpha
        delta = complex_normal(rng, size, 2.0 * noise.N_tot)
        # interleave so that blocks concatenate into (S1, S2) rows
        return np.column_stack([sbar + noise.w1 * delta, sbar - noise.w2 * delta]).ravel()

    flat = _run_blocks(block, n, seed, n_jobs).reshape(-1, 2)
    return TwoChannelRecord(flat[:, 0], flat[:, 1], noise, seed)


def _powers(z, M):
    out = np.empty((M + 1,) + z.shape, dtype=complex)
    out[0] = 1.0
    for k in range(1, M + 1):
        out[k] = out[k - 1] * z
    return out


def cross_moments(record: TwoChannelRecord, max_order: int, symmetrize: bool = True,
                  chunk: int = 1 << 17) -> MomentTable:
    """``<(a^dag)^m a^n>`` from ``mean conj(S1)^m S2^n``; no noise deconvolution needed.

    With ``symmetrize`` the estimator averages the two channel assignments,
    ``(conj(S1)^m S2^n + conj(S2)^m S1^n)/2``, which is equally unbiased and
    makes the table exactly Hermitian.
    """
    n = record.count
    if n < MIN_SAMPLES:
        raise ValueError(f"too few samples: {n} < {MIN_SAMPLES}")
    M = max_order
    acc = np.zeros((M + 1, M + 1), dtype=complex)
    accb = np.zeros((M + 1, M + 1), dtype=complex)
    sq1 = np.zeros((M + 1, M + 1))
    sq2 = np.zeros((M + 1, M + 1))
    cross = np.zeros(2 * M + 1, dtype=complex)
    for lo in range(0, n, chunk):
        s1 = record.S1[lo : lo + chunk]
        s2 = record.S2[lo : lo + chunk]
        p1, p2 = _powers(s1, M), _powers(s2, M)
        acc += np.einsum("mp,np->mn", p1.conj(), p2, optimize=True)
        a1, a2 = np.abs(p1) ** 2, np.abs(p2) ** 2
        sq1 += np.einsum("mp,np->mn", a1, a2, optimize=True)
        if symmetrize:
            accb += np.einsum("mp,np->mn", p2.conj(), p1, optimize=True)
            sq2 += np.einsum("mp,np->mn", a2, a1, optimize=True)
            cross += _powers(s1.conj() * s2, 2 * M).sum(axis=1)
    a = acc / n
    if not symmetrize:
        var = sq1 / n - np.abs(a) ** 2
        return MomentTable(a, np.sqrt(np.maximum(var, 0) / n), "normal_a")
    b = accb / n
    vals = 0.5 * (a + b)
    # |X|^2 for X = (u + v)/2 with u conj(v) = (conj(S1) S2)^(m+n)
    k = np.arange(M + 1)
    uv = (cross / n)[k[:, None] + k[None, :]]
    second = 0.25 * (sq1 / n + sq2 / n + 2 * uv.real)
    var = second - np.abs(vals) ** 2
    return MomentTable(vals, np.sqrt(np.maximum(var, 0) / n), "normal_a")


def positive_p_density(rho_a, noise: NoisePair, S1, S2) -> np.ndarray:
    """Pair density ``exp(-|S1-S2|^2/(2 N_tot)) / (2 pi N_tot) * W(Sbar, s)``."""
    S1 = np.asarray(S1, dtype=complex)
    S2 = np.asarray(S2, dtype=complex)
    gauss = np.exp(-np.abs(S1 - S2) ** 2 / (2 * noise.N_tot)) / (2 * np.pi * noise.N_tot)
    w = qpd_at(rho_a, noise.mean_amplitude(S1, S2), noise.s)
    return gauss * np.maximum(w, 0.0)


def positive_p_density_equal(rho_a, N0: float, S1, S2) -> np.ndarray:
    """Equal-noise form: ``exp(-|S1-S2|^2/(4(N0+1))) / (4 pi (N0+1)) * W((S1+S2)/2, -1-2 N0)``."""
    S1 = np.asarray(S1, dtype=complex)
    S2 = np.asarray(S2, dtype=complex)
    gauss = np.exp(-np.abs(S1 - S2) ** 2 / (4 * (N0 + 1))) / (4 * np.pi * (N0 + 1))
    return gauss * np.maximum(qpd_at(rho_a, 0.5 * (S1 + S2), -1.0 - 2.0 * N0), 0.0)


def kernel_terms(alpha: complex, S1, S2, max_order: int) -> np.ndarray:
    """Order-by-order terms of ``exp(-|alpha|^2 + conj(alpha) S1 + conj(S2) alpha - conj(S2) S1) / pi``.

    Row ``k`` holds, per pair, the homogeneous part of total degree ``k`` in
    ``(S1, conj(S2))``; the full kernel is the sum over all rows.
    """
    K = max_order
    fact = factorial(np.arange(K + 1))
    u = np.conj(alpha) * S1
    v = alpha * np.conj(S2)
    w = -S1 * np.conj(S2)
    P1 = _powers(u, K) / fact[:, None]
    P2 = _powers(v, K) / fact[:, None]
    P3 = _powers(w, K // 2) / fact[: K // 2 + 1, None]
    # Cauchy product of the alpha-dependent series, then interleave the pair factor
    C = np.zeros_like(P1)
    for k in range(K + 1):
        C[k] = np.einsum("mp,mp->p", P1[: k + 1], P2[k::-1])
    T = np.zeros_like(P1)
    for k in range(K + 1):
        for l in range(k // 2 + 1):
            T[k] += P3[l] * C[k - 2 * l]
    return T * (np.exp(-abs(alpha) ** 2) / np.pi)


@dataclass
class KernelQ:
    """Kernel estimate of the Q function at a set of points."""

    points: np.ndarray
    value: np.ndarray
    imag: np.ndarray
    stderr: np.ndarray
    order: int
    imag_stderr: np.ndarray = field(default=None)
    unreliable: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.unreliable is None:
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = self.stderr / np.abs(self.value)
            self.unreliable = ~(rel <= 1.0)

    def to_grid(self, grid: PhaseGrid) -> PhaseGrid:
        return grid.with_values(self.value.reshape(grid.nx, grid.ny))


def default_order(noise: NoisePair) -> int:
    """Series truncation order used when none is given: 8 at the quantum limit, lower for noisier pairs.

    Higher orders reduce the truncation bias but weigh the pairs with powers
    of ``|S1 S2|``, whose scale grows with ``N_tot``.
    """
    k = 4.0 + 8.0 / noise.N_tot
    return int(2 * round(k / 2))


def positive_p_to_q(record: TwoChannelRecord, grid, order: int | None = None, chunk: int = 1 << 16) -> KernelQ:
    """Estimate ``Q(alpha)`` by averaging the positive-P kernel over the recorded pairs.

    The untruncated kernel has modulus ``exp(-|alpha - c|^2 + |d|^2)`` with
    ``d = (S1 - S2)/2``; under the pair distribution the mean of that modulus
    diverges for every noise level, so a plain average does not converge.
    The estimator sums the kernel's series in ``(S1, conj(S2))`` up to total
    degree ``order``, which equals building Q from cross moments up to that
    order.

    ``grid`` may be a :class:`PhaseGrid` or an array of points.
    """
    if isinstance(grid, PhaseGrid):
        pts = grid.alphas.ravel()
    else:
        pts = np.atleast_1d(np.asarray(grid, dtype=complex)).ravel()
    n = record.count
    if n < MIN_SAMPLES:
        raise ValueError(f"too few samples: {n} < {MIN_SAMPLES}")
    K = default_order(record.noise) if order is None else int(order)
    s = np.zeros(pts.size, dtype=complex)
    s2re = np.zeros(pts.size)
    s2im = np.zeros(pts.size)
    for lo in range(0, n, chunk):
        s1 = record.S1[lo : lo + chunk]
        s2 = record.S2[lo : lo + chunk]
        for i, a in enumerate(pts):
            k = kernel_terms(a, s1, s2, K).sum(axis=0)
            s[i] += k.sum()
            s2re[i] += np.sum(k.real**2)
            s2im[i] += np.sum(k.imag**2)
    mean = s / n
    se = np.sqrt(np.maximum(s2re / n - mean.real**2, 0.0) / n)
    se_im = np.sqrt(np.maximum(s2im / n - mean.imag**2, 0.0) / n)
    return KernelQ(pts, mean.real, mean.imag, se, K, imag_stderr=se_im)


def density_from_positive_p(record: TwoChannelRecord, dim: int, order: int | None = None) -> np.ndarray:
    """Density matrix from the averaged kernel operators ``|S1><S2| / <S2|S1>``.

    Expanding the kernel operator in Fock space gives, order by order, the
    cross moments mapped through the moment-to-density series; the average is
    truncated at total order ``order`` for the same variance reason as in
    :func:`positive_p_to_q`.  The result is Hermitized and trace-normalized
    but not forced positive.
    """
    table = cross_moments(record, default_order(record.noise) if order is None else order)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = moments_to_density(table, dim)
    rho = 0.5 * (rho + rho.conj().T)
    return rho / np.trace(rho).real
