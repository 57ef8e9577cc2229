"""Monte-Carlo synthesis of complex-amplitude measurement records.

A single-channel measurement returns ``S = a + h^dag``.  Samples are drawn
from the convolution of the signal Q function with the noise P function:
``alpha ~ Q_a`` by rejection sampling and ``gamma ~ P_h`` (a complex
Gaussian for thermal, possibly displaced, noise), then ``S = alpha + conj(gamma)``.

All sampling is split into fixed-size blocks, each with its own child seed
spawned from one ``numpy.random.SeedSequence``; results therefore depend
only on the seed, never on the number of worker threads.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fock import coherent_amplitudes, check_density_matrix
from .phasespace import PhaseGrid

BLOCK = 1 << 16
QUBIT_BASES = ("x", "y", "z")


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """State of the detection-noise mode ``h``.

    ``kind='vacuum'`` is ideal heterodyne detection.  ``kind='thermal'`` is a
    thermal state with ``N0`` photons, displaced by ``mean`` (the centre of its
    P function); the displacement is only used to emulate non-thermal
    detector states in tests.
    """

    kind: str = "thermal"
    N0: float = 0.0
    mean: complex = 0.0

    def __post_init__(self):
        if self.kind not in ("thermal", "vacuum"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.N0 < 0:
            raise ValueError("noise photon number must be non-negative")
        if self.kind == "vacuum" and (self.N0 != 0 or self.mean != 0):
            raise ValueError("vacuum noise has N0 = 0 and no displacement")
        if self.kind == "thermal" and self.N0 == 0 and self.mean == 0:
            object.__setattr__(self, "kind", "vacuum")

    @classmethod
    def vacuum(cls) -> "NoiseModel":
        return cls("vacuum", 0.0)

    @classmethod
    def thermal(cls, N0: float, mean: complex = 0.0) -> "NoiseModel":
        return cls("thermal", float(N0), complex(mean))


@dataclass
class MeasurementRecord:
    samples: np.ndarray
    noise: NoiseModel
    seed: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex).ravel()
        if self.samples.size == 0:
            raise ValueError("empty measurement record")

    @property
    def count(self) -> int:
        return int(self.samples.size)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# kind={self.noise.kind} N0={self.noise.N0!r} seed={seed_tag(self.seed)}\n")
            fh.write("re,im\n")
            np.savetxt(fh, np.column_stack([self.samples.real, self.samples.imag]), delimiter=",", fmt="%.17g")


def read_samples_csv(path) -> np.ndarray:
    """Read a ``re,im[,q]`` CSV; returns complex samples (and q when present)."""
    data = np.loadtxt(path, delimiter=",", comments="#", skiprows=2, ndmin=2)
    s = data[:, 0] + 1j * data[:, 1]
    if data.shape[1] > 2:
        return s, data[:, 2]
    return s


@dataclass
class Histogram2D:
    """Binned ``(Re S, Im S)`` counts; ``counts[ix, iy]``.

    Counts are stored as floats so that weighted (conditioned) histograms use
    the same type.  ``overflow`` is the number of samples outside the extents.
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    counts: np.ndarray
    overflow: float = 0.0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("degenerate histogram extents")
        if self.counts.ndim != 2:
            raise ValueError("histogram counts must be two-dimensional")

    @property
    def nx(self) -> int:
        return self.counts.shape[0]

    @property
    def ny(self) -> int:
        return self.counts.shape[1]

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @property
    def overflow_fraction(self) -> float:
        n = self.total + self.overflow
        return self.overflow / n if n else 0.0

    def grid(self) -> PhaseGrid:
        return PhaseGrid(self.x_min, self.x_max, self.y_min, self.y_max, self.nx, self.ny)

    @property
    def centers(self) -> np.ndarray:
        return self.grid().alphas

    def density(self) -> PhaseGrid:
        """Probability density (per unit phase-space area) on the grid."""
        g = self.grid()
        return g.with_values(self.counts / (self.total * g.cell_area))

    def reflected(self) -> "Histogram2D":
        """Histogram of ``-S``: point reflection through the origin."""
        return Histogram2D(-self.x_max, -self.x_min, -self.y_max, -self.y_min,
                           self.counts[::-1, ::-1].copy(), self.overflow)

    def to_bytes(self) -> bytes:
        head = b"QTH1" + struct.pack("<II", self.nx, self.ny)
        head += struct.pack("<dddd", self.x_min, self.x_max, self.y_min, self.y_max)
        head += struct.pack("<Q", int(round(self.total)))
        # row-major with x fastest: y is the slow index
        body = np.ascontiguousarray(self.counts.T, dtype="<f8").tobytes()
        return head + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Histogram2D":
        if buf[:4] != b"QTH1":
            raise ValueError("not a QTH1 histogram")
        nx, ny = struct.unpack_from("<II", buf, 4)
        x_min, x_max, y_min, y_max = struct.unpack_from("<dddd", buf, 12)
        (total,) = struct.unpack_from("<Q", buf, 44)
        counts = np.frombuffer(buf, dtype="<f8", count=nx * ny, offset=52).reshape(ny, nx).T.copy()
        h = cls(x_min, x_max, y_min, y_max, counts)
        if int(round(h.total)) != total:
            raise ValueError("QTH1 total does not match counts")
        return h

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Histogram2D":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def seed_tag(seed) -> str:
    """One-token description of a seed for file headers."""
    if isinstance(seed, np.random.SeedSequence):
        key = ".".join(str(k) for k in seed.spawn_key)
        return f"{seed.entropy}" + (f"/{key}" if key else "")
    return str(seed)


def _blocks(n: int, seed, block: int = BLOCK):
    """Split ``n`` draws into blocks with independent child generators."""
    n = int(n)
    sizes = [block] * (n // block) + ([n % block] if n % block else [])
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(len(sizes))
    return [(size, np.random.default_rng(ss)) for size, ss in zip(sizes, children)]


def _run_blocks(fn, n, seed, n_jobs=1):
    jobs = _blocks(n, seed)
    if n_jobs and n_jobs > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            parts = list(ex.map(lambda j: fn(*j), jobs))
    else:
        parts = [fn(size, rng) for size, rng in jobs]
    return np.concatenate(parts) if parts else np.empty(0, dtype=complex)


def as_density(state) -> np.ndarray:
    """Accept a ket or a density matrix; returns a density matrix."""
    state = np.asarray(state, dtype=complex)
    if state.ndim == 1:
        state = state / np.linalg.norm(state)
        return np.outer(state, state.conj())
    return state


def complex_normal(rng, size, variance: float, mean: complex = 0.0) -> np.ndarray:
    """Circular complex Gaussian with ``E|z - mean|^2 = variance``."""
    sd = np.sqrt(variance / 2.0)
    return mean + sd * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


class _QSampler:
    """Rejection sampler for ``Q(alpha) = <alpha|rho|alpha>/pi``.

    Proposals are uniform on a disk of radius five standard deviations
    around ``<a>``; since ``pi Q <= 1`` everywhere a proposal is accepted
    with probability ``pi Q(alpha)``.
    """

    def __init__(self, rho, radius_sigmas: float = 5.0):
        rho = as_density(rho)
        rho = check_density_matrix(rho, hermitian_tol=1e-10, trace_tol=1e-8, eigen_tol=1e-8)
        w, v = np.linalg.eigh(rho)
        keep = w > 1e-14
        self.weights = w[keep]
        vecs = v[:, keep]
        # drop Fock levels the state does not touch
        support = np.nonzero(np.any(np.abs(vecs) > 0, axis=1))[0]
        top = int(support[-1]) + 1 if support.size else 1
        self.vecs = vecs[:top]
        # polynomial coefficients of <alpha|psi_k> in conj(alpha), for Horner evaluation
        lfact = np.cumsum(np.log(np.maximum(np.arange(top), 1)))
        self.poly = self.vecs * np.exp(-0.5 * lfact)[:, None]
        dim = rho.shape[0]
        a = np.diag(np.sqrt(np.arange(1, dim)), 1)
        self.center = complex(np.trace(rho @ a))
        aad = float(np.trace(rho @ (a.conj().T @ a)).real) + 1.0
        spread = max(aad - abs(self.center) ** 2, 1e-12)
        self.radius = max(radius_sigmas * np.sqrt(spread), 3.0)
        # probability that a uniform proposal is accepted = 1/(pi R^2) * integral of pi Q = 1/R^2
        self.acceptance = 1.0 / self.radius**2
        if self.acceptance < 1e-4:
            raise SamplingError(f"acceptance rate {self.acceptance:.2e} too low: grid too large")

    def pi_q(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=complex)
        if self.weights.size > 4:
            c = coherent_amplitudes(alpha, self.vecs.shape[0])
            ov = c.conj() @ self.vecs
            return (np.abs(ov) ** 2) @ self.weights
        z = alpha.conj()
        total = np.zeros(alpha.shape)
        for k, w in enumerate(self.weights):
            coef = self.poly[:, k]
            acc = np.full(alpha.shape, coef[-1])
            for c in coef[-2::-1]:
                acc *= z
                acc += c
            total += w * (acc.real**2 + acc.imag**2)
        return total * np.exp(-(alpha.real**2 + alpha.imag**2))

    def draw(self, size: int, rng) -> np.ndarray:
        out = np.empty(size, dtype=complex)
        filled = 0
        batch = int(min(max(size / self.acceptance * 1.2, 1024), 1 << 20))
        while filled < size:
            r = self.radius * np.sqrt(rng.random(batch))
            phi = 2 * np.pi * rng.random(batch)
            prop = self.center + r * np.exp(1j * phi)
            acc = prop[rng.random(batch) < self.pi_q(prop)]
            take = min(acc.size, size - filled)
            out[filled : filled + take] = acc[:take]
            filled += take
        return out


def sample_q(rho, n: int, seed=None, n_jobs: int = 1) -> np.ndarray:
    """Draw ``n`` i.i.d. amplitudes from the Husimi Q function of ``rho``."""
    if n < 1:
        raise ValueError("need at least one sample")
    sampler = _QSampler(rho)
    return _run_blocks(sampler.draw, n, seed, n_jobs)


def sample_single_channel(rho_a, noise: NoiseModel, n: int, seed=None, n_jobs: int = 1) -> MeasurementRecord:
    """Simulate ``n`` single-channel outcomes ``S = a + h^dag``."""
    if n < 1:
        raise ValueError("need at least one sample")
    sampler = _QSampler(rho_a)

    def block(size, rng):
        alpha = sampler.draw(size, rng)
        if noise.kind == "vacuum" or (noise.N0 == 0 and noise.mean == 0):
            return alpha
        gamma = complex_normal(rng, size, noise.N0, noise.mean)
        return alpha + np.conj(gamma)

    return MeasurementRecord(_run_blocks(block, n, seed, n_jobs), noise, seed)


def histogram(record, extents, nx: int, ny: int) -> Histogram2D:
    """Bin samples on ``extents = (x_min, x_max, y_min, y_max)``."""
    if nx < 8 or ny < 8:
        raise ValueError("histograms need at least 8 bins per axis")
    x_min, x_max, y_min, y_max = (float(e) for e in extents)
    if not (x_max > x_min and y_max > y_min):
        raise ValueError("degenerate histogram extents")
    s = record.samples if isinstance(record, MeasurementRecord) else np.asarray(record).ravel()
    counts, _, _ = np.histogram2d(s.real, s.imag, bins=[nx, ny], range=[[x_min, x_max], [y_min, y_max]])
    inside = counts.sum()
    return Histogram2D(x_min, x_max, y_min, y_max, counts, overflow=float(s.size - inside))


@dataclass(frozen=True)
class ReadoutModel:
    """Gaussian readout signal ``q ~ Normal(mu_s, sigma_s)`` for qubit outcome ``s``."""

    mu0: float = 0.0
    mu1: float = 1.0
    sigma0: float = 0.2
    sigma1: float | None = None

    def __post_init__(self):
        if not (np.isfinite(self.mu0) and np.isfinite(self.mu1)):
            raise ValueError("readout means must be finite")
        if self.sigma0 <= 0 or (self.sigma1 is not None and self.sigma1 <= 0):
            raise ValueError("readout widths must be positive")

    @classmethod
    def with_separation(cls, separation: float, sigma: float = 1.0) -> "ReadoutModel":
        """Means ``separation * sigma`` apart."""
        return cls(0.0, separation * sigma, sigma, sigma)

    def sigma(self, s: int) -> float:
        if s == 1 and self.sigma1 is not None:
            return self.sigma1
        return self.sigma0

    def mu(self, s: int) -> float:
        return self.mu1 if s == 1 else self.mu0


def sample_qubit_readout(state_label: int, readout: ReadoutModel, n: int, seed=None) -> np.ndarray:
    if state_label not in (0, 1):
        raise ValueError("qubit state label must be 0 or 1")
    rng = np.random.default_rng(seed)
    return readout.mu(state_label) + readout.sigma(state_label) * rng.standard_normal(int(n))


def qubit_eigenstates(basis: str) -> np.ndarray:
    """Columns are ``|0_i>`` and ``|1_i>`` (the +1 and -1 eigenvectors of sigma_i)."""
    r = 1 / np.sqrt(2)
    if basis == "z":
        return np.eye(2, dtype=complex)
    if basis == "x":
        return np.array([[r, r], [r, -r]], dtype=complex)
    if basis == "y":
        return np.array([[r, r], [1j * r, -1j * r]], dtype=complex)
    raise ValueError(f"invalid qubit basis {basis!r}")


def conditional_field_states(rho_joint, basis: str):
    """Born probabilities ``p_s`` and conditional field states for outcomes s = 0, 1."""
    rho_joint = np.asarray(rho_joint, dtype=complex)
    d = rho_joint.shape[0] // 2
    blocks = rho_joint.reshape(2, d, 2, d)
    vecs = qubit_eigenstates(basis)
    probs, states = [], []
    for s in (0, 1):
        v = vecs[:, s]
        cond = np.einsum("a,aibj,b->ij", v.conj(), blocks, v)
        p = float(np.trace(cond).real)
        probs.append(max(p, 0.0))
        states.append(cond / p if p > 1e-15 else None)
    return np.array(probs), states


@dataclass
class JointRecord:
    """Per-shot field amplitude ``S`` and readout value ``q`` for one qubit basis.

    ``outcomes`` holds the simulated (normally hidden) qubit results.
    """

    samples: np.ndarray
    q: np.ndarray
    basis: str
    noise: NoiseModel
    seed: int | None = None
    outcomes: np.ndarray | None = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return int(self.samples.size)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# basis={self.basis} kind={self.noise.kind} N0={self.noise.N0!r} seed={seed_tag(self.seed)}\n")
            fh.write("re,im,q\n")
            np.savetxt(fh, np.column_stack([self.samples.real, self.samples.imag, self.q]), delimiter=",", fmt="%.17g")


def sample_joint(rho_joint, basis: str, noise: NoiseModel, readout: ReadoutModel, n: int, seed=None,
                 n_jobs: int = 1) -> JointRecord:
    """Simulate ``n`` joint qubit-field shots with the qubit measured along ``basis``.

    Each shot draws the qubit outcome from the Born rule, a field sample from
    the conditional field state and a readout value ``q`` for that outcome.
    The joint state is ordered qubit-major: index ``s * d + n``.
    """
    if basis not in QUBIT_BASES:
        raise ValueError(f"invalid qubit basis {basis!r}")
    check_density_matrix(rho_joint, hermitian_tol=1e-10, trace_tol=1e-8, eigen_tol=1e-8)
    probs, states = conditional_field_states(rho_joint, basis)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_seq, f0_seq, f1_seq, q_seq = ss.spawn(4)
    rng = np.random.default_rng(s_seq)
    outcomes = (rng.random(int(n)) >= probs[0] / probs.sum()).astype(np.int8)
    samples = np.empty(int(n), dtype=complex)
    q = np.empty(int(n))
    qrng = np.random.default_rng(q_seq)
    for s, fseq in ((0, f0_seq), (1, f1_seq)):
        idx = np.nonzero(outcomes == s)[0]
        if idx.size == 0:
            continue
        rec = sample_single_channel(states[s], noise, idx.size, fseq, n_jobs=n_jobs)
        samples[idx] = rec.samples
        q[idx] = readout.mu(s) + readout.sigma(s) * qrng.standard_normal(idx.size)
    return JointRecord(samples, q, basis, noise, seed, outcomes)
