"""Moment tables: empirical estimation, noise deconvolution, and the map to Fock space.

Three kinds of tables share one container, distinguished by ``ordering``:

* ``anti_normal_S``: ``<(S^dag)^n S^m>`` of the measured amplitude (sample means of ``conj(S)^n S^m``);
* ``anti_normal_h``: ``<h^n (h^dag)^m>`` of the noise mode, read off a reference taken with the signal in vacuum;
* ``normal_a``: ``<(a^dag)^n a^m>`` of the signal.

Because ``S = a + h^dag`` with commuting modes,

    <(S^dag)^n S^m> = sum_{i<=n, j<=m} C(n,i) C(m,j) <(a^dag)^i a^j> <h^(n-i) (h^dag)^(m-j)>,

which is triangular in the total order ``i + j`` with unit diagonal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import comb, factorial

from .fock import anti_normally_ordered_moment, normally_ordered_moments

ORDERINGS = ("anti_normal_S", "normal_a", "anti_normal_h")
MAX_EMPIRICAL_ORDER = 8
MIN_SAMPLES = 100


class OrderMismatchError(ValueError):
    pass


@dataclass
class MomentTable:
    """Moments indexed ``[n, m]`` for ``n + m <= max_order`` (NaN elsewhere)."""

    values: np.ndarray
    stderr: np.ndarray
    ordering: str

    def __post_init__(self):
        if self.ordering not in ORDERINGS:
            raise ValueError(f"unknown ordering tag {self.ordering!r}")
        self.values = np.array(self.values, dtype=complex)
        self.stderr = np.array(self.stderr, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError("moment table must be square")
        if self.stderr.shape != self.values.shape:
            raise ValueError("stderr shape differs from values")
        outside = ~self.mask
        self.values[outside] = np.nan
        self.stderr[outside] = np.nan
        self.values[0, 0] = 1.0
        self.stderr[0, 0] = 0.0

    @property
    def max_order(self) -> int:
        return self.values.shape[0] - 1

    @property
    def mask(self) -> np.ndarray:
        k = np.arange(self.values.shape[0])
        return (k[:, None] + k[None, :]) <= self.values.shape[0] - 1

    @classmethod
    def exact(cls, values, ordering: str) -> "MomentTable":
        values = np.asarray(values, dtype=complex)
        return cls(values, np.zeros(values.shape), ordering)

    def value(self, n: int, m: int) -> complex:
        self._check(n, m)
        return complex(self.values[n, m])

    def error(self, n: int, m: int) -> float:
        self._check(n, m)
        return float(self.stderr[n, m])

    def _check(self, n, m):
        if n < 0 or m < 0 or n + m > self.max_order:
            raise KeyError(f"moment ({n},{m}) not in table of order {self.max_order}")

    def entries(self):
        """Iterate ``(n, m, value, stderr)`` by increasing total order."""
        for k in range(self.max_order + 1):
            for n in range(k + 1):
                m = k - n
                yield n, m, complex(self.values[n, m]), float(self.stderr[n, m])

    def truncated(self, max_order: int) -> "MomentTable":
        if max_order > self.max_order:
            raise OrderMismatchError("cannot extend a moment table")
        k = max_order + 1
        return MomentTable(self.values[:k, :k], self.stderr[:k, :k], self.ordering)

    def relabel(self, ordering: str) -> "MomentTable":
        return MomentTable(self.values, self.stderr, ordering)

    def hermiticity_error(self) -> float:
        d = self.values - self.values.T.conj()
        return float(np.nanmax(np.abs(d)))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# ordering={self.ordering} max_order={self.max_order}\n")
            fh.write("n,m,re,im,stderr\n")
            for n, m, v, e in self.entries():
                fh.write(f"{n},{m},{v.real!r},{v.imag!r},{e!r}\n")

    @classmethod
    def from_csv(cls, path) -> "MomentTable":
        with open(path) as fh:
            head = fh.readline().lstrip("#").split()
            meta = dict(item.split("=", 1) for item in head)
            data = np.loadtxt(fh, delimiter=",", skiprows=1, ndmin=2)
        M = int(meta["max_order"])
        values = np.full((M + 1, M + 1), np.nan, dtype=complex)
        stderr = np.full((M + 1, M + 1), np.nan)
        for n, m, re, im, e in data:
            values[int(n), int(m)] = re + 1j * im
            stderr[int(n), int(m)] = e
        return cls(values, stderr, meta["ordering"])


def _samples_of(data):
    samples = getattr(data, "samples", data)
    return np.asarray(samples, dtype=complex).ravel()


def _power_stack(z, max_order):
    out = np.empty((max_order + 1,) + z.shape, dtype=complex)
    out[0] = 1.0
    for k in range(1, max_order + 1):
        out[k] = out[k - 1] * z
    return out


def weighted_moments(points, weights, max_order: int, count: float, chunk: int = 1 << 18):
    """Means of ``conj(z)^n z^m`` under normalized ``weights`` with stderr for ``count`` draws.

    The stderr of each mean is the weighted standard deviation of its summand
    divided by ``sqrt(count)``; note ``|conj(z)^n z^m|^2 = |z|^(2(n+m))``.
    """
    points = np.asarray(points, dtype=complex).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    wsum = weights.sum()
    if wsum <= 0:
        raise ValueError("no weight in moment estimate")
    M = max_order
    acc = np.zeros((M + 1, M + 1), dtype=complex)
    abs_acc = np.zeros(2 * M + 1)
    for lo in range(0, points.size, chunk):
        z = points[lo : lo + chunk]
        w = weights[lo : lo + chunk]
        p = _power_stack(z, M)
        acc += np.einsum("np,mp,p->nm", p.conj(), p, w, optimize=True)
        r2 = np.abs(z) ** 2
        abs_acc += _power_stack(r2.astype(complex), 2 * M).real @ w
    mean = acc / wsum
    k = np.arange(M + 1)
    second = (abs_acc / wsum)[k[:, None] + k[None, :]]
    var = np.maximum(second - np.abs(mean) ** 2, 0.0)
    return mean, np.sqrt(var / count)


def empirical_s_moments(data, max_order: int) -> MomentTable:
    """Empirical ``<(S^dag)^n S^m>`` from a record, a sample array or a :class:`Histogram2D`.

    Histograms are converted to probabilities at bin centres (counts need not
    be normalized); their stderr uses the total count as the sample size.
    """
    if max_order < 0 or max_order > MAX_EMPIRICAL_ORDER:
        raise ValueError(f"max_order must lie in [0, {MAX_EMPIRICAL_ORDER}]")
    if hasattr(data, "counts") and hasattr(data, "centers"):
        count = float(data.total)
        if count < MIN_SAMPLES:
            raise ValueError(f"too few samples: {count:g} < {MIN_SAMPLES}")
        vals, err = weighted_moments(data.centers, data.counts, max_order, count)
    else:
        s = _samples_of(data)
        if s.size < MIN_SAMPLES:
            raise ValueError(f"too few samples: {s.size} < {MIN_SAMPLES}")
        vals, err = weighted_moments(s, np.ones(s.size), max_order, s.size)
    return MomentTable(vals, err, "anti_normal_S")


def noise_moments_from_reference(ref: MomentTable) -> MomentTable:
    """Noise moments ``<h^n (h^dag)^m>`` from a reference measured with the signal in vacuum."""
    if ref.ordering != "anti_normal_S":
        raise ValueError("reference must be a measured S-moment table")
    return ref.relabel("anti_normal_h")


def _binom_table(M):
    k = np.arange(M + 1)
    return comb(k[:, None], k[None, :], exact=False)


def forward(signal: MomentTable, noise: MomentTable) -> MomentTable:
    """Predicted ``<(S^dag)^n S^m>`` from signal ``normal_a`` and noise ``anti_normal_h`` tables."""
    _check_pair(signal, noise, "normal_a")
    M = signal.max_order
    C = _binom_table(M)
    A, H = signal.values, noise.values
    out = np.full((M + 1, M + 1), np.nan, dtype=complex)
    var = np.full((M + 1, M + 1), np.nan)
    for n in range(M + 1):
        for m in range(M + 1 - n):
            total, v = 0.0, 0.0
            for i in range(n + 1):
                for j in range(m + 1):
                    c = C[n, i] * C[m, j]
                    total += c * A[i, j] * H[n - i, m - j]
                    v += (c * abs(H[n - i, m - j]) * signal.stderr[i, j]) ** 2
                    v += (c * abs(A[i, j]) * noise.stderr[n - i, m - j]) ** 2
            out[n, m], var[n, m] = total, v
    return MomentTable(out, np.sqrt(var), "anti_normal_S")


def _check_pair(first, noise, first_tag):
    if first.ordering != first_tag:
        raise ValueError(f"expected a {first_tag} table, got {first.ordering}")
    if noise.ordering != "anti_normal_h":
        raise ValueError(f"noise table must be anti_normal_h, got {noise.ordering}")
    if first.max_order != noise.max_order:
        raise OrderMismatchError(f"order mismatch: {first.max_order} vs {noise.max_order}")


def deconvolve(signal: MomentTable, noise: MomentTable) -> MomentTable:
    """Solve the noise expansion for ``<(a^dag)^i a^j>`` by increasing total order.

    At each order the unknown enters with coefficient ``<h^0 (h^dag)^0> = 1``
    and every other term involves already-solved lower orders, so the solve is
    a forward substitution.  Errors are propagated in quadrature, ignoring
    covariances between table entries.
    """
    _check_pair(signal, noise, "anti_normal_S")
    M = signal.max_order
    C = _binom_table(M)
    S, H = signal.values, noise.values
    A = np.full((M + 1, M + 1), np.nan, dtype=complex)
    var = np.full((M + 1, M + 1), np.nan)
    for k in range(M + 1):
        for n in range(k + 1):
            m = k - n
            rest, v = 0.0, signal.stderr[n, m] ** 2
            for i in range(n + 1):
                for j in range(m + 1):
                    if i == n and j == m:
                        continue
                    c = C[n, i] * C[m, j]
                    rest += c * A[i, j] * H[n - i, m - j]
                    v += (c * abs(H[n - i, m - j])) ** 2 * var[i, j]
                    v += (c * abs(A[i, j]) * noise.stderr[n - i, m - j]) ** 2
            A[n, m] = S[n, m] - rest
            var[n, m] = v
    return MomentTable(A, np.sqrt(var), "normal_a")


def moments_to_density(table: MomentTable, dim: int) -> np.ndarray:
    """Fock matrix ``<m|rho|n> = sum_l (-1)^l / l! <(a^dag)^(n+l) a^(m+l)> / sqrt(n! m!)``.

    The series stops where the table ends; the result is Hermitized but not
    forced positive.
    """
    if table.ordering != "normal_a":
        raise ValueError("density map needs a normal_a table")
    M = table.max_order
    if M < 2 * (dim - 1):
        warnings.warn(f"moment order {M} < 2(dim-1) = {2 * (dim - 1)}: density matrix series truncated",
                      stacklevel=2)
    rho = moment_series_matrix(table.values, dim)
    return 0.5 * (rho + rho.conj().T)


def moment_series_matrix(values, dim: int) -> np.ndarray:
    """Operator ``B`` with ``Tr[B (a^dag)^n a^m] = values[n, m]``, truncated where the table ends.

    Linear in ``values`` and not Hermitized, so it also maps the moments of
    off-diagonal blocks of a larger operator.
    """
    A = np.asarray(values, dtype=complex)
    M = A.shape[0] - 1
    out = np.zeros((dim, dim), dtype=complex)
    fact = factorial(np.arange(M + 1))
    for m in range(dim):
        for n in range(dim):
            acc = 0.0
            l = 0
            while n + m + 2 * l <= M:
                acc += (-1) ** l / fact[l] * A[n + l, m + l]
                l += 1
            if n + m <= M:
                out[m, n] = acc / np.sqrt(fact[n] * fact[m])
    return out


def truncation_bound(table: MomentTable, N: int, k: float = 3.0) -> float:
    """Conservative bound ``|<(a^dag)^N a^N>| + k stderr`` on the population at and above ``N``.

    ``<(a^dag)^N a^N> = sum_n n!/(n-N)! p_n >= sum_{n>=N} p_n``.
    """
    if table.ordering != "normal_a":
        raise ValueError("truncation bound needs a normal_a table")
    if 2 * N > table.max_order:
        raise KeyError(f"moment ({N},{N}) missing from table of order {table.max_order}")
    return abs(table.value(N, N)) + k * table.error(N, N)


CUMULANT_KEYS = ((0, 3), (1, 2), (2, 1), (3, 0))


def third_order_cumulants(table: MomentTable) -> dict:
    """Third joint cumulants of ``(a^dag, a)`` from normally ordered moments.

    Keys ``(n, m)`` count the ``a^dag`` and ``a`` factors.  With normal
    ordering the moments behave like those of commuting variables, so the
    classical moment-cumulant relation applies; Gaussian states give zero.
    """
    if table.ordering != "normal_a":
        raise ValueError("cumulants need a normal_a table")
    if table.max_order < 3:
        raise ValueError("third-order cumulants need max_order >= 3")
    A = table.values
    out = {}
    for n, m in CUMULANT_KEYS:
        # kappa_3 = E[xyz] - sum E[xy]E[z] + 2 E[x]E[y]E[z] for the multiset of n a^dag and m a
        mean1 = {0: A[0, 1], 1: A[1, 0]}
        factors = [1] * n + [0] * m
        third = A[n, m]
        pairs = 0.0
        for drop in range(3):
            rest = factors[:drop] + factors[drop + 1 :]
            pairs += A[sum(rest), len(rest) - sum(rest)] * mean1[factors[drop]]
        triple = np.prod([mean1[f] for f in factors])
        out[(n, m)] = complex(third - pairs + 2 * triple)
    return out


# analytic tables --------------------------------------------------------


def coherent_table(alpha: complex, max_order: int) -> MomentTable:
    """``<(a^dag)^n a^m> = conj(alpha)^n alpha^m``."""
    k = np.arange(max_order + 1)
    vals = np.conj(alpha) ** k[:, None] * alpha ** k[None, :]
    return MomentTable.exact(vals, "normal_a")


def thermal_noise_table(N0: float, max_order: int) -> MomentTable:
    """``<h^n (h^dag)^m> = delta_nm n! (N0 + 1)^n`` for thermal noise."""
    k = np.arange(max_order + 1)
    vals = np.diag(factorial(k) * (N0 + 1.0) ** k).astype(complex)
    return MomentTable.exact(vals, "anti_normal_h")


def density_table(rho, max_order: int) -> MomentTable:
    """Exact normally ordered moments of a density matrix."""
    return MomentTable.exact(normally_ordered_moments(rho, max_order), "normal_a")


def noise_table_from_density(rho_h, max_order: int) -> MomentTable:
    """Exact ``<h^n (h^dag)^m>`` of a noise-mode density matrix."""
    M = max_order
    vals = np.full((M + 1, M + 1), np.nan, dtype=complex)
    for n in range(M + 1):
        for m in range(M + 1 - n):
            vals[n, m] = anti_normally_ordered_moment(rho_h, m, n)
    return MomentTable.exact(vals, "anti_normal_h")


def _uniform_moment(half_width: float, k: int) -> float:
    return half_width**k / (k + 1) if k % 2 == 0 else 0.0


def binning_noise_table(dx: float, dy: float, max_order: int) -> MomentTable:
    """Moments of the offset of a sample from its bin centre, uniform over a ``dx`` by ``dy`` cell.

    Histogram moments taken at bin centres carry this offset as extra
    independent noise (the two-dimensional form of Sheppard's correction);
    combine it with the detector table via :func:`combine_noise`.
    """
    M = max_order
    C = _binom_table(M)
    a, b = 0.5 * dx, 0.5 * dy
    vals = np.full((M + 1, M + 1), np.nan, dtype=complex)
    for n in range(M + 1):
        for m in range(M + 1 - n):
            # conj(u)^n u^m with u = x + i y, x and y independent
            tot = 0.0
            for p in range(n + 1):
                for q in range(m + 1):
                    ky = (n - p) + (m - q)
                    phase = (-1j) ** (n - p) * (1j) ** (m - q)
                    tot += C[n, p] * C[m, q] * phase * _uniform_moment(a, p + q) * _uniform_moment(b, ky)
            vals[n, m] = tot
    return MomentTable.exact(vals, "anti_normal_h")


def combine_noise(first: MomentTable, second: MomentTable) -> MomentTable:
    """Noise table of the sum of two independent additive noises."""
    if first.ordering != "anti_normal_h" or second.ordering != "anti_normal_h":
        raise ValueError("combine_noise takes two anti_normal_h tables")
    return forward(first.relabel("normal_a"), second).relabel("anti_normal_h")
