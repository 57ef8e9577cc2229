"""Maximum-likelihood density-matrix reconstruction.

Two engines:

* :func:`mle_from_moments` fits a density matrix to a table of normally
  ordered moments with inverse-variance weights, over the Cholesky-type
  parametrization ``rho = C C^dag / Tr(C C^dag)``.
* :func:`iterate_rhor` is the ``R rho R`` fixed-point iteration on binned
  data with discrete POVM elements ``E_j = w_j Pi_j``.  Since a finite grid
  does not resolve the identity, the update uses ``G^-1 R`` with
  ``G = sum_j E_j``; probabilities are renormalized by ``Tr[rho G]``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .fock import (
    _ladder_power,
    check_density_matrix,
    coherent_amplitudes,
    displaced_fock_columns,
    fidelity,
    project_to_density,
    to_json,
)
from .moments import MomentTable, moments_to_density
from .phasespace import PhaseGrid

P_FLOOR = 1e-300
G_CUTOFF = 1e-6


@dataclass
class LikelihoodReport:
    iterations: int
    final_log_likelihood: float
    delta_last: float
    converged: bool
    engine: str = "iterative"
    history: list = field(default_factory=list, repr=False)
    floored_bins: int = 0
    diluted_steps: int = 0

    def to_dict(self, rho, target=None) -> dict:
        out = {
            "rho": to_json(rho),
            "log_likelihood": float(self.final_log_likelihood),
            "iterations": int(self.iterations),
            "engine": self.engine,
        }
        if target is not None:
            out["fidelity_vs_target"] = fidelity(rho, target)
        return out

    def save(self, path, rho, target=None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(rho, target), fh, indent=1)


@dataclass
class POVMSet:
    """Discrete POVM ``E_j = weights[j] * Pi_j``.

    Elements are stored either as vectors (``Pi_j = |v_j><v_j|``) or as full
    operators of shape ``(J, d, d)``.
    """

    weights: np.ndarray
    labels: np.ndarray
    vectors: np.ndarray | None = None
    operators: np.ndarray | None = None

    def __post_init__(self):
        if (self.vectors is None) == (self.operators is None):
            raise ValueError("give exactly one of vectors or operators")
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights < 0):
            raise ValueError("POVM weights must be non-negative")
        if len(self.labels) != self.weights.size or self._stack.shape[0] != self.weights.size:
            raise ValueError("labels, weights and elements disagree in length")
        self._G = None

    @property
    def _stack(self):
        return self.vectors if self.vectors is not None else self.operators

    @property
    def dim(self) -> int:
        return self._stack.shape[1]

    def __len__(self) -> int:
        return self.weights.size

    @property
    def G(self) -> np.ndarray:
        if self._G is None:
            if self.vectors is not None:
                v = self.vectors
                self._G = np.einsum("j,ja,jb->ab", self.weights, v, v.conj(), optimize=True)
            else:
                self._G = np.tensordot(self.weights, self.operators, axes=1)
            self._G = 0.5 * (self._G + self._G.conj().T)
        return self._G

    def operator(self, j: int) -> np.ndarray:
        if self.vectors is not None:
            return np.outer(self.vectors[j], self.vectors[j].conj())
        return self.operators[j]

    def probabilities(self, rho) -> np.ndarray:
        """``Tr[rho E_j]`` for every element."""
        rho = np.asarray(rho, dtype=complex)
        if self.vectors is not None:
            v = self.vectors
            p = np.einsum("ja,ab,jb->j", v.conj(), rho, v, optimize=True).real
        else:
            p = np.einsum("ab,jba->j", rho, self.operators, optimize=True).real
        return self.weights * p

    def weighted_sum(self, coeffs) -> np.ndarray:
        """``sum_j coeffs_j E_j``."""
        c = np.asarray(coeffs, dtype=float) * self.weights
        if self.vectors is not None:
            v = self.vectors
            out = (v.T * c) @ v.conj()
        else:
            out = np.tensordot(c, self.operators, axes=1)
        return 0.5 * (out + out.conj().T)

    def subset(self, mask) -> "POVMSet":
        mask = np.asarray(mask, dtype=bool).ravel()
        if self.vectors is not None:
            return POVMSet(self.weights[mask], self.labels[mask], vectors=self.vectors[mask])
        return POVMSet(self.weights[mask], self.labels[mask], operators=self.operators[mask])

    def min_eigenvalue(self) -> float:
        if self.vectors is not None:
            return 0.0
        return float(np.linalg.eigvalsh(self.operators).min())


def _grid_points(grid: PhaseGrid):
    # x fastest, matching the flattened order of histogram counts
    return grid.alphas.T.ravel()


def flatten_counts(counts) -> np.ndarray:
    """Histogram counts ``[ix, iy]`` flattened in POVM label order (x fastest)."""
    return np.asarray(counts, dtype=float).T.ravel()


def _cell_nodes(grid: PhaseGrid, quadrature: int):
    """Gauss-Legendre nodes inside each cell, shape ``(J, q*q)``, and their weights (sum 1)."""
    if quadrature < 1:
        raise ValueError("quadrature must be a positive integer")
    centres = _grid_points(grid)
    u, w = np.polynomial.legendre.leggauss(quadrature)
    off = 0.5 * (u[:, None] * grid.dx + 1j * u[None, :] * grid.dy).ravel()
    return centres[:, None] + off[None, :], 0.25 * np.outer(w, w).ravel()


def povm_ideal(grid: PhaseGrid, dim: int, quadrature: int = 1) -> POVMSet:
    """``Pi_alpha = |alpha><alpha|/pi`` at the bin centres with weight = bin area.

    ``quadrature > 1`` replaces the centre value by the cell average of
    ``|alpha><alpha|/pi`` over ``quadrature^2`` Gauss-Legendre nodes, which
    removes the leading binning error of the likelihood.
    """
    pts = _grid_points(grid)
    area = np.full(pts.size, grid.cell_area)
    if quadrature == 1:
        return POVMSet(area, pts, vectors=coherent_amplitudes(pts, dim) / np.sqrt(np.pi))
    nodes, w = _cell_nodes(grid, quadrature)
    ops = np.zeros((pts.size, dim, dim), dtype=complex)
    for k in range(w.size):
        v = coherent_amplitudes(nodes[:, k], dim)
        ops += w[k] * v[:, :, None] * v.conj()[:, None, :]
    return POVMSet(area, pts, operators=ops / np.pi)


def povm_noisy(rho_h, grid: PhaseGrid, dim: int, chunk: int = 512, quadrature: int = 1) -> POVMSet:
    """``Pi_alpha = T(alpha) rho_h T^dag(alpha) / pi`` restricted to ``dim`` signal levels.

    ``quadrature`` as in :func:`povm_ideal`.
    """
    rho_h = check_density_matrix(rho_h, hermitian_tol=1e-8, trace_tol=1e-6, eigen_tol=1e-8)
    pts = _grid_points(grid)
    nodes, w = _cell_nodes(grid, quadrature)
    dh = rho_h.shape[0]
    ops = np.zeros((pts.size, dim, dim), dtype=complex)
    for k in range(w.size):
        for lo in range(0, pts.size, chunk):
            B = displaced_fock_columns(nodes[lo : lo + chunk, k], dim, dh)
            ops[lo : lo + chunk] += w[k] * np.einsum("pmk,kl,pnl->pmn", B, rho_h, B.conj(), optimize=True)
    ops = 0.5 * (ops + ops.conj().transpose(0, 2, 1)) / np.pi
    return POVMSet(np.full(pts.size, grid.cell_area), pts, operators=ops)


def _pinv_hermitian(G, cutoff=G_CUTOFF):
    w, v = np.linalg.eigh(G)
    keep = w > cutoff * w.max()
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (v * inv) @ v.conj().T


def log_likelihood(rho, povm: POVMSet, counts) -> float:
    """``sum_j c_j log(p_j / Tr[rho G])``: likelihood conditioned on landing on the grid."""
    counts = np.asarray(counts, dtype=float)
    p = np.maximum(povm.probabilities(rho), P_FLOOR)
    norm = float(np.trace(np.asarray(rho) @ povm.G).real)
    pos = counts > 0
    return float(np.sum(counts[pos] * np.log(p[pos] / norm)))


def iterate_rhor(initial, povm: POVMSet, counts, tol: float = 1e-5, max_iter: int = 100000,
                 g_corrected: bool = True):
    """Iterate ``rho -> A rho A^dag / Tr`` with ``A = G^-1 R(rho)`` (or ``R`` if uncorrected).

    Stops when one step raises the log-likelihood (in nats, summed over all
    counts) by less than ``tol``.  A step
    that lowers the likelihood is replaced by a diluted step
    ``A_eps = (1 + eps A)/(1 + eps)`` with ``eps`` halved until it does not.
    """
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (len(povm),):
        raise ValueError(f"need {len(povm)} counts, got shape {counts.shape}")
    if np.any(counts < 0) or counts.sum() <= 0:
        raise ValueError("counts must be non-negative with at least one positive")
    total = counts.sum()
    f = counts / total
    d = povm.dim
    rho = np.eye(d, dtype=complex) / d if initial is None else np.array(initial, dtype=complex)
    Ginv = _pinv_hermitian(povm.G) if g_corrected else np.eye(d)
    eye = np.eye(d)

    def ll_of(r):
        p = povm.probabilities(r)
        floored = int(np.sum((p < P_FLOOR) & (f > 0)))
        p = np.maximum(p, P_FLOOR)
        norm = float(np.trace(r @ povm.G).real)
        pos = f > 0
        return float(np.sum(f[pos] * np.log(p[pos] / norm))), p, floored

    def step(r, A):
        new = A @ r @ A.conj().T
        new = 0.5 * (new + new.conj().T)
        return new / np.trace(new).real

    ll, p, floored = ll_of(rho)
    history = [ll * total]
    diluted = 0
    delta = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        R = povm.weighted_sum(f / p)
        A = Ginv @ R
        cand = step(rho, A)
        ll_new, p_new, fl = ll_of(cand)
        if ll_new < ll:
            eps = 1.0
            while ll_new < ll and eps > 1e-8:
                eps *= 0.5
                cand = step(rho, (eye + eps * A) / (1 + eps))
                ll_new, p_new, fl = ll_of(cand)
            diluted += 1
            if ll_new < ll:
                # no ascent direction left at machine precision
                delta = 0.0
                converged = True
                break
        delta = ll_new - ll
        rho, ll, p = cand, ll_new, p_new
        floored = max(floored, fl)
        history.append(ll * total)
        if delta * total < tol:
            converged = True
            break
    report = LikelihoodReport(it, ll * total, delta * total, converged, "iterative", history, floored, diluted)
    return rho, report


def fixed_point_residual(rho, povm: POVMSet, counts, g_corrected: bool = True) -> float:
    """Max-abs change of ``rho`` under one undiluted update."""
    f = np.asarray(counts, dtype=float)
    f = f / f.sum()
    p = np.maximum(povm.probabilities(rho), P_FLOOR)
    A = povm.weighted_sum(f / p)
    if g_corrected:
        A = _pinv_hermitian(povm.G) @ A
    new = A @ rho @ A.conj().T
    new = new / np.trace(new).real
    return float(np.max(np.abs(new - rho)))


# noise state ----------------------------------------------------------


def estimate_noise_photons(hist) -> float:
    """``E|S|^2 - 1`` of a vacuum-signal reference histogram."""
    pts = hist.centers
    return float(np.sum(np.abs(pts) ** 2 * hist.counts) / hist.total - 1.0)


def default_noise_dim(N0_est: float) -> int:
    return int(np.ceil(10 * max(N0_est, 0.0))) + 6


def reconstruct_noise_state(ref_hist, dim: int | None = None, tol: float = 0.1, max_iter: int = 5000):
    """Detector state whose ideal-POVM statistics reproduce the reflected reference.

    The noise state has some ``dim^2`` free parameters, far more than the
    reference can pin down, so the iteration is stopped early: once a step
    gains less than ``tol`` nats the remaining gains only fit shot noise into
    the off-diagonal elements.

    With the signal in vacuum the reference density at ``S`` equals the Q
    function of the returned state at ``-S``; the histogram is therefore
    point-reflected before running the ideal-POVM iteration.
    """
    if dim is None:
        dim = default_noise_dim(estimate_noise_photons(ref_hist))
    refl = ref_hist.reflected()
    povm = povm_ideal(refl.grid(), dim)
    return iterate_rhor(None, povm, flatten_counts(refl.counts), tol=tol, max_iter=max_iter)


def thermal_populations(N0: float, dim: int) -> np.ndarray:
    n = np.arange(dim)
    return N0**n / (N0 + 1.0) ** (n + 1)


def fit_thermal(rho) -> float:
    """Least-squares thermal photon number for the diagonal of ``rho``."""
    diag = np.real(np.diag(rho))
    res = minimize_scalar(lambda N: np.sum((diag - thermal_populations(N, diag.size)) ** 2),
                          bounds=(0.0, 10.0 * diag.size), method="bounded", options={"xatol": 1e-10})
    return float(res.x)


def max_offdiagonal(rho) -> float:
    rho = np.asarray(rho)
    return float(np.max(np.abs(rho - np.diag(np.diag(rho)))))


# moment engine ------------------------------------------------------------


def _unpack(x, d):
    C = np.zeros((d, d), dtype=complex)
    il = np.tril_indices(d)
    k = il[0].size
    C[il] = x[:k] + 1j * x[k:]
    return C


def _pack(C):
    il = np.tril_indices(C.shape[0])
    return np.concatenate([C[il].real, C[il].imag])


def _cholesky_start(rho, floor=1e-3):
    d = rho.shape[0]
    r = project_to_density(rho) + floor * np.eye(d)
    return np.linalg.cholesky(r / np.trace(r).real)


class _MomentObjective:
    """Normalized weighted squared residual and its gradient in the C parametrization.

    ``targets[k]`` is fitted by ``Tr[rho ops[k]]`` with weight ``1/errors[k]^2``.
    """

    def __init__(self, targets, errors, ops):
        err = np.asarray(errors, dtype=float)
        if np.any(~(err > 0)):
            raise ValueError("moment stderr must be positive (use inf to drop an entry)")
        w = 1.0 / err**2
        if not np.any(w > 0):
            raise ValueError("all moment weights are zero")
        keep = w > 0
        self.wsum = float(w[keep].sum())
        self.w = w[keep] / self.wsum
        self.target = np.asarray(targets, dtype=complex)[keep]
        self.ops = np.asarray(ops, dtype=complex)[keep]
        self.dim = self.ops.shape[1]
        self.evals = 0

    @classmethod
    def from_table(cls, table: MomentTable, dim: int) -> "_MomentObjective":
        M = table.max_order
        idx = [(n, m) for n in range(M + 1) for m in range(M + 1 - n) if (n, m) != (0, 0)]
        return cls([table.values[n, m] for n, m in idx], [table.stderr[n, m] for n, m in idx],
                   [_ladder_power(dim, n, m) for n, m in idx])

    def model(self, rho):
        return np.einsum("ab,kba->k", rho, self.ops, optimize=True)

    def __call__(self, x):
        self.evals += 1
        d = self.dim
        C = _unpack(x, d)
        P = C @ C.conj().T
        t = np.trace(P).real
        rho = P / t
        r = self.target - self.model(rho)
        fval = float(np.sum(self.w * np.abs(r) ** 2))
        X = np.tensordot(self.w * r.conj(), self.ops, axes=1)
        H = 0.5 * (X + X.conj().T)
        K = C.conj().T @ (H - np.trace(rho @ H).real * np.eye(d))
        gX = -(4.0 / t) * K.T.real
        gY = (4.0 / t) * K.T.imag
        il = np.tril_indices(d)
        return fval, np.concatenate([gX[il], gY[il]])


def fit_moment_operators(obj: _MomentObjective, linear_start=None, restarts: int = 3, seed: int = 0,
                         gtol: float = 1e-12, max_iter: int = 5000, engine: str = "moments"):
    """Minimize a moment objective from several starts; returns ``(rho, report)``."""
    dim = obj.dim
    starts = []
    if linear_start is not None and np.all(np.isfinite(linear_start)):
        starts.append(_cholesky_start(linear_start))
    starts.append(np.eye(dim, dtype=complex) / np.sqrt(dim))
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        starts.append(np.tril(rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))))
    best, nit = None, 0
    for C0 in starts:
        res = minimize(obj, _pack(C0), jac=True, method="L-BFGS-B",
                       options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-15, "maxcor": 30})
        nit += res.nit
        if best is None or res.fun < best.fun:
            best = res
    C = _unpack(best.x, dim)
    rho = C @ C.conj().T
    rho = 0.5 * (rho + rho.conj().T) / np.trace(rho).real
    gnorm = float(np.max(np.abs(best.jac)))
    report = LikelihoodReport(nit, -0.5 * best.fun * obj.wsum, gnorm, bool(best.success) or gnorm < 1e-8, engine)
    return rho, report


def mle_from_moments(table: MomentTable, dim: int, restarts: int = 3, seed: int = 0,
                     gtol: float = 1e-12, max_iter: int = 5000):
    """Density matrix maximizing the Gaussian moment likelihood with weights ``1/stderr^2``.

    Starts: the projected linear inversion, the maximally mixed state and
    ``restarts`` seeded random points; the best local optimum wins.
    """
    if table.ordering != "normal_a":
        raise ValueError("moment likelihood needs a normal_a table")
    obj = _MomentObjective.from_table(table, dim)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lin = moments_to_density(table, dim)
    return fit_moment_operators(obj, lin, restarts, seed, gtol, max_iter)


# resampling ----------------------------------------------------------------


def bootstrap(samples, statistic, n_resamples: int = 20, seed=None) -> np.ndarray:
    """Values of ``statistic`` on ``n_resamples`` resamples (with replacement) of ``samples``."""
    samples = np.asarray(samples)
    rng = np.random.default_rng(seed)
    n = samples.shape[0]
    return np.array([statistic(samples[rng.integers(0, n, n)]) for _ in range(n_resamples)])
