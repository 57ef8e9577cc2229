"""Truncated Fock-space linear algebra for a single bosonic mode.

States are plain numpy arrays: a ket is a complex vector of length ``dim``
and a density matrix is a complex ``(dim, dim)`` array.  Every constructor
that truncates an infinite-dimensional state renormalizes it and can report
the weight that was cut off.
"""

from __future__ import annotations

import json
import warnings

import numpy as np
import scipy.linalg
from scipy.special import eval_genlaguerre, gammaln

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-9
EIGEN_TOL = 1e-9


class TruncationError(ValueError):
    """Raised when a requested quantity does not fit in the truncated space."""


def _check_dim(dim: int, minimum: int = 2) -> int:
    dim = int(dim)
    if dim < minimum:
        raise ValueError(f"invalid dimension {dim}: need at least {minimum}")
    return dim


def annihilation(dim: int) -> np.ndarray:
    """Ladder operator ``a`` with ``<n-1|a|n> = sqrt(n)``."""
    dim = _check_dim(dim)
    return np.diag(np.sqrt(np.arange(1, dim)), k=1).astype(complex)


def creation(dim: int) -> np.ndarray:
    return annihilation(dim).conj().T


def number(dim: int) -> np.ndarray:
    return np.diag(np.arange(dim, dtype=float)).astype(complex)


def basis(n: int, dim: int) -> np.ndarray:
    if not 0 <= n < dim:
        raise TruncationError(f"Fock index {n} outside dimension {dim}")
    psi = np.zeros(dim, dtype=complex)
    psi[n] = 1.0
    return psi


def coherent_amplitudes(alpha, dim: int) -> np.ndarray:
    """Exact (not renormalized) amplitudes ``<n|alpha>`` for ``n < dim``.

    ``alpha`` may be an array; the Fock index is the last axis of the result.
    Amplitudes are built by the recursion ``c_n = c_{n-1} alpha / sqrt(n)``
    which stays finite for any amplitude used in practice.
    """
    alpha = np.asarray(alpha, dtype=complex)
    out = np.empty(alpha.shape + (dim,), dtype=complex)
    out[..., 0] = np.exp(-0.5 * np.abs(alpha) ** 2)
    for n in range(1, dim):
        out[..., n] = out[..., n - 1] * alpha / np.sqrt(n)
    return out


def coherent(alpha: complex, dim: int, return_weight: bool = False):
    """Coherent state ``|alpha>`` truncated to ``dim`` levels and renormalized.

    With ``return_weight=True`` also returns the probability mass lost to
    truncation.  A warning is issued when ``|alpha|^2 + 5|alpha| + 4 > dim``.
    """
    dim = _check_dim(dim, 1)
    amp = abs(alpha)
    if amp**2 + 5 * amp + 4 > dim:
        warnings.warn(
            f"dimension {dim} is marginal for a coherent state of amplitude {amp:.3g}",
            stacklevel=2,
        )
    psi = coherent_amplitudes(alpha, dim)
    kept = float(np.vdot(psi, psi).real)
    psi = psi / np.sqrt(kept)
    if return_weight:
        return psi, 1.0 - kept
    return psi


def fock_dm(n: int, dim: int) -> np.ndarray:
    psi = basis(n, dim)
    return np.outer(psi, psi.conj())


def ket2dm(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


def as_dm(state) -> np.ndarray:
    """Density matrix of a ket or of a matrix passed through unchanged."""
    state = np.asarray(state, dtype=complex)
    return ket2dm(state) if state.ndim == 1 else state


def superposition(coefficients, dim: int | None = None) -> np.ndarray:
    """Normalized ket ``sum_n c_n |n>`` padded with zeros up to ``dim``."""
    c = np.asarray(coefficients, dtype=complex)
    dim = len(c) if dim is None else dim
    if len(c) > dim:
        raise TruncationError("more coefficients than levels")
    psi = np.zeros(dim, dtype=complex)
    psi[: len(c)] = c
    return psi / np.linalg.norm(psi)


def thermal(N0: float, dim: int, return_weight: bool = False):
    """Thermal state with mean photon number ``N0``, renormalized after truncation."""
    if N0 < 0:
        raise ValueError("thermal photon number must be non-negative")
    dim = _check_dim(dim, 1)
    if N0 == 0:
        p = np.zeros(dim)
        p[0] = 1.0
    else:
        n = np.arange(dim)
        p = np.exp(n * np.log(N0) - (n + 1) * np.log1p(N0))
    kept = p.sum()
    rho = np.diag(p / kept).astype(complex)
    if return_weight:
        return rho, 1.0 - kept
    return rho


def displacement(alpha: complex, dim: int, pad: int | None = None) -> np.ndarray:
    """Displacement operator ``exp(alpha a^dag - alpha^* a)`` on ``dim`` levels.

    The exponential is taken in a padded space and cropped, which removes the
    edge error of exponentiating a truncated generator.
    """
    dim = _check_dim(dim)
    if pad is None:
        pad = int(np.ceil(abs(alpha) ** 2 + 10 * abs(alpha) + 20))
    big = dim + pad
    a = annihilation(big)
    gen = alpha * a.conj().T - np.conj(alpha) * a
    return scipy.linalg.expm(gen)[:dim, :dim]


def displaced_fock_columns(alpha, rows: int, cols: int) -> np.ndarray:
    """Matrix elements ``<m|T(alpha)|n>`` for ``m < rows`` and ``n < cols``.

    Closed form with generalized Laguerre polynomials, for ``m >= n``
    ``sqrt(n!/m!) alpha^(m-n) exp(-|alpha|^2/2) L_n^(m-n)(|alpha|^2)`` and the
    mirrored expression with ``-conj(alpha)`` for ``m < n``.  Magnitudes are
    combined in log space so that large displacements neither overflow nor
    lose precision (recursions in ``m`` or ``n`` do, beyond ``|alpha| ~ 5``).
    ``alpha`` may be an array, giving shape ``alpha.shape + (rows, cols)``.
    """
    alpha = np.asarray(alpha, dtype=complex)
    a = alpha[..., None, None]
    m = np.arange(rows)[:, None]
    n = np.arange(cols)[None, :]
    lo = np.minimum(m, n)
    k = np.abs(m - n)
    x = np.abs(a) ** 2
    lag = eval_genlaguerre(lo, k, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        logmag = (
            0.5 * (gammaln(lo + 1) - gammaln(np.maximum(m, n) + 1))
            + k * np.log(np.abs(a))
            - 0.5 * x
            + np.log(np.abs(lag))
        )
    mag = np.where(lag == 0, 0.0, np.sign(lag) * np.exp(logmag))
    # alpha = 0 gives log(0) * 0 on the diagonal; the identity is exact there
    mag = np.where((k == 0) & (x == 0), np.where(m == n, 1.0, 0.0), mag)
    mag = np.nan_to_num(mag, nan=0.0)
    theta = np.angle(a)
    phase = np.where(m >= n, np.exp(1j * k * theta), np.exp(1j * k * (np.pi - theta)))
    return mag * phase


def _ladder_power(dim: int, n: int, m: int) -> np.ndarray:
    """Matrix of ``(a^dag)^n a^m`` acting on states supported below ``dim``."""
    k = np.arange(dim)
    # a^m |l> = sqrt(l!/(l-m)!) |l-m>, then (a^dag)^n |l-m> = sqrt((l-m+n)!/(l-m)!) |l-m+n>
    out = np.zeros((dim, dim), dtype=complex)
    src = k[k >= m]
    dst = src - m + n
    ok = dst < dim
    src, dst = src[ok], dst[ok]
    logc = 0.5 * (gammaln(src + 1) - gammaln(src - m + 1)) + 0.5 * (
        gammaln(dst + 1) - gammaln(src - m + 1)
    )
    out[dst, src] = np.exp(logc)
    return out


def normally_ordered_moment(rho, n: int, m: int) -> complex:
    """``Tr[rho (a^dag)^n a^m]`` for a density matrix supported on ``dim`` levels."""
    rho = as_dm(rho)
    dim = rho.shape[0]
    if n < 0 or m < 0:
        raise ValueError("moment orders must be non-negative")
    if n + m >= dim:
        raise TruncationError(f"moment order {n}+{m} does not fit in dimension {dim}")
    return complex(np.trace(rho @ _ladder_power(dim, n, m)))


def normally_ordered_moments(rho, max_order: int) -> np.ndarray:
    """Array ``M[n, m] = Tr[rho (a^dag)^n a^m]`` for ``n + m <= max_order``, NaN elsewhere.

    Unlike :func:`normally_ordered_moment` no truncation check is made: for a
    state that really lives on ``dim`` levels the moments with ``n`` or ``m``
    at least ``dim`` are exactly zero, which is what the matrix product gives.
    """
    rho = as_dm(rho)
    dim = rho.shape[0]
    out = np.full((max_order + 1, max_order + 1), np.nan, dtype=complex)
    for n in range(max_order + 1):
        for m in range(max_order + 1 - n):
            if n >= dim or m >= dim:
                out[n, m] = 0.0
            else:
                out[n, m] = np.trace(rho @ _ladder_power(dim, n, m))
    return out


def anti_normally_ordered_moment(rho, n: int, m: int) -> complex:
    """``Tr[rho a^m (a^dag)^n]``; needs ``n`` spare levels above the support."""
    rho = as_dm(rho)
    dim = rho.shape[0]
    big = dim + n + 1
    r = np.zeros((big, big), dtype=complex)
    r[:dim, :dim] = rho
    a = annihilation(big)
    op = np.linalg.matrix_power(a, m) @ np.linalg.matrix_power(a.conj().T, n)
    return complex(np.trace(r @ op))


def expect(rho, op) -> complex:
    return complex(np.trace(np.asarray(rho) @ np.asarray(op)))


def fidelity(rho, psi) -> float:
    """``<psi|rho|psi>`` for a pure target state."""
    rho = np.asarray(rho)
    psi = np.asarray(psi)
    if psi.ndim == 2:
        # density-matrix target: Tr[rho sigma], exact for pure sigma
        if psi.shape != rho.shape:
            raise ValueError("dimension mismatch")
        return float(np.clip(np.trace(rho @ psi).real, 0.0, 1.0))
    if rho.shape[0] != psi.shape[0]:
        raise ValueError(f"dimension mismatch: rho {rho.shape[0]} vs psi {psi.shape[0]}")
    return float(np.clip(np.vdot(psi, rho @ psi).real, 0.0, 1.0))


def trace_distance(rho, sigma) -> float:
    ev = np.linalg.eigvalsh(as_dm(rho) - as_dm(sigma))
    return 0.5 * float(np.abs(ev).sum())


def pad_to(rho, dim: int) -> np.ndarray:
    rho = np.asarray(rho)
    if rho.shape[0] > dim:
        return rho[:dim, :dim]
    out = np.zeros((dim, dim), dtype=complex)
    out[: rho.shape[0], : rho.shape[0]] = rho
    return out


def check_density_matrix(rho, hermitian_tol=HERMITIAN_TOL, trace_tol=TRACE_TOL, eigen_tol=EIGEN_TOL):
    """Validate Hermiticity, unit trace and positivity; returns the array."""
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"density matrix must be square, got shape {rho.shape}")
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > hermitian_tol:
        raise ValueError(f"density matrix not Hermitian (deviation {herm:.3g})")
    tr = np.trace(rho).real
    if abs(tr - 1) > trace_tol:
        raise ValueError(f"density matrix trace {tr:.12g} differs from 1")
    lo = np.linalg.eigvalsh(rho).min()
    if lo < -eigen_tol:
        raise ValueError(f"density matrix has negative eigenvalue {lo:.3g}")
    return rho


def project_to_density(mat) -> np.ndarray:
    """Closest density matrix in Frobenius norm (eigenvalue simplex projection)."""
    mat = np.asarray(mat, dtype=complex)
    mat = 0.5 * (mat + mat.conj().T)
    w, v = np.linalg.eigh(mat)
    # projection of w onto the probability simplex
    u = np.sort(w)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, len(u) + 1)
    cond = u - (css - 1) / k > 0
    r = k[cond][-1]
    theta = (css[r - 1] - 1) / r
    p = np.maximum(w - theta, 0)
    out = (v * p) @ v.conj().T
    return 0.5 * (out + out.conj().T)


def to_json(rho) -> dict:
    rho = np.asarray(rho, dtype=complex)
    return {"dim": int(rho.shape[0]), "re": rho.real.tolist(), "im": rho.imag.tolist()}


def from_json(obj) -> np.ndarray:
    if isinstance(obj, (str, bytes)):
        obj = json.loads(obj)
    rho = np.asarray(obj["re"], dtype=float) + 1j * np.asarray(obj["im"], dtype=float)
    if rho.shape != (obj["dim"], obj["dim"]):
        raise ValueError("density matrix JSON: shape does not match dim")
    return rho


def save_density(path, rho) -> None:
    with open(path, "w") as fh:
        json.dump(to_json(rho), fh)


def load_density(path) -> np.ndarray:
    with open(path) as fh:
        return from_json(json.load(fh))
