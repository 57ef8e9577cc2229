"""Phase-space quasi-probability distributions on rectangular grids.

Convention: a point of phase space is a complex amplitude ``alpha`` and
integrals are ``d^2 alpha = dRe(alpha) dIm(alpha)``.  With this measure the
vacuum Q function ``exp(-|alpha|^2)/pi`` has variance 1/2 per real axis.

Grids store values with shape ``(nx, ny)`` indexed ``[ix, iy]`` at the cell
centres; files list cells with x varying fastest.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import fftconvolve

from .fock import as_dm, coherent_amplitudes, displaced_fock_columns


@dataclass
class PhaseGrid:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int
    ny: int
    values: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("degenerate grid extents")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell per axis")
        if self.values is None:
            self.values = np.zeros((self.nx, self.ny))
        else:
            self.values = np.asarray(self.values)
            if self.values.shape != (self.nx, self.ny):
                raise ValueError(f"values shape {self.values.shape} != ({self.nx}, {self.ny})")

    @classmethod
    def square(cls, extent: float, n: int, center: complex = 0.0) -> "PhaseGrid":
        c = complex(center)
        return cls(c.real - extent, c.real + extent, c.imag - extent, c.imag + extent, n, n)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def x(self) -> np.ndarray:
        return self.x_min + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def y(self) -> np.ndarray:
        return self.y_min + (np.arange(self.ny) + 0.5) * self.dy

    @property
    def alphas(self) -> np.ndarray:
        """Complex cell centres, shape ``(nx, ny)``."""
        return self.x[:, None] + 1j * self.y[None, :]

    def with_values(self, values) -> "PhaseGrid":
        return replace(self, values=np.asarray(values))

    def integral(self) -> float:
        return float(np.sum(self.values) * self.cell_area)

    def moment(self, n: int, m: int) -> complex:
        """``sum alpha^m conj(alpha)^n value * area`` over the grid."""
        a = self.alphas
        return complex(np.sum(a**m * np.conj(a) ** n * self.values) * self.cell_area)

    def to_csv(self, path) -> None:
        a = self.alphas
        # x fastest: iterate y in the outer loop
        rows = np.column_stack([a.real.T.ravel(), a.imag.T.ravel(), np.real(self.values).T.ravel()])
        with open(path, "w") as fh:
            fh.write("# x_min,x_max,y_min,y_max,nx,ny\n")
            fh.write(f"# {self.x_min!r},{self.x_max!r},{self.y_min!r},{self.y_max!r},{self.nx},{self.ny}\n")
            np.savetxt(fh, rows, delimiter=",", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "PhaseGrid":
        with open(path) as fh:
            fh.readline()
            meta = fh.readline().lstrip("#").strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        x_min, x_max, y_min, y_max = (float(v) for v in meta[:4])
        nx, ny = int(meta[4]), int(meta[5])
        values = data[:, 2].reshape(ny, nx).T
        return cls(x_min, x_max, y_min, y_max, nx, ny, values)


def detection_efficiency(N0: float) -> float:
    """Equivalent homodyne efficiency ``1/(1+N0)`` of thermal detection noise."""
    if N0 < 0:
        raise ValueError("noise photon number must be non-negative")
    return 1.0 / (1.0 + N0)


def noise_from_efficiency(eta: float) -> float:
    if not 0 < eta <= 1:
        raise ValueError("efficiency must lie in (0, 1]")
    return 1.0 / eta - 1.0


def _points(alphas):
    return np.asarray(alphas, dtype=complex)


def husimi_q_at(rho, alphas) -> np.ndarray:
    """``<alpha|rho|alpha>/pi`` at arbitrary points (any array shape)."""
    rho = as_dm(rho)
    pts = _points(alphas)
    c = coherent_amplitudes(pts, rho.shape[0])
    val = np.einsum("...i,ij,...j->...", c.conj(), rho, c, optimize=True)
    return val.real / np.pi


def husimi_q(rho, grid: PhaseGrid) -> PhaseGrid:
    return grid.with_values(husimi_q_at(rho, grid.alphas))


def _columns_needed(dim: int, amp: float) -> int:
    # displaced Fock states T|n> have negligible weight below level dim once
    # sqrt(n) exceeds sqrt(dim) + |alpha| by a safe margin
    r = np.sqrt(dim) + amp + 6.0
    return int(np.ceil(r * r)) + 1


def displaced_diagonal_expectation(rho, alphas, weights_fn, chunk: int = 256) -> np.ndarray:
    """``sum_n c_n <alpha,n|rho|alpha,n>`` with ``c_n = weights_fn(n)``.

    ``|alpha,n> = T(alpha)|n>`` are displaced Fock states; only their
    components below ``dim`` contribute because ``rho`` lives there.  Points
    are processed in order of increasing ``|alpha|`` so each chunk uses only
    as many displaced Fock columns as its largest displacement needs.
    """
    rho = as_dm(rho)
    dim = rho.shape[0]
    pts = _points(alphas)
    flat = pts.ravel()
    out = np.empty(flat.shape, dtype=float)
    order = np.argsort(np.abs(flat))
    for lo in range(0, flat.size, chunk):
        idx = order[lo : lo + chunk]
        block = flat[idx]
        cols = _columns_needed(dim, float(np.max(np.abs(block))))
        c = np.asarray(weights_fn(np.arange(cols)), dtype=float)
        nz = np.nonzero(np.abs(c) > 1e-18)[0]
        cols = int(nz[-1]) + 1 if nz.size else 1
        B = displaced_fock_columns(block, dim, cols)
        val = np.einsum("pin,ij,pjn,n->p", B.conj(), rho, B, c[:cols], optimize=True)
        out[idx] = val.real
    return out.reshape(pts.shape)


def qpd_at(rho, alphas, s: float) -> np.ndarray:
    """s-parametrized QPD ``W(alpha, s)`` at arbitrary points for ``s <= 0``.

    ``W(alpha, s) = 2/(pi(1-s)) Tr[rho T(alpha) r^{a^dag a} T^dag(alpha)]`` with
    ``r = (s+1)/(s-1)``; ``s = 0`` is the displaced parity (Wigner) and
    ``s = -1`` the Q function.
    """
    s = float(s)
    if s > 0:
        raise ValueError("unsupported s > 0: only s <= 0 is evaluated directly")
    if s == -1.0:
        return husimi_q_at(rho, alphas)
    r = (s + 1.0) / (s - 1.0)
    pref = 2.0 / (np.pi * (1.0 - s))
    if s == 0.0:
        weights = lambda n: (-1.0) ** n  # noqa: E731
    else:
        weights = lambda n: r ** n  # noqa: E731
    return pref * displaced_diagonal_expectation(rho, alphas, weights)


def qpd(rho, grid: PhaseGrid, s: float) -> PhaseGrid:
    return grid.with_values(qpd_at(rho, grid.alphas, s))


def wigner_at(rho, alphas) -> np.ndarray:
    return qpd_at(rho, alphas, 0.0)


def wigner(rho, grid: PhaseGrid) -> PhaseGrid:
    return grid.with_values(wigner_at(rho, grid.alphas))


def gaussian_kernel(grid: PhaseGrid, width: float) -> np.ndarray:
    """``2/(pi w) exp(-2|alpha|^2/w)`` sampled on the grid's cell offsets (times area)."""
    kx = (np.arange(-(grid.nx - 1), grid.nx)) * grid.dx
    ky = (np.arange(-(grid.ny - 1), grid.ny)) * grid.dy
    r2 = kx[:, None] ** 2 + ky[None, :] ** 2
    return 2.0 / (np.pi * width) * np.exp(-2.0 * r2 / width) * grid.cell_area


def gaussian_convolve(grid_t: PhaseGrid, t: float, s: float) -> PhaseGrid:
    """Lower the ordering parameter of a QPD from ``t`` to ``s < t``.

    Discrete convolution with ``2/(pi(t-s)) exp(-2|alpha-beta|^2/(t-s))``;
    mass leaving the grid is lost, so the grid should cover the result.
    """
    if not t > s:
        raise ValueError(f"invalid order: need t > s, got t={t}, s={s}")
    kernel = gaussian_kernel(grid_t, t - s)
    full = fftconvolve(np.asarray(grid_t.values, dtype=float), kernel, mode="full")
    vals = full[grid_t.nx - 1 : 2 * grid_t.nx - 1, grid_t.ny - 1 : 2 * grid_t.ny - 1]
    return grid_t.with_values(vals)
