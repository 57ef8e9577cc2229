"""Temporal mode matching for a source decaying at rate ``kappa``.

The single-mode amplitude is recovered from a sampled output trace as
``a = sum_k f(t_k) s_k dt`` with the filter ``f(t) = sqrt(kappa) exp(-kappa t/2)``
normalized to ``sum |f|^2 dt = 1``.  A filter built for ``kappa'`` on a
``kappa`` source captures the fraction ``4 kappa kappa' / (kappa + kappa')^2``
of the mode.  Sums use the left endpoint of each sample interval, so the
discretization error is first order in ``dt``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class TimeSeries:
    dt: float
    samples: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.samples.shape[-1] < 2:
            raise ValueError("a time series needs at least two samples")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("time series contains non-finite values")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.samples.shape[-1])

    def to_csv(self, path) -> None:
        if self.samples.ndim != 1:
            raise ValueError("only single traces can be written")
        np.savetxt(path, np.column_stack([self.times, self.samples.real, self.samples.imag]),
                   delimiter=",", header="t,re,im", comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "TimeSeries":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t = data[:, 0]
        dt = float(np.mean(np.diff(t)))
        return cls(dt, data[:, 1] + 1j * data[:, 2], float(t[0]))


@dataclass
class FilterProfile:
    dt: float
    weights: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=complex)

    @property
    def norm(self) -> float:
        return float(np.sum(np.abs(self.weights) ** 2) * self.dt)


def _n_samples(dt, T):
    return int(np.floor(T / dt + 1e-9))


def matched_filter(kappa: float, t0: float, dt: float, T: float) -> FilterProfile:
    """Exponential filter ``sqrt(kappa) exp(-kappa (t - t0)/2)`` on ``[t0, t0 + T)``, renormalized."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    if not (dt > 0 and T > dt):
        raise ValueError("need 0 < dt < T")
    if T < 5.0 / kappa:
        warnings.warn(f"filter window T={T:g} shorter than 5/kappa truncates the mode", stacklevel=2)
    t = dt * np.arange(_n_samples(dt, T))
    f = np.sqrt(kappa) * np.exp(-0.5 * kappa * t)
    f = f / np.sqrt(np.sum(np.abs(f) ** 2) * dt)
    return FilterProfile(dt, f, t0)


def mode_overlap(f: FilterProfile, g: FilterProfile) -> complex:
    """``sum conj(f) g dt`` over the common window."""
    if not np.isclose(f.dt, g.dt, rtol=1e-12, atol=0):
        raise ValueError("filters use different time steps")
    n = min(f.weights.size, g.weights.size)
    return complex(np.sum(np.conj(f.weights[:n]) * g.weights[:n]) * f.dt)


def analytic_overlap(kappa: float, kappa2: float) -> float:
    """Continuum overlap ``2 sqrt(kappa kappa') / (kappa + kappa')``."""
    return 2.0 * np.sqrt(kappa * kappa2) / (kappa + kappa2)


def apply_filter(ts: TimeSeries, f: FilterProfile):
    """``sum_k f_k s_k dt``; a batch of traces (last axis time) gives one value per trace."""
    if not np.isclose(ts.dt, f.dt, rtol=1e-12, atol=0):
        raise ValueError(f"time step mismatch: trace {ts.dt} vs filter {f.dt}")
    n = f.weights.size
    if ts.samples.shape[-1] < n:
        raise ValueError("trace is shorter than the filter")
    out = (ts.samples[..., :n] @ f.weights) * f.dt
    return complex(out) if np.ndim(out) == 0 else out


def simulate_decay_trace(alpha0: complex, kappa: float, noise_density: float, dt: float, T: float,
                         seed=None, n_traces: int | None = None) -> TimeSeries:
    """``sqrt(kappa) alpha0 exp(-kappa t/2)`` plus complex white noise.

    Each sample carries noise with ``E|n_k|^2 = noise_density/dt`` so that a
    normalized filter passes variance ``noise_density``.  With ``n_traces``
    the samples have shape ``(n_traces, len)``.
    """
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    if not dt < 1.0 / (10.0 * kappa):
        raise ValueError("time step must satisfy dt < 1/(10 kappa)")
    if noise_density < 0:
        raise ValueError("noise density must be non-negative")
    t = dt * np.arange(_n_samples(dt, T))
    clean = np.sqrt(kappa) * alpha0 * np.exp(-0.5 * kappa * t)
    shape = (t.size,) if n_traces is None else (int(n_traces), t.size)
    rng = np.random.default_rng(seed)
    sd = np.sqrt(noise_density / dt / 2.0)
    noise = sd * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) if noise_density > 0 else 0.0
    return TimeSeries(dt, clean + noise)


def recovered_amplitudes(alpha0, kappa_source, kappa_filter, noise_density, dt, T, n_traces, seed=None,
                         batch: int = 256) -> np.ndarray:
    """Filter outputs of ``n_traces`` simulated traces, generated in batches to bound memory."""
    f = matched_filter(kappa_filter, 0.0, dt, T)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = root.spawn((n_traces + batch - 1) // batch)
    out = []
    for k, ss in enumerate(seeds):
        m = min(batch, n_traces - k * batch)
        ts = simulate_decay_trace(alpha0, kappa_source, noise_density, dt, T, ss, n_traces=m)
        out.append(apply_filter(ts, f))
    return np.concatenate(out)
