"""scikit-learn style estimators over the functional pipelines.

Each estimator takes its settings as constructor parameters (so
``get_params``/``set_params``/``clone`` work) and learns ``density_`` in
``fit``.  Measurement data go to ``fit``; calibration data that the
functional API takes as separate arguments (reference records, readout
calibrations) are passed to ``fit`` as keyword arguments.
"""

from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import fock
from .joint import (
    QUBIT_BASES,
    conditioned_moments,
    joint_mle,
    joint_mle_from_moments,
    joint_moments,
)
from .mle import (
    flatten_counts,
    iterate_rhor,
    mle_from_moments,
    povm_noisy,
    reconstruct_noise_state,
)
from .moments import (
    MomentTable,
    binning_noise_table,
    combine_noise,
    deconvolve,
    empirical_s_moments,
    moments_to_density,
    noise_moments_from_reference,
    noise_table_from_density,
    thermal_noise_table,
)
from .phasespace import husimi_q_at, wigner_at
from .simulate import Histogram2D, MeasurementRecord, histogram
from .twochannel import NoisePair, TwoChannelRecord, cross_moments, default_order, density_from_positive_p, positive_p_to_q


# validation helpers -------------------------------------------------------


def check_samples(X, min_samples: int = 1) -> np.ndarray:
    """Complex 1-D samples from a record, a complex array or an ``(n, 2)`` real array."""
    if isinstance(X, MeasurementRecord):
        X = X.samples
    X = np.asarray(X)
    if X.ndim == 2 and X.shape[1] == 2 and not np.iscomplexobj(X):
        X = X[:, 0] + 1j * X[:, 1]
    X = np.asarray(X, dtype=complex).ravel()
    if X.size < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {X.size}")
    if not np.all(np.isfinite(X)):
        raise ValueError("samples contain NaN or inf")
    return X


def check_dim(dim, minimum: int = 2) -> int:
    if int(dim) != dim or dim < minimum:
        raise ValueError(f"dim must be an integer >= {minimum}, got {dim!r}")
    return int(dim)


def check_target(target, dim: int) -> np.ndarray:
    rho = fock.as_dm(target)
    if rho.shape[0] < dim:
        rho = fock.pad_to(rho, dim)
    if rho.shape != (dim, dim):
        raise ValueError(f"target has dimension {rho.shape[0]}, estimator {dim}")
    return rho


class _DensityMixin:
    """Shared read-outs of a fitted ``density_``."""

    def fidelity(self, target) -> float:
        check_is_fitted(self, "density_")
        return fock.fidelity(self.density_, check_target(target, self.density_.shape[0]))

    def score(self, X=None, y=None) -> float:
        """Fidelity with the target state ``y`` (``X`` is ignored)."""
        if y is None:
            raise ValueError("score needs the target state as y")
        return self.fidelity(y)

    def wigner(self, alphas) -> np.ndarray:
        check_is_fitted(self, "density_")
        return wigner_at(self.density_, alphas)

    def husimi(self, alphas) -> np.ndarray:
        check_is_fitted(self, "density_")
        return husimi_q_at(self.density_, alphas)


def _noise_table(reference, noise_photons, max_order, binned: Histogram2D | None = None) -> MomentTable:
    """Noise table from measured reference data, an analytic table or a thermal photon number.

    Analytic noise does not contain the bin-centre offset of histogrammed
    data; when ``binned`` is given that offset is added to it.  Measured
    references binned alike already include it.
    """
    if reference is not None and not isinstance(reference, MomentTable):
        return noise_moments_from_reference(empirical_s_moments(reference, max_order))
    if reference is not None:
        table = reference.truncated(max_order) if reference.max_order > max_order else reference
    elif noise_photons is None:
        raise ValueError("give either a reference measurement or noise_photons")
    else:
        table = thermal_noise_table(float(noise_photons), max_order)
    if binned is not None:
        table = combine_noise(table, binning_noise_table(binned.dx, binned.dy, max_order))
    return table


# single mode --------------------------------------------------------------


class MomentTomography(_DensityMixin, BaseEstimator):
    """Moment route: empirical S moments, noise deconvolution, then a density matrix.

    ``method='mle'`` maximizes the moment likelihood (weights ``1/stderr^2``);
    ``method='linear'`` applies the moment series directly (not positive).
    """

    def __init__(self, dim: int = 5, max_order: int = 8, method: str = "mle", noise_photons: float | None = None,
                 restarts: int = 3, random_state: int = 0):
        self.dim = dim
        self.max_order = max_order
        self.method = method
        self.noise_photons = noise_photons
        self.restarts = restarts
        self.random_state = random_state

    def fit(self, X, y=None, reference=None):
        """``X``: samples, record or Histogram2D; ``reference``: vacuum-signal data or a noise MomentTable."""
        dim = check_dim(self.dim)
        if self.method not in ("mle", "linear"):
            raise ValueError(f"unknown method {self.method!r}")
        data = X if isinstance(X, Histogram2D) else check_samples(X)
        self.signal_moments_ = empirical_s_moments(data, self.max_order)
        binned = data.grid() if isinstance(data, Histogram2D) else None
        self.noise_moments_ = _noise_table(reference, self.noise_photons, self.max_order, binned)
        self.moments_ = deconvolve(self.signal_moments_, self.noise_moments_)
        if self.method == "mle":
            self.density_, self.report_ = mle_from_moments(self.moments_, dim, self.restarts, self.random_state)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                self.density_ = moments_to_density(self.moments_, dim)
            self.report_ = None
        return self

    def transform(self, X=None):
        """The reconstructed moment table (``X`` is ignored)."""
        check_is_fitted(self, "moments_")
        return self.moments_


class IterativeTomography(_DensityMixin, BaseEstimator):
    """Histogram likelihood route with the noisy POVM built from a reconstructed detector state.

    ``fit(X, reference=...)`` takes the signal histogram (or samples, binned on
    ``extent``/``bins``) and either a vacuum-signal reference (histogram or
    samples) or a known detector state as a density matrix.
    """

    def __init__(self, dim: int = 16, extent: float = 8.0, bins: int = 64, quadrature: int = 2,
                 tol: float = 1e-5, max_iter: int = 100000, noise_dim: int | None = None, noise_tol: float = 0.1,
                 g_corrected: bool = True):
        self.dim = dim
        self.extent = extent
        self.bins = bins
        self.quadrature = quadrature
        self.tol = tol
        self.max_iter = max_iter
        self.noise_dim = noise_dim
        self.noise_tol = noise_tol
        self.g_corrected = g_corrected

    def _as_hist(self, X) -> Histogram2D:
        if isinstance(X, Histogram2D):
            return X
        e = float(self.extent)
        return histogram(check_samples(X), (-e, e, -e, e), self.bins, self.bins)

    def fit(self, X, y=None, reference=None):
        dim = check_dim(self.dim)
        if reference is None:
            raise ValueError("IterativeTomography needs a reference measurement or detector state")
        hist = self._as_hist(X)
        ref = np.asarray(reference) if not isinstance(reference, (Histogram2D, MeasurementRecord)) else None
        if ref is not None and ref.ndim == 2 and ref.shape[0] == ref.shape[1]:
            self.noise_state_ = fock.check_density_matrix(ref, 1e-8, 1e-6, 1e-8)
            self.noise_report_ = None
        else:
            self.noise_state_, self.noise_report_ = reconstruct_noise_state(
                self._as_hist(reference), self.noise_dim, tol=self.noise_tol)
        povm = povm_noisy(self.noise_state_, hist.grid(), dim, quadrature=self.quadrature)
        self.density_, self.report_ = iterate_rhor(None, povm, flatten_counts(hist.counts), self.tol,
                                                   self.max_iter, self.g_corrected)
        self.histogram_ = hist
        return self


# two channel --------------------------------------------------------------


class PositivePTomography(_DensityMixin, BaseEstimator):
    """Two-channel route: cross moments of the channel pair, free of added noise.

    The direct estimate truncates the moment series and is not positive;
    ``polish=True`` replaces it with the moment-likelihood fit to the same
    cross moments.
    """

    def __init__(self, dim: int = 12, order: int | None = None, N1: float = 0.0, N2: float = 0.0,
                 polish: bool = False, random_state: int = 0):
        self.dim = dim
        self.order = order
        self.N1 = N1
        self.N2 = N2
        self.polish = polish
        self.random_state = random_state

    def fit(self, X, y=None):
        """``X``: a TwoChannelRecord or an ``(n, 2)`` complex array of (S1, S2) pairs."""
        dim = check_dim(self.dim)
        if isinstance(X, TwoChannelRecord):
            record = X
        else:
            X = np.asarray(X, dtype=complex)
            if X.ndim != 2 or X.shape[1] != 2:
                raise ValueError("pairs must have shape (n, 2)")
            record = TwoChannelRecord(X[:, 0], X[:, 1], NoisePair(self.N1, self.N2))
        self.record_ = record
        self.order_ = default_order(record.noise) if self.order is None else int(self.order)
        self.moments_ = cross_moments(record, self.order_)
        self.density_ = density_from_positive_p(record, dim, self.order_)
        self.min_eigenvalue_ = float(np.linalg.eigvalsh(self.density_).min())
        if self.polish:
            self.density_, self.report_ = mle_from_moments(self.moments_, dim, seed=self.random_state)
        return self

    def q_function(self, alphas):
        """Kernel estimate of the signal Q function with standard errors."""
        check_is_fitted(self, "record_")
        return positive_p_to_q(self.record_, np.asarray(alphas, dtype=complex), self.order_)


# qubit and field ------------------------------------------------------------


class JointTomography(BaseEstimator):
    """Qubit-field reconstruction from one Joint3DHistogram per qubit basis.

    ``method='moments'`` fits the deconvolved ``<(a^dag)^n a^m sigma_i>``;
    ``method='mle'`` runs the iterative likelihood on the joint POVM and
    needs the detector state.
    """

    def __init__(self, dim: int = 4, method: str = "moments", max_order: int = 6, noise_photons: float | None = None,
                 restarts: int = 3, random_state: int = 0, quadrature: int = 2, tol: float = 1e-5,
                 noise_tol: float = 0.1):
        self.dim = dim
        self.method = method
        self.max_order = max_order
        self.noise_photons = noise_photons
        self.restarts = restarts
        self.random_state = random_state
        self.quadrature = quadrature
        self.tol = tol
        self.noise_tol = noise_tol

    def fit(self, X: dict, y=None, calibration=None, reference=None):
        """``X``: ``{basis: Joint3DHistogram}``; ``reference``: vacuum-signal data, noise table or detector state."""
        dim = check_dim(self.dim)
        if calibration is None:
            raise ValueError("JointTomography needs a ReadoutCalibration")
        missing = [b for b in QUBIT_BASES if b not in X]
        if missing:
            raise ValueError(f"missing qubit bases: {missing}")
        if self.method == "moments":
            cond = {b: conditioned_moments(X[b], calibration, self.max_order) for b in QUBIT_BASES}
            ref = reference
            if isinstance(ref, np.ndarray) and ref.ndim == 2 and ref.shape[0] == ref.shape[1]:
                ref = noise_table_from_density(ref, self.max_order)
            binned = None
            if ref is None or isinstance(ref, MomentTable):
                binned = X["z"].marginal().grid()
            self.tables_ = joint_moments(cond, _noise_table(ref, self.noise_photons, self.max_order, binned))
            self.density_, self.report_ = joint_mle_from_moments(self.tables_, dim, self.restarts, self.random_state)
        elif self.method == "mle":
            if reference is None and self.noise_photons is None:
                raise ValueError("joint MLE needs a detector state or reference")
            if reference is None:
                rho_h = fock.thermal(float(self.noise_photons), int(np.ceil(10 * self.noise_photons)) + 12)
            elif isinstance(reference, np.ndarray) and reference.ndim == 2 and reference.shape[0] == reference.shape[1]:
                rho_h = reference
            else:
                rho_h, _ = reconstruct_noise_state(reference, tol=self.noise_tol)
            self.noise_state_ = rho_h
            self.density_, self.report_ = joint_mle(X, calibration, rho_h, dim, tol=self.tol,
                                                    quadrature=self.quadrature)
        else:
            raise ValueError(f"unknown method {self.method!r}")
        return self

    def fidelity(self, target) -> float:
        check_is_fitted(self, "density_")
        return fock.fidelity(self.density_, fock.as_dm(target))
