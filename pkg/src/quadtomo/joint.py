"""Joint qubit-field tomography from correlated ``(S, q)`` records.

Each shot yields a field amplitude ``S`` and a classical readout value ``q``
of the qubit, measured along ``x``, ``y`` or ``z``.  Per ``S`` bin the ``q``
trace is fitted by the two calibration distributions, which gives the
conditional Pauli expectation ``<sigma_i>_S``.  Moment route: conditioned
field histograms give conditional moments, combined into
``<(a^dag)^n a^m sigma_i>`` and mapped block-wise to the joint matrix.
Likelihood route: ``R rho R`` iteration with POVM elements
``Pi_alpha (x) |s_i><s_i|``.

Joint operators are ordered qubit-major: index ``s * d + n``.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .fock import _ladder_power, check_density_matrix
from .mle import POVMSet, _MomentObjective, fit_moment_operators, flatten_counts, iterate_rhor, povm_noisy
from .moments import MomentTable, deconvolve, empirical_s_moments, moment_series_matrix
from .simulate import QUBIT_BASES, Histogram2D, JointRecord, qubit_eigenstates

MIN_COUNTS = 20
BASIS_CODES = {"x": 0, "y": 1, "z": 2}


@dataclass
class ReadoutCalibration:
    """Reference readout distributions ``p0``, ``p1`` on shared ``q`` bin edges (each sums to 1)."""

    edges: np.ndarray
    p0: np.ndarray
    p1: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        p0 = np.asarray(self.p0, dtype=float)
        p1 = np.asarray(self.p1, dtype=float)
        if p0.shape != (self.edges.size - 1,) or p1.shape != p0.shape:
            raise ValueError("calibration histograms must match the q bins")
        if np.any(p0 < 0) or np.any(p1 < 0) or p0.sum() <= 0 or p1.sum() <= 0:
            raise ValueError("calibration histograms must be non-negative and non-empty")
        self.p0 = p0 / p0.sum()
        self.p1 = p1 / p1.sum()

    @classmethod
    def from_samples(cls, q0, q1, edges) -> "ReadoutCalibration":
        edges = np.asarray(edges, dtype=float)
        h0, _ = np.histogram(q0, edges)
        h1, _ = np.histogram(q1, edges)
        return cls(edges, h0, h1)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"edges": self.edges.tolist(), "p0": self.p0.tolist(), "p1": self.p1.tolist()}, fh)

    @classmethod
    def load(cls, path) -> "ReadoutCalibration":
        with open(path) as fh:
            obj = json.load(fh)
        return cls(obj["edges"], obj["p0"], obj["p1"])

    @property
    def overlap(self) -> float:
        """``sum_q min(p0, p1)``: 0 for separable, 1 for identical distributions."""
        return float(np.minimum(self.p0, self.p1).sum())


def readout_edges(readout, nq: int = 40, span: float = 5.0) -> np.ndarray:
    lo = min(readout.mu0 - span * readout.sigma(0), readout.mu1 - span * readout.sigma(1))
    hi = max(readout.mu0 + span * readout.sigma(0), readout.mu1 + span * readout.sigma(1))
    return np.linspace(lo, hi, nq + 1)


@dataclass
class Joint3DHistogram:
    """Counts ``[ix, iy, iq]`` of ``(Re S, Im S, q)`` for one qubit basis."""

    basis: str
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    q_edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        if self.basis not in QUBIT_BASES:
            raise ValueError(f"invalid qubit basis {self.basis!r}")
        self.q_edges = np.asarray(self.q_edges, dtype=float)
        self.counts = np.asarray(self.counts, dtype=float)
        if self.counts.ndim != 3 or self.counts.shape[2] != self.q_edges.size - 1:
            raise ValueError("counts must have shape (nx, ny, len(q_edges) - 1)")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")

    @classmethod
    def from_record(cls, record: JointRecord, extents, nx: int, ny: int, q_edges) -> "Joint3DHistogram":
        x_min, x_max, y_min, y_max = (float(e) for e in extents)
        q_edges = np.asarray(q_edges, dtype=float)
        s = record.samples
        counts, _ = np.histogramdd(
            np.column_stack([s.real, s.imag, record.q]),
            bins=[np.linspace(x_min, x_max, nx + 1), np.linspace(y_min, y_max, ny + 1), q_edges],
        )
        return cls(record.basis, x_min, x_max, y_min, y_max, q_edges, counts)

    @property
    def shape(self):
        return self.counts.shape

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def marginal(self) -> Histogram2D:
        """Field histogram summed over ``q``."""
        return Histogram2D(self.x_min, self.x_max, self.y_min, self.y_max, self.counts.sum(axis=2))

    def to_bytes(self) -> bytes:
        nx, ny, nq = self.counts.shape
        head = b"QTJ1" + struct.pack("<B", BASIS_CODES[self.basis]) + struct.pack("<III", nx, ny, nq)
        head += struct.pack("<dddd", self.x_min, self.x_max, self.y_min, self.y_max)
        head += struct.pack("<Q", int(round(self.total)))
        edges = np.ascontiguousarray(self.q_edges, dtype="<f8").tobytes()
        # x fastest, then y, then q
        body = np.ascontiguousarray(self.counts.transpose(2, 1, 0), dtype="<f8").tobytes()
        return head + edges + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Joint3DHistogram":
        if buf[:4] != b"QTJ1":
            raise ValueError("not a QTJ1 histogram")
        (code,) = struct.unpack_from("<B", buf, 4)
        nx, ny, nq = struct.unpack_from("<III", buf, 5)
        x_min, x_max, y_min, y_max = struct.unpack_from("<dddd", buf, 17)
        (total,) = struct.unpack_from("<Q", buf, 49)
        off = 57
        edges = np.frombuffer(buf, dtype="<f8", count=nq + 1, offset=off).copy()
        off += 8 * (nq + 1)
        counts = np.frombuffer(buf, dtype="<f8", count=nx * ny * nq, offset=off)
        counts = counts.reshape(nq, ny, nx).transpose(2, 1, 0).copy()
        basis = {v: k for k, v in BASIS_CODES.items()}[code]
        h = cls(basis, x_min, x_max, y_min, y_max, edges, counts)
        if int(round(h.total)) != total:
            raise ValueError("QTJ1 total does not match counts")
        return h

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Joint3DHistogram":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def fit_two_components(traces, p0, p1):
    """Non-negative least squares of each row of ``traces`` onto ``c0 p0 + c1 p1``.

    Two unknowns: solve the normal equations and, where a coefficient comes
    out negative, fall back to the better of the two single-component fits.
    """
    traces = np.asarray(traces, dtype=float)
    A = np.column_stack([p0, p1])
    gram = A.T @ A
    det = np.linalg.det(gram)
    if det <= 1e-14 * np.trace(gram) ** 2:
        raise ValueError("calibration distributions are not identifiable (p0 ~ p1)")
    rhs = traces @ A
    c = np.linalg.solve(gram, rhs.T).T
    only0 = np.maximum(rhs[:, 0] / gram[0, 0], 0.0)
    only1 = np.maximum(rhs[:, 1] / gram[1, 1], 0.0)
    res0 = np.sum((traces - only0[:, None] * p0) ** 2, axis=1)
    res1 = np.sum((traces - only1[:, None] * p1) ** 2, axis=1)
    bad = np.any(c < 0, axis=1)
    use0 = bad & (res0 <= res1)
    use1 = bad & ~use0
    c[use0] = np.column_stack([only0[use0], np.zeros(use0.sum())])
    c[use1] = np.column_stack([np.zeros(use1.sum()), only1[use1]])
    return c


def pauli_from_trace(trace, calib: ReadoutCalibration):
    """``<sigma>`` from one ``q`` trace and its stderr.

    The stderr propagates Poisson counting noise through the least-squares
    fit, so it includes the readout overlap; calibration noise is ignored.
    """
    trace = np.asarray(trace, dtype=float)
    A = np.column_stack([calib.p0, calib.p1])
    ginv = np.linalg.inv(A.T @ A)
    c = ginv @ (A.T @ trace)
    cov = ginv @ (A.T * trace) @ A @ ginv
    tot = c.sum()
    sigma = (c[0] - c[1]) / tot
    grad = np.array([2 * c[1], -2 * c[0]]) / tot**2
    return float(np.clip(sigma, -1, 1)), float(np.sqrt(grad @ cov @ grad))


def conditioned_pauli(hist: Joint3DHistogram, calib: ReadoutCalibration, min_counts: int = MIN_COUNTS):
    """Per-``S``-bin ``<sigma_i>_S = (c0 - c1)/(c0 + c1)`` and a validity mask, both ``(nx, ny)``."""
    if calib.overlap >= 1.0 - 1e-12:
        raise ValueError("calibration distributions are not distinguishable")
    if not np.allclose(hist.q_edges, calib.edges):
        raise ValueError("histogram and calibration use different q bins")
    nx, ny, nq = hist.counts.shape
    traces = hist.counts.reshape(nx * ny, nq)
    c = fit_two_components(traces, calib.p0, calib.p1)
    tot = c.sum(axis=1)
    valid = (traces.sum(axis=1) >= min_counts) & (tot > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        pauli = np.where(valid, (c[:, 0] - c[:, 1]) / tot, 0.0)
    return np.clip(pauli, -1.0, 1.0).reshape(nx, ny), valid.reshape(nx, ny)


def conditioned_histograms(hist: Joint3DHistogram, pauli, mask):
    """Field histograms conditioned on the qubit outcome: weights ``(1 +- <sigma>_S)/2`` per valid bin.

    Returns ``(D0, D1, sigma)`` where ``sigma`` is the unconditioned Pauli
    expectation implied by the weights.  The histograms carry effective
    counts; moment estimation normalizes them.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("all S bins are masked")
    marg = hist.marginal()
    counts = np.where(mask, marg.counts, 0.0)
    c0 = counts * (1 + pauli) / 2
    c1 = counts * (1 - pauli) / 2
    mk = lambda c: Histogram2D(marg.x_min, marg.x_max, marg.y_min, marg.y_max, c)  # noqa: E731
    sigma = float((c0.sum() - c1.sum()) / counts.sum())
    return mk(c0), mk(c1), sigma


def fill_masked_pauli(hist: Joint3DHistogram, calib: ReadoutCalibration, pauli, mask, ring_counts: int = 200):
    """Pauli values for masked bins from pooled fits over rings of increasing ``|S|``.

    Sparse bins sit in the tails, which carry much of the weight of higher
    moments and differ between the two conditional field states; discarding
    them biases the conditioned moments.  Instead masked bins are sorted by
    radius and grouped until each group holds ``ring_counts`` shots, and each
    group shares the value fitted to its summed ``q`` trace.
    """
    pauli = np.array(pauli, dtype=float)
    sparse = ~np.asarray(mask, dtype=bool)
    if not sparse.any():
        return pauli
    radius = np.abs(hist.marginal().centers)[sparse]
    traces = hist.counts[sparse]
    order = np.argsort(radius, kind="stable")
    counts = traces.sum(axis=1)[order]
    values = np.empty(order.size)
    start, acc = 0, 0.0
    for k in range(order.size):
        acc += counts[k]
        if acc >= ring_counts or k == order.size - 1:
            pooled = traces[order[start : k + 1]].sum(axis=0)
            c = fit_two_components(pooled[None], calib.p0, calib.p1)[0]
            values[start : k + 1] = (c[0] - c[1]) / c.sum() if c.sum() > 0 else 0.0
            start, acc = k + 1, 0.0
    filled = np.empty(order.size)
    filled[order] = np.clip(values, -1.0, 1.0)
    pauli[sparse] = filled
    return pauli


@dataclass
class ConditionedData:
    """Per-basis conditional ``S`` moment tables and the Pauli expectation with its stderr."""

    table0: MomentTable
    table1: MomentTable
    sigma: float
    sigma_err: float


def conditioned_moments(hist: Joint3DHistogram, calib: ReadoutCalibration, max_order: int,
                        min_counts: int = MIN_COUNTS, ring_counts: int = 200) -> ConditionedData:
    """Conditional ``S`` moments for one basis, keeping sparse bins through ring pooling."""
    pauli, mask = conditioned_pauli(hist, calib, min_counts)
    pauli = fill_masked_pauli(hist, calib, pauli, mask, ring_counts)
    d0, d1, sigma = conditioned_histograms(hist, pauli, np.ones_like(mask))
    _, err = pauli_from_trace(hist.counts.sum(axis=(0, 1)), calib)
    return ConditionedData(empirical_s_moments(d0, max_order), empirical_s_moments(d1, max_order), sigma, err)


def joint_moments(conditioned: dict, noise_table: MomentTable) -> dict:
    """``<(a^dag)^n a^m sigma_i>`` for each basis and the unconditioned field moments.

    Each conditional table is noise-deconvolved; then
    ``<X sigma_i> = p0 <X>_0 - p1 <X>_1`` with ``p_{0,1} = (1 +- <sigma_i>)/2``.
    The field table (key ``'field'``) averages ``p0 <X>_0 + p1 <X>_1`` over the bases.
    """
    missing = [b for b in QUBIT_BASES if b not in conditioned]
    if missing:
        raise ValueError(f"missing qubit bases: {missing}")
    out = {}
    fields, field_var = [], []
    for b in QUBIT_BASES:
        data = conditioned[b]
        A0 = deconvolve(data.table0, noise_table)
        A1 = deconvolve(data.table1, noise_table)
        p0, p1 = (1 + data.sigma) / 2, (1 - data.sigma) / 2
        vals = p0 * A0.values - p1 * A1.values
        dsig = 0.5 * (A0.values + A1.values)
        var = (p0 * A0.stderr) ** 2 + (p1 * A1.stderr) ** 2 + (np.abs(dsig) * data.sigma_err) ** 2
        out[b] = MomentTable(vals, np.sqrt(var), "normal_a")
        # sigma_i of the empty moment is the Pauli expectation itself
        out[b].values[0, 0] = data.sigma
        out[b].stderr[0, 0] = data.sigma_err
        fvals = p0 * A0.values + p1 * A1.values
        fvar = (p0 * A0.stderr) ** 2 + (p1 * A1.stderr) ** 2 + (np.abs(0.5 * (A0.values - A1.values)) * data.sigma_err) ** 2
        fields.append(fvals)
        field_var.append(fvar)
    out["field"] = MomentTable(np.mean(fields, axis=0), np.sqrt(np.sum(field_var, axis=0)) / 3, "normal_a")
    return out


def _raw_table(t: MomentTable) -> np.ndarray:
    # MomentTable pins entry (0,0) to 1; the Pauli tables keep <sigma_i> there
    return t.values


def joint_density_from_moments(tables: dict, dim: int) -> np.ndarray:
    """Assemble the qubit-field matrix from the three Pauli tables and the field table.

    ``rho_00 = M(<X> + <X sigma_z>)/2``, ``rho_11 = M(<X> - <X sigma_z>)/2``,
    ``rho_10 = M(<X sigma_x> + i <X sigma_y>)/2``, with ``M`` the
    moment-to-matrix series; ``rho_01 = rho_10^dag``.
    """
    M = tables["field"].max_order
    if M < 2 * (dim - 1):
        warnings.warn(f"moment order {M} < 2(dim-1): joint matrix series truncated", stacklevel=2)
    X = _raw_table(tables["field"])
    Z = _raw_table(tables["z"])
    XY = _raw_table(tables["x"]) + 1j * _raw_table(tables["y"])
    r00 = moment_series_matrix(0.5 * (X + Z), dim)
    r11 = moment_series_matrix(0.5 * (X - Z), dim)
    r10 = moment_series_matrix(0.5 * XY, dim)
    rho = np.block([[r00, r10.conj().T], [r10, r11]])
    rho = 0.5 * (rho + rho.conj().T)
    return rho / np.trace(rho).real


def joint_expectation(rho, n: int, m: int, basis: str | None) -> complex:
    """``Tr[rho sigma_i (x) (a^dag)^n a^m]`` (``basis=None`` for the identity on the qubit)."""
    d = rho.shape[0] // 2
    pauli = {None: np.eye(2), "x": np.array([[0, 1], [1, 0]]), "y": np.array([[0, -1j], [1j, 0]]),
             "z": np.diag([1.0, -1.0])}[basis]
    return complex(np.trace(rho @ np.kron(pauli, _ladder_power(d, n, m))))


def joint_mle_from_moments(tables: dict, dim: int, restarts: int = 3, seed: int = 0):
    """Positive joint matrix fitted to the Pauli and field moment tables (weights ``1/stderr^2``).

    This is the physical counterpart of :func:`joint_density_from_moments`,
    whose linear inversion is started from.
    """
    pauli = {"x": np.array([[0, 1], [1, 0]]), "y": np.array([[0, -1j], [1j, 0]]), "z": np.diag([1.0, -1.0])}
    targets, errors, ops = [], [], []
    for key in ("field",) + QUBIT_BASES:
        t = tables[key]
        q = np.eye(2) if key == "field" else pauli[key]
        M = t.max_order
        for n in range(M + 1):
            for m in range(M + 1 - n):
                if key == "field" and n == m == 0:
                    continue
                targets.append(t.values[n, m])
                errors.append(t.stderr[n, m])
                ops.append(np.kron(q, _ladder_power(dim, n, m)))
    obj = _MomentObjective(targets, errors, ops)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lin = joint_density_from_moments(tables, dim)
    return fit_moment_operators(obj, lin, restarts, seed, engine="joint-moments")


def joint_povm(povm_field: POVMSet, basis: str) -> POVMSet:
    """Elements ``Pi_alpha (x) |s_i><s_i|`` for ``s = 0, 1``, labels ``(alpha, s)``."""
    if basis not in QUBIT_BASES:
        raise ValueError(f"invalid qubit basis {basis!r}")
    vecs = qubit_eigenstates(basis)
    J = len(povm_field)
    d = povm_field.dim
    field_ops = povm_field.operators if povm_field.operators is not None else np.einsum(
        "ja,jb->jab", povm_field.vectors, povm_field.vectors.conj())
    ops = np.empty((2 * J, 2 * d, 2 * d), dtype=complex)
    labels = []
    for s in (0, 1):
        proj = np.outer(vecs[:, s], vecs[:, s].conj())
        ops[s * J : (s + 1) * J] = np.einsum("ab,jmn->jambn", proj, field_ops).reshape(J, 2 * d, 2 * d)
        labels += [(a, s) for a in povm_field.labels]
    weights = np.concatenate([povm_field.weights, povm_field.weights])
    return POVMSet(weights, np.array(labels, dtype=object), operators=ops)


def joint_frequencies(hist: Joint3DHistogram, calib: ReadoutCalibration, min_counts: int = MIN_COUNTS):
    """Outcome counts ``N_S (1 +- <sigma>_S)/2`` in joint POVM label order, plus the bin mask."""
    pauli, mask = conditioned_pauli(hist, calib, min_counts)
    n = hist.marginal().counts
    c0 = flatten_counts(n * (1 + pauli) / 2)
    c1 = flatten_counts(n * (1 - pauli) / 2)
    m = flatten_counts(mask).astype(bool)
    return np.concatenate([c0, c1]), np.concatenate([m, m])


def joint_mle(hists: dict, calib: ReadoutCalibration, rho_h, dim: int, tol: float = 1e-5,
              max_iter: int = 100000, min_counts: int = MIN_COUNTS, quadrature: int = 1):
    """Iterative joint reconstruction from the three per-basis histograms.

    Bases enter with equal weight 1/3; bins with too few counts for a Pauli
    fit are dropped, and the G-corrected update accounts for the missing
    POVM mass.
    """
    missing = [b for b in QUBIT_BASES if b not in hists]
    if missing:
        raise ValueError(f"missing qubit bases: {missing}")
    check_density_matrix(rho_h, hermitian_tol=1e-8, trace_tol=1e-6, eigen_tol=1e-8)
    parts, counts = [], []
    field_cache = {}
    for b in QUBIT_BASES:
        h = hists[b]
        key = (h.x_min, h.x_max, h.y_min, h.y_max, h.counts.shape[:2])
        if key not in field_cache:
            field_cache[key] = povm_noisy(rho_h, h.marginal().grid(), dim, quadrature=quadrature)
        povm = joint_povm(field_cache[key], b)
        c, m = joint_frequencies(h, calib, min_counts)
        sub = povm.subset(m)
        parts.append(POVMSet(sub.weights / 3.0, sub.labels, operators=sub.operators))
        counts.append(c[m])
    allp = POVMSet(np.concatenate([p.weights for p in parts]), np.concatenate([p.labels for p in parts]),
                   operators=np.concatenate([p.operators for p in parts]))
    return iterate_rhor(None, allp, np.concatenate(counts), tol=tol, max_iter=max_iter)


def bell_state(dim: int) -> np.ndarray:
    """``(|0_z, 0> + |1_z, 1>)/sqrt(2)`` as a ket on the qubit-major space."""
    psi = np.zeros(2 * dim, dtype=complex)
    psi[0] = psi[dim + 1] = 1 / np.sqrt(2)
    return psi


def product_state(qubit, field) -> np.ndarray:
    return np.kron(np.asarray(qubit, dtype=complex), np.asarray(field, dtype=complex))
