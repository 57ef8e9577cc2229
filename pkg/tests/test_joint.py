import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import nnls

from quadtomo import fock
from quadtomo.joint import (
    Joint3DHistogram,
    ReadoutCalibration,
    conditioned_histograms,
    conditioned_moments,
    conditioned_pauli,
    bell_state,
    fit_two_components,
    joint_density_from_moments,
    joint_expectation,
    joint_mle,
    joint_moments,
    joint_povm,
    pauli_from_trace,
    product_state,
    readout_edges,
)
from quadtomo.mle import iterate_rhor, flatten_counts, povm_ideal, povm_noisy
from quadtomo.moments import MomentTable, binning_noise_table, combine_noise, empirical_s_moments, thermal_noise_table
from quadtomo.phasespace import PhaseGrid, husimi_q_at
from quadtomo.simulate import NoiseModel, ReadoutModel, histogram, sample_joint, sample_qubit_readout

READOUT = ReadoutModel.with_separation(3.0)
EDGES = readout_edges(READOUT, 30)
EXT = (-5, 5, -5, 5)


def calibration(seed=0, shots=200_000):
    q0 = sample_qubit_readout(0, READOUT, shots, seed=seed)
    q1 = sample_qubit_readout(1, READOUT, shots, seed=seed + 1)
    return ReadoutCalibration.from_samples(q0, q1, EDGES)


def hists_for(rho, N0, n, seed, bins=32):
    out = {}
    for k, b in enumerate("xyz"):
        rec = sample_joint(rho, b, NoiseModel.thermal(N0), READOUT, n, seed=seed + k)
        out[b] = Joint3DHistogram.from_record(rec, EXT, bins, bins, EDGES)
    return out


def detector_table(N0, hist, M):
    g = hist.marginal().grid()
    return combine_noise(thermal_noise_table(N0, M), binning_noise_table(g.dx, g.dy, M))


def exact_tables(rho, M):
    d = rho.shape[0] // 2
    tabs = {}
    for key, basis in (("field", None), ("x", "x"), ("y", "y"), ("z", "z")):
        v = np.full((M + 1, M + 1), np.nan, dtype=complex)
        for n in range(M + 1):
            for m in range(M + 1 - n):
                v[n, m] = joint_expectation(rho, n, m, basis)
        t = MomentTable(v, np.where(np.isnan(v.real), np.nan, 1e-3), "normal_a")
        t.values[0, 0] = v[0, 0]
        tabs[key] = t
    return tabs


# file format and calibration ---------------------------------------------


def test_qtj1_layout_and_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    counts = rng.integers(0, 9, size=(3, 4, 5)).astype(float)
    edges = np.linspace(-1, 2, 6)
    h = Joint3DHistogram("y", -1.0, 1.0, -2.0, 2.0, edges, counts)
    buf = h.to_bytes()
    assert buf[:4] == b"QTJ1" and buf[4] == 1
    assert struct.unpack_from("<III", buf, 5) == (3, 4, 5)
    assert struct.unpack_from("<dddd", buf, 17) == (-1.0, 1.0, -2.0, 2.0)
    assert struct.unpack_from("<Q", buf, 49)[0] == int(counts.sum())
    assert np.array_equal(np.frombuffer(buf, "<f8", 6, 57), edges)
    body = np.frombuffer(buf, "<f8", offset=57 + 48)
    # x runs fastest, then y, then q
    assert body[1] == counts[1, 0, 0] and body[3] == counts[0, 1, 0] and body[12] == counts[0, 0, 1]
    h.save(tmp_path / "h.qtj")
    back = Joint3DHistogram.load(tmp_path / "h.qtj")
    assert back.basis == "y" and np.array_equal(back.counts, counts) and np.array_equal(back.q_edges, edges)
    with pytest.raises(ValueError):
        Joint3DHistogram.from_bytes(b"QTH1" + buf[4:])


def test_marginal_matches_field_histogram():
    rec = sample_joint(fock.ket2dm(bell_state(3)), "x", NoiseModel.thermal(0.5), READOUT, 20_000, seed=2)
    h = Joint3DHistogram.from_record(rec, EXT, 16, 16, EDGES)
    inq = (rec.q >= EDGES[0]) & (rec.q < EDGES[-1])
    ref = histogram(rec.samples[inq], EXT, 16, 16)
    assert np.array_equal(h.marginal().counts, ref.counts)


def test_calibration_invariants(tmp_path):
    cal = calibration()
    assert cal.p0.sum() == pytest.approx(1) and cal.p1.sum() == pytest.approx(1)
    assert 0 < cal.overlap < 0.2
    cal.save(tmp_path / "c.json")
    back = ReadoutCalibration.load(tmp_path / "c.json")
    assert np.allclose(back.p0, cal.p0) and np.allclose(back.edges, cal.edges)
    with pytest.raises(ValueError):
        fit_two_components(np.ones((1, 3)), np.ones(3), np.ones(3))


@given(st.integers(0, 2**31 - 1))
def test_two_component_fit_matches_nnls(seed):
    rng = np.random.default_rng(seed)
    p0 = rng.random(8)
    p1 = rng.random(8)
    traces = rng.random((6, 8)) * 10 - 2
    got = fit_two_components(traces, p0, p1)
    A = np.column_stack([p0, p1])
    for row, c in zip(traces, got):
        ref, _ = nnls(A, row)
        assert np.allclose(c, ref, atol=1e-9)


def test_pauli_with_separated_readout_is_exact():
    edges = np.linspace(0, 4, 5)
    cal = ReadoutCalibration(edges, [0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5])
    s, e = pauli_from_trace([30, 30, 10, 10], cal)
    assert s == pytest.approx(0.5)
    assert e == pytest.approx(2 * np.sqrt(60 * 20) / 80**1.5, rel=1e-9)


# conditioned quantities ---------------------------------------------------


def test_product_state_pauli_constant_and_histograms_equal():
    qubit = np.array([np.cos(0.4), np.sin(0.4)])
    rho = fock.ket2dm(product_state(qubit, fock.coherent(0.8, 6)))
    rec = sample_joint(rho, "z", NoiseModel.thermal(0.5), READOUT, 300_000, seed=3)
    h = Joint3DHistogram.from_record(rec, EXT, 16, 16, EDGES)
    cal = calibration()
    pauli, mask = conditioned_pauli(h, cal, min_counts=2000)
    expected = np.cos(0.8)
    n = h.marginal().counts[mask]
    z = (pauli[mask] - expected) * np.sqrt(n) / 1.2
    assert np.mean(np.abs(z) < 4) > 0.97
    d0, d1, sigma = conditioned_histograms(h, pauli, mask)
    assert sigma == pytest.approx(expected, abs=0.02)
    m0 = empirical_s_moments(d0, 2)
    m1 = empirical_s_moments(d1, 2)
    assert abs(m0.value(0, 1) - m1.value(0, 1)) < 0.03


def test_bell_conditioned_pauli_changes_sign():
    rho = fock.ket2dm(bell_state(3))
    rec = sample_joint(rho, "z", NoiseModel.thermal(0.1), READOUT, 200_000, seed=4)
    h = Joint3DHistogram.from_record(rec, EXT, 20, 20, EDGES)
    pauli, mask = conditioned_pauli(h, calibration())
    r = np.abs(h.marginal().centers)
    assert pauli[(r < 0.6) & mask].mean() > 0.5
    assert pauli[(r > 2.0) & (r < 3.0) & mask].mean() < -0.5
    assert np.all((pauli >= -1) & (pauli <= 1))


def test_conditioned_pauli_errors():
    h = Joint3DHistogram("z", -1, 1, -1, 1, EDGES, np.ones((8, 8, EDGES.size - 1)))
    same = ReadoutCalibration(EDGES, np.ones(30), np.ones(30))
    with pytest.raises(ValueError):
        conditioned_pauli(h, same)
    with pytest.raises(ValueError):
        conditioned_histograms(h, np.zeros((8, 8)), np.zeros((8, 8), bool))


def test_bell_conditional_moments_deconvolve_to_fock_states():
    N0 = 0.5
    rho = fock.ket2dm(bell_state(3))
    h = hists_for(rho, N0, 300_000, seed=5)
    data = conditioned_moments(h["z"], calibration(), 4)
    tabs = joint_moments({b: conditioned_moments(h[b], calibration(), 4) for b in "xyz"},
                         detector_table(N0, h["z"], 4))
    assert data.sigma == pytest.approx(0.0, abs=4 * data.sigma_err)
    z = tabs["z"]
    assert abs(z.value(1, 1) + 0.5) < 4 * z.error(1, 1)
    x = tabs["x"]
    assert abs(x.value(0, 1) - 0.5) < 4 * x.error(0, 1)
    f = tabs["field"]
    assert abs(f.value(1, 1) - 0.5) < 4 * f.error(1, 1)


def test_product_state_joint_moment_factorizes():
    alpha = 0.7 - 0.3j
    rho = fock.ket2dm(product_state([1, 0], fock.coherent(alpha, 8)))
    h = hists_for(rho, 0.5, 200_000, seed=8)
    tabs = joint_moments({b: conditioned_moments(h[b], calibration(), 2) for b in "xyz"},
                         detector_table(0.5, h["z"], 2))
    assert abs(tabs["z"].value(0, 1) - alpha) < 4 * tabs["z"].error(0, 1)


def test_joint_moments_missing_basis():
    with pytest.raises(ValueError, match="missing"):
        joint_moments({}, thermal_noise_table(1, 2))


# density from moments -----------------------------------------------------


def test_exact_bell_tables_give_bell_state():
    d = 3
    psi = bell_state(d)
    rho = joint_density_from_moments(exact_tables(fock.ket2dm(psi), 2 * (d - 1)), d)
    assert np.trace(rho).real == pytest.approx(1.0, abs=1e-6)
    assert fock.fidelity(rho, psi) >= 0.999


@given(st.integers(0, 2**31 - 1))
def test_exact_tables_round_trip_and_partial_trace(seed):
    from conftest import random_density

    d = 3
    rho = random_density(np.random.default_rng(seed), 2 * d)
    tabs = exact_tables(rho, 2 * (d - 1))
    back = joint_density_from_moments(tabs, d)
    assert np.max(np.abs(back - rho)) < 1e-9
    field = back[:d, :d] + back[d:, d:]
    assert np.max(np.abs(field - (rho[:d, :d] + rho[d:, d:]))) < 1e-9


def test_product_fock_block_structure():
    d = 3
    psi = product_state([0, 1], fock.basis(1, d))
    rho = joint_density_from_moments(exact_tables(fock.ket2dm(psi), 4), d)
    assert fock.fidelity(rho, psi) >= 0.999
    assert np.max(np.abs(rho[:d, :])) < 1e-9


# joint POVM and likelihood ------------------------------------------------


def test_joint_povm_properties():
    grid = PhaseGrid.square(4.0, 12)
    field = povm_ideal(grid, 4)
    jz = joint_povm(field, "z")
    rho = fock.ket2dm(product_state([1, 0], fock.basis(0, 4)))
    p = jz.probabilities(rho)[: len(field)]
    assert np.max(np.abs(p - husimi_q_at(fock.fock_dm(0, 4), field.labels) * grid.cell_area)) < 1e-12
    assert np.allclose(jz.G, np.kron(np.eye(2), field.G), atol=1e-12)
    J = len(field)
    sums = {}
    for b in "xyz":
        P = joint_povm(field, b).operators
        sums[b] = P[:J] + P[J:]
    assert np.allclose(sums["x"], sums["z"], atol=1e-12) and np.allclose(sums["y"], sums["z"], atol=1e-12)
    with pytest.raises(ValueError):
        joint_povm(field, "w")


def test_joint_povm_reproduces_conditioned_distributions():
    d = 4
    grid = PhaseGrid.square(4.0, 12)
    field = povm_noisy(fock.thermal(0.5, 20), grid, d)
    rho = fock.ket2dm(bell_state(d))
    pf = lambda state: field.probabilities(state)  # noqa: E731
    cases = {
        ("z", 0): 0.5 * pf(fock.fock_dm(0, d)),
        ("z", 1): 0.5 * pf(fock.fock_dm(1, d)),
        ("x", 0): 0.5 * pf(fock.ket2dm(fock.superposition([1, 1], d))),
        ("x", 1): 0.5 * pf(fock.ket2dm(fock.superposition([1, -1], d))),
        ("y", 0): 0.5 * pf(fock.ket2dm(fock.superposition([1, -1j], d))),
    }
    J = len(field)
    for (b, s), want in cases.items():
        got = joint_povm(field, b).probabilities(rho)[s * J : (s + 1) * J]
        assert np.max(np.abs(got - want)) < 1e-6


def test_joint_mle_product_state_and_partial_trace():
    d, N0 = 4, 0.5
    qubit = np.array([1, 1j]) / np.sqrt(2)
    psi = product_state(qubit, fock.basis(1, d))
    h = hists_for(fock.ket2dm(psi), N0, 300_000, seed=20)
    rho_h = fock.thermal(N0, 20)
    rho, rep = joint_mle(h, calibration(), rho_h, d, quadrature=2)
    assert rep.converged and np.all(np.diff(rep.history) >= -1e-9)
    blocks = rho.reshape(2, d, 2, d)
    field = np.einsum("aiaj->ij", blocks)
    qub = np.einsum("aibi->ab", blocks)
    assert fock.fidelity(field, fock.basis(1, d)) >= 0.97
    assert fock.fidelity(qub, qubit) >= 0.97
    marg = h["z"].marginal()
    alone, _ = iterate_rhor(None, povm_noisy(rho_h, marg.grid(), d, quadrature=2), flatten_counts(marg.counts))
    assert fock.trace_distance(field, alone) < 0.05
