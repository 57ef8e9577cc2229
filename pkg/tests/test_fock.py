import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from quadtomo import fock

from conftest import random_density

# <m|D(0.7+0.2i)|n> from mpmath expm of a 70-level generator at 40 digits
D_FROZEN = {
    (0, 0): 0.76720594997585569821 + 0j,
    (3, 1): 0.34813349021386229744 + 0.21661639391084765174j,
    (1, 3): 0.34813349021386229744 - 0.21661639391084765174j,
    (5, 2): 0.19215160242408914037 + 0.21218285055324129014j,
    (2, 5): -0.19215160242408914037 + 0.21218285055324129014j,
}

amp = st.complex_numbers(max_magnitude=3.0, allow_nan=False, allow_infinity=False)


def test_displacement_matches_frozen_oracle():
    D = fock.displacement(0.7 + 0.2j, 8)
    for (m, n), v in D_FROZEN.items():
        assert abs(D[m, n] - v) < 1e-13


def test_laguerre_columns_match_frozen_oracle():
    B = fock.displaced_fock_columns(0.7 + 0.2j, 8, 8)
    for (m, n), v in D_FROZEN.items():
        assert abs(B[m, n] - v) < 1e-13


@given(amp)
def test_laguerre_columns_match_expm(alpha):
    ref = scipy.linalg.expm(_generator(alpha, 120))[:12, :12]
    assert np.max(np.abs(fock.displaced_fock_columns(alpha, 12, 12) - ref)) < 1e-10


def _generator(alpha, N):
    a = fock.annihilation(N)
    return alpha * a.conj().T - np.conj(alpha) * a


def test_large_displacement_columns_stay_accurate():
    alpha = 9.0 - 7.0j
    B = fock.displaced_fock_columns(alpha, 200, 3)
    # columns of a unitary are normalized once the row cut covers the support
    assert np.allclose(np.sum(np.abs(B) ** 2, axis=0), 1.0, atol=1e-10)
    assert np.allclose(B[:, 0], fock.coherent_amplitudes(alpha, 200), atol=1e-12)


@given(amp, amp)
def test_displacement_composition_phase(a, b):
    dim = 10
    lhs = fock.displaced_fock_columns(a, 80, 80) @ fock.displaced_fock_columns(b, 80, 80)
    rhs = np.exp(0.5 * (a * np.conj(b) - np.conj(a) * b)) * fock.displaced_fock_columns(a + b, 80, 80)
    if abs(a) + abs(b) < 3:
        assert np.max(np.abs(lhs[:dim, :dim] - rhs[:dim, :dim])) < 1e-8


@given(amp)
def test_displacement_unitary_on_low_block(alpha):
    D = fock.displacement(alpha, 10)
    big = fock.displacement(alpha, 60)
    assert np.allclose(big[:, :10].conj().T @ big[:, :10], np.eye(10), atol=1e-10)
    assert np.allclose(D, big[:10, :10], atol=1e-12)


def test_coherent_state_is_displaced_vacuum():
    alpha = 1.7
    psi = fock.coherent(alpha, 40)
    assert np.allclose(psi, fock.displacement(alpha, 40)[:, 0], atol=1e-12)
    a = fock.annihilation(40)
    assert abs(np.vdot(psi, a @ psi) - alpha) < 1e-10


def test_coherent_warns_on_poor_truncation():
    with pytest.warns(UserWarning, match="marginal"):
        psi, lost = fock.coherent(4.0, 6, return_weight=True)
    assert np.linalg.norm(psi) == pytest.approx(1.0)
    assert lost > 0.5


def test_coherent_overlap_and_photon_number():
    a, b = fock.coherent(1.0, 30), fock.coherent(1 + 1j, 30)
    assert abs(np.vdot(a, b)) ** 2 == pytest.approx(np.exp(-1), abs=1e-10)
    psi = fock.coherent(1.7, 30)
    assert abs(fock.normally_ordered_moment(psi, 1, 1) - 2.89) < 1e-6
    assert np.allclose(fock.coherent(0.0, 5), fock.basis(0, 5))


def test_normal_moments_match_brute_force(rng):
    rho = random_density(rng, 6)
    a = fock.annihilation(6)
    for n in range(4):
        for m in range(4):
            if n + m >= 6:
                continue
            op = np.linalg.matrix_power(a.conj().T, n) @ np.linalg.matrix_power(a, m)
            assert abs(fock.normally_ordered_moment(rho, n, m) - np.trace(rho @ op)) < 1e-12


def test_coherent_normal_moments_closed_form():
    alpha = 0.6 - 0.3j
    M = fock.normally_ordered_moments(fock.coherent(alpha, 60), 6)
    for n in range(7):
        for m in range(7 - n):
            assert abs(M[n, m] - np.conj(alpha) ** n * alpha**m) < 1e-12


def test_anti_normal_moment_of_fock_state():
    # <a^m (a^dag)^n> on |k> with n = m: (k+n)!/k!
    assert abs(fock.anti_normally_ordered_moment(fock.fock_dm(2, 3), 2, 2) - 12.0) < 1e-12
    assert abs(fock.anti_normally_ordered_moment(fock.fock_dm(0, 1), 3, 3) - 6.0) < 1e-12


def test_thermal_populations_and_weight():
    rho, lost = fock.thermal(1.0, 30, return_weight=True)
    p = np.diag(rho).real
    assert abs(p[1] / p[0] - 0.5) < 1e-14
    assert 0 < lost < 1e-8


def test_fidelity_and_trace_distance():
    psi = fock.superposition([1, 1], 4)
    rho = fock.ket2dm(psi)
    assert fock.fidelity(rho, psi) == pytest.approx(1.0)
    assert fock.fidelity(fock.fock_dm(0, 4), psi) == pytest.approx(0.5)
    assert fock.trace_distance(fock.fock_dm(0, 4), fock.fock_dm(1, 4)) == pytest.approx(1.0)
    assert fock.trace_distance(rho, psi) == pytest.approx(0.0, abs=1e-14)


def test_check_density_matrix_rejects_bad_input():
    with pytest.raises(ValueError, match="Hermitian"):
        fock.check_density_matrix(np.array([[0.5, 0.3], [0.0, 0.5]]))
    with pytest.raises(ValueError, match="trace"):
        fock.check_density_matrix(np.eye(2))
    with pytest.raises(ValueError, match="negative"):
        fock.check_density_matrix(np.diag([1.2, -0.2]))


@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_projection_gives_valid_state(dim, seed):
    r = np.random.default_rng(seed)
    H = r.standard_normal((dim, dim)) + 1j * r.standard_normal((dim, dim))
    out = fock.project_to_density(H + H.conj().T)
    fock.check_density_matrix(out, 1e-12, 1e-10, 1e-12)


def test_json_round_trip(tmp_path, rng):
    rho = random_density(rng, 5)
    path = tmp_path / "rho.json"
    fock.save_density(path, rho)
    assert np.array_equal(fock.load_density(path), rho)
    obj = json.loads(path.read_text())
    assert obj["dim"] == 5
    with pytest.raises(ValueError):
        fock.from_json({"dim": 4, "re": obj["re"], "im": obj["im"]})
