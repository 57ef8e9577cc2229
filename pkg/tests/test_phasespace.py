import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quadtomo import fock
from quadtomo.phasespace import (
    PhaseGrid,
    detection_efficiency,
    gaussian_convolve,
    husimi_q,
    husimi_q_at,
    noise_from_efficiency,
    qpd,
    qpd_at,
    wigner,
    wigner_at,
)

from conftest import random_density

W1_ORIGIN = -0.63661977236758134308  # -2/pi
Q2_AT = 0.024133088157513476885      # Q of |2> at 0.5+0.5i
WCOH = 0.23893046631780482478        # Wigner of |1> coherent at 0.3


def test_frozen_values():
    assert abs(wigner_at(fock.fock_dm(1, 4), np.array([0j]))[0] - W1_ORIGIN) < 1e-12
    assert abs(husimi_q_at(fock.fock_dm(2, 4), np.array([0.5 + 0.5j]))[0] - Q2_AT) < 1e-14
    assert abs(wigner_at(fock.coherent(1.0, 40), np.array([0.3 + 0j]))[0] - WCOH) < 1e-12


def test_vacuum_q_peak():
    assert husimi_q_at(fock.fock_dm(0, 3), 0j) == pytest.approx(1 / np.pi)


def test_q_is_s_minus_one():
    rho = random_density(np.random.default_rng(3), 4)
    pts = np.array([0.2 + 0.1j, -1.0 + 0.5j, 2.0j])
    # s slightly above -1 approaches the Q function continuously
    assert np.allclose(qpd_at(rho, pts, -1.0 + 1e-9), husimi_q_at(rho, pts), atol=1e-7)


def test_positive_s_rejected():
    with pytest.raises(ValueError, match="s > 0"):
        qpd_at(fock.fock_dm(0, 2), [0j], 0.5)


@pytest.mark.parametrize("s", [0.0, -0.5, -1.0])
def test_qpd_normalized(s):
    rho = fock.ket2dm(fock.superposition([1, 0, 1], 4))
    g = qpd(rho, PhaseGrid.square(7.0, 141), s)
    assert g.integral() == pytest.approx(1.0, abs=1e-6)


def test_wigner_marginal_moment():
    rho = fock.ket2dm(fock.coherent(0.8 - 0.4j, 30))
    g = wigner(rho, PhaseGrid.square(6.0, 121, center=0.8 - 0.4j))
    assert abs(g.moment(0, 1) - (0.8 - 0.4j)) < 1e-6


def test_gaussian_convolution_lowers_order():
    rho = fock.ket2dm(fock.superposition([1, 1], 4))
    grid = PhaseGrid.square(6.0, 121)
    w = wigner(rho, grid)
    q_conv = gaussian_convolve(w, 0.0, -1.0)
    q = husimi_q(rho, grid)
    assert np.max(np.abs(q_conv.values - q.values)) < 1e-5


def test_gaussian_convolution_order_check():
    with pytest.raises(ValueError):
        gaussian_convolve(PhaseGrid.square(1.0, 8), -1.0, 0.0)


@given(st.floats(0.0, 20.0))
def test_efficiency_round_trip(N0):
    assert noise_from_efficiency(detection_efficiency(N0)) == pytest.approx(N0, rel=1e-12, abs=1e-12)


def test_efficiency_rejects_negative_noise():
    with pytest.raises(ValueError):
        detection_efficiency(-0.1)


def test_phasegrid_csv_round_trip(tmp_path):
    g = PhaseGrid(-1.0, 2.0, -3.0, 1.0, 9, 12)
    g = g.with_values(np.arange(9 * 12, dtype=float).reshape(9, 12))
    g.to_csv(tmp_path / "g.csv")
    back = PhaseGrid.from_csv(tmp_path / "g.csv")
    assert np.array_equal(back.values, g.values)
    assert (back.x_min, back.x_max, back.y_min, back.y_max) == (-1.0, 2.0, -3.0, 1.0)
    # x varies fastest in the file body
    rows = np.loadtxt(tmp_path / "g.csv", delimiter=",", comments="#")
    assert rows[1, 0] > rows[0, 0] and rows[1, 1] == rows[0, 1]
