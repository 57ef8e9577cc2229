import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from quadtomo import fock
from quadtomo.estimators import (
    IterativeTomography,
    JointTomography,
    MomentTomography,
    PositivePTomography,
    check_dim,
    check_samples,
    check_target,
)
from quadtomo.joint import Joint3DHistogram, ReadoutCalibration, bell_state, readout_edges
from quadtomo.simulate import NoiseModel, ReadoutModel, histogram, sample_joint, sample_qubit_readout, sample_single_channel
from quadtomo.twochannel import NoisePair, sample_two_channel


@pytest.mark.parametrize("cls", [MomentTomography, IterativeTomography, PositivePTomography, JointTomography])
def test_params_round_trip_through_clone(cls):
    est = cls()
    params = est.get_params()
    twin = clone(est)
    assert twin.get_params() == params
    key = next(iter(params))
    est.set_params(**{key: params[key]})


def test_validation_helpers():
    z = check_samples(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(z, [1 + 2j, 3 + 4j])
    with pytest.raises(ValueError):
        check_samples([1.0, np.nan])
    with pytest.raises(ValueError):
        check_samples([1.0], min_samples=2)
    with pytest.raises(ValueError):
        check_dim(1)
    with pytest.raises(ValueError):
        check_dim(2.5)
    assert check_target(fock.basis(1, 3), 5).shape == (5, 5)
    with pytest.raises(ValueError):
        check_target(fock.basis(1, 6), 5)


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        MomentTomography().fidelity(fock.basis(0, 5))


def test_moment_tomography_fit_and_score():
    rec = sample_single_channel(fock.fock_dm(1, 3), NoiseModel.thermal(1.0), 300_000, seed=1)
    ref = sample_single_channel(fock.fock_dm(0, 2), NoiseModel.thermal(1.0), 300_000, seed=2)
    est = MomentTomography(dim=4, max_order=6).fit(rec, reference=ref)
    assert est.score(y=fock.basis(1, 4)) > 0.9
    assert est.transform().ordering == "normal_a"
    lin = MomentTomography(dim=4, max_order=6, method="linear", noise_photons=1.0).fit(rec)
    assert lin.report_ is None and np.trace(lin.density_).real == pytest.approx(1.0)
    assert est.wigner([0.0])[0] < 0
    with pytest.raises(ValueError):
        MomentTomography(method="bogus").fit(rec, reference=ref)
    with pytest.raises(ValueError):
        MomentTomography().fit(rec)
    with pytest.raises(ValueError):
        est.score()


def test_moment_tomography_histogram_with_analytic_noise():
    rec = sample_single_channel(fock.fock_dm(1, 3), NoiseModel.thermal(1.0), 10**6, seed=3)
    h = histogram(rec, (-7, 7, -7, 7), 28, 28)
    est = MomentTomography(dim=4, max_order=6, noise_photons=1.0).fit(h)
    assert abs(est.moments_.value(1, 1) - 1) < 4 * est.moments_.error(1, 1)


def test_iterative_tomography_with_known_detector():
    rec = sample_single_channel(fock.fock_dm(1, 3), NoiseModel.thermal(0.5), 200_000, seed=4)
    est = IterativeTomography(dim=5, extent=6, bins=40).fit(rec, reference=fock.thermal(0.5, 20))
    assert est.fidelity(fock.basis(1, 5)) > 0.95
    assert est.noise_report_ is None
    with pytest.raises(ValueError):
        IterativeTomography().fit(rec)


def test_positive_p_tomography():
    rec = sample_two_channel(fock.fock_dm(0, 2), NoisePair(0, 0), 100_000, seed=5)
    est = PositivePTomography(dim=5).fit(rec)
    assert est.order_ == 8 and est.fidelity(fock.basis(0, 5)) > 0.98
    est2 = PositivePTomography(dim=5).fit(rec.pairs)
    assert np.allclose(est2.density_, est.density_)
    q = est.q_function([0.0])
    assert abs(q.value[0] - 1 / np.pi) < 4 * q.stderr[0]
    with pytest.raises(ValueError):
        PositivePTomography().fit(np.zeros((10, 3)))


@pytest.mark.filterwarnings("ignore:dimension 8 is marginal")
def test_positive_p_polish_is_positive():
    rec = sample_two_channel(fock.as_dm(fock.coherent(1.0, 12)), NoisePair(0.5, 0.5), 50_000, seed=9)
    raw = PositivePTomography(dim=8).fit(rec)
    pol = PositivePTomography(dim=8, polish=True).fit(rec)
    assert raw.min_eigenvalue_ < -0.05
    assert np.linalg.eigvalsh(pol.density_).min() > -1e-10
    assert abs(np.trace(pol.density_) - 1) < 1e-10
    assert pol.fidelity(fock.coherent(1.0, 8)) > 0.97


def test_joint_tomography_input_checks():
    readout = ReadoutModel.with_separation(3.0)
    edges = readout_edges(readout, 20)
    cal = ReadoutCalibration.from_samples(sample_qubit_readout(0, readout, 5000, 1),
                                          sample_qubit_readout(1, readout, 5000, 2), edges)
    rho = fock.ket2dm(bell_state(3))
    hists = {}
    for k, b in enumerate("xyz"):
        rec = sample_joint(rho, b, NoiseModel.thermal(0.5), readout, 20_000, seed=10 + k)
        hists[b] = Joint3DHistogram.from_record(rec, (-5, 5, -5, 5), 16, 16, edges)
    with pytest.raises(ValueError, match="ReadoutCalibration"):
        JointTomography().fit(hists)
    with pytest.raises(ValueError, match="missing"):
        JointTomography().fit({"z": hists["z"]}, calibration=cal)
    with pytest.raises(ValueError):
        JointTomography(method="nope").fit(hists, calibration=cal, reference=fock.thermal(0.5, 10))
    est = JointTomography(dim=3, max_order=4, noise_photons=0.5).fit(hists, calibration=cal)
    assert est.density_.shape == (6, 6)
    assert est.fidelity(bell_state(3)) > 0.8
