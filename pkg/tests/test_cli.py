import json
import subprocess
import sys

import numpy as np
import pytest

from quadtomo import fock
from quadtomo.cli import main
from quadtomo.moments import MomentTable
from quadtomo.phasespace import PhaseGrid
from quadtomo.simulate import Histogram2D


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def run(tmp_path, cfg, *argv, out="out"):
    c = write_cfg(tmp_path / f"{out}.json", cfg)
    return main(["--config", c, "--out", str(tmp_path / out), *argv])


FOCK1 = {"seed": 5, "state": {"kind": "fock", "n": 1}, "noise": {"N0": 1.0}, "samples": 50_000,
         "grid": {"extent": 6, "bins": 32}, "engine": {"name": "mle-moments", "dim": 4, "max_order": 6}}


def test_simulate_is_deterministic_across_threads(tmp_path):
    assert run(tmp_path, FOCK1, "simulate", out="a") == 0
    c = write_cfg(tmp_path / "b.json", FOCK1)
    assert main(["--config", c, "--threads", "3", "--out", str(tmp_path / "b"), "simulate"]) == 0
    for name in ("signal.qth", "reference.qth"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    h = Histogram2D.load(tmp_path / "a" / "signal.qth")
    assert h.total + h.overflow == 50_000


def test_simulate_writes_record_when_asked(tmp_path):
    cfg = dict(FOCK1, noise={"kind": "vacuum"}, write_record=True, reference_samples=0)
    assert run(tmp_path, cfg, "simulate") == 0
    lines = (tmp_path / "out" / "signal.csv").read_text().splitlines()
    assert len(lines) > 50_000


def test_reconstruct_moment_engine_and_outputs(tmp_path, capsys):
    assert run(tmp_path, FOCK1, "simulate") == 0
    out = tmp_path / "out"
    code = run(tmp_path, FOCK1, "reconstruct", "--input", str(out / "signal.qth"),
               "--reference", str(out / "reference.qth"))
    assert code == 0
    assert "fidelity" in capsys.readouterr().out
    rep = json.loads((out / "report.json").read_text())
    assert rep["engine"] == "mle-moments" and rep["fidelity_vs_target"] > 0.8
    assert set(rep) >= {"rho", "log_likelihood", "iterations", "engine"}
    rho = fock.load_density(out / "density.json")
    assert rho.shape == (4, 4)
    assert MomentTable.from_csv(out / "moments.csv").ordering == "normal_a"
    assert PhaseGrid.from_csv(out / "wigner.csv").values.shape == (81, 81)


def test_reconstruct_is_deterministic(tmp_path):
    assert run(tmp_path, FOCK1, "simulate") == 0
    out = tmp_path / "out"
    args = ["reconstruct", "--input", str(out / "signal.qth"), "--reference", str(out / "reference.qth")]
    assert run(tmp_path, FOCK1, *args, out="r1") == 0
    assert run(tmp_path, FOCK1, *args, out="r2") == 0
    for name in ("density.json", "moments.csv", "wigner.csv"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_exit_codes(tmp_path):
    assert main(["--out", str(tmp_path), "simulate"]) == 2  # no seed
    assert run(tmp_path, {"seed": 1, "state": {"kind": "nonsense"}}, "simulate") == 2
    assert run(tmp_path, {"seed": -3, "state": {"kind": "fock", "n": 1}}, "simulate") == 2
    assert run(tmp_path, FOCK1, "simulate") == 0
    sig = str(tmp_path / "out" / "signal.qth")
    cfg = dict(FOCK1, engine={"name": "mle-moments", "dim": 4})
    assert run(tmp_path, cfg, "reconstruct", "--input", sig) == 2  # no reference for a deconvolving engine
    assert run(tmp_path, cfg, "reconstruct", "--input", sig, "--reference", str(tmp_path / "missing.qth")) == 3
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["--config", str(tmp_path / "bad.json"), "simulate"]) == 2
    assert main(["--seed", "1", "--out", str(tmp_path), "report", "--input", str(tmp_path / "bad.json")]) == 2


def test_report_outputs(tmp_path):
    fock.save_density(tmp_path / "one.json", fock.fock_dm(1, 6))
    fock.save_density(tmp_path / "vac.json", fock.fock_dm(0, 6))
    code = main(["--seed", "0", "--out", str(tmp_path / "rep"), "report",
                 "--input", str(tmp_path / "one.json"), str(tmp_path / "vac.json")])
    assert code == 0
    w = PhaseGrid.from_csv(tmp_path / "rep" / "one_wigner.csv")
    assert w.values.min() < -0.4
    q = PhaseGrid.from_csv(tmp_path / "rep" / "vac_q.csv")
    assert q.values.max() == pytest.approx(1 / np.pi, rel=1e-6)
    t = MomentTable.from_csv(tmp_path / "rep" / "one_moments.csv")
    assert t.value(1, 1) == pytest.approx(1.0) and t.value(2, 2) == pytest.approx(0.0, abs=1e-12)


def test_twochannel_command(tmp_path):
    cfg = {"seed": 2, "state": {"kind": "fock", "n": 1}, "noise": {"N1": 2, "N2": 5}, "samples": 50_000,
           "engine": {"dim": 4, "order": 4}}
    assert run(tmp_path, cfg, "twochannel") == 0
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert abs(rep["S1dag_S2"][0] - 1) < 5 * rep["S1dag_S2_stderr"]


def test_simulate_pairs_and_reconstruct(tmp_path):
    cfg = {"seed": 3, "state": {"kind": "coherent", "alpha": 0.5}, "noise": {"N1": 0, "N2": 0}, "samples": 20_000,
           "engine": {"name": "twochannel", "dim": 6}}
    assert run(tmp_path, cfg, "simulate") == 0
    assert run(tmp_path, cfg, "reconstruct", "--input", str(tmp_path / "out" / "pairs.csv")) == 0
    assert json.loads((tmp_path / "out" / "report.json").read_text())["order"] == 8


def test_joint_command(tmp_path):
    cfg = {"seed": 4, "state": {"kind": "bell", "dim": 3}, "noise": {"N0": 0.5}, "samples": 30_000,
           "grid": {"extent": 5, "bins": 20}, "readout": {"separation": 3, "q_bins": 20, "calibration_shots": 20000},
           "engine": {"name": "joint-moments", "dim": 3, "max_order": 4}}
    assert run(tmp_path, cfg, "joint") == 0
    out = tmp_path / "out"
    for b in "xyz":
        assert (out / f"joint_{b}.qtj").read_bytes()[:4] == b"QTJ1"
    rep = json.loads((out / "report.json").read_text())
    assert rep["engine"] == "joint-moments" and rep["fidelity_vs_target"] > 0.8


def test_modematch_command(tmp_path):
    cfg = {"seed": 6, "modematch": {"kappa": 1.0, "dt": 0.01, "T": 12, "repetitions": 500, "ratios": [1.0, 2.0]}}
    assert run(tmp_path, cfg, "modematch") == 0
    res = json.loads((tmp_path / "out" / "modematch.json").read_text())["results"]
    assert res[1]["analytic"] == pytest.approx(8 / 9)
    assert (tmp_path / "out" / "trace.csv").read_text().startswith("t,re,im")
    bad = {"seed": 6, "modematch": {"kappa": 1.0, "dt": 0.5}}
    assert run(tmp_path, bad, "modematch", out="bad") == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "quadtomo.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "simulate" in r.stdout
