"""Command-line pipeline runner.

    quadtomo [--config c.json] [--seed N] [--threads N] [--out DIR] <command> [options]

Commands: simulate, reconstruct, twochannel, joint, modematch, report.
Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
Data artifacts depend only on the configuration (seed included); timing
goes to the ``metadata`` field of reports.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import fock
from .estimators import IterativeTomography, JointTomography, MomentTomography, PositivePTomography
from .joint import Joint3DHistogram, ReadoutCalibration, bell_state, readout_edges
from .modematch import analytic_overlap, matched_filter, recovered_amplitudes, simulate_decay_trace
from .moments import density_table
from .phasespace import PhaseGrid, husimi_q, wigner
from .simulate import (
    QUBIT_BASES,
    Histogram2D,
    NoiseModel,
    ReadoutModel,
    histogram,
    read_samples_csv,
    sample_joint,
    sample_qubit_readout,
    sample_single_channel,
)
from .twochannel import NoisePair, TwoChannelRecord, sample_two_channel

ENGINES = ("moments", "mle-moments", "mle-iterative", "twochannel", "joint-moments", "joint-mle")


class ConfigError(ValueError):
    pass


# config -------------------------------------------------------------------


def _complex(v, what) -> complex:
    if isinstance(v, (int, float)):
        return complex(v)
    if isinstance(v, (list, tuple)) and len(v) == 2:
        return complex(float(v[0]), float(v[1]))
    raise ConfigError(f"{what}: expected a number or [re, im]")


def _require(cfg, key, where="config"):
    if key not in cfg:
        raise ConfigError(f"{where}: missing '{key}'")
    return cfg[key]


def default_dim(spec: dict) -> int:
    kind = spec.get("kind")
    if kind == "fock":
        return int(spec["n"]) + 6
    if kind == "superposition":
        return len(spec["coefficients"]) + 6
    if kind == "coherent":
        a = abs(_complex(spec["alpha"], "alpha"))
        return int(np.ceil(a * a + 8 * a + 12))
    if kind == "thermal":
        return int(np.ceil(12 * float(spec["N0"]))) + 12
    if kind in ("bell", "product"):
        return 4
    raise ConfigError(f"unknown state kind {kind!r}")


def _config_values(fn):
    """Report malformed values inside a readable config as configuration errors."""
    def wrapped(*a, **k):
        try:
            return fn(*a, **k)
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError, IndexError) as exc:
            raise ConfigError(f"{fn.__name__}: {exc!r}") from exc
    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


@_config_values
def build_state(spec: dict) -> np.ndarray:
    """Density matrix (single mode or qubit-major joint) described by a state spec."""
    if not isinstance(spec, dict):
        raise ConfigError("state must be an object")
    kind = _require(spec, "kind", "state")
    dim = int(spec.get("dim", default_dim(spec)))
    if kind == "fock":
        return fock.fock_dm(int(spec["n"]), dim)
    if kind == "coherent":
        return fock.ket2dm(fock.coherent(_complex(spec["alpha"], "alpha"), dim))
    if kind == "superposition":
        c = [_complex(v, "coefficients") for v in _require(spec, "coefficients", "state")]
        return fock.ket2dm(fock.superposition(c, dim))
    if kind == "thermal":
        return fock.thermal(float(spec["N0"]), dim)
    if kind == "bell":
        return fock.ket2dm(bell_state(dim))
    if kind == "product":
        q = np.array([_complex(v, "qubit") for v in _require(spec, "qubit", "state")])
        field_spec = dict(_require(spec, "field", "state"))
        field_spec.setdefault("dim", dim)
        f = build_state(field_spec)
        return np.kron(fock.ket2dm(q / np.linalg.norm(q)), f)
    raise ConfigError(f"unknown state kind {kind!r}")


@_config_values
def build_noise(spec) -> NoiseModel:
    if spec is None:
        return NoiseModel.vacuum()
    kind = spec.get("kind", "thermal")
    if kind == "vacuum":
        return NoiseModel.vacuum()
    return NoiseModel.thermal(float(spec.get("N0", 0.0)), _complex(spec.get("mean", 0.0), "noise.mean"))


@_config_values
def grid_extents(cfg) -> tuple:
    g = cfg.get("grid", {})
    ext = g.get("extent", 8.0)
    if isinstance(ext, (int, float)):
        return (-float(ext), float(ext), -float(ext), float(ext)), int(g.get("bins", 64))
    if len(ext) != 4:
        raise ConfigError("grid.extent: a number or [x_min, x_max, y_min, y_max]")
    return tuple(float(e) for e in ext), int(g.get("bins", 64))


@_config_values
def _noise_pair(cfg) -> NoisePair:
    nz = cfg.get("noise", {})
    return NoisePair(float(nz.get("N1", 0.0)), float(nz.get("N2", 0.0)))


def load_config(args) -> dict:
    cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if "seed" not in cfg:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    return cfg


# helpers ------------------------------------------------------------------


def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def _load_samples_or_hist(path):
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"QTH1":
        return Histogram2D.load(path)
    return read_samples_csv(path)


def _report(rho, engine, target=None, extra=None, elapsed=None) -> dict:
    out = {"engine": engine, "dim": int(rho.shape[0]), "rho": fock.to_json(rho)}
    if target is not None:
        out["fidelity_vs_target"] = fock.fidelity(rho, target)
    if extra:
        out.update(extra)
    if elapsed is not None:
        out["metadata"] = {"seconds": round(elapsed, 3)}
    return out


def _likelihood_fields(rep) -> dict:
    if rep is None:
        return {}
    return {"log_likelihood": float(rep.final_log_likelihood), "iterations": int(rep.iterations),
            "converged": bool(rep.converged), "delta_last": float(rep.delta_last)}


def _target_for(cfg, dim):
    if "state" not in cfg:
        return None
    rho = build_state(cfg["state"])
    if rho.shape[0] > dim:
        # the reconstruction lives on dim levels, so only this block of the target matters
        return rho[:dim, :dim]
    return fock.pad_to(rho, dim) if rho.shape[0] < dim else rho


# commands -----------------------------------------------------------------


def cmd_simulate(cfg, args) -> int:
    out = _out(args)
    state = _require(cfg, "state")
    n = int(cfg.get("samples", 10**6))
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(3)
    (x0, x1, y0, y1), bins = grid_extents(cfg)
    written = []
    if "N1" in cfg.get("noise", {}) or "N2" in cfg.get("noise", {}):
        pair = _noise_pair(cfg)
        rec = sample_two_channel(build_state(state), pair, n, seeds[0], args.threads)
        rec.to_csv(out / "pairs.csv")
        written.append("pairs.csv")
    elif state.get("kind") in ("bell", "product"):
        written += _simulate_joint(cfg, args, out, seeds)
    else:
        noise = build_noise(cfg.get("noise"))
        rec = sample_single_channel(build_state(state), noise, n, seeds[0], args.threads)
        histogram(rec, (x0, x1, y0, y1), bins, bins).save(out / "signal.qth")
        written.append("signal.qth")
        if cfg.get("write_record", False):
            rec.to_csv(out / "signal.csv")
            written.append("signal.csv")
        n_ref = int(cfg.get("reference_samples", n))
        if n_ref > 0:
            ref = sample_single_channel(fock.fock_dm(0, 2), noise, n_ref, seeds[1], args.threads)
            histogram(ref, (x0, x1, y0, y1), bins, bins).save(out / "reference.qth")
            written.append("reference.qth")
            if cfg.get("write_record", False):
                ref.to_csv(out / "reference.csv")
                written.append("reference.csv")
    print(json.dumps({"written": written}))
    return 0


@_config_values
def _readout(cfg) -> ReadoutModel:
    r = cfg.get("readout", {})
    return ReadoutModel.with_separation(float(r.get("separation", 3.0)), float(r.get("sigma", 1.0)))


def _simulate_joint(cfg, args, out, seeds) -> list:
    rho = build_state(cfg["state"])
    noise = build_noise(cfg.get("noise"))
    readout = _readout(cfg)
    n = int(cfg.get("samples", 10**6))
    extents, bins = grid_extents(cfg)
    edges = readout_edges(readout, int(cfg.get("readout", {}).get("q_bins", 40)))
    written = []
    for b, ss in zip(QUBIT_BASES, seeds[0].spawn(3)):
        rec = sample_joint(rho, b, noise, readout, n, ss, args.threads)
        Joint3DHistogram.from_record(rec, extents, bins, bins, edges).save(out / f"joint_{b}.qtj")
        written.append(f"joint_{b}.qtj")
    shots = int(cfg.get("readout", {}).get("calibration_shots", n))
    c0, c1 = seeds[1].spawn(2)
    calib = ReadoutCalibration.from_samples(sample_qubit_readout(0, readout, shots, c0),
                                            sample_qubit_readout(1, readout, shots, c1), edges)
    calib.save(out / "calibration.json")
    n_ref = int(cfg.get("reference_samples", n))
    ref = sample_single_channel(fock.fock_dm(0, 2), noise, n_ref, seeds[2], args.threads)
    histogram(ref, extents, bins, bins).save(out / "reference.qth")
    return written + ["calibration.json", "reference.qth"]


def cmd_reconstruct(cfg, args) -> int:
    out = _out(args)
    engine = cfg.get("engine", {})
    name = getattr(args, "engine", None) or engine.get("name", "mle-moments")
    if name not in ENGINES:
        raise ConfigError(f"engine must be one of {ENGINES}, got {name!r}")
    if not args.input:
        raise ConfigError("reconstruct needs --input")
    t0 = time.perf_counter()
    dim = int(engine.get("dim", 5))
    extra = {}
    if name in ("moments", "mle-moments"):
        if args.reference is None and "noise_photons" not in engine:
            raise ConfigError(f"engine {name} needs --reference (or engine.noise_photons)")
        est = MomentTomography(dim=dim, max_order=int(engine.get("max_order", 8)),
                               method="mle" if name == "mle-moments" else "linear",
                               noise_photons=engine.get("noise_photons"), random_state=cfg["seed"])
        ref = _load_samples_or_hist(args.reference) if args.reference else None
        est.fit(_load_samples_or_hist(args.input[0]), reference=ref)
        est.moments_.to_csv(out / "moments.csv")
        extra.update(_likelihood_fields(est.report_))
    elif name == "mle-iterative":
        if args.reference is None:
            raise ConfigError("engine mle-iterative needs --reference")
        est = IterativeTomography(dim=dim, quadrature=int(engine.get("quadrature", 2)),
                                  tol=float(engine.get("tol", 1e-5)), noise_tol=float(engine.get("noise_tol", 0.1)))
        data = _load_samples_or_hist(args.input[0])
        ref = _load_samples_or_hist(args.reference)
        if not isinstance(data, Histogram2D) or not isinstance(ref, Histogram2D):
            (x0, x1, y0, y1), bins = grid_extents(cfg)
            data = data if isinstance(data, Histogram2D) else histogram(data, (x0, x1, y0, y1), bins, bins)
            ref = ref if isinstance(ref, Histogram2D) else histogram(ref, (x0, x1, y0, y1), bins, bins)
        est.fit(data, reference=ref)
        extra.update(_likelihood_fields(est.report_))
        extra["noise_photons"] = float(np.real(np.trace(est.noise_state_ @ fock.number(est.noise_state_.shape[0]))))
        fock.save_density(out / "noise_state.json", est.noise_state_)
    elif name == "twochannel":
        est = PositivePTomography(dim=dim, order=engine.get("order"), polish=bool(engine.get("polish", False)),
                                  random_state=cfg["seed"])
        est.fit(TwoChannelRecord.from_csv(args.input[0]))
        est.moments_.to_csv(out / "moments.csv")
        extra["order"] = est.order_
        extra["min_eigenvalue"] = est.min_eigenvalue_
    else:
        est, extra = _reconstruct_joint(cfg, args, name, dim)
    rho = est.density_
    target = _target_for(cfg, rho.shape[0])
    fock.save_density(out / "density.json", rho)
    rep = _report(rho, name, target, extra, time.perf_counter() - t0)
    _write_json(out / "report.json", rep)
    if engine.get("wigner", True) and name not in ("joint-moments", "joint-mle"):
        (x0, x1, y0, y1), _ = grid_extents(cfg)
        wigner(rho, PhaseGrid(x0, x1, y0, y1, 81, 81)).to_csv(out / "wigner.csv")
    if target is not None:
        print(f"fidelity {rep['fidelity_vs_target']:.4f}")
    return 0


def _reconstruct_joint(cfg, args, name, dim):
    files = {}
    for p in args.input:
        h = Joint3DHistogram.load(p)
        files[h.basis] = h
    if args.calibration is None:
        raise ConfigError(f"engine {name} needs --calibration")
    if args.reference is None:
        raise ConfigError(f"engine {name} needs --reference")
    engine = cfg.get("engine", {})
    calib = ReadoutCalibration.load(args.calibration)
    ref = Histogram2D.load(args.reference)
    est = JointTomography(dim=dim, method="moments" if name == "joint-moments" else "mle",
                          max_order=int(engine.get("max_order", 6)), random_state=cfg["seed"],
                          quadrature=int(engine.get("quadrature", 2)), tol=float(engine.get("tol", 1e-5)))
    est.fit(files, calibration=calib, reference=ref)
    return est, _likelihood_fields(est.report_)


def cmd_twochannel(cfg, args) -> int:
    """Simulate pairs and run the positive-P engine in one go."""
    out = _out(args)
    t0 = time.perf_counter()
    rho_a = build_state(_require(cfg, "state"))
    pair = _noise_pair(cfg)
    rec = sample_two_channel(rho_a, pair, int(cfg.get("samples", 10**6)), cfg["seed"], args.threads)
    if cfg.get("write_record", False):
        rec.to_csv(out / "pairs.csv")
    dim = int(cfg.get("engine", {}).get("dim", 12))
    est = PositivePTomography(dim=dim, order=cfg.get("engine", {}).get("order"),
                              polish=bool(cfg.get("engine", {}).get("polish", False)), random_state=cfg["seed"]).fit(rec)
    est.moments_.to_csv(out / "moments.csv")
    fock.save_density(out / "density.json", est.density_)
    target = _target_for(cfg, dim)
    m11 = est.moments_
    extra = {"order": est.order_, "min_eigenvalue": est.min_eigenvalue_,
             "S1dag_S2": [m11.value(1, 1).real, m11.value(1, 1).imag],
             "S1dag_S2_stderr": m11.error(1, 1)}
    rep = _report(est.density_, "twochannel", target, extra, time.perf_counter() - t0)
    _write_json(out / "report.json", rep)
    print(json.dumps({k: v for k, v in rep.items() if k not in ("rho",)}))
    return 0


def cmd_joint(cfg, args) -> int:
    """Simulate the three qubit bases and reconstruct with the configured joint engine."""
    out = _out(args)
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(3)
    _simulate_joint(cfg, args, out, seeds)
    name = cfg.get("engine", {}).get("name", "joint-moments")
    if name not in ("joint-moments", "joint-mle"):
        raise ConfigError("joint engine must be joint-moments or joint-mle")
    args.input = [str(out / f"joint_{b}.qtj") for b in QUBIT_BASES]
    args.calibration = str(out / "calibration.json")
    args.reference = str(out / "reference.qth")
    args.engine = name
    return cmd_reconstruct(cfg, args)


def cmd_modematch(cfg, args) -> int:
    out = _out(args)
    mm = cfg.get("modematch", {})
    kappa = float(mm.get("kappa", 1.0))
    dt = float(mm.get("dt", 0.002 / kappa))
    T = float(mm.get("T", 20.0 / kappa))
    alpha0 = _complex(mm.get("alpha0", 1.0), "alpha0")
    noise = float(mm.get("noise_density", 0.01))
    reps = int(mm.get("repetitions", 10000))
    ratios = [float(r) for r in mm.get("ratios", [0.5, 1.0, 2.0])]
    try:
        f = matched_filter(kappa, 0.0, dt, T)
        simulate_decay_trace(alpha0, kappa, noise, dt, T, cfg["seed"]).to_csv(out / "trace.csv")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    np.savetxt(out / "filter.csv", np.column_stack([dt * np.arange(f.weights.size), f.weights.real]),
               delimiter=",", header="t,f", comments="", fmt="%.17g")
    rows = []
    for k, (r, ss) in enumerate(zip(ratios, np.random.SeedSequence(cfg["seed"]).spawn(len(ratios)))):
        a = recovered_amplitudes(alpha0, kappa, r * kappa, noise, dt, T, reps, ss)
        mean = complex(a.mean())
        se = float(a.std(ddof=1) / np.sqrt(reps))
        rows.append({"ratio": r, "efficiency": abs(mean / alpha0) ** 2, "analytic": analytic_overlap(1.0, r) ** 2,
                     "mean": [mean.real, mean.imag], "stderr": se})
    _write_json(out / "modematch.json", {"kappa": kappa, "dt": dt, "T": T, "results": rows})
    for row in rows:
        print(f"kappa'/kappa={row['ratio']:g} efficiency={row['efficiency']:.5f} analytic={row['analytic']:.5f}")
    return 0


def cmd_report(cfg, args) -> int:
    out = _out(args)
    if not args.input:
        raise ConfigError("report needs --input density files")
    (x0, x1, y0, y1), _ = grid_extents(cfg)
    n = int(cfg.get("report", {}).get("points", 81))
    max_order = int(cfg.get("report", {}).get("max_order", 4))
    summary = []
    for p in args.input:
        try:
            rho = fock.load_density(p)
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"unreadable density file {p}: {exc}") from exc
        stem = Path(p).stem
        g = PhaseGrid(x0, x1, y0, y1, n, n)
        w = wigner(rho, g)
        q = husimi_q(rho, g)
        w.to_csv(out / f"{stem}_wigner.csv")
        q.to_csv(out / f"{stem}_q.csv")
        density_table(rho, max_order).to_csv(out / f"{stem}_moments.csv")
        summary.append({"file": str(p), "wigner_min": float(w.values.min()), "q_max": float(q.values.max())})
    print(json.dumps(summary))
    return 0


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "twochannel": cmd_twochannel,
            "joint": cmd_joint, "modematch": cmd_modematch, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quadtomo", description="Quadrature-detection tomography pipelines")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for sampling")
    p.add_argument("--out", default=".", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name in ("reconstruct", "report"):
            sp.add_argument("--input", nargs="+", help="input files")
        if name == "reconstruct":
            sp.add_argument("--reference", help="vacuum-signal reference histogram or record")
            sp.add_argument("--calibration", help="readout calibration JSON (joint engines)")
            sp.add_argument("--engine", choices=ENGINES, help="overrides the config engine name")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = load_config(args)
        print(json.dumps({"config": cfg, "command": args.command}, sort_keys=True))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
