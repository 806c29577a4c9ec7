"""Experiment harness.

Subcommands (each takes --config <path> and --out <dir>; --seed overrides
the config seed, --workers bounds parallelism):

* ``simulate``   one closed-loop run -> trace.csv + metrics.json
* ``compare``    the same scenario under several strategies -> comparison.csv
* ``region``     stability region, overlays and thresholds -> CSV + JSON
* ``estimate``   (k, T) sweep + bound-parameter fit -> theta.json + samples.csv
* ``gain-for-t`` recommended gain for a sampling time -> gain.json

Configs are a single JSON document; tabular outputs are CSV so plots can be
produced externally.  Exit codes: 0 success, 1 config error, 2 singularity
abort (report file written), 3 infeasible estimation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys as _sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import analysis, control, estimation, kinematics, simulation, trajectory

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SINGULAR = 2
EXIT_INFEASIBLE = 3


# ---------------------------------------------------------------------------
# config parsing

def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise simulation.ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise simulation.ConfigError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}")


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise simulation.ConfigError(f"missing field {where}.{key}")
    return d[key]


def build_system(d: dict) -> kinematics.SquareSystem:
    kind = _need(d, "kind", "system")
    if kind == "planar-formation":
        angles = d.get("angles")
        if angles is None:
            return kinematics.PlanarFormation()
        return kinematics.PlanarFormation(fixed_angles=angles)
    if kind == "scalar":
        return kinematics.ScalarSystem()
    if kind == "linear":
        return kinematics.LinearSystem(dim=int(d.get("dim", 1)),
                                       matrix=d.get("matrix"))
    raise simulation.ConfigError(f"system.kind: unknown system {kind!r}")


def build_traj_spec(d: dict) -> trajectory.TrajectoryFamily:
    kind = _need(d, "kind", "trajectory")
    duration = float(d.get("duration", 60.0))
    if kind == "constant":
        return trajectory.ConstantSpec(value=np.asarray(_need(d, "value", "trajectory")),
                                       duration=duration)
    if kind == "sinusoidal":
        return trajectory.SinusoidSpec(
            offset=np.asarray(_need(d, "offset", "trajectory")),
            amplitude=np.asarray(_need(d, "amplitude", "trajectory")),
            omega=d.get("omega", 1.0), phase=d.get("phase", 0.0),
            duration=duration)
    if kind == "smoothstep":
        return trajectory.SmoothstepSpec(
            start=np.asarray(_need(d, "start", "trajectory")),
            end=np.asarray(_need(d, "end", "trajectory")),
            duration=duration)
    raise simulation.ConfigError(f"trajectory.kind: unknown family {kind!r}")


def build_gain(d: Optional[dict], where: str = "strategy.gain"):
    if d is None:
        return None
    mode = _need(d, "mode", where)
    if mode == "offline":
        k = float(_need(d, "k", where))
        if k <= 0:
            raise simulation.ConfigError(f"{where}.k: offline gain must be positive")
        return control.OfflineGain(k)
    if mode == "online":
        kwargs = {}
        for key in ("k_min", "k_max", "grid_points", "refine_iters",
                    "substeps", "backend", "aux_horizon", "aux_dt"):
            if key in d:
                kwargs[key] = d[key]
        try:
            return control.OnlineGainSearch(**kwargs)
        except ValueError as exc:
            raise simulation.ConfigError(f"{where}: {exc}")
    raise simulation.ConfigError(f"{where}.mode: unknown mode {mode!r}")


def build_strategy(d: dict, where: str = "strategy") -> control.ControlStrategy:
    try:
        return control.ControlStrategy(
            kind=_need(d, "kind", where),
            sampling_period=float(_need(d, "sampling_period", where)),
            gain=build_gain(d.get("gain"), where + ".gain"))
    except ValueError as exc:
        raise simulation.ConfigError(f"{where}: {exc}")


def build_sim_config(cfg: dict, strategy_dict: Optional[dict] = None,
                     seed: Optional[int] = None) -> simulation.SimConfig:
    sysm = build_system(_need(cfg, "system", "config"))
    spec = build_traj_spec(_need(cfg, "trajectory", "config"))
    traj = trajectory.make_trajectory(spec, sysm.dim)
    strat = build_strategy(strategy_dict if strategy_dict is not None
                           else _need(cfg, "strategy", "config"))
    noise = cfg.get("noise", {})
    sigma = float(noise.get("sigma", 0.0)) if isinstance(noise, dict) else float(noise)
    try:
        return simulation.SimConfig(
            system=sysm, trajectory=traj, strategy=strat,
            horizon=float(_need(cfg, "horizon", "config")),
            initial_error=np.asarray(_need(cfg, "initial_error", "config"), dtype=float),
            dt=cfg.get("dt"), noise_sigma=sigma,
            seed=int(seed if seed is not None else cfg.get("seed", 0)))
    except simulation.ConfigError:
        raise
    except ValueError as exc:
        raise simulation.ConfigError(str(exc))


def build_theta(src, cfg: dict, workers: int) -> analysis.ThetaParams:
    """Theta from a literal dict or from the estimation sweep in the config."""
    if isinstance(src, dict):
        try:
            return analysis.ThetaParams(mu=float(_need(src, "mu", "theta")),
                                        alpha=float(_need(src, "alpha", "theta")),
                                        gamma1=float(_need(src, "gamma1", "theta")),
                                        gamma2=float(_need(src, "gamma2", "theta")))
        except ValueError as exc:
            raise simulation.ConfigError(f"theta: {exc}")
    if src == "estimate-from-sweep":
        est, _, _ = _run_estimation(cfg, workers)
        return est.theta
    raise simulation.ConfigError(f"theta: expected literal values or "
                                 f"'estimate-from-sweep', got {src!r}")


def _config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# output writers

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_trace_csv(path: Path, trace: simulation.SimTrace) -> None:
    n = trace.q.shape[1]
    header = (["t", "‖e‖", "k_h", "is_sample"]
              + [f"q_{i+1}" for i in range(n)]
              + [f"qr_{i+1}" for i in range(n)]
              + [f"u_{i+1}" for i in range(n)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for p in range(trace.t.size):
            row = [_fmt(trace.t[p]), _fmt(trace.e_norm[p]), _fmt(trace.gain[p]),
                   _fmt(bool(trace.is_sample[p]))]
            row += [_fmt(v) for v in trace.q[p]]
            row += [_fmt(v) for v in trace.q_ref[p]]
            row += [_fmt(v) for v in trace.u[p]]
            w.writerow(row)


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_metrics_json(path: Path, metrics: simulation.Metrics, cfg_hash: str) -> None:
    payload = {
        "mean_error": metrics.mean_error,
        "max_error": metrics.max_error,
        "final_error": metrics.final_error,
        "contraction_ratios": [float(r) for r in metrics.contraction_ratios],
        "contraction_violations": metrics.contraction_violations,
        "config_hash": cfg_hash,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(cfg: dict, out: Path, seed: Optional[int], workers: int) -> int:
    sim_cfg = build_sim_config(cfg, seed=seed)
    try:
        trace = simulation.run(sim_cfg)
    except (kinematics.SingularConfiguration, control.InfeasibleStepError) as exc:
        _write_singularity(out, str(exc), getattr(exc, "time", None))
        print(f"singularity abort: {exc}", file=_sys.stderr)
        return EXIT_SINGULAR
    write_trace_csv(out / "trace.csv", trace)
    metrics = simulation.compute_metrics(trace)
    write_metrics_json(out / "metrics.json", metrics, _config_hash(cfg))
    if trace.singularity is not None:
        _write_singularity(out, trace.singularity.message, trace.singularity.time,
                           trace.singularity.q)
        print(f"singularity abort at t={trace.singularity.time}", file=_sys.stderr)
        return EXIT_SINGULAR
    print(f"simulate: wrote {out / 'trace.csv'} and {out / 'metrics.json'}")
    return EXIT_OK


def _write_singularity(out: Path, message: str, time, q=None) -> None:
    payload = {"message": message, "time": _json_safe(time),
               "q": None if q is None else [float(v) for v in q]}
    (out / "singularity.json").write_text(json.dumps(payload, indent=2) + "\n")


def cmd_compare(cfg: dict, out: Path, seed: Optional[int], workers: int) -> int:
    comp = _need(cfg, "compare", "config")
    strategies = _need(comp, "strategies", "compare")
    if len(strategies) < 2:
        raise simulation.ConfigError("compare.strategies: need at least two strategies")
    shared = {k: cfg[k] for k in
              ("system", "trajectory", "horizon", "initial_error", "noise", "dt")
              if k in cfg}
    shared["seed"] = int(seed if seed is not None else cfg.get("seed", 0))
    shared_hash = _config_hash(shared)

    def run_one(sdict):
        sim_cfg = build_sim_config(cfg, strategy_dict=sdict, seed=shared["seed"])
        trace = simulation.run(sim_cfg)
        if trace.singularity is not None:
            raise kinematics.SingularConfiguration(
                trace.singularity.message, q=trace.singularity.q,
                time=trace.singularity.time)
        metrics = simulation.compute_metrics(trace)
        k_applied = float(np.mean(trace.gain[trace.sample_indices[:-1]])) \
            if trace.sample_indices.size > 1 else float(trace.gain[0])
        return sdict, metrics, k_applied

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(run_one, strategies))
        else:
            rows = [run_one(s) for s in strategies]
    except (kinematics.SingularConfiguration, control.InfeasibleStepError) as exc:
        _write_singularity(out, str(exc), getattr(exc, "time", None))
        print(f"singularity abort: {exc}", file=_sys.stderr)
        return EXIT_SINGULAR

    with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "T", "k", "mean_error", "max_error",
                    "contraction_violations", "config_hash"])
        for sdict, metrics, k_applied in rows:
            w.writerow([sdict["kind"], _fmt(float(sdict["sampling_period"])),
                        _fmt(k_applied), _fmt(metrics.mean_error),
                        _fmt(metrics.max_error),
                        str(metrics.contraction_violations), shared_hash])
    print(f"compare: wrote {out / 'comparison.csv'}")
    return EXIT_OK


def cmd_region(cfg: dict, out: Path, seed: Optional[int], workers: int) -> int:
    rcfg = _need(cfg, "region", "config")
    theta = build_theta(_need(rcfg, "theta", "region"), cfg, workers)
    k_range = rcfg.get("k_range", [0.15, 5.0])
    tau_range = rcfg.get("tau_range", [0.01, 5.0])
    resolution = rcfg.get("resolution", [200, 200])
    if len(k_range) != 2 or len(tau_range) != 2 or k_range[0] >= k_range[1] \
            or tau_range[0] >= tau_range[1]:
        raise simulation.ConfigError("region: k_range/tau_range must be nonempty increasing pairs")
    try:
        grid = analysis.region_grid(theta, tuple(k_range), tuple(tau_range),
                                    tuple(int(r) for r in resolution))
    except ValueError as exc:
        raise simulation.ConfigError(f"region: {exc}")

    with open(out / "region.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "tau", "z", "stable"])
        for i, k in enumerate(grid.k_values):
            for j, tau in enumerate(grid.tau_values):
                w.writerow([_fmt(k), _fmt(tau), _fmt(grid.z[i, j]),
                            _fmt(bool(grid.stable[i, j]))])
    with open(out / "tau_curves.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "tau_s", "tau_o"])
        for i, k in enumerate(grid.k_values):
            w.writerow([_fmt(k), _fmt(grid.tau_s_curve[i]), _fmt(grid.tau_o_curve[i])])
    with open(out / "k_o_curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "k_o"])
        for j, tau in enumerate(grid.tau_values):
            w.writerow([_fmt(tau), _fmt(grid.k_o_curve[j])])

    th = analysis.thresholds(theta)
    payload = {"t_max": _json_safe(th.t_max), "k_star": _json_safe(th.k_star),
               "tau_cr_formula": _json_safe(th.tau_cr_formula),
               "tau_cr_numeric": _json_safe(th.tau_cr_numeric),
               "k_bar": _json_safe(th.k_bar), "k_bbar": _json_safe(th.k_bbar),
               "theta": {"mu": theta.mu, "alpha": theta.alpha,
                         "gamma1": theta.gamma1, "gamma2": theta.gamma2}}
    (out / "thresholds.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"region: wrote region.csv, tau_curves.csv, k_o_curve.csv, thresholds.json in {out}")
    return EXIT_OK


def _run_estimation(cfg: dict, workers: int, seed: Optional[int] = None):
    ecfg = _need(cfg, "estimate", "config")
    sysm = build_system(_need(cfg, "system", "config"))
    spec = build_traj_spec(_need(cfg, "trajectory", "config"))
    samples, failures = estimation.collect_samples(
        sysm, spec,
        k_values=_need(ecfg, "k_values", "estimate"),
        T_values=_need(ecfg, "T_values", "estimate"),
        initial_errors=[np.asarray(e, dtype=float)
                        for e in _need(ecfg, "initial_errors", "estimate")],
        runs_per_cell=int(ecfg.get("runs_per_cell", 1)),
        seed=int(seed if seed is not None else cfg.get("seed", 0)),
        horizon_intervals=int(ecfg.get("horizon_intervals", 8)),
        dt=ecfg.get("dt"), workers=workers)
    if not samples:
        err = estimation.InfeasibleSamplesError([])
        err.args = ("no samples: every run stayed at equilibrium or failed",)
        raise err
    est = estimation.estimate_theta(samples)
    return est, samples, failures


def cmd_estimate(cfg: dict, out: Path, seed: Optional[int], workers: int) -> int:
    try:
        est, samples, failures = _run_estimation(cfg, workers, seed)
    except estimation.InfeasibleSamplesError as exc:
        (out / "estimate_error.json").write_text(
            json.dumps({"error": str(exc), "indices": getattr(exc, "indices", [])},
                       indent=2) + "\n")
        print(f"estimation infeasible: {exc}", file=_sys.stderr)
        return EXIT_INFEASIBLE

    theta = est.theta
    payload = {"mu": theta.mu, "alpha": theta.alpha, "gamma1": theta.gamma1,
               "gamma2": theta.gamma2, "kkt_residual": est.kkt_residual,
               "max_violation": est.max_violation, "n_samples": est.n_samples,
               "n_active": est.n_active, "n_failures": len(failures)}
    (out / "theta.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    tvec = theta.as_array()
    with open(out / "samples.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "T", "e_h", "e_h1", "y", "b", "slack"])
        for s in samples:
            slack = s.y - float(s.regressors @ tvec) - s.b
            w.writerow([_fmt(s.gain), _fmt(s.period), _fmt(s.start_norm),
                        _fmt(s.end_norm), _fmt(s.y), _fmt(s.b), _fmt(slack)])
    print(f"estimate: {est.n_samples} samples -> theta="
          f"({theta.mu:.6g}, {theta.alpha:.6g}, {theta.gamma1:.6g}, {theta.gamma2:.6g})")
    return EXIT_OK


def cmd_gain_for_t(cfg: dict, out: Path, seed: Optional[int], workers: int) -> int:
    gcfg = _need(cfg, "gain_for_t", "config")
    theta = build_theta(_need(gcfg, "theta", "gain_for_t"), cfg, workers)
    T = float(_need(gcfg, "T", "gain_for_t"))
    if T <= 0:
        raise simulation.ConfigError("gain_for_t.T: must be positive")
    rec = analysis.gain_for_sampling_time(theta, T, k_cap=float(gcfg.get("k_cap", 1e6)))
    payload = {"T": T, "k": rec.k, "rho": rec.rho, "verdict": rec.verdict,
               "window": [rec.window[0], _json_safe(rec.window[1])],
               "monotone": rec.monotone}
    (out / "gain.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if rec.verdict == "ok":
        print(f"gain-for-t: T={T} -> k={rec.k:.6g} (rate {rec.rho:.6g})")
    else:
        print(f"gain-for-t: T={T} -> {rec.verdict}")
    return EXIT_OK


# ---------------------------------------------------------------------------

_COMMANDS = {
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "region": cmd_region,
    "estimate": cmd_estimate,
    "gain-for-t": cmd_gain_for_t,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sampledik",
                                     description="Sampled-communication IK tracking experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--workers", type=int, default=None, help="worker pool size")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        workers = args.workers if args.workers is not None else int(cfg.get("workers", 1))
        return _COMMANDS[args.command](cfg, out, args.seed, workers)
    except simulation.ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return EXIT_CONFIG
    except estimation.InfeasibleSamplesError as exc:
        print(f"estimation infeasible: {exc}", file=_sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    _sys.exit(main())
