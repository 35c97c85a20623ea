"""Command-line front door for reproducible runs.

Subcommands wire the library end to end: smooth raw trajectories, calibrate
per-vehicle parameters, simulate scenarios (single runs or density sweeps),
cluster calibrated drivers, compute collective metrics, and score synthetic
parameter recovery.  Every run writes a config echo next to its outputs;
all randomness flows from a single seed (flag, config file, or the
RINGCAL_SEED environment variable) and no wall-clock entropy is used.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    cluster_drivers,
    fundamental_diagram,
    recovery_report,
    speed_profile,
    wave_metrics,
)
from .calibrate import (
    CalibrationConfig,
    RegularizationConfig,
    calibrate_all,
    dataset_from_raw,
)
from .ingest import (
    build_perceived_states,
    load_raw_set,
    write_metadata,
    write_smoothed_csv,
    write_trajectory_csv,
)
from .presets import (
    calibrated_driver,
    recovery_scenario,
    reference_driver,
    sugiyama_scenario,
)
from .sim import (
    scenario_high_risk_premium,
    scenario_highway,
    scenario_low_ideal_speed,
    scenario_tadaki,
    shuffle_order,
    simulate,
)
from .ssm import FREE_PARAMS, FilterNumericsError


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def _fmt(x) -> str:
    return "%.10g" % float(x)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _echo_config(out_dir: Path, command: str, options: dict):
    payload = {"command": command, "version": __version__, "options": options}
    with open(out_dir / "run_config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _out_dir(options) -> Path:
    out = Path(options["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_seed(args, config: dict, command: str) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    section = config.get(command, {})
    if "seed" in section:
        return int(section["seed"])
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get("RINGCAL_SEED")
    if env is not None:
        return int(env)
    return 0


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_smooth(options) -> int:
    out = _out_dir(options)
    raw = load_raw_set(options["traj"], options["meta"])
    write_smoothed_csv(out / "smoothed.csv", raw)
    series = build_perceived_states(raw)
    rows = []
    for i, s in enumerate(series):
        for k in range(len(s)):
            rows.append(
                [
                    s.t0 + k,
                    i,
                    _fmt(s.pred_pos[k]),
                    _fmt(s.pred_vel[k]),
                    _fmt(s.self_pos[k]),
                    _fmt(s.self_vel[k]),
                    _fmt(s.foll_pos[k]),
                    _fmt(s.foll_vel[k]),
                ]
            )
    _write_csv(
        out / "perceived.csv",
        ["t_index", "vehicle_id", "pred_pos", "pred_vel", "self_pos", "self_vel", "foll_pos", "foll_vel"],
        rows,
    )
    _echo_config(out, "smooth", options)
    return 0


def cmd_calibrate(options) -> int:
    out = _out_dir(options)
    raw = load_raw_set(options["traj"], options["meta"])
    dataset = dataset_from_raw(raw)
    if options.get("vehicles"):
        wanted = {int(v) for v in str(options["vehicles"]).split(",")}
        unknown = wanted - {d.vehicle_id for d in dataset}
        if unknown:
            raise CliError(f"unknown vehicle ids {sorted(unknown)}")
        dataset = [d for d in dataset if d.vehicle_id in wanted]
    config = CalibrationConfig(
        base=reference_driver(),
        reg=RegularizationConfig(
            gamma_v=options["gamma_v"], gamma_kappa=options["gamma_kappa"]
        ),
        n_hops=options["hops"],
        local_max_evals=options["max_evals"],
    )
    result = calibrate_all(dataset, config, seed=options["seed"], jobs=options["jobs"])
    rows = []
    for r in result.results:
        rows.append(
            [r.vehicle_id]
            + [_fmt(r.estimates[name]) for name in FREE_PARAMS]
            + [_fmt(r.objective), int(r.converged)]
        )
        if r.filtered is not None:
            sds = r.filtered.sds()
            frows = [
                [r.filtered.t0 + k]
                + [_fmt(v) for v in r.filtered.means[k]]
                + [_fmt(v) for v in sds[k]]
                for k in range(len(r.filtered))
            ]
            _write_csv(
                out / f"filtered_{r.vehicle_id}.csv",
                ["t_index", "x_mean", "v_mean", "a_mean", "x_sd", "v_sd", "a_sd"],
                frows,
            )
    _write_csv(
        out / "results.csv",
        ["vehicle_id"] + list(FREE_PARAMS) + ["objective", "converged"],
        rows,
    )
    report = {
        "aggregate": result.estimates_table() if result.results else {},
        "failures": [{"vehicle_id": vid, "error": msg} for vid, msg in result.failures],
        "per_vehicle": {
            str(r.vehicle_id): {
                "estimates": r.estimates,
                "objective": r.objective,
                "log_likelihood": r.log_lik,
                "penalty_ratio": r.penalty_ratio,
                "n_evals": r.n_evals,
                "converged": r.converged,
            }
            for r in result.results
        },
    }
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echo_config(out, "calibrate", options)
    return 0


def _build_scenario(options):
    name = options["scenario"]
    seed = options["seed"]
    steps = options["steps"]
    common = {}
    if options.get("deflation") is not None:
        common["noise_deflation"] = options["deflation"]
    if options.get("no_noise"):
        common["accel_noise_on"] = False
    if options.get("homogeneous"):
        common["heterogeneity_on"] = False
    if options.get("argmax"):
        common["use_mean_action"] = False
    if options.get("initial") is not None:
        common["initial_condition"] = options["initial"]

    if name == "sugiyama":
        return sugiyama_scenario(seed=seed, T_steps=steps, **common)
    if name == "recovery":
        return recovery_scenario(seed=seed, T_steps=steps, **common)
    if name == "tadaki":
        if options.get("n") is None:
            raise CliError("tadaki scenario needs --n")
        return scenario_tadaki(
            int(options["n"]), calibrated_driver(), seed=seed, T_steps=steps,
            noise_deflation=common.pop("noise_deflation", 0.4), **common,
        )
    if name == "highway":
        return scenario_highway(sugiyama_scenario(seed=seed, T_steps=steps, **common))
    if name == "low-ideal-speed":
        base = sugiyama_scenario(seed=seed, T_steps=steps, **common)
        return scenario_low_ideal_speed(base, options["v0_star"])
    if name == "high-risk-premium":
        base = sugiyama_scenario(seed=seed, T_steps=steps, **common)
        return scenario_high_risk_premium(base, options["kappa0_v"])
    raise CliError(f"unknown scenario {name!r}")


def _write_sim_outputs(out_dir: Path, sim_out) -> None:
    cfg = sim_out.config
    positions = sim_out.z if sim_out.z is not None else sim_out.x
    write_trajectory_csv(out_dir / "trajectory.csv", positions)
    write_metadata(
        out_dir / "meta.txt", cfg.ring.dt, cfg.ring.circumference, cfg.ring.lengths
    )
    rows = []
    n, t_total = sim_out.x.shape
    for t in range(t_total):
        for i in range(n):
            rows.append(
                [t, i, _fmt(sim_out.x[i, t]), _fmt(sim_out.v[i, t]), _fmt(sim_out.a[i, t])]
            )
    _write_csv(out_dir / "states.csv", ["t_index", "vehicle_id", "x", "v", "a"], rows)
    _write_csv(
        out_dir / "collisions.csv",
        ["t_index", "vehicle_id"],
        [[t, i] for t, i in sim_out.collisions],
    )
    _write_metrics_outputs(
        out_dir, sim_out.x, sim_out.v, cfg.ring.dt, cfg.ring.circumference,
        burn_in_s=cfg.burn_in_s,
    )


def _write_metrics_outputs(out_dir, x, v, dt, circumference, burn_in_s, slow_threshold=2.0):
    prof = speed_profile(v)
    rows = [
        [t, _fmt(prof.v_avg[t]), _fmt(prof.v_min[t]), _fmt(prof.v_max[t]), _fmt(prof.v_range[t])]
        for t in range(len(prof.v_avg))
    ]
    _write_csv(out_dir / "speed_profile.csv", ["t_index", "v_avg", "v_min", "v_max", "v_range"], rows)
    if x.shape[1] - int(round(burn_in_s / dt)) < 4:
        burn_in_s = 0.0  # run shorter than the burn-in: report raw metrics
    wm = wave_metrics(x, v, dt, circumference, slow_threshold=slow_threshold, burn_in_s=burn_in_s)
    _write_csv(
        out_dir / "wave_metrics.csv",
        [
            "backward_wave_speed",
            "mean_queue_length",
            "queue_event_frequency",
            "quasi_period_amplitude",
            "n_tracks",
        ],
        [
            [
                "" if wm.backward_wave_speed is None else _fmt(wm.backward_wave_speed),
                "" if wm.mean_queue_length is None else _fmt(wm.mean_queue_length),
                _fmt(wm.queue_event_frequency),
                _fmt(wm.quasi_period_amplitude),
                wm.n_tracks,
            ]
        ],
    )


def cmd_simulate(options) -> int:
    out = _out_dir(options)
    cfg = _build_scenario(options)
    if options.get("shuffle_seed") is not None:
        cfg = shuffle_order(cfg, seed=options["shuffle_seed"])
    sim_out = simulate(cfg)
    _write_sim_outputs(out, sim_out)
    if options["scenario"] == "recovery":
        truth = {name: reference_driver().value(name) for name in FREE_PARAMS}
        with open(out / "truth.json", "w") as fh:
            json.dump(truth, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _echo_config(out, "simulate", options)
    return 0


def _parse_range(spec: str) -> list[int]:
    if ".." not in spec:
        return [int(spec)]
    lo, _, hi = spec.partition("..")
    return list(range(int(lo), int(hi) + 1))


def cmd_scenario(options) -> int:
    if options["name"] != "tadaki":
        raise CliError(f"unknown sweep scenario {options['name']!r}")
    out = _out_dir(options)
    counts = _parse_range(options["n"])[:: max(options["step"], 1)]
    sweep = []
    for n in counts:
        cfg = scenario_tadaki(
            n,
            calibrated_driver(),
            seed=options["seed"] + n,
            T_steps=options["steps"],
            noise_deflation=options["deflation"] if options.get("deflation") is not None else 0.4,
        )
        sim_out = simulate(cfg)
        run_dir = out / f"n{n:03d}"
        run_dir.mkdir(exist_ok=True)
        _write_sim_outputs(run_dir, sim_out)
        sweep.append((n, sim_out))
    points = fundamental_diagram(sweep)
    _write_csv(
        out / "fundamental_diagram.csv",
        ["density", "mean_speed", "flow", "n_vehicles", "v_range_mean"],
        [
            [_fmt(p.density), _fmt(p.mean_speed), _fmt(p.flow), p.n_vehicles, _fmt(p.v_range_mean)]
            for p in points
        ],
    )
    _echo_config(out, "scenario", options)
    return 0


def _read_results_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(rec)
    if not rows:
        raise CliError(f"no rows in {path}")
    return rows


def cmd_cluster(options) -> int:
    out = _out_dir(options)
    rows = _read_results_csv(options["results"])
    feats = [[float(r["sigma_a"]), float(r["v_star"]), float(r["kappa_v"])] for r in rows]
    ids = [int(r["vehicle_id"]) for r in rows]
    result = cluster_drivers(np.asarray(feats), n_clusters=options["clusters"])
    _write_csv(
        out / "labels.csv",
        ["vehicle_id", "cluster"],
        [[vid, int(lab)] for vid, lab in zip(ids, result.labels)],
    )
    summary = {
        "n_clusters": result.n_clusters(),
        "cluster_means": {
            str(k): {"sigma_a": m[0], "v_star": m[1], "kappa_v": m[2]}
            for k, m in result.cluster_means.items()
        },
        "gap_cut_labels": result.labels_gap_cut.tolist(),
    }
    with open(out / "cluster_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echo_config(out, "cluster", options)
    return 0


def cmd_metrics(options) -> int:
    out = _out_dir(options)
    states = _read_results_csv(options["states"])
    n = max(int(r["vehicle_id"]) for r in states) + 1
    t_total = max(int(r["t_index"]) for r in states) + 1
    x = np.full((n, t_total), np.nan)
    v = np.full((n, t_total), np.nan)
    for r in states:
        i, t = int(r["vehicle_id"]), int(r["t_index"])
        x[i, t] = float(r["x"])
        v[i, t] = float(r["v"])
    if np.any(np.isnan(x)):
        raise CliError("states file has missing cells")
    meta = {}
    with open(options["meta"]) as fh:
        for line in fh:
            key, _, val = line.strip().partition("=")
            meta[key] = val
    dt = float(meta["dt"])
    c = float(meta["circumference"])
    _write_metrics_outputs(
        out, x, v, dt, c,
        burn_in_s=options["burn_in"], slow_threshold=options["slow_threshold"],
    )
    _echo_config(out, "metrics", options)
    return 0


def cmd_recover(options) -> int:
    out = _out_dir(options)
    rows = _read_results_csv(options["results"])
    with open(options["truth"]) as fh:
        truth = json.load(fh)

    class _Est:
        def __init__(self, estimates):
            self.estimates = estimates

    results = [
        _Est({name: float(r[name]) for name in FREE_PARAMS if name in r}) for r in rows
    ]
    report = recovery_report(truth, results)
    _write_csv(
        out / "recovery.csv",
        ["parameter", "truth", "mean_error", "sd_error", "mean_abs_error", "biased"],
        [
            [
                name,
                _fmt(rep["truth"]),
                _fmt(rep["mean_error"]),
                _fmt(rep["sd_error"]),
                _fmt(rep["mean_abs_error"]),
                int(rep["biased"]),
            ]
            for name, rep in report.items()
        ],
    )
    _echo_config(out, "recover", options)
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

_COMMANDS = {
    "smooth": cmd_smooth,
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "scenario": cmd_scenario,
    "cluster": cmd_cluster,
    "metrics": cmd_metrics,
    "recover": cmd_recover,
}

#: defaults applied after merging config-file values and explicit flags
_DEFAULTS = {
    "calibrate": {"hops": 20, "max_evals": 400, "gamma_v": 50.0, "gamma_kappa": 500.0, "jobs": 1},
    "simulate": {"scenario": "sugiyama", "steps": 750, "v0_star": 8.0, "kappa0_v": 2.0},
    "scenario": {"step": 2, "steps": 1500},
    "cluster": {"clusters": 4},
    "metrics": {"burn_in": 60.0, "slow_threshold": 2.0},
}

#: option keys accepted per command (strict config validation)
_OPTION_KEYS = {
    "smooth": {"traj", "meta", "out_dir"},
    "calibrate": {
        "traj", "meta", "out_dir", "vehicles", "hops", "max_evals",
        "gamma_v", "gamma_kappa", "jobs", "seed",
    },
    "simulate": {
        "scenario", "out_dir", "seed", "steps", "deflation", "no_noise",
        "homogeneous", "argmax", "initial", "n", "v0_star", "kappa0_v",
        "shuffle_seed",
    },
    "scenario": {"name", "n", "step", "out_dir", "seed", "steps", "deflation"},
    "cluster": {"results", "out_dir", "clusters"},
    "metrics": {"states", "meta", "out_dir", "burn_in", "slow_threshold"},
    "recover": {"results", "truth", "out_dir"},
}


def _load_config_file(path) -> dict:
    with open(path) as fh:
        try:
            config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"config file is not valid JSON: {exc}")
    if not isinstance(config, dict):
        raise CliError("config file must hold a JSON object")
    known_top = set(_COMMANDS) | {"seed"}
    unknown = set(config) - known_top
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    for cmd, block in config.items():
        if cmd == "seed":
            continue
        if not isinstance(block, dict):
            raise CliError(f"config section {cmd!r} must be an object")
        bad = set(block) - _OPTION_KEYS[cmd]
        if bad:
            raise CliError(f"unknown options in config section {cmd!r}: {sorted(bad)}")
    return config


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ringcal",
        description="Ring-road driving simulation and state-space calibration.",
    )
    parser.add_argument("--version", action="version", version=f"ringcal {__version__}")
    parser.add_argument("--config", help="JSON config file with per-command defaults")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("smooth", help="smooth a raw trajectory file")
    p.add_argument("--traj", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)

    p = sub.add_parser("calibrate", help="per-vehicle maximum-likelihood calibration")
    p.add_argument("--traj", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--vehicles", default=None, help="comma list of vehicle ids")
    p.add_argument("--hops", type=int, default=None)
    p.add_argument("--max-evals", dest="max_evals", type=int, default=None)
    p.add_argument("--gamma-v", dest="gamma_v", type=float, default=None)
    p.add_argument("--gamma-kappa", dest="gamma_kappa", type=float, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("simulate", help="run one scenario")
    p.add_argument("--scenario", default=None)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--deflation", type=float, default=None)
    p.add_argument("--no-noise", dest="no_noise", action="store_true")
    p.add_argument("--homogeneous", action="store_true")
    p.add_argument("--argmax", action="store_true")
    p.add_argument("--initial", choices=["equilibrium", "perturbed"], default=None)
    p.add_argument("--n", type=int, default=None, help="vehicle count (tadaki)")
    p.add_argument("--v0-star", dest="v0_star", type=float, default=None)
    p.add_argument("--kappa0-v", dest="kappa0_v", type=float, default=None)
    p.add_argument("--shuffle-seed", dest="shuffle_seed", type=int, default=None)

    p = sub.add_parser("scenario", help="run a named scenario sweep")
    p.add_argument("name")
    p.add_argument("--n", required=True, help="count range, e.g. 10..38")
    p.add_argument("--step", type=int, default=None)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--deflation", type=float, default=None)

    p = sub.add_parser("cluster", help="cluster calibrated drivers")
    p.add_argument("--results", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--clusters", type=int, default=None)

    p = sub.add_parser("metrics", help="collective metrics from a states file")
    p.add_argument("--states", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--burn-in", dest="burn_in", type=float, default=None)
    p.add_argument("--slow-threshold", dest="slow_threshold", type=float, default=None)

    p = sub.add_parser("recover", help="score estimates against a truth file")
    p.add_argument("--results", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        config = _load_config_file(args.config) if args.config else {}
        options = dict(config.get(args.command, {}))
        for key in _OPTION_KEYS[args.command]:
            val = getattr(args, key, None)
            if val is not None and val is not False:
                options[key] = val  # explicit flag wins over config
            else:
                options.setdefault(key, val)
        for key, default in _DEFAULTS.get(args.command, {}).items():
            if options.get(key) is None:
                options[key] = default
        if "seed" in _OPTION_KEYS[args.command]:
            options["seed"] = _resolve_seed(args, config, args.command)
        return _COMMANDS[args.command](options)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FilterNumericsError, FloatingPointError, RuntimeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
