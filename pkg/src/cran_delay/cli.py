"""Command-line entry point: simulate, tune, validate, pareto, lemma2, probe.

Exit codes: 0 success, 1 validation failure or irreproducible rerun,
2 configuration error, 3 infeasible targets.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .config import ConfigError, RunConfig
from .plot import plot_metrics_csv, svg_plot
from .presets import PRESETS
from .sim import (
    CSV_HEADER,
    InfeasibleError,
    ToyMDP,
    apply_sweep,
    build_policy,
    capacity_sweep,
    dominated_points,
    fixed_power_capacity,
    horizon_equivalence_check,
    pareto_sweep,
    run_average_reward_experiment,
    run_finite_service_experiment,
    simulate,
)
from .validation import LEVELS, SUITES, run_all

log = logging.getLogger("cran_delay")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 1, 2, 3
SWEEP_LABELS = {"lam1": "arrival rate of user 1 (bits/sec)", "lam": "arrival rate (bits/sec)",
                "C_tot": "total fronthaul capacity (bits/sec/Hz)", "mu": "continue probability"}
DETAIL_HEADER = ["sweep_value", "policy", "trials", "T", "budget_feasible", "usage",
                 "gamma", "delay_per_user", "delay_ci_low", "delay_ci_high", "power_per_user",
                 "mu_power"]


# --- configuration ------------------------------------------------------------------

def _raw_config(args) -> dict:
    if getattr(args, "config", None) and getattr(args, "preset", None):
        raise ConfigError("use either --config or --preset, not both")
    if getattr(args, "config", None):
        raw = cfgmod.read_sections(path=args.config)
    elif getattr(args, "preset", None):
        raw = cfgmod.read_sections(text=PRESETS[args.preset])
    else:
        raise ConfigError("a --config file or a --preset is required")
    raw = cfgmod.apply_env(raw)
    if getattr(args, "seed", None) is not None:
        raw = cfgmod.override(raw, "cluster", "seed", args.seed)
    if getattr(args, "trials", None) is not None:
        raw = cfgmod.override(raw, "experiment", "trials", args.trials)
    if getattr(args, "threads", None) is not None:
        raw = cfgmod.override(raw, "experiment", "threads", args.threads)
    return raw


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, raw: dict, run: RunConfig, outputs: dict,
                    started: float, tuned_file=None) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": raw,
        "seeds": run.experiment.seeds,
        "cluster_seed": run.cluster.seed,
        "tuned_file": None if tuned_file is None else str(Path(tuned_file).resolve()),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": {name: {"path": p.name, "sha256": _sha256(p)}
                    for name, p in outputs.items()},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# --- experiment outputs ----------------------------------------------------------------

def _fmt_vec(v) -> str:
    return " ".join(repr(float(x)) for x in np.atleast_1d(v))


def _write_metrics(rows, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.csv_fields())
    return path


def _write_detail(rows, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DETAIL_HEADER)
        for r in rows:
            w.writerow([repr(float(r.sweep_value)), r.policy, r.trials, r.T,
                        int(bool(r.budget_feasible)), repr(float(r.usage)),
                        repr(float(r.gamma)), _fmt_vec(r.per_user),
                        _fmt_vec(r.per_user_ci[0]), _fmt_vec(r.per_user_ci[1]),
                        _fmt_vec(r.power), _fmt_vec(r.mu_power)])
    return path


def _tuned_entries(rows, run: RunConfig) -> dict:
    if run.kind == "pareto":
        return {(i, "joint"): r.tune for i, r in enumerate(rows)}
    values = list(run.experiment.sweep_values) if run.experiment.sweep_name else [None]
    out = {}
    per_point = len(rows) // max(len(values), 1)
    for k, r in enumerate(rows):
        out[(k // per_point, r.policy)] = r.tune
    return out


def _run_experiment(run: RunConfig, tuned, progress):
    exp = run.experiment
    if run.kind == "finite":
        return run_finite_service_experiment(exp, progress, tuned=tuned)
    if run.kind == "pareto":
        pts = pareto_sweep(exp, run.beta_grid, progress, tuned=tuned)
        return pts
    return run_average_reward_experiment(exp, progress, tuned=tuned)


def _write_trace(run: RunConfig, rows, out_dir: Path) -> Path:
    exp = run.experiment
    first = rows[0]
    value = exp.sweep_values[0] if exp.sweep_name else None
    cfg = apply_sweep(run.cluster, exp.sweep_name, value)
    tune = first.tune
    q_ref = tune.mean_Q / cfg.n if (exp.crosslink and cfg.delta > 0
                                    and np.isfinite(tune.mean_Q)) else None
    pol = build_policy(cfg, first.policy, [tune.mults], Q_ref=q_ref, crosslink=exp.crosslink,
                       Q_max=exp.Q_max, c_inf_mode=exp.c_inf_mode)
    T = run.trace_T if run.trace_T is not None else exp.T
    res = simulate(cfg, pol, exp.seeds[:1], T, record=True)
    return res.traces[0][0].to_csv(out_dir / "trace.csv")


def _progress(row):
    state = "inf" if not np.isfinite(row.mean_metric) else f"{row.mean_metric:.6g}"
    log.info("%-14s %-14s %s", f"{row.sweep_value:.6g}", row.policy, state)


def _produce(command: str, run: RunConfig, raw: dict, out_dir: Path, tuned_file=None,
             plot: bool = True) -> dict:
    """Run the configured experiment and write every artifact. Returns outputs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    tuned = cfgmod.read_tuned(tuned_file) if tuned_file else run.fixed_tuning()
    result = _run_experiment(run, tuned, _progress)
    outputs = {}
    if run.kind == "pareto":
        rows = [p[3] for p in result]
        outputs["pareto"] = _write_pareto(result, out_dir / "pareto.csv")
        if plot:
            series = {"joint": [(p[1][0], p[1][1], p[2][0][1], p[2][1][1]) for p in result]}
            svg = out_dir / "pareto.svg"
            svg.write_text(svg_plot(series, "Delay trade-off over weights",
                                    "user 1 delay (sec)", "user 2 delay (sec)"))
            outputs["pareto_plot"] = svg
    else:
        rows = result
        outputs["metrics"] = _write_metrics(rows, out_dir / "metrics.csv")
        outputs["detail"] = _write_detail(rows, out_dir / "metrics_detail.csv")
        if plot and run.experiment.sweep_name:
            name = run.experiment.sweep_name
            ylabel = "sum of expected total delays (sec)" if run.kind == "finite" \
                else "sum of weighted average delays (sec)"
            outputs["plot"] = plot_metrics_csv(outputs["metrics"], out_dir / "metrics.svg",
                                               f"Delay vs {name}", SWEEP_LABELS.get(name, name),
                                               ylabel)
        if run.trace and run.kind == "average":
            outputs["trace"] = _write_trace(run, rows, out_dir)
    tuned_path = out_dir / "tuned.ini"
    cfgmod.write_tuned(tuned_path, _tuned_entries(rows, run))
    outputs["tuned"] = tuned_path
    return outputs, rows


def _write_pareto(points, path: Path) -> Path:
    bad = set(dominated_points(points))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["beta_1", "beta_2", "delay_1", "delay_2", "delay_1_ci_low",
                    "delay_1_ci_high", "delay_2_ci_low", "delay_2_ci_high", "dominated"])
        for k, (beta, d, ci, _) in enumerate(points):
            w.writerow([repr(float(beta[0])), repr(float(beta[1])), repr(float(d[0])),
                        repr(float(d[1])), repr(float(ci[0][0])), repr(float(ci[1][0])),
                        repr(float(ci[0][1])), repr(float(ci[1][1])), int(k in bad)])
    return path


# --- commands ---------------------------------------------------------------------------

def cmd_simulate(args, command="simulate") -> int:
    started = time.time()
    if args.from_manifest:
        return _rerun(args)
    raw = _raw_config(args)
    run = cfgmod.build(raw)
    if command == "pareto" and run.kind != "pareto":
        raise ConfigError("the pareto command needs [experiment] type = pareto")
    out_dir = Path(args.out_dir)
    outputs, rows = _produce(command, run, raw, out_dir, args.tuned, not args.no_plot)
    _write_manifest(out_dir, command, raw, run, outputs, started, args.tuned)
    feasible = [r.budget_feasible for r in rows]
    print(f"wrote {', '.join(sorted(p.name for p in outputs.values()))} to {out_dir}")
    if not any(feasible):
        print("no sweep point met its targets", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def _rerun(args) -> int:
    mpath = Path(args.from_manifest)
    if not mpath.is_file():
        raise ConfigError(f"manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    raw = manifest["config"]
    run = cfgmod.build(raw)
    out_dir = Path(args.out_dir) if args.out_dir_given else mpath.parent / "rerun"
    if out_dir.resolve() == mpath.parent.resolve():
        raise ConfigError("rerun output directory must differ from the manifest's")
    started = time.time()
    outputs, _ = _produce(manifest["command"], run, raw, out_dir, manifest.get("tuned_file"),
                          plot=not args.no_plot)
    _write_manifest(out_dir, manifest["command"], raw, run, outputs, started,
                    manifest.get("tuned_file"))
    mismatched = []
    for name, entry in manifest["outputs"].items():
        new = outputs.get(name)
        if new is None or _sha256(new) != entry["sha256"]:
            mismatched.append(name)
    if mismatched:
        print(f"outputs differ from the manifest: {', '.join(mismatched)}", file=sys.stderr)
        return EXIT_FAIL
    print(f"reproduced {len(manifest['outputs'])} outputs bit-for-bit in {out_dir}")
    return EXIT_OK


def cmd_tune(args) -> int:
    raw = _raw_config(args)
    run = cfgmod.build(raw)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = _run_experiment(run, None, _progress)
    rows = [p[3] for p in result] if run.kind == "pareto" else result
    entries = _tuned_entries(rows, run)
    path = Path(args.output) if args.output else out_dir / "tuned.ini"
    cfgmod.write_tuned(path, entries)
    print(f"wrote {path}")
    bad = [k for k, t in entries.items() if not t.feasible]
    if bad:
        print(f"targets not met at {len(bad)} of {len(entries)} points", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_validate(args) -> int:
    t0 = time.time()
    rows = run_all(args.level, args.suite or None)
    for r in rows:
        print(r.line())
    failed = sum(not r.passed for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} checks passed in {time.time() - t0:.1f}s")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_lemma2(args) -> int:
    rng = np.random.default_rng(args.seed)
    failed = 0
    print(f"{'toy':>3} {'mu':>5} {'exact':>12} {'monte_carlo':>12} {'std_err':>10} {'z':>6}")
    for t in range(args.toys):
        toy = ToyMDP.random(rng, n_states=args.states)
        for mu in args.mu:
            rep = horizon_equivalence_check(toy, mu, args.trials, seed=args.seed + 1000 * t
                                            + int(round(100 * mu)))
            ok = rep.z <= 3.0
            failed += not ok
            print(f"{t:>3} {mu:>5.2f} {rep.exact:>12.6f} {rep.mc_mean:>12.6f} "
                  f"{rep.mc_se:>10.2e} {rep.z:>6.2f} {'PASS' if ok else 'FAIL'}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_probe(args) -> int:
    run = cfgmod.build(_raw_config(args))
    cap = fixed_power_capacity(run.experiment, args.lo, args.hi, args.rel_tol)
    print(f"fixed-power capacity lambda_1 ~= {cap:.6g} bits/sec")
    print("sweep_values = " + ", ".join(f"{v:g}" for v in capacity_sweep(cap)))
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------------

def _common(p, out=True):
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), help="shipped configuration")
    p.add_argument("--seed", type=int, help="override [cluster] seed")
    p.add_argument("--trials", type=int, help="override [experiment] trials")
    p.add_argument("--threads", type=int, help="worker threads for trials")
    if out:
        p.add_argument("--out-dir", default="out", help="artifact directory (default: out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cran-delay", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (("simulate", "run the configured experiment"),
                           ("pareto", "run a weight sweep of the joint policy")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--tuned", help="multiplier file from 'tune'; skips tuning")
        p.add_argument("--from-manifest", help="rerun a previous run and compare outputs")
        p.add_argument("--no-plot", action="store_true", help="skip the SVG plot")

    p = sub.add_parser("tune", help="tune multipliers and write them to a file")
    _common(p)
    p.add_argument("--output", help="multiplier file (default: <out-dir>/tuned.ini)")

    p = sub.add_parser("validate", help="run the oracle suites")
    p.add_argument("--level", choices=LEVELS, default="fast")
    p.add_argument("--suite", action="append", choices=sorted(SUITES))

    p = sub.add_parser("lemma2", help="geometric-horizon vs discounted value on toy MDPs")
    p.add_argument("--mu", type=float, nargs="+", default=[0.3, 0.5, 0.9])
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--states", type=int, default=3)
    p.add_argument("--toys", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("probe", help="locate the fixed-power capacity in lambda_1")
    _common(p, out=False)
    p.add_argument("--lo", type=float, default=1e5)
    p.add_argument("--hi", type=float, default=1e7)
    p.add_argument("--rel-tol", type=float, default=0.03)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "out_dir"):
        args.out_dir_given = "--out-dir" in argv or any(a.startswith("--out-dir=")
                                                        for a in argv)
    handlers = {"simulate": cmd_simulate, "pareto": lambda a: cmd_simulate(a, "pareto"),
                "tune": cmd_tune, "validate": cmd_validate, "lemma2": cmd_lemma2,
                "probe": cmd_probe}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
