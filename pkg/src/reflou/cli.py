"""Command line entry point: ``reflou simulate | verify | report``.

Exit codes: 0 success, 1 a check failed, 2 configuration or I/O error.
Data goes to files or standard output; progress goes to standard error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import os
import sys

import numpy as np

from .config import DEFAULT_TOML, DEFAULTS, ConfigError, build, load
from .dynamics import simulate
from .girsanov import weights_from_batch
from .suites import SCALES, SUITES, run_suite
from .verify import CheckReport, write_reports

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
CHECK_SETS = tuple(SUITES) + ("all",)
REVUZ_NOTE = ("revuz_rate: lhs = reference mass * E[L_T]/T under a stationary start; "
              "rhs = Gaussian surface mass of the boundary (times the symmetric weight for membranes)")


def _progress(msg):
    print(f"[reflou] {msg}", file=sys.stderr, flush=True)


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _comments(args, extra=()):
    out = list(extra)
    if getattr(args, "timestamp", False):
        out.insert(0, "generated " + _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))
    return out


def _parser():
    p = argparse.ArgumentParser(prog="reflou", description=__doc__.splitlines()[0])
    p.add_argument("--print-config", action="store_true", help="print the default config and exit")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=None,
                        help="worker processes (default $REFLOU_WORKERS or 1)")
        sp.add_argument("--timestamp", action="store_true",
                        help="add a generation timestamp comment to CSV output")

    s = sub.add_parser("simulate", help="simulate paths from a config file")
    s.add_argument("--config", required=False)
    s.add_argument("--out", help="output directory (default: output.dir)")
    s.add_argument("--paths", type=int, default=None)
    common(s)

    v = sub.add_parser("verify", help="run a verification suite")
    v.add_argument("checks", choices=CHECK_SETS)
    v.add_argument("--scale", choices=SCALES, default="quick")
    v.add_argument("--out", help="CSV file (default: standard output)")
    common(v)

    r = sub.add_parser("report", help="write figures and CSV tables")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--config", help="simulate this experiment and plot it")
    r.add_argument("--checks", help="existing check CSV to chart")
    r.add_argument("--suite", choices=CHECK_SETS, help="run a suite and chart it")
    r.add_argument("--scale", choices=SCALES, default="quick")
    common(r)
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.print_config:
        sys.stdout.write(DEFAULT_TOML)
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "verify":
            return cmd_verify(args)
        return cmd_report(args)
    except ConfigError as exc:
        print(f"reflou: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"reflou: I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


run = main


def _experiment(args):
    cfg = load(args.config) if args.config else dict(DEFAULTS)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "paths", None) is not None:
        cfg["n_paths"] = args.paths
    if args.workers is not None:
        cfg["workers"] = args.workers
    return build(cfg)


def _run_experiment(exp):
    _progress(f"simulating {exp.n_paths} path(s), mode={exp.model.mode}, "
              f"{exp.step.n_steps} steps")
    return simulate(exp.model, exp.step, exp.seed, exp.n_paths, start=exp.start,
                    workers=exp.workers)


def write_trajectories(batch, path, comments=()):
    ids = list(batch.local_time)
    d = batch.states.shape[-1]
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "time"] + [f"x{j + 1}" for j in range(d)] + [f"dL_{k}" for k in ids])
        for i in range(len(batch)):
            for t in range(len(batch.times)):
                dl = [_fmt(batch.local_time[k][i, t - 1]) if t else "0" for k in ids]
                w.writerow([str(int(batch.indices[i])), _fmt(batch.times[t])]
                           + [_fmt(v) for v in batch.states[i, t]] + dl)


def write_summary(batch, path, comments=()):
    ids = list(batch.local_total)
    cross = list(batch.crossings)
    d = batch.final.shape[-1]
    weights = weights_from_batch(batch) if batch.girsanov_z is not None else None
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        head = ["path"] + [f"x{j + 1}_T" for j in range(d)] + [f"L_{k}" for k in ids]
        head += [f"crossings_{k}" for k in cross]
        if weights is not None:
            head += ["girsanov_z", "girsanov_qv", "girsanov_weight"]
        w.writerow(head)
        for i in range(len(batch)):
            row = [str(int(batch.indices[i]))] + [_fmt(v) for v in batch.final[i]]
            row += [_fmt(batch.local_total[k][i]) for k in ids]
            row += [str(int(batch.crossings[k][i])) for k in cross]
            if weights is not None:
                row += [_fmt(batch.girsanov_z[i]), _fmt(batch.girsanov_qv[i]), _fmt(weights[i])]
            w.writerow(row)


def cmd_simulate(args) -> int:
    exp = _experiment(args)
    out = args.out or exp.output_dir
    os.makedirs(out, exist_ok=True)
    batch = _run_experiment(exp)
    comments = _comments(args, [f"mode={exp.model.mode} seed={exp.seed} paths={exp.n_paths}"])
    write_summary(batch, os.path.join(out, "summary.csv"), comments)
    if exp.trajectories:
        write_trajectories(batch, os.path.join(out, "trajectories.csv"), comments)
    if batch.multi_crossings is not None and batch.multi_crossings.any():
        _progress(f"warning: {int(batch.multi_crossings.sum())} step(s) crossed several membranes; "
                  "consider a smaller dt")
    for k, c in batch.crossings.items():
        _progress(f"{k}: mean crossings per path {c.mean():.6g}")
    _progress(f"wrote {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = 0 if args.seed is None else args.seed
    reports = run_suite(args.checks, args.scale, seed, args.workers, _progress)
    comments = _comments(args, [f"check set={args.checks} scale={args.scale} seed={seed}", REVUZ_NOTE])
    if args.out:
        write_reports(reports, args.out, comments)
    else:
        write_reports(reports, sys.stdout, comments)
    failed = [r.name for r in reports if not r.passed]
    for nm in failed:
        _progress(f"FAILED {nm}")
    return EXIT_FAIL if failed else EXIT_OK


def read_reports(path) -> list[CheckReport]:
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(rows)
    out = []
    try:
        for r in reader:
            out.append(CheckReport(r["name"], float(r["lhs"]), float(r["rhs"]), float(r["std_error"]),
                                   float(r["z_score"]), r["pass"] == "true",
                                   float(r.get("tolerance") or 0.0)))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed check CSV {path}: {exc}") from exc
    return out


def cmd_report(args) -> int:
    from . import plotting

    if not (args.config or args.checks or args.suite):
        raise ConfigError("report needs --config, --checks or --suite")
    os.makedirs(args.out, exist_ok=True)
    status = EXIT_OK
    reports = []
    if args.checks:
        reports += read_reports(args.checks)
    if args.suite:
        seed = 0 if args.seed is None else args.seed
        fresh = run_suite(args.suite, args.scale, seed, args.workers, _progress)
        write_reports(fresh, os.path.join(args.out, "checks.csv"), _comments(args, [REVUZ_NOTE]))
        reports += fresh
    if reports:
        plotting.zscore_chart(reports, os.path.join(args.out, "zscores.png"))
        if not all(r.passed for r in reports):
            status = EXIT_FAIL
    if args.config:
        exp = _experiment(args)
        batch = _run_experiment(exp)
        comments = _comments(args, [f"mode={exp.model.mode} seed={exp.seed} paths={exp.n_paths}"])
        write_summary(batch, os.path.join(args.out, "summary.csv"), comments)
        write_trajectories(batch, os.path.join(args.out, "trajectories.csv"), comments)
        body = exp.model.body
        plotting.trajectory_figure(batch, os.path.join(args.out, "trajectories.png"), body=body)
        plotting.occupation_histogram(batch, os.path.join(args.out, "occupation.png"))
    _progress(f"wrote {args.out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
