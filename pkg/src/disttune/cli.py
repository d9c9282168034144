"""Command line entry point.

Subcommands: synth, run, track, report, gradcheck, bench, window.
Exit codes: 0 success, 2 input error, 3 finished with unsatisfied detectors.

Every global flag can also come from a ``key = value`` config file passed
with ``--config``; flags given on the command line win. ``DISTTUNE_SEED``
overrides the seed from the config file but not an explicit ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .core import DEFAULT_REFERENCE_SPEED, HyperParams, Thresholds
from .errors import DistTuneError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_UNSATISFIED = 3


class InputError(Exception):
    pass


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InputError(f"{path}:{n}: expected key = value")
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        out[key.strip().replace("-", "_")] = value
    return out


def _add_split(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-days", type=int, default=5)
    p.add_argument("--test-days", type=int, default=1)


def _add_globals(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="key = value file mirroring these flags")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--data-dir", default=".", help="root for relative data paths")
    g.add_argument("--thd-aare", type=float, default=0.05)
    g.add_argument("--thd-aard", type=float, default=0.1)
    g.add_argument("--ref-speed", type=float, default=DEFAULT_REFERENCE_SPEED)
    g.add_argument("--lookback", type=int, default=12)
    g.add_argument("--budget", type=int, default=100)
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="disttune", description=(
        "Distributed LSTM auto-tuning and sharing for traffic speed detectors."))
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic detector network")
    p.add_argument("--out", default="synthetic", help="output dir (under --data-dir)")
    p.add_argument("--patterns", type=int, default=4)
    p.add_argument("--per-pattern", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--days", type=int, default=6)
    p.add_argument("--drift", type=int, default=0,
                   help="also write a live feed in which this many detectors change pattern")

    p = sub.add_parser("run", help="customize/share models for every detector in a manifest")
    p.add_argument("--manifest", default="manifest.json", help="manifest path (under --data-dir)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--transport", choices=("serial", "inproc", "tcp"), default=None)
    p.add_argument("--sharing", choices=("on", "off"), default="on")
    p.add_argument("--scenario", type=int, choices=range(1, 6), default=None)
    p.add_argument("--mask", default=None,
                   help="pinned axes such as 'n_layer=1,n_unit=10' (alternative to --scenario)")
    p.add_argument("--validation-points", type=int, default=0)
    _add_split(p)
    p.add_argument("--out", default="runs/latest")

    p = sub.add_parser("track", help="one tracking sweep over a live feed")
    p.add_argument("--registry", required=True, help="snapshot dir written by run")
    p.add_argument("--feed", required=True, help="manifest of the live feed (under --data-dir)")
    p.add_argument("--mode", choices=("type1", "type2"), default="type1")
    _add_split(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--transport", choices=("serial", "inproc", "tcp"), default=None)
    p.add_argument("--out", default="runs/tracking")

    p = sub.add_parser("report", help="tabulate run directories for plotting")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", default="runs/report")

    p = sub.add_parser("gradcheck", help="compare BPTT against finite differences")
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--units", type=int, default=2)

    p = sub.add_parser("bench", help="tuner benchmark on surrogate objectives")
    p.add_argument("--instances", type=int, default=100)

    p = sub.add_parser("window", help="training-window length study on a drifting detector")
    p.add_argument("--weeks", type=int, nargs="+", default=[1, 4, 8, 12])
    p.add_argument("--drift", type=float, default=0.01, help="weekly pattern drift")
    p.add_argument("--out", default=None, help="CSV path (under --data-dir)")

    for sp in sub.choices.values():
        _add_globals(sp)
    ap.set_defaults(_subcommands=sub.choices)
    return ap


def parse(argv=None) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    seed_given = any(a == "--seed" or a.startswith("--seed=") for a in (argv if argv is not None else sys.argv[1:]))
    if args.config:
        cfg = read_config(args.config)
        sp = args._subcommands[args.command]
        known = {a.dest for a in sp._actions}
        unknown = set(cfg) - known
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
        sp.set_defaults(**cfg)
        args = ap.parse_args(argv)
    env_seed = os.environ.get("DISTTUNE_SEED")
    if env_seed and not seed_given:
        try:
            args.seed = int(env_seed)
        except ValueError:
            raise InputError(f"DISTTUNE_SEED must be an integer, got {env_seed!r}") from None
    return args


def _thresholds(args) -> Thresholds:
    try:
        return Thresholds(args.thd_aare, args.thd_aard)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _train_cfg(args):
    from .lstm import TrainConfig

    try:
        return TrainConfig(lookback=args.lookback, seed=args.seed, reference_speed=args.ref_speed)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _under(args, path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(args.data_dir) / p


def _run_config(args, **extra):
    from .experiments import RunConfig

    transport = args.transport or ("serial" if args.workers == 1 else "inproc")
    if transport == "serial" and args.workers != 1:
        raise InputError("--transport serial runs one worker; use inproc or tcp for --workers > 1")
    if args.workers < 1:
        raise InputError("--workers must be >= 1")
    if args.budget < 1:
        raise InputError("--budget must be >= 1")
    if args.train_days < 1 or args.test_days < 1:
        raise InputError("--train-days and --test-days must be >= 1")
    return RunConfig(thresholds=_thresholds(args), budget=args.budget, cfg=_train_cfg(args),
                     workers=args.workers, transport=transport, train_days=args.train_days,
                     test_days=args.test_days, data_dir=str(args.data_dir), **extra)


def cmd_synth(args) -> int:
    from .data import SyntheticSpec, drift_plan, generate_synthetic, live_feed, write_csv

    if args.days < 2:
        raise InputError("--days must be >= 2 (training days plus one test day)")
    spec = SyntheticSpec(args.patterns, args.per_pattern, args.noise, args.days, args.seed,
                         train_days=args.days - 1, thd_aard=args.thd_aard,
                         reference_speed=args.ref_speed)
    out = _under(args, args.out)
    manifest, net = generate_synthetic(spec, out)
    print(f"wrote {len(manifest.detectors)} detectors to {out}")
    if args.drift:
        flips = drift_plan(net, args.drift)
        feed = live_feed(net, flips)
        fm = net.manifest()
        for e in fm.detectors:
            write_csv(feed[e.detector], out / "feed" / e.path)
        fm.save(out / "feed" / "manifest.json")
        (out / "feed" / "drift.json").write_text(json.dumps(flips, indent=1, sort_keys=True) + "\n")
        print(f"wrote live feed with {len(flips)} drifting detectors to {out / 'feed'}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .data import load_manifest
    from .experiments import SCENARIOS, parse_mask, run_pipeline, write_run

    if args.scenario is not None and args.mask is not None:
        raise InputError("--scenario and --mask are mutually exclusive")
    try:
        mask = SCENARIOS[args.scenario] if args.scenario else parse_mask(args.mask or "3")
        mask.initial()
    except (ValueError, DistTuneError) as exc:
        raise InputError(f"bad tune mask: {exc}") from None
    config = _run_config(args, sharing=args.sharing == "on", mask=mask,
                         validation_points=args.validation_points)
    manifest_path = _under(args, args.manifest)
    manifest = load_manifest(manifest_path)
    series = manifest.load_series(manifest_path.parent)
    config.data_dir = str(manifest_path.parent)
    result = run_pipeline(series, config)
    out = write_run(result, _under(args, args.out))
    s = result.summary
    avg = s["average"] or {}
    print(f"detectors={s['detectors']} G={s['g_count']} tuner_invocations={s['tuner_invocations']} "
          f"evaluations={s['evaluations']} unsatisfied={s['unsatisfied']}")
    if avg:
        print(f"average AARE={avg['aare']:.4f}±{avg['aare_std']:.4f} "
              f"AAE={avg['aae']:.3f}±{avg['aae_std']:.3f} RMSE={avg['rmse']:.3f}±{avg['rmse_std']:.3f}")
    print(f"cumulative customization time {result.metadata['cumulative_customization_time_s']:.1f}s; "
          f"artifacts in {out}")
    return EXIT_UNSATISFIED if s["unsatisfied"] else EXIT_OK


def cmd_track(args) -> int:
    from .data import load_manifest
    from .experiments import run_tracking, write_tracking

    feed_path = _under(args, args.feed)
    manifest = load_manifest(feed_path)
    feeds = manifest.load_series(feed_path.parent)
    config = _run_config(args)
    config.data_dir = str(feed_path.parent)
    coord, rows, meta = run_tracking(_under(args, args.registry), feeds, args.mode, config)
    out = write_tracking(coord, rows, meta, _under(args, args.out))
    print(f"{len(rows)} detector(s) re-customized; report in {out}")
    for r in rows:
        after = "n/a" if r["after_aare"] is None else f"{r['after_aare']:.4f}"
        print(f"  {r['detector']}: AARE {r['before_aare']:.4f} -> {after} (start {r['initial']})")
    unsatisfied = [r for r in rows if not r["satisfied"]]
    return EXIT_UNSATISFIED if unsatisfied else EXIT_OK


def cmd_report(args) -> int:
    from .experiments import collect_report, write_report

    rows = collect_report([_under(args, r) for r in args.runs])
    out = write_report(rows, _under(args, args.out))
    for r in rows:
        print(f"{r['run']}: detectors={r['detectors']} invocations={r['tuner_invocations']} "
              f"avg AARE={r['avg_aare']:.4f}")
    print(f"report in {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .lstm import TrainConfig, gradient_check

    if not (1 <= args.layers <= 2 and 1 <= args.units <= 4):
        raise InputError("gradcheck is meant for tiny networks: --layers <= 2, --units <= 4")
    hyper = HyperParams(0.01, args.layers, max(2, args.units - args.units % 2), 100)
    err = gradient_check(hyper, TrainConfig(lookback=args.lookback, seed=args.seed))
    ok = err < 1e-4
    print(f"{hyper}: max relative error {err:.3e} ({'ok' if ok else 'FAILED'})")
    return EXIT_OK if ok else EXIT_UNSATISFIED


def cmd_bench(args) -> int:
    from .surrogate import bench_tuner

    r = bench_tuner(args.instances, seed=args.seed, budget=args.budget,
                    thresholds=_thresholds(args))
    print(f"satisfied {r.satisfied}/{r.instances} surrogate objectives; "
          f"mean evaluations {r.mean_evaluations:.1f}, max {r.max_evaluations}")
    return EXIT_OK if r.satisfied >= 0.95 * r.instances else EXIT_UNSATISFIED


def cmd_window(args) -> int:
    from .data import drifting_series, window_study, write_rows_csv

    if not args.weeks or min(args.weeks) < 1:
        raise InputError("--weeks needs positive lengths")
    series = drifting_series(max(args.weeks), args.drift, seed=args.seed)
    rows = window_study(series, args.weeks, cfg=_train_cfg(args))
    for r in rows:
        print(f"{r.weeks:>2} weeks: train {r.train_time_s:7.2f}s  AARE {r.aare:.4f}  "
              f"AAE {r.aae:.3f}  RMSE {r.rmse:.3f}")
    if args.out:
        write_rows_csv(rows, _under(args, args.out),
                       ("weeks", "train_points", "train_time_s", "aare", "aae", "rmse"))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "run": cmd_run, "track": cmd_track, "report": cmd_report,
    "gradcheck": cmd_gradcheck, "bench": cmd_bench, "window": cmd_window,
}


def main(argv=None) -> int:
    try:
        args = parse(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # argparse usage errors
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (InputError, DistTuneError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
