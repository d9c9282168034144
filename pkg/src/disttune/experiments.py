"""Pipelines behind the command line: customization runs, tracking sweeps and reports.

Scenario masks follow the five tuning scenarios: each fixes some
hyperparameters and lets the tuner move the rest. Fixed axes are dropped
from the simplex entirely.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .coordinator import TYPE1, Coordinator, load_snapshot, registry_report
from .core import DEFAULT_HYPERPARAMS, HyperParams, SpeedSeries, Thresholds
from .errors import NoArtifacts
from .lstm import TrainConfig
from .metrics import average_reports


@dataclass(frozen=True)
class ScenarioMask:
    """Which hyperparameters are tuned; the rest are pinned to ``fixed``."""

    name: str
    fixed: tuple = ()  # pairs of (axis name, value)

    @property
    def free(self) -> tuple:
        pinned = {k for k, _ in self.fixed}
        return tuple(n for n in ("r_learn", "n_layer", "n_unit", "ep") if n not in pinned)

    def initial(self, base: HyperParams = DEFAULT_HYPERPARAMS) -> HyperParams:
        values = dict(zip(("r_learn", "n_layer", "n_unit", "ep"), base.as_tuple()))
        values.update(dict(self.fixed))
        return HyperParams(**values)


SCENARIOS = {
    1: ScenarioMask("scenario-1", (("n_layer", 1), ("n_unit", 10))),
    2: ScenarioMask("scenario-2", (("n_unit", 6),)),
    3: ScenarioMask("scenario-3"),
    4: ScenarioMask("scenario-4", (("n_layer", 2), ("n_unit", 10))),
    5: ScenarioMask("scenario-5", (("n_unit", 10),)),
}


def parse_mask(text: str) -> ScenarioMask:
    """``"3"`` picks a scenario; ``"n_layer=1,n_unit=10"`` pins axes explicitly."""
    text = text.strip()
    if text.isdigit():
        try:
            return SCENARIOS[int(text)]
        except KeyError:
            raise ValueError(f"no scenario {text}; choose 1-5") from None
    if text in ("", "all", "tune"):
        return SCENARIOS[3]
    fixed = []
    for part in text.split(","):
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in ("r_learn", "n_layer", "n_unit", "ep") or not value:
            raise ValueError(f"bad mask entry {part!r}")
        fixed.append((key, float(value) if key == "r_learn" else int(value)))
    return ScenarioMask("custom", tuple(fixed))


@dataclass
class RunConfig:
    thresholds: Thresholds = Thresholds()
    budget: int = 100
    cfg: TrainConfig = TrainConfig()
    sharing: bool = True
    workers: int = 1
    transport: str = "serial"  # serial | inproc | tcp
    mask: ScenarioMask = SCENARIOS[3]
    validation_points: int = 0
    train_days: int = 5
    test_days: int = 1
    data_dir: str | None = None


@dataclass
class RunResult:
    coordinator: Coordinator
    summary: dict
    rows: list
    metadata: dict = field(default_factory=dict)

    @property
    def registry(self):
        return self.coordinator.registry

    def hyper_by_detector(self) -> dict:
        return {d: (a.hyper.as_tuple() if a.hyper else None)
                for d, a in self.registry.assignments.items()}


def make_dispatcher(config: RunConfig):
    from .dispatch import SerialDispatcher, local_pool, tcp_pool

    if config.transport == "serial":
        if config.workers != 1:
            raise ValueError("the serial transport runs exactly one worker")
        return SerialDispatcher(config.data_dir)
    if config.transport == "inproc":
        return local_pool(config.workers, config.data_dir)
    if config.transport == "tcp":
        return tcp_pool(config.workers, config.data_dir)
    raise ValueError(f"unknown transport {config.transport!r}")


def run_pipeline(series: Mapping[str, SpeedSeries], config: RunConfig = RunConfig(),
                 dispatcher=None) -> RunResult:
    """Process detectors in the mapping's order (their deployment order)."""
    own = dispatcher is None
    dispatcher = dispatcher or make_dispatcher(config)
    t0 = time.perf_counter()
    try:
        coord = Coordinator(
            dispatcher, thresholds=config.thresholds, budget=config.budget, cfg=config.cfg,
            initial=config.mask.initial(), free=config.mask.free, sharing=config.sharing,
            validation_points=config.validation_points, train_days=config.train_days,
            test_days=config.test_days,
        )
        for d, s in series.items():
            coord.submit(d, s)
        coord.drain()
    finally:
        if own:
            dispatcher.close()
    total = time.perf_counter() - t0
    rows = detector_rows(coord)
    summary = run_summary(coord, config)
    meta = {
        "total_customization_time_s": total,
        "cumulative_customization_time_s": sum(j.elapsed_s for j in coord.jobs),
        "max_in_flight": getattr(dispatcher, "max_in_flight", None),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    return RunResult(coord, summary, rows, meta)


DETECTOR_COLUMNS = ("detector", "origin", "donor", "r_learn", "n_layer", "n_unit", "ep",
                    "satisfied", "evaluations", "work", "aare", "aae", "rmse")


def detector_rows(coord: Coordinator) -> list:
    work = {}
    for j in coord.jobs:
        work[j.detector] = work.get(j.detector, 0) + j.work
    rows = []
    for r in registry_report(coord.registry).rows:
        rows.append({
            "detector": r["detector"], "origin": r["origin"], "donor": r["donor"],
            "r_learn": r["r_learn"], "n_layer": r["n_layer"], "n_unit": r["n_unit"], "ep": r["ep"],
            "satisfied": r["satisfied"], "evaluations": r["evaluations"],
            "work": work.get(r["detector"], 0),
            "aare": r["aare"], "aae": r["aae"], "rmse": r["rmse"],
        })
    return rows


def run_summary(coord: Coordinator, config: RunConfig) -> dict:
    reg = coord.registry
    reports = [a.report for a in (reg.assignments[d] for d in reg.a_list) if a.report is not None]
    avg = average_reports(reports).to_dict() if reports else None
    return {
        "scenario": config.mask.name,
        "free": list(config.mask.free),
        "sharing": config.sharing,
        "workers": config.workers,
        "detectors": len(reg.a_list),
        "g_count": len(reg.g_list),
        "tuner_invocations": len(coord.jobs),
        "evaluations": sum(j.evaluations for j in coord.jobs),
        "training_work": sum(j.work for j in coord.jobs),
        "unsatisfied": sum(1 for d in reg.a_list if not reg.assignments[d].satisfied),
        "average": avg,
    }


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


JOB_COLUMNS = ("job_id", "detector", "kind", "mode", "initial", "satisfied", "best_hyper",
               "best_aare", "evaluations", "work", "stop_reason", "error")


def write_run(result: RunResult, out_dir) -> Path:
    """Deterministic artifacts plus a separate ``metadata.json`` holding wall-clock data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "detectors.csv", DETECTOR_COLUMNS, result.rows)
    (out / "summary.json").write_text(json.dumps(result.summary, indent=1, sort_keys=True) + "\n")
    jobs = []
    for j in result.coordinator.jobs:
        d = asdict(j)
        d["initial"] = " ".join(map(str, d["initial"]))
        d["best_hyper"] = " ".join(map(str, d["best_hyper"] or []))
        jobs.append(d)
    _write_csv(out / "jobs.csv", JOB_COLUMNS, jobs)
    traces = out / "traces"
    traces.mkdir(exist_ok=True)
    for j in result.coordinator.jobs:
        rows = [dict(zip(("eval_index", "r_learn", "n_layer", "n_unit", "ep", "aare"), t[:6]))
                for t in j.trace]
        _write_csv(traces / f"{j.job_id:04d}_{j.detector}.csv",
                   ("eval_index", "r_learn", "n_layer", "n_unit", "ep", "aare"), rows)
    result.coordinator.save_snapshot(out / "registry")
    meta = dict(result.metadata)
    meta["job_elapsed_s"] = {str(j.job_id): j.elapsed_s for j in result.coordinator.jobs}
    (out / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------- tracking


TRACK_COLUMNS = ("detector", "mode", "initial", "satisfied", "evaluations",
                 "before_aare", "before_aae", "before_rmse", "after_aare", "after_aae", "after_rmse")


def run_tracking(snapshot_dir, feeds: Mapping[str, SpeedSeries], mode: str = TYPE1,
                 config: RunConfig = RunConfig(), dispatcher=None):
    """Resume a registry, run one tracking sweep, apply re-customizations."""
    own = dispatcher is None
    dispatcher = dispatcher or make_dispatcher(config)
    try:
        registry, thresholds = load_snapshot(snapshot_dir)
        coord = Coordinator(dispatcher, thresholds=thresholds, budget=config.budget, cfg=config.cfg,
                            registry=registry, train_days=config.train_days,
                            test_days=config.test_days, validation_points=config.validation_points)
        t0 = time.perf_counter()
        dispatches = coord.track_all(feeds, mode)
        coord.drain()
        elapsed = time.perf_counter() - t0
    finally:
        if own:
            dispatcher.close()
    rows = []
    for t in dispatches:
        b, a = t.before, t.after
        rows.append({
            "detector": t.detector, "mode": t.mode, "initial": str(t.initial),
            "satisfied": t.satisfied, "evaluations": t.evaluations,
            "before_aare": b.aare if b else None, "before_aae": b.aae if b else None,
            "before_rmse": b.rmse if b else None,
            "after_aare": a.aare if a else None, "after_aae": a.aae if a else None,
            "after_rmse": a.rmse if a else None,
        })
    return coord, rows, {"recustomization_time_s": elapsed,
                         "job_elapsed_s": {t.detector: t.elapsed_s for t in dispatches}}


def write_tracking(coord: Coordinator, rows: list, meta: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "tracking.csv", TRACK_COLUMNS, rows)
    coord.save_snapshot(out / "registry")
    registry_report(coord.registry).write(out)
    (out / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------- reports


def _num(v):
    return None if v in ("", None) else float(v)


def collect_report(run_dirs) -> list:
    """One row per run directory, recomputed from its per-detector CSV."""
    rows = []
    for run in map(Path, run_dirs):
        det = run / "detectors.csv"
        if not det.exists():
            continue
        with open(det, newline="") as fh:
            recs = list(csv.DictReader(fh))
        summary = json.loads((run / "summary.json").read_text()) if (run / "summary.json").exists() else {}
        meta = json.loads((run / "metadata.json").read_text()) if (run / "metadata.json").exists() else {}
        aare = [_num(r["aare"]) for r in recs if _num(r["aare"]) is not None]
        aae = [_num(r["aae"]) for r in recs if _num(r["aae"]) is not None]
        rmse = [_num(r["rmse"]) for r in recs if _num(r["rmse"]) is not None]

        def sd(x):
            return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0

        rows.append({
            "run": run.name,
            "scenario": summary.get("scenario", ""),
            "sharing": summary.get("sharing", ""),
            "workers": summary.get("workers", ""),
            "detectors": len(recs),
            "g_count": summary.get("g_count", ""),
            "tuner_invocations": summary.get("tuner_invocations", ""),
            "evaluations": sum(int(r["evaluations"]) for r in recs),
            "training_work": sum(int(r["work"]) for r in recs),
            "avg_aare": float(np.mean(aare)) if aare else None, "std_aare": sd(aare),
            "avg_aae": float(np.mean(aae)) if aae else None, "std_aae": sd(aae),
            "avg_rmse": float(np.mean(rmse)) if rmse else None, "std_rmse": sd(rmse),
            "total_time_s": meta.get("total_customization_time_s"),
            "cumulative_time_s": meta.get("cumulative_customization_time_s"),
        })
    if not rows:
        raise NoArtifacts(f"no run artifacts (detectors.csv) under {', '.join(map(str, run_dirs))}")
    return rows


REPORT_COLUMNS = ("run", "scenario", "sharing", "workers", "detectors", "g_count",
                  "tuner_invocations", "evaluations", "training_work", "avg_aare", "std_aare",
                  "avg_aae", "std_aae", "avg_rmse", "std_rmse")
TIMING_COLUMNS = ("run", "sharing", "workers", "total_time_s", "cumulative_time_s", "avg_aare")


def write_report(rows: list, out_dir) -> Path:
    """``report.csv``/``report.json`` are deterministic; wall-clock columns go to ``timing.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "report.csv", REPORT_COLUMNS, rows)
    stable = [{k: r[k] for k in REPORT_COLUMNS} for r in rows]
    (out / "report.json").write_text(json.dumps(stable, indent=1, sort_keys=True) + "\n")
    _write_csv(out / "timing.csv", TIMING_COLUMNS, rows)
    return out
