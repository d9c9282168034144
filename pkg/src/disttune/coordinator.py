"""Master-side logic: model sharing, customization dispatch and tracking.

The registry keeps two ordered lists. ``g_list`` holds detectors that own a
customized model, in the order they got one. ``a_list`` holds every
processed detector. A new detector is compared against G in order and
shares the first model whose training pattern is within ``thd_aard``;
otherwise a worker customizes a model for it and it joins G.

A detector joins G when its customization job is *dispatched*, not when the
job returns. That depends only on AARD comparisons, so G comes out the same
however many workers run and whatever order their results arrive in. Results
are applied to the registry strictly in submission order.
"""

from __future__ import annotations

import base64
import csv
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import DEFAULT_HYPERPARAMS, HyperParams, NormalizedSeries, SpeedSeries, Thresholds, normalize
from .data import split_train_test
from .errors import (
    AlreadyProcessed,
    NoDonor,
    RegistryInvariantError,
    UnknownDetector,
)
from .lstm import LstmModel, TrainConfig, deserialize, evaluate, forecast, load_model, save_model
from .metrics import AccuracyReport, ForecastPair, aard
from .protocol import none_to_inf, pack_array, unpack_array
from .worker import build_job

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1
CUSTOMIZED = "customized"
SHARED = "shared"
TYPE1 = "type1"
TYPE2 = "type2"
RECENT_POINTS = 288


@dataclass
class Assignment:
    detector: str
    origin: str  # CUSTOMIZED or SHARED
    donor: str | None
    model_ref: str | None
    hyper: HyperParams | None
    satisfied: bool
    evaluations: int = 0
    report: AccuracyReport | None = None
    initial_origin: str = ""
    recustomizations: int = 0
    flagged: bool = False

    def __post_init__(self):
        self.initial_origin = self.initial_origin or self.origin

    def to_dict(self) -> dict:
        return {
            "detector": self.detector,
            "origin": self.origin,
            "donor": self.donor,
            "model_ref": self.model_ref,
            "hyper": self.hyper.as_list() if self.hyper else None,
            "satisfied": self.satisfied,
            "evaluations": self.evaluations,
            "report": self.report.to_dict() if self.report else None,
            "initial_origin": self.initial_origin,
            "recustomizations": self.recustomizations,
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Assignment":
        return cls(
            d["detector"], d["origin"], d["donor"], d["model_ref"],
            HyperParams.from_sequence(d["hyper"]) if d["hyper"] else None,
            bool(d["satisfied"]), int(d["evaluations"]),
            AccuracyReport(**d["report"]) if d["report"] else None,
            d["initial_origin"], int(d["recustomizations"]), bool(d["flagged"]),
        )


@dataclass
class TrackingRecord:
    detector: str
    recent_aare: float | None  # None when the detector has no usable model
    last_checked: str  # ISO timestamp of the last observation checked
    recustomizations: int = 0


@dataclass
class Registry:
    g_list: list = field(default_factory=list)
    a_list: list = field(default_factory=list)
    assignments: dict = field(default_factory=dict)
    pattern_cache: dict = field(default_factory=dict)
    # how each G member got there: "sharing-check" or "tracking"
    g_admission: dict = field(default_factory=dict)
    tracking: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)

    def add_model(self, model: LstmModel) -> str:
        ref = model.content_hash()
        self.models.setdefault(ref, model)
        return ref

    def model_of(self, detector: str) -> LstmModel | None:
        a = self.assignment(detector)
        return self.models.get(a.model_ref) if a.model_ref else None

    def assignment(self, detector: str) -> Assignment:
        try:
            return self.assignments[detector]
        except KeyError:
            raise UnknownDetector(detector) from None

    def validate(self, thd_aard: float | None = None) -> None:
        """Raise :class:`RegistryInvariantError` if any registry invariant fails."""
        def fail(msg):
            raise RegistryInvariantError(msg)

        if len(set(self.a_list)) != len(self.a_list):
            fail("duplicate detector in A")
        if len(set(self.g_list)) != len(self.g_list):
            fail("duplicate detector in G")
        if not set(self.g_list) <= set(self.a_list):
            fail("G is not a subset of A")
        if set(self.assignments) != set(self.a_list):
            fail("assignments do not match A one-to-one")
        if set(self.pattern_cache) != set(self.g_list):
            fail("pattern cache does not match G")
        for d, a in self.assignments.items():
            if a.origin == SHARED:
                if a.donor not in self.g_list:
                    fail(f"{d} shares from {a.donor}, which is not in G")
                if d in self.g_list:
                    fail(f"{d} is in G but has a shared model")
            elif a.origin == CUSTOMIZED:
                if d not in self.g_list:
                    fail(f"{d} owns a model but is not in G")
            else:
                fail(f"{d} has unknown origin {a.origin!r}")
            if a.model_ref is not None and a.model_ref not in self.models:
                fail(f"{d} references a missing model")
        if thd_aard is not None:
            admitted = []
            for d in self.g_list:
                if self.g_admission.get(d) == "sharing-check":
                    for e in admitted:
                        if aard(self.pattern_cache[d], self.pattern_cache[e]) < thd_aard:
                            fail(f"{d} was admitted to G but matches earlier member {e}")
                admitted.append(d)


@dataclass
class _Pending:
    detector: str
    action: str  # "customize", "share", "recustomize"
    job_id: int | None = None
    donor: str | None = None
    pattern: NormalizedSeries | None = None
    test: SpeedSeries | None = None
    mode: str = ""
    initial: HyperParams | None = None


@dataclass
class JobLog:
    """What one (re-)customization job did; the raw material for run reports."""

    job_id: int
    detector: str
    kind: str
    mode: str
    initial: list
    ok: bool
    satisfied: bool
    best_hyper: list | None
    best_aare: float
    evaluations: int
    work: int
    elapsed_s: float
    stop_reason: str
    error: str | None
    trace: list


@dataclass
class TrackingDispatch:
    detector: str
    job_id: int
    mode: str
    initial: HyperParams
    before: AccuracyReport | None
    after: AccuracyReport | None = None
    satisfied: bool | None = None
    evaluations: int = 0
    elapsed_s: float = 0.0


def training_work(trace_rows) -> int:
    """Sum of ep * n_layer * n_unit over evaluated settings: a hardware-free time proxy."""
    return int(sum(row[4] * row[2] * row[3] for row in trace_rows))


class Coordinator:
    def __init__(self, dispatcher=None, *, thresholds: Thresholds = Thresholds(),
                 budget: int = 100, cfg: TrainConfig = TrainConfig(),
                 initial: HyperParams = DEFAULT_HYPERPARAMS, free=None, sharing: bool = True,
                 validation_points: int = 0, train_days: int = 5, test_days: int = 1,
                 recent_points: int = RECENT_POINTS, registry: Registry | None = None):
        if dispatcher is None:
            from .dispatch import SerialDispatcher
            dispatcher = SerialDispatcher()
        self.dispatcher = dispatcher
        self.thresholds = thresholds
        self.budget = budget
        self.cfg = cfg
        self.initial = initial
        self.free = free
        self.sharing = sharing
        self.validation_points = validation_points
        self.train_days = train_days
        self.test_days = test_days
        self.recent_points = recent_points
        self.registry = registry or Registry()
        self.jobs: list = []
        self.tracking_log: list = []
        self._pending: list = []
        self._g_view: list = list(self.registry.g_list)
        self._patterns: dict = dict(self.registry.pattern_cache)

    # -- customization and sharing ------------------------------------

    def _split(self, series, train, test):
        if train is not None:
            if test is None:
                raise ValueError("train given without test")
            return train, test
        return split_train_test(series, self.train_days, self.test_days)

    def _job(self, kind, detector, train, test, initial, mode=""):
        msg = build_job(kind, 0, detector, train, test, initial=initial, free=self.free,
                        thresholds=self.thresholds, budget=self.budget, cfg=self.cfg,
                        validation_points=self.validation_points, mode=mode)
        return self.dispatcher.submit(msg)

    def submit(self, detector: str, series: SpeedSeries | None = None, *,
               train: SpeedSeries | None = None, test: SpeedSeries | None = None) -> str:
        """Queue a new detector; return ``"customize"`` or the donor it shares from."""
        if detector in self.registry.assignments or any(p.detector == detector and p.action != "recustomize"
                                                        for p in self._pending):
            raise AlreadyProcessed(detector)
        train, test = self._split(series, train, test)
        pattern = normalize(train, self.cfg.reference_speed)
        donor = None
        if self.sharing:
            for j in self._g_view:
                if aard(pattern, self._patterns[j]) < self.thresholds.thd_aard:
                    donor = j
                    break
        if donor is not None:
            self._pending.append(_Pending(detector, "share", donor=donor, test=test))
            return donor
        job_id = self._job("customize", detector, train, test, self.initial)
        self._g_view.append(detector)
        self._patterns[detector] = pattern
        self._pending.append(_Pending(detector, "customize", job_id, pattern=pattern, test=test,
                                      initial=self.initial))
        return "customize"

    def process_detector(self, detector: str, series: SpeedSeries | None = None, **kw) -> Assignment:
        self.submit(detector, series, **kw)
        self.drain()
        return self.registry.assignments[detector]

    def drain(self) -> list:
        """Wait for outstanding jobs and apply everything in submission order."""
        ids = [p.job_id for p in self._pending if p.job_id is not None]
        results = self.dispatcher.wait(ids) if ids else {}
        applied = []
        pending, self._pending = self._pending, []
        for p in pending:
            if p.action == "share":
                applied.append(self._apply_share(p))
            elif p.action == "customize":
                applied.append(self._apply_customize(p, results[p.job_id]))
            else:
                applied.append(self._apply_recustomize(p, results[p.job_id]))
        return applied

    def _log_job(self, p: _Pending, msg) -> JobLog:
        r = msg.payload
        trace = r.get("trace") or []
        entry = JobLog(
            job_id=p.job_id, detector=p.detector, kind=p.action, mode=p.mode,
            initial=p.initial.as_list() if p.initial else [],
            ok=bool(r.get("ok")), satisfied=bool(r.get("satisfied")),
            best_hyper=r.get("best_hyper"), best_aare=none_to_inf(r.get("best_aare")),
            evaluations=int(r.get("evaluations") or 0), work=training_work(trace),
            elapsed_s=float(r.get("elapsed_s") or 0.0), stop_reason=str(r.get("stop_reason", "")),
            error=r.get("error"), trace=trace,
        )
        self.jobs.append(entry)
        return entry

    def _model_from(self, msg):
        blob = msg.payload.get("model")
        if not blob:
            return None
        return deserialize(base64.b64decode(blob))

    def _apply_customize(self, p: _Pending, msg) -> Assignment:
        entry = self._log_job(p, msg)
        model = self._model_from(msg)
        reg = self.registry
        if model is not None:
            ref = reg.add_model(model)
            report = AccuracyReport(**msg.payload["report"])
            a = Assignment(p.detector, CUSTOMIZED, None, ref, model.hyper, entry.satisfied,
                           entry.evaluations, report)
        else:
            a = Assignment(p.detector, CUSTOMIZED, None, None, None, False, entry.evaluations)
        a.flagged = not a.satisfied
        if not a.satisfied:
            log.warning("%s: customization unsatisfied (%s)", p.detector, entry.error or entry.stop_reason)
        reg.assignments[p.detector] = a
        reg.g_list.append(p.detector)
        reg.g_admission[p.detector] = "sharing-check"
        reg.pattern_cache[p.detector] = p.pattern
        reg.a_list.append(p.detector)
        return a

    def _apply_share(self, p: _Pending) -> Assignment:
        reg = self.registry
        donor = reg.assignments[p.donor]
        model = reg.models.get(donor.model_ref) if donor.model_ref else None
        report = evaluate(model, p.test) if model is not None else None
        satisfied = report is not None and report.aare <= self.thresholds.thd_aare
        a = Assignment(p.detector, SHARED, p.donor, donor.model_ref, donor.hyper, satisfied, 0, report)
        a.flagged = not satisfied
        reg.assignments[p.detector] = a
        reg.a_list.append(p.detector)
        return a

    # -- tracking --------------------------------------------------------

    def recustomize_seed(self, detector: str, mode: str = TYPE1, *, strict: bool = False) -> HyperParams:
        """Initial setting for a re-customization.

        Type 1 starts from the default setting. Type 2 starts from the donor's
        tuned setting and needs a shared-model detector; otherwise it falls
        back to Type 1 with a warning (or raises :class:`NoDonor` if ``strict``).
        """
        a = self.registry.assignment(detector)
        if mode == TYPE1:
            return DEFAULT_HYPERPARAMS
        if mode != TYPE2:
            raise ValueError(f"unknown re-customization mode {mode!r}")
        donor = self.registry.assignments.get(a.donor) if a.origin == SHARED else None
        if donor is None or donor.hyper is None:
            msg = f"{detector} has no donor model; using the default setting"
            if strict:
                raise NoDonor(msg)
            warnings.warn(msg, stacklevel=2)
            return DEFAULT_HYPERPARAMS
        return donor.hyper

    def _recent_pair(self, detector: str, feed) -> ForecastPair | None:
        if isinstance(feed, ForecastPair):
            return feed.tail(self.recent_points)
        model = self.registry.model_of(detector)
        if model is None:
            return None
        values = np.asarray(getattr(feed, "values", feed))
        return forecast(model, values[-(self.recent_points + model.lookback):])

    def track_all(self, live_data: Mapping, mode: str = TYPE1, retrain: Mapping | None = None,
                  now: str | None = None) -> list:
        """Check every detector's recent accuracy and dispatch re-customizations.

        ``live_data`` maps detectors to either a recent :class:`ForecastPair`
        or a fresh :class:`SpeedSeries` (train days + test day). Re-customization
        trains on the series itself, or on ``retrain[d]`` when only forecasts
        were given. Call :meth:`drain` to apply the results.
        """
        unknown = [d for d in live_data if d not in self.registry.assignments]
        if unknown:
            raise UnknownDetector(", ".join(map(str, unknown)))
        retrain = retrain or {}
        dispatches = []
        for d in self.registry.a_list:
            if d not in live_data:
                continue
            feed = live_data[d]
            pair = self._recent_pair(d, feed)
            recent = pair.report() if pair is not None else None
            aare_now = recent.aare if recent is not None else float("inf")
            a = self.registry.assignments[d]
            rec = self.registry.tracking.get(d) or TrackingRecord(d, None, "")
            rec.recent_aare = aare_now if np.isfinite(aare_now) else None
            if now is not None:
                rec.last_checked = now
            elif isinstance(feed, SpeedSeries):
                end = feed.start + (len(feed) - 1) * _interval(feed)
                rec.last_checked = end.isoformat()
            self.registry.tracking[d] = rec
            if aare_now <= self.thresholds.thd_aare and not a.flagged:
                continue
            source = retrain.get(d, feed if isinstance(feed, SpeedSeries) else None)
            if source is None:
                log.warning("%s needs re-customization but no training data was given", d)
                continue
            train, test = split_train_test(source, self.train_days, self.test_days)
            initial = self.recustomize_seed(d, mode)
            job_id = self._job("recustomize", d, train, test, initial, mode)
            self._pending.append(_Pending(d, "recustomize", job_id,
                                          pattern=normalize(train, self.cfg.reference_speed),
                                          test=test, mode=mode, initial=initial))
            dispatches.append(TrackingDispatch(d, job_id, mode, initial, recent))
        self.tracking_log.extend(dispatches)
        return dispatches

    def _apply_recustomize(self, p: _Pending, msg) -> Assignment:
        entry = self._log_job(p, msg)
        reg = self.registry
        old = reg.assignments[p.detector]
        model = self._model_from(msg)
        rec = reg.tracking.get(p.detector)
        if rec is not None:
            rec.recustomizations += 1
        for t in self.tracking_log:
            if t.job_id == p.job_id:
                t.satisfied, t.evaluations, t.elapsed_s = entry.satisfied, entry.evaluations, entry.elapsed_s
                if model is not None:
                    t.after = AccuracyReport(**msg.payload["report"])
        if model is None:
            # keep serving the old model; the detector stays flagged
            old.flagged = True
            return old
        ref = reg.add_model(model)
        new = Assignment(p.detector, CUSTOMIZED, None, ref, model.hyper, entry.satisfied,
                         entry.evaluations, AccuracyReport(**msg.payload["report"]),
                         old.initial_origin, old.recustomizations + 1, not entry.satisfied)
        reg.assignments[p.detector] = new
        if p.detector not in reg.g_list:
            reg.g_list.append(p.detector)
            self._g_view.append(p.detector)
        # the cached pattern is now the drifted one, admitted by tracking
        reg.g_admission[p.detector] = "tracking"
        reg.pattern_cache[p.detector] = p.pattern
        self._patterns[p.detector] = p.pattern
        return new

    # -- reporting and persistence -----------------------------------------

    def report(self) -> "RegistryReport":
        return registry_report(self.registry)

    def save_snapshot(self, directory) -> Path:
        return save_snapshot(self.registry, self.thresholds, directory)

    @classmethod
    def resume(cls, directory, dispatcher=None, **kwargs) -> "Coordinator":
        registry, thresholds = load_snapshot(directory)
        kwargs.setdefault("thresholds", thresholds)
        return cls(dispatcher, registry=registry, **kwargs)


def _interval(series: SpeedSeries):
    from datetime import timedelta

    return timedelta(minutes=series.interval_minutes)


# ---------------------------------------------------------------- report

REPORT_COLUMNS = ("detector", "origin", "donor", "initial_origin", "r_learn", "n_layer", "n_unit",
                  "ep", "satisfied", "evaluations", "recustomizations", "aare", "aae", "rmse")


@dataclass
class RegistryReport:
    g_count: int
    a_count: int
    customized: int
    shared: int
    recustomized: int
    sharing_ratio: float
    recustomization_ratio: float
    rows: list

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        return d

    def to_json(self) -> str:
        return json.dumps({**self.summary(), "detectors": self.rows}, indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow(row)
        return buf.getvalue()

    def write(self, directory, stem: str = "registry") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.json").write_text(self.to_json())
        (directory / f"{stem}.csv").write_text(self.to_csv())


def registry_report(reg: Registry) -> RegistryReport:
    """Counts over the registry.

    ``customized`` counts detectors whose first model was customized for
    them. The rest shared on arrival, even if tracking later gave them their
    own model. ``recustomized`` counts detectors re-customized at least once.
    """
    rows = []
    for d in reg.a_list:
        a = reg.assignments[d]
        h = a.hyper.as_list() if a.hyper else [None] * 4
        rep = a.report
        rows.append({
            "detector": d, "origin": a.origin, "donor": a.donor or "",
            "initial_origin": a.initial_origin,
            "r_learn": h[0], "n_layer": h[1], "n_unit": h[2], "ep": h[3],
            "satisfied": a.satisfied, "evaluations": a.evaluations,
            "recustomizations": a.recustomizations,
            "aare": rep.aare if rep else None, "aae": rep.aae if rep else None,
            "rmse": rep.rmse if rep else None,
        })
    n = len(reg.a_list)
    customized = sum(1 for r in rows if r["initial_origin"] == CUSTOMIZED)
    recustomized = sum(1 for r in rows if r["recustomizations"] > 0)
    return RegistryReport(
        g_count=len(reg.g_list), a_count=n, customized=customized, shared=n - customized,
        recustomized=recustomized,
        sharing_ratio=(n - customized) / n if n else 0.0,
        recustomization_ratio=recustomized / n if n else 0.0,
        rows=rows,
    )


# ---------------------------------------------------------------- snapshots


def save_snapshot(reg: Registry, thresholds: Thresholds, directory) -> Path:
    """Write ``registry.json`` plus one MODEL-FILE per referenced model under ``models/``."""
    directory = Path(directory)
    (directory / "models").mkdir(parents=True, exist_ok=True)
    refs = sorted({a.model_ref for a in reg.assignments.values() if a.model_ref})
    for ref in refs:
        path = directory / "models" / f"{ref}.dtlm"
        if not path.exists():
            save_model(reg.models[ref], path)
    assignments = {}
    for d in reg.a_list:
        entry = reg.assignments[d].to_dict()
        entry["model_path"] = f"models/{entry['model_ref']}.dtlm" if entry["model_ref"] else None
        assignments[d] = entry
    doc = {
        "version": SNAPSHOT_VERSION,
        "thresholds": asdict(thresholds),
        "g_list": list(reg.g_list),
        "a_list": list(reg.a_list),
        "g_admission": {d: reg.g_admission[d] for d in reg.g_list},
        "assignments": assignments,
        "patterns": {
            d: {"reference_speed": p.reference_speed, "values": pack_array(p.values)}
            for d, p in ((d, reg.pattern_cache[d]) for d in reg.g_list)
        },
        "tracking": {d: asdict(reg.tracking[d]) for d in reg.a_list if d in reg.tracking},
    }
    path = directory / "registry.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_snapshot(directory):
    directory = Path(directory)
    doc = json.loads((directory / "registry.json").read_text())
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {doc.get('version')!r}")
    reg = Registry(list(doc["g_list"]), list(doc["a_list"]))
    for d, entry in doc["assignments"].items():
        a = Assignment.from_dict(entry)
        reg.assignments[d] = a
        if entry.get("model_path") and a.model_ref not in reg.models:
            reg.models[a.model_ref] = load_model(directory / entry["model_path"])
    reg.g_admission = dict(doc["g_admission"])
    reg.pattern_cache = {
        d: NormalizedSeries(d, unpack_array(p["values"]), p["reference_speed"])
        for d, p in doc["patterns"].items()
    }
    reg.tracking = {d: TrackingRecord(**t) for d, t in doc["tracking"].items()}
    reg.validate()
    return reg, Thresholds(**doc["thresholds"])
