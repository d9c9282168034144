"""Nelder-Mead search over the hyperparameter grid.

The simplex lives in continuous parameter space; every candidate is snapped
to the grid before it is scored, and scores are memoized per grid point so a
snapping collision never retrains a model. The search stops at the first grid
point whose AARE reaches the threshold, or when the evaluation budget runs
out. A collapsed simplex is re-seeded around the best point found so far.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .core import AXES, AXIS_NAMES, DEFAULT_HYPERPARAMS, HyperParams, Thresholds, snap_to_grid
from .errors import BudgetTooSmall, NonFiniteLoss

ALPHA = 1.0  # reflection
GAMMA = 2.0  # expansion
RHO = 0.5  # contraction
SIGMA = 0.5  # shrink
INITIAL_STEP_FRACTION = 0.1
DEGENERATE_STD = 1e-6

DEFAULT_BUDGET = 100
# the 20-iteration cap used when comparing search strategies
COMPARISON_BUDGET = 20

Objective = Callable[[HyperParams], Any]


def default_setting() -> HyperParams:
    """The starting setting: learning rate 0.01, 1 layer, 2 units, 100 epochs."""
    return DEFAULT_HYPERPARAMS


@dataclass(frozen=True)
class TraceEntry:
    index: int
    hyper: HyperParams
    aare: float
    wall_time_ms: float


@dataclass
class Simplex:
    """Vertices over the free axes, with their cached objective values."""

    vertices: np.ndarray
    values: np.ndarray
    free: tuple
    generation: int = 0

    def order(self) -> None:
        idx = np.argsort(self.values, kind="stable")
        self.vertices = self.vertices[idx]
        self.values = self.values[idx]

    def spread(self) -> float:
        """Sample standard deviation of vertex values (infinities capped)."""
        vals = np.where(np.isfinite(self.values), self.values, 1e6)
        return float(np.std(vals, ddof=1))


@dataclass
class TuneOutcome:
    best_hyper: HyperParams
    best_aare: float
    best_model: Any
    evaluations: int
    satisfied: bool
    trace: list = field(default_factory=list)
    stop_reason: str = ""
    restarts: int = 0

    @property
    def first_hyper(self) -> HyperParams:
        return self.trace[0].hyper


def resolve_free(free: Iterable[str] | None) -> tuple:
    if free is None:
        return AXIS_NAMES
    names = tuple(free)
    unknown = set(names) - set(AXIS_NAMES)
    if unknown:
        raise ValueError(f"unknown hyperparameter axes {sorted(unknown)}")
    # keep canonical axis order
    return tuple(n for n in AXIS_NAMES if n in names)


def _axis(name):
    return AXES[AXIS_NAMES.index(name)]


def initial_simplex(base: HyperParams, free: Iterable[str] | None = None) -> Simplex:
    """Base vertex plus one vertex per free axis, nudged by 10% of its span.

    A nudge that snaps back onto the base (at the upper bound) steps one grid
    step down instead.
    """
    names = resolve_free(free)
    full = np.array(base.as_tuple(), dtype=np.float64)
    start = np.array([full[AXIS_NAMES.index(n)] for n in names])
    vertices = [start.copy()]
    for i, name in enumerate(names):
        axis = _axis(name)
        v = start.copy()
        moved = axis.snap(start[i] + INITIAL_STEP_FRACTION * axis.span)
        if _same(moved, start[i]):
            moved = axis.snap(start[i] - axis.step)
        v[i] = moved
        vertices.append(v)
    return Simplex(np.array(vertices), np.full(len(vertices), np.nan), names)


def _same(a, b):
    return abs(a - b) < 1e-12


class _Stop(Exception):
    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


class _Evaluator:
    """Budgeted, memoized objective over grid points."""

    def __init__(self, objective, base, free, budget, thd, on_evaluate):
        self.objective = objective
        self.base = np.array(base.as_tuple(), dtype=np.float64)
        self.free_idx = [AXIS_NAMES.index(n) for n in free]
        self.budget = budget
        self.thd = thd
        self.on_evaluate = on_evaluate
        self.memo: dict[HyperParams, float] = {}
        self.models: dict[HyperParams, Any] = {}
        self.trace: list[TraceEntry] = []
        self.best: HyperParams | None = None
        self.fresh = 0

    def point(self, coords) -> HyperParams:
        full = self.base.copy()
        full[self.free_idx] = coords
        return snap_to_grid(full)

    def __call__(self, coords) -> float:
        hyper = self.point(coords)
        if hyper in self.memo:
            return self.memo[hyper]
        if len(self.trace) >= self.budget:
            raise _Stop("budget")
        t0 = time.perf_counter()
        try:
            result = self.objective(hyper)
        except NonFiniteLoss:
            result = math.inf
        elapsed = (time.perf_counter() - t0) * 1000.0
        model = None
        if isinstance(result, tuple):
            result, model = result
        value = float(result)
        if math.isnan(value):
            value = math.inf
        self.memo[hyper] = value
        self.models[hyper] = model
        entry = TraceEntry(len(self.trace), hyper, value, elapsed)
        self.trace.append(entry)
        self.fresh += 1
        if self.best is None or value < self.memo[self.best]:
            self.best = hyper
        if self.on_evaluate is not None:
            self.on_evaluate(entry)
        if value <= self.thd:
            raise _Stop("satisfied")
        return value


def _restart_simplex(best_coords, free, rng) -> np.ndarray:
    """Fresh simplex around the best point, its base jittered one grid step.

    Edge directions are drawn at random so that consecutive restarts do not
    rebuild the same simplex.
    """
    base = best_coords.copy()
    for i, name in enumerate(free):
        axis = _axis(name)
        base[i] = axis.snap(base[i] + rng.choice((-1.0, 1.0)) * axis.step)
    vertices = [base]
    for i, name in enumerate(free):
        axis = _axis(name)
        sign = rng.choice((-1.0, 1.0))
        v = base.copy()
        moved = axis.snap(base[i] + sign * INITIAL_STEP_FRACTION * axis.span)
        if _same(moved, base[i]):
            moved = axis.snap(base[i] - sign * INITIAL_STEP_FRACTION * axis.span)
        v[i] = moved
        vertices.append(v)
    return np.array(vertices)


def _flattened(simplex: Simplex) -> bool:
    """True when the simplex is thinner than half a grid step in some direction."""
    steps = np.array([_axis(n).step for n in simplex.free])
    edges = (simplex.vertices[1:] - simplex.vertices[0]) / steps
    return bool(np.linalg.svd(edges, compute_uv=False).min() < 0.5)


def tune(objective: Objective, initial: HyperParams = DEFAULT_HYPERPARAMS,
         thresholds: Thresholds = Thresholds(), budget: int = DEFAULT_BUDGET,
         free: Iterable[str] | None = None, seed: int = 0,
         on_evaluate: Callable[[TraceEntry], None] | None = None,
         max_stall: int = 30) -> TuneOutcome:
    """Search for a grid point whose objective is at most ``thd_aare``.

    ``objective`` maps a :class:`HyperParams` to an AARE, or to a pair
    ``(aare, model)``. A :class:`NonFiniteLoss` raised by it scores +inf.
    Axes not listed in ``free`` stay at their ``initial`` value.
    """
    names = resolve_free(free)
    if budget < len(names) + 1:
        raise BudgetTooSmall(f"budget {budget} cannot cover a {len(names) + 1}-vertex simplex")
    snapped = snap_to_grid(initial.as_tuple())
    if snapped != initial:
        raise ValueError(f"initial setting {initial} is not on the grid")
    ev = _Evaluator(objective, initial, names, budget, thresholds.thd_aare, on_evaluate)
    rng = np.random.default_rng(seed)
    restarts = 0
    reason = "budget"
    try:
        simplex = initial_simplex(initial, names)
        simplex.values = np.array([ev(v) for v in simplex.vertices])
        if not names:
            raise _Stop("no-free-axes")
        stall = 0
        idle_restarts = 0
        while True:
            simplex.order()
            seen = ev.fresh
            if simplex.spread() < DEGENERATE_STD or stall >= max_stall or _flattened(simplex):
                restarts += 1
                best = simplex.vertices[0].copy()
                simplex = Simplex(_restart_simplex(best, names, rng),
                                  np.full(len(names) + 1, np.nan), names, simplex.generation + 1)
                simplex.values = np.array([ev(v) for v in simplex.vertices])
                stall = 0
                idle_restarts = idle_restarts + 1 if ev.fresh == seen else 0
                if idle_restarts > 2 * max(_axis(n).size for n in names):
                    raise _Stop("exhausted")
                continue
            _step(simplex, ev)
            simplex.generation += 1
            stall = stall + 1 if ev.fresh == seen else 0
    except _Stop as stop:
        reason = stop.reason
    if not ev.trace:
        raise RuntimeError("tuner finished without evaluating anything")
    best = min(ev.trace, key=lambda e: (e.aare, e.index)).hyper
    best_aare = ev.memo[best]
    return TuneOutcome(
        best_hyper=best,
        best_aare=best_aare,
        best_model=ev.models.get(best),
        evaluations=len(ev.trace),
        satisfied=best_aare <= thresholds.thd_aare,
        trace=list(ev.trace),
        stop_reason=reason,
        restarts=restarts,
    )


def _step(simplex: Simplex, ev: _Evaluator) -> None:
    """One reflection / expansion / contraction / shrink transformation."""
    x, f = simplex.vertices, simplex.values
    n = len(x) - 1
    centroid = x[:n].mean(axis=0)
    worst = x[n]

    xr = centroid + ALPHA * (centroid - worst)
    fr = ev(xr)
    if f[0] <= fr < f[n - 1]:
        x[n], f[n] = xr, fr
        return
    if fr < f[0]:
        xe = centroid + GAMMA * (xr - centroid)
        fe = ev(xe)
        if fe < fr:
            x[n], f[n] = xe, fe
        else:
            x[n], f[n] = xr, fr
        return
    if fr < f[n]:
        xc = centroid + RHO * (xr - centroid)
        fc = ev(xc)
        if fc <= fr:
            x[n], f[n] = xc, fc
            return
    else:
        xc = centroid + RHO * (worst - centroid)
        fc = ev(xc)
        if fc < f[n]:
            x[n], f[n] = xc, fc
            return
    for i in range(1, n + 1):
        x[i] = x[0] + SIGMA * (x[i] - x[0])
        f[i] = ev(x[i])


class LstmObjective:
    """Train on one series and score AARE on another.

    With ``validation_points`` > 0 the last that many training points are held
    out and scored instead of the test series.
    """

    def __init__(self, train, test, cfg=None, validation_points: int = 0):
        from .lstm import TrainConfig

        self.cfg = cfg or TrainConfig()
        if validation_points:
            self.train_series = train.slice(0, len(train) - validation_points)
            self.score_series = train.slice(len(train) - validation_points)
        else:
            self.train_series = train
            self.score_series = test

    def __call__(self, hyper: HyperParams):
        from .lstm import evaluate, train

        model = train(self.train_series, hyper, self.cfg)
        return evaluate(model, self.score_series).aare, model


def customize(train, test, initial: HyperParams = DEFAULT_HYPERPARAMS,
              thresholds: Thresholds = Thresholds(), budget: int = DEFAULT_BUDGET,
              cfg=None, free: Iterable[str] | None = None,
              validation_points: int = 0, **kwargs) -> TuneOutcome:
    """Tune and train an LSTM for one detector."""
    objective = LstmObjective(train, test, cfg, validation_points)
    seed = objective.cfg.seed
    return tune(objective, initial, thresholds, budget, free=free, seed=seed, **kwargs)


TRACE_COLUMNS = ("eval_index", "r_learn", "n_layer", "n_unit", "ep", "aare", "wall_time_ms")


def write_trace_csv(trace: Sequence[TraceEntry], dest) -> None:
    """Write a tuning trace as CSV to a path or an open text file."""
    if hasattr(dest, "write"):
        _write_trace(trace, dest)
        return
    with open(dest, "w", newline="") as fh:
        _write_trace(trace, fh)


def _write_trace(trace, fh):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for e in trace:
        h = e.hyper
        writer.writerow([e.index, f"{h.r_learn:.2f}", h.n_layer, h.n_unit, h.ep,
                         repr(e.aare), f"{e.wall_time_ms:.3f}"])


def read_trace_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        TraceEntry(int(r["eval_index"]),
                   HyperParams(float(r["r_learn"]), int(r["n_layer"]), int(r["n_unit"]), int(r["ep"])),
                   float(r["aare"]), float(r["wall_time_ms"]))
        for r in rows
    ]
