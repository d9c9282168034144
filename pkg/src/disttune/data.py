"""Detector CSV ingestion, network manifests, train/test splits and the
synthetic traffic generator used in place of a real freeway feed.

CSV layout is one header line ``timestamp,speed_mph`` followed by rows such
as ``2017-10-16T04:00:00Z,64.2``. Rows must be in increasing time at the
declared interval. Up to ``MAX_GAP_POINTS`` consecutive missing points (a
skipped timestamp or a blank speed cell) are filled linearly and counted.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    DEFAULT_HYPERPARAMS,
    DEFAULT_INTERVAL_MINUTES,
    DEFAULT_REFERENCE_SPEED,
    EPOCH_START,
    HyperParams,
    SpeedSeries,
    normalize,
)
from .errors import GapTooLarge, ManifestError, NonPositiveSpeed, ParseError
from .metrics import aard

MAX_GAP_POINTS = 2
TIME_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
CSV_HEADER = ("timestamp", "speed_mph")


def points_per_day(interval_minutes: int = DEFAULT_INTERVAL_MINUTES) -> int:
    return 24 * 60 // interval_minutes


# ---------------------------------------------------------------- CSV files


def _parse_time(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts


def load_csv(path, detector: str | None = None, *,
             interval_minutes: int = DEFAULT_INTERVAL_MINUTES,
             time_column: str = CSV_HEADER[0],
             speed_column: str = CSV_HEADER[1]) -> SpeedSeries:
    """Read one detector file into a :class:`SpeedSeries`.

    ``time_column``/``speed_column`` map other exports onto the two fields
    we need; any extra columns are ignored.
    """
    path = Path(path)
    detector = detector or path.stem
    step = timedelta(minutes=interval_minutes)
    times: list = []
    speeds: list = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        try:
            ti, si = header.index(time_column), header.index(speed_column)
        except ValueError:
            raise ParseError(
                f"header must contain {time_column!r} and {speed_column!r}, got {header}", 1
            ) from None
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) <= max(ti, si):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            try:
                ts = _parse_time(row[ti])
            except ValueError:
                raise ParseError(f"bad timestamp {row[ti]!r}", line) from None
            cell = row[si].strip()
            if cell:
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"bad speed {cell!r}", line) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite speed {cell!r}", line)
                if v <= 0.0:
                    raise NonPositiveSpeed(f"{path.name} line {line}: speed {v} is not > 0")
            else:
                v = math.nan
            if times:
                delta = ts - times[-1][0]
                if delta <= timedelta(0):
                    raise ParseError("timestamps must strictly increase", line)
                k, rem = divmod(delta, step)
                if rem:
                    raise ParseError(f"timestamp off the {interval_minutes}-minute grid", line)
                for j in range(1, k):
                    times.append((times[-1][0] + step, line))
                    speeds.append(math.nan)
            times.append((ts, line))
            speeds.append(v)
    if not speeds:
        raise ParseError("no data rows", 2)
    values = np.array(speeds)
    filled = _fill_gaps(values, [ln for _, ln in times], path.name)
    return SpeedSeries(detector, values, interval_minutes, times[0][0], interpolated=filled)


def _fill_gaps(values: np.ndarray, lines: Sequence[int], name: str) -> int:
    """Linearly interpolate short NaN runs in place; return how many were filled."""
    missing = np.isnan(values)
    if not missing.any():
        return 0
    if missing[0] or missing[-1]:
        raise GapTooLarge(f"{name}: series cannot start or end with a missing value")
    idx = np.flatnonzero(missing)
    runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
    for run in runs:
        if run.size > MAX_GAP_POINTS:
            raise GapTooLarge(
                f"{name}: {run.size} consecutive missing points before line {lines[run[-1] + 1]}"
            )
    known = ~missing
    values[missing] = np.interp(idx, np.flatnonzero(known), values[known])
    return int(idx.size)


def write_csv(series: SpeedSeries, path) -> None:
    """Write a series in the CSV layout read by :func:`load_csv`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    step = timedelta(minutes=series.interval_minutes)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for i, v in enumerate(series.values):
            fh.write(f"{(series.start + i * step).strftime(TIME_FORMAT)},{float(v)!r}\n")


def split_train_test(series: SpeedSeries, train_days: int = 5, test_days: int = 1):
    """First ``train_days`` days for training, the remaining days for testing."""
    per_day = series.points_per_day
    if train_days < 1 or test_days < 1:
        raise ValueError("train_days and test_days must be >= 1")
    expected = (train_days + test_days) * per_day
    if len(series) != expected:
        raise ValueError(
            f"{series.detector}: expected {expected} points for a "
            f"{train_days}/{test_days} day split, got {len(series)}"
        )
    cut = train_days * per_day
    return series.slice(0, cut), series.slice(cut)


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class DetectorEntry:
    detector: str
    path: str
    order: int | None = None
    meta: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class NetworkManifest:
    network_name: str
    interval_minutes: int = DEFAULT_INTERVAL_MINUTES
    reference_speed: float = DEFAULT_REFERENCE_SPEED
    detectors: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "detectors", tuple(self.detectors))
        seen = set()
        for d in self.detectors:
            if d.detector in seen:
                raise ManifestError(f"duplicate detector id {d.detector!r}")
            seen.add(d.detector)
        if self.interval_minutes <= 0 or (24 * 60) % self.interval_minutes:
            raise ManifestError(f"interval {self.interval_minutes} must divide a day")
        if not self.reference_speed > 0:
            raise ManifestError("reference speed must be > 0")

    def ordered(self) -> list:
        """Entries in deployment order; entries without an index keep file order, last."""
        keyed = [(d.order is None, d.order or 0, i, d) for i, d in enumerate(self.detectors)]
        return [d for *_, d in sorted(keyed, key=lambda t: t[:3])]

    def ids(self) -> list:
        return [d.detector for d in self.ordered()]

    def to_dict(self) -> dict:
        return {
            "network_name": self.network_name,
            "interval_minutes": self.interval_minutes,
            "reference_speed": self.reference_speed,
            "detectors": [
                {"id": d.detector, "path": d.path, "order": d.order, **({"meta": d.meta} if d.meta else {})}
                for d in self.detectors
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkManifest":
        try:
            entries = [
                DetectorEntry(str(d["id"]), str(d["path"]), d.get("order"), dict(d.get("meta", {})))
                for d in data["detectors"]
            ]
            return cls(
                str(data["network_name"]),
                int(data.get("interval_minutes", DEFAULT_INTERVAL_MINUTES)),
                float(data.get("reference_speed", DEFAULT_REFERENCE_SPEED)),
                entries,
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ManifestError):
                raise
            raise ManifestError(f"malformed manifest: {exc}") from None

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def load_series(self, data_dir) -> dict:
        """Load every detector file (paths relative to ``data_dir``), in deployment order."""
        out = {}
        for d in self.ordered():
            s = load_csv(Path(data_dir) / d.path, d.detector, interval_minutes=self.interval_minutes)
            out[d.detector] = s
        return out


def load_manifest(path) -> NetworkManifest:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None
    return NetworkManifest.from_dict(data)


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class DailyProfile:
    """Working-day speed shape: piecewise linear in (hour, fraction of free flow)."""

    free_flow: float
    knots: tuple

    def render(self, per_day: int = 288) -> np.ndarray:
        hours = np.arange(per_day) * 24.0 / per_day
        h = [0.0] + [k[0] for k in self.knots] + [24.0]
        f = [1.0] + [k[1] for k in self.knots] + [1.0]
        return self.free_flow * np.interp(hours, h, f)


def random_profile(rng: np.random.Generator, free_flow: float) -> DailyProfile:
    """Free-flow night, a morning drop with recovery, and a milder evening dip."""
    am = rng.uniform(6.0, 7.0)
    am_depth = rng.uniform(0.45, 0.65)
    am_len = rng.uniform(1.0, 2.0)
    pm = rng.uniform(15.5, 16.5)
    pm_depth = rng.uniform(0.65, 0.85)
    pm_len = rng.uniform(1.0, 2.0)
    knots = (
        (am, 1.0),
        (am + 0.75, am_depth),
        (am + 0.75 + am_len, am_depth + 0.05),
        (am + 1.5 + am_len, 0.95),
        (pm, 0.95),
        (pm + 0.75, pm_depth),
        (pm + 0.75 + pm_len, pm_depth),
        (pm + 1.75 + pm_len, 1.0),
    )
    return DailyProfile(float(free_flow), tuple((round(a, 4), round(b, 4)) for a, b in knots))


# Free-flow levels of successive base patterns shrink by this ratio, which
# keeps every pair of base patterns well apart under AARD.
LEVEL_RATIO = 1.3
TOP_LEVEL = 68.0


@dataclass(frozen=True)
class SyntheticSpec:
    n_base_patterns: int = 4
    detectors_per_pattern: int = 5
    noise_std: float = 0.02  # fraction of the pattern's mean speed
    days: int = 6
    seed: int = 0
    interval_minutes: int = DEFAULT_INTERVAL_MINUTES
    train_days: int = 5
    thd_aard: float = 0.1
    reference_speed: float = DEFAULT_REFERENCE_SPEED
    max_attempts: int = 50
    network_name: str = "synthetic"

    def __post_init__(self):
        if self.n_base_patterns < 1 or self.detectors_per_pattern < 1:
            raise ValueError("need at least one pattern and one detector per pattern")
        if self.days < 1 or not (0 < self.train_days <= self.days):
            raise ValueError("train_days must lie in [1, days]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def n_detectors(self) -> int:
        return self.n_base_patterns * self.detectors_per_pattern


@dataclass
class SyntheticNetwork:
    spec: SyntheticSpec
    profiles: list
    labels: dict  # detector -> base pattern index
    series: dict  # detector -> SpeedSeries, in deployment order

    def ids(self) -> list:
        return list(self.series)

    def manifest(self) -> NetworkManifest:
        entries = [
            DetectorEntry(d, f"detectors/{d}.csv", i, {"pattern": self.labels[d]})
            for i, d in enumerate(self.series)
        ]
        return NetworkManifest(self.spec.network_name, self.spec.interval_minutes,
                               self.spec.reference_speed, entries)


def detector_name(i: int) -> str:
    return f"D{i:03d}"


def _noisy_days(rng, profile: DailyProfile, days: int, per_day: int, noise_std: float,
                scale: np.ndarray | None = None) -> np.ndarray:
    base = np.tile(profile.render(per_day), days)
    if scale is not None:
        base = base * np.repeat(scale, per_day)
    noise = rng.normal(0.0, noise_std * float(base.mean()), base.size) if noise_std else 0.0
    return np.round(np.maximum(base + noise, 1.0), 2)


def aard_matrix(patterns: Sequence) -> np.ndarray:
    """Exhaustive pairwise AARD; entry (i, j) uses pattern i as the candidate."""
    n = len(patterns)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                out[i, j] = aard(patterns[i], patterns[j])
    return out


def oracle_confirms(series: Sequence[np.ndarray], labels: Sequence[int], thd_aard: float,
                    base: Sequence[np.ndarray] | None = None) -> bool:
    """True when clusters are tight (< thd/2) and distinct patterns are far apart (> 2 thd).

    ``series`` are normalized training windows. Separation is checked between
    base patterns when given, otherwise between every cross-cluster pair.
    """
    m = aard_matrix(series)
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    if same.any() and m[same].max() >= thd_aard / 2:
        return False
    if base is not None and len(base) > 1:
        b = aard_matrix(base)
        off = ~np.eye(len(base), dtype=bool)
        return bool(b[off].min() > 2 * thd_aard)
    cross = labels[:, None] != labels[None, :]
    return not cross.any() or bool(m[cross].min() > 2 * thd_aard)


def synthesize(spec: SyntheticSpec) -> SyntheticNetwork:
    """Build the network in memory, re-sampling until the AARD oracle agrees."""
    per_day = points_per_day(spec.interval_minutes)
    n_train = spec.train_days * per_day
    for attempt in range(spec.max_attempts):
        rng = np.random.default_rng([spec.seed, attempt])
        profiles = [
            random_profile(rng, TOP_LEVEL / LEVEL_RATIO ** k) for k in range(spec.n_base_patterns)
        ]
        labels_list = np.repeat(np.arange(spec.n_base_patterns), spec.detectors_per_pattern)
        labels_list = labels_list[rng.permutation(labels_list.size)]
        labels, series = {}, {}
        for i, k in enumerate(labels_list):
            d = detector_name(i)
            values = _noisy_days(rng, profiles[k], spec.days, per_day, spec.noise_std)
            labels[d] = int(k)
            series[d] = SpeedSeries(d, values, spec.interval_minutes, EPOCH_START)
        windows = [normalize(s.values[:n_train], spec.reference_speed).values for s in series.values()]
        base = [normalize(np.tile(p.render(per_day), spec.train_days), spec.reference_speed).values
                for p in profiles]
        if oracle_confirms(windows, list(labels.values()), spec.thd_aard, base):
            return SyntheticNetwork(spec, profiles, labels, series)
    raise RuntimeError(f"no network passing the AARD oracle after {spec.max_attempts} attempts")


def generate_synthetic(spec: SyntheticSpec, out_dir) -> tuple:
    """Write the network as CSVs plus ``manifest.json`` under ``out_dir``."""
    net = synthesize(spec)
    out_dir = Path(out_dir)
    manifest = net.manifest()
    for entry in manifest.detectors:
        write_csv(net.series[entry.detector], out_dir / entry.path)
    manifest.save(out_dir / "manifest.json")
    return manifest, net


def live_feed(net: SyntheticNetwork, flips: dict | None = None, days: int | None = None,
              feed_index: int = 1) -> dict:
    """Continue every detector's stream for ``days`` more days.

    ``flips`` maps a detector to the base pattern it switches to; the other
    detectors keep their own pattern with fresh noise.
    """
    spec = net.spec
    flips = flips or {}
    days = days or spec.days
    per_day = points_per_day(spec.interval_minutes)
    rng = np.random.default_rng([spec.seed, 10_000 + feed_index])
    out = {}
    for d, s in net.series.items():
        k = flips.get(d, net.labels[d])
        values = _noisy_days(rng, net.profiles[k], days, per_day, spec.noise_std)
        start = s.start + timedelta(minutes=spec.interval_minutes * (len(s) + (feed_index - 1) * days * per_day))
        out[d] = SpeedSeries(d, values, spec.interval_minutes, start)
    return out


def drift_target(net: SyntheticNetwork, k: int) -> int:
    """Pattern a detector of pattern ``k`` should flip to when staging drift.

    Flipping up to the fastest other pattern forces the old model to
    extrapolate beyond the speeds it was trained on, which reliably pushes
    its error past the tracking threshold. Flipping down does not.
    """
    others = [j for j in range(len(net.profiles)) if j != k]
    if not others:
        raise ValueError("drift needs at least two base patterns")
    return max(others, key=lambda j: net.profiles[j].free_flow)


def drift_plan(net: SyntheticNetwork, n: int) -> dict:
    """Pick ``n`` detectors to drift and their targets.

    Detectors of the slowest patterns go first (deployment order within a
    pattern) since their jump to the fastest pattern is the largest.
    """
    top = max(range(len(net.profiles)), key=lambda j: net.profiles[j].free_flow)
    order = {d: i for i, d in enumerate(net.series)}
    candidates = [d for d in net.series if net.labels[d] != top]
    candidates.sort(key=lambda d: (net.profiles[net.labels[d]].free_flow, order[d]))
    if len(candidates) < n:
        raise ValueError(f"only {len(candidates)} detectors can be drifted")
    return {d: drift_target(net, net.labels[d]) for d in candidates[:n]}


# ---------------------------------------------------------------- window study

WORKING_DAYS_PER_WEEK = 5


def drifting_series(weeks: int = 12, drift_per_week: float = 0.01, *, noise_std: float = 0.02,
                    seed: int = 0, detector: str = "W000",
                    interval_minutes: int = DEFAULT_INTERVAL_MINUTES) -> SpeedSeries:
    """``weeks`` working weeks plus one test day of a slowly drifting detector.

    Each week the shape moves ``drift_per_week`` of the way from a starting
    profile to a different one, so older weeks look less like the test day.
    """
    per_day = points_per_day(interval_minutes)
    rng = np.random.default_rng([seed, 20_000])
    src = random_profile(rng, TOP_LEVEL)
    dst = random_profile(rng, TOP_LEVEL / LEVEL_RATIO)
    a, b = src.render(per_day), dst.render(per_day)
    days = weeks * WORKING_DAYS_PER_WEEK + 1
    chunks = []
    for day in range(days):
        # the test day continues the trend of the last training week
        w = min(day // WORKING_DAYS_PER_WEEK, weeks)
        mix = min(1.0, drift_per_week * w)
        base = (1.0 - mix) * a + mix * b
        noise = rng.normal(0.0, noise_std * float(base.mean()), per_day) if noise_std else 0.0
        chunks.append(np.round(np.maximum(base + noise, 1.0), 2))
    return SpeedSeries(detector, np.concatenate(chunks), interval_minutes, EPOCH_START)


@dataclass(frozen=True)
class WindowRow:
    weeks: int
    train_points: int
    train_time_s: float
    aare: float
    aae: float
    rmse: float


def window_study(series: SpeedSeries, lengths: Iterable[int] = (1, 4, 8, 12),
                 hyper: HyperParams = DEFAULT_HYPERPARAMS, cfg=None) -> list:
    """Train one model per training-window length and score it on the last day.

    The training window of ``L`` weeks is the ``5 L`` working days right
    before the final (test) day.
    """
    from .lstm import TrainConfig, evaluate, train

    cfg = cfg or TrainConfig()
    per_day = series.points_per_day
    test = series.slice(len(series) - per_day)
    rows = []
    for weeks in sorted(lengths):
        n = weeks * WORKING_DAYS_PER_WEEK * per_day
        if n + per_day > len(series):
            raise ValueError(f"series too short for a {weeks}-week window")
        window = series.slice(len(series) - per_day - n, len(series) - per_day)
        t0 = time.perf_counter()
        model = train(window, hyper, cfg)
        elapsed = time.perf_counter() - t0
        rep = evaluate(model, test)
        rows.append(WindowRow(weeks, n, elapsed, rep.aare, rep.aae, rep.rmse))
    return rows


def write_rows_csv(rows: Sequence, path, columns: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([getattr(r, c) if not isinstance(r, dict) else r[c] for c in columns])

