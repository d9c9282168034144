from datetime import timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disttune.core import EPOCH_START, SpeedSeries, normalize
from disttune.data import (
    TIME_FORMAT,
    NetworkManifest,
    DetectorEntry,
    SyntheticSpec,
    aard_matrix,
    drift_plan,
    drifting_series,
    generate_synthetic,
    live_feed,
    load_csv,
    load_manifest,
    oracle_confirms,
    split_train_test,
    synthesize,
    window_study,
    write_csv,
)
from disttune.errors import GapTooLarge, ManifestError, NonPositiveSpeed, ParseError


def write_rows(path, rows, header="timestamp,speed_mph"):
    path.write_text(header + "\n" + "".join(f"{t},{v}\n" for t, v in rows))
    return path


def stamp(i):
    return (EPOCH_START + timedelta(minutes=5 * i)).strftime(TIME_FORMAT)


def test_six_day_file(tmp_path):
    p = write_rows(tmp_path / "D1.csv", [(stamp(i), 60 + i % 7) for i in range(1728)])
    s = load_csv(p)
    assert len(s) == 1728 and s.detector == "D1" and s.interpolated == 0


def test_ten_minute_gap_is_interpolated(tmp_path):
    rows = [(stamp(i), 50.0 + i) for i in range(10) if i != 4]
    s = load_csv(write_rows(tmp_path / "g.csv", rows))
    assert len(s) == 10 and s.interpolated == 1
    assert s.values[4] == pytest.approx(54.0)


def test_blank_speed_is_a_gap(tmp_path):
    rows = [(stamp(i), "" if i in (3, 4) else 60.0) for i in range(8)]
    assert load_csv(write_rows(tmp_path / "b.csv", rows)).interpolated == 2


def test_long_gap_rejected(tmp_path):
    rows = [(stamp(i), 60.0) for i in range(10) if i not in (3, 4, 5)]
    with pytest.raises(GapTooLarge):
        load_csv(write_rows(tmp_path / "g.csv", rows))


def test_bad_speed_reports_line(tmp_path):
    rows = [(stamp(0), 60.0), ("2017-10-16T04:00:00Z", "abc")]
    with pytest.raises(ParseError) as info:
        load_csv(write_rows(tmp_path / "p.csv", rows))
    assert info.value.line == 3


def test_other_parse_errors(tmp_path):
    with pytest.raises(ParseError):
        load_csv(write_rows(tmp_path / "h.csv", [(stamp(0), 60)], header="time,speed"))
    with pytest.raises(ParseError):
        load_csv(write_rows(tmp_path / "o.csv", [(stamp(1), 60), (stamp(0), 60)]))
    with pytest.raises(ParseError):
        load_csv(write_rows(tmp_path / "x.csv", [(stamp(0), 60), ("2017-10-16T00:07:00Z", 60)]))
    with pytest.raises(NonPositiveSpeed):
        load_csv(write_rows(tmp_path / "z.csv", [(stamp(0), 60), (stamp(1), 0)]))


def test_column_mapping(tmp_path):
    p = tmp_path / "pems.csv"
    p.write_text("Speed,Flow,Time\n61.5,10,2017-10-16T00:00:00Z\n62.5,11,2017-10-16T00:05:00Z\n")
    s = load_csv(p, "X", time_column="Time", speed_column="Speed")
    assert s.values.tolist() == [61.5, 62.5]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(1.0, 99.0), min_size=3, max_size=60), st.data())
def test_load_split_concat_round_trip(tmp_path_factory, values, data):
    s = SpeedSeries("R", np.round(values, 3))
    p = tmp_path_factory.mktemp("rt") / "R.csv"
    write_csv(s, p)
    back = load_csv(p)
    assert back == s
    cut = data.draw(st.integers(1, len(s) - 1))
    joined = np.concatenate([back.slice(0, cut).values, back.slice(cut).values])
    assert np.array_equal(joined, s.values)


def test_split_examples():
    s = SpeedSeries("D", np.full(1728, 60.0))
    assert tuple(map(len, split_train_test(s, 5, 1))) == (1440, 288)
    assert tuple(map(len, split_train_test(s, 4, 2))) == (1152, 576)
    with pytest.raises(ValueError):
        split_train_test(s.slice(0, 1000))


def test_manifest(tmp_path):
    m = NetworkManifest("n", 5, 70.0, [DetectorEntry("B", "b.csv", 1), DetectorEntry("A", "a.csv", 0)])
    assert m.ids() == ["A", "B"] and [e.detector for e in m.ordered()] == ["A", "B"]
    m.save(tmp_path / "m.json")
    assert load_manifest(tmp_path / "m.json").to_dict() == m.to_dict()
    with pytest.raises(ManifestError):
        NetworkManifest("n", 5, 70.0, [DetectorEntry("A", "a.csv"), DetectorEntry("A", "b.csv")])


def test_synthetic_network(tmp_path):
    spec = SyntheticSpec()
    manifest, net = generate_synthetic(spec, tmp_path / "a")
    assert len(manifest.detectors) == 20
    series = manifest.load_series(tmp_path / "a")
    assert all(len(s) == 1728 for s in series.values())
    labels = [net.labels[d] for d in manifest.ids()]
    windows = [normalize(s.values[:1440]).values for s in series.values()]
    assert oracle_confirms(windows, labels, 0.1)
    assert sorted(np.bincount(labels)) == [5, 5, 5, 5]

    generate_synthetic(spec, tmp_path / "b")
    for entry in manifest.detectors:
        assert (tmp_path / "a" / entry.path).read_bytes() == (tmp_path / "b" / entry.path).read_bytes()
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_noise_free_single_pattern():
    net = synthesize(SyntheticSpec(n_base_patterns=1, detectors_per_pattern=3, noise_std=0.0))
    m = aard_matrix([normalize(s.values).values for s in net.series.values()])
    assert np.all(m == 0.0)


def test_drift_plan_and_feed():
    net = synthesize(SyntheticSpec())
    plan = drift_plan(net, 3)
    assert len(plan) == 3
    assert all(net.labels[d] != k for d, k in plan.items())
    feed = live_feed(net, plan)
    calm = live_feed(net)
    assert set(feed) == set(net.series)
    assert feed[next(iter(plan))].start == net.series[next(iter(plan))].start + timedelta(days=6)
    for d in net.series:
        same = np.array_equal(feed[d].values, calm[d].values)
        assert same == (d not in plan)


def test_window_study_runs_and_orders_time():
    s = drifting_series(weeks=2, noise_std=0.0)
    assert len(s) == (2 * 5 + 1) * 288
    rows = window_study(s, lengths=(2, 1))
    assert [r.weeks for r in rows] == [1, 2]
    assert rows[0].train_points == 1440 and rows[1].train_points == 2880
    assert all(np.isfinite(r.aare) for r in rows)
