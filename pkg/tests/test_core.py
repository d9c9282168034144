import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from disttune.core import (
    AXES,
    DEFAULT_HYPERPARAMS,
    HyperParams,
    SpeedSeries,
    Thresholds,
    normalize,
    snap_to_grid,
)
from disttune.errors import NonFiniteInput, NonPositiveReference, NonPositiveSpeed, OffGrid

speeds = st.lists(st.floats(0.5, 120.0), min_size=1, max_size=50)
reals = st.floats(-1e4, 1e4, allow_nan=False)


def test_normalize_examples():
    assert normalize([70.0, 35.0], 70.0).values.tolist() == [1.0, 0.5]
    got = normalize([60.2, 61.0, 58.7], 70.0).values
    np.testing.assert_allclose(got, [60.2 / 70, 61.0 / 70, 58.7 / 70], rtol=0, atol=1e-15)
    assert got[0] == pytest.approx(0.86)


def test_normalize_rejects_bad_input():
    with pytest.raises(NonPositiveSpeed):
        normalize([60.0, 0.0])
    with pytest.raises(NonPositiveReference):
        normalize([60.0], 0.0)


@given(speeds, st.floats(0.01, 100.0))
def test_normalize_is_linear(values, k):
    a = normalize(np.array(values) * k).values
    b = k * normalize(values).values
    np.testing.assert_allclose(a, b, rtol=1e-14)


@given(speeds)
def test_normalize_round_trip(values):
    back = normalize(values, 70.0).values * 70.0
    assert np.all(np.abs(back - values) <= np.spacing(np.array(values)))


@pytest.mark.parametrize("raw, expected", [
    ((0.013, 2.4, 7.1, 215.0), (0.01, 2, 8, 220)),
    ((0.5, 99, -3, 50), (0.2, 10, 2, 100)),
    ((0.015, 1.5, 5.0, 110.0), (0.02, 2, 6, 120)),
])
def test_snap_examples(raw, expected):
    assert snap_to_grid(raw).as_tuple() == expected


@given(st.tuples(reals, reals, reals, reals))
def test_snap_idempotent_and_valid(raw):
    h = snap_to_grid(raw)
    assert snap_to_grid(h.as_tuple()) == h
    # re-validates the invariants
    assert HyperParams(*h.as_tuple()) == h


def test_snap_rejects_nan():
    with pytest.raises(NonFiniteInput):
        snap_to_grid((math.nan, 1, 2, 100))


def test_hyperparams_validation():
    assert DEFAULT_HYPERPARAMS.as_tuple() == (0.01, 1, 2, 100)
    with pytest.raises(OffGrid):
        HyperParams(0.01, 1, 3, 100)
    with pytest.raises(OffGrid):
        HyperParams(0.3, 1, 2, 100)
    assert [a.size for a in AXES] == [20, 10, 20, 46]


def test_thresholds_bounds():
    assert Thresholds() == Thresholds(0.05, 0.1)
    with pytest.raises(ValueError):
        Thresholds(thd_aare=0.0)


def test_speed_series_validation():
    s = SpeedSeries("D1", [60.0, 61.0, 62.0])
    assert len(s) == 3 and s.points_per_day == 288
    assert not s.values.flags.writeable
    assert s.slice(1).values.tolist() == [61.0, 62.0]
    with pytest.raises(NonPositiveSpeed):
        SpeedSeries("D1", [60.0, -1.0])
    with pytest.raises(NonFiniteInput):
        SpeedSeries("D1", [60.0, math.inf])
