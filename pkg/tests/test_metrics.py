import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from disttune.errors import EmptyInput, LengthMismatch, NonPositiveActual
from disttune.metrics import AccuracyReport, aae, aard, aare, average_reports, rmse

pos = st.floats(1.0, 100.0)


@st.composite
def pairs(draw):
    n = draw(st.integers(1, 40))
    a = draw(st.lists(pos, min_size=n, max_size=n))
    p = draw(st.lists(st.floats(0.0, 120.0), min_size=n, max_size=n))
    return np.array(a), np.array(p)


def test_hand_examples():
    assert aare([60, 60], [60, 60]) == 0.0
    assert aare([50, 100], [45, 110]) == pytest.approx(0.10, abs=1e-15)
    assert aare([60], [63]) == pytest.approx(0.05, abs=1e-15)
    assert aae([50, 100], [45, 110]) == 7.5
    assert aae([0], [5]) == 5.0
    assert rmse([50, 100], [45, 110]) == pytest.approx(math.sqrt(62.5), abs=1e-12)
    assert rmse([10, 20, 30], [13, 23, 33]) == pytest.approx(3.0)
    assert aard([0.5, 1.0], [0.55, 0.9]) == pytest.approx(0.10, abs=1e-15)


def test_errors():
    with pytest.raises(LengthMismatch):
        aard([1, 2, 3], [1, 2, 3, 4])
    with pytest.raises(EmptyInput):
        aae([], [])
    with pytest.raises(NonPositiveActual):
        aare([0.0], [1.0])


@given(pairs())
def test_rmse_at_least_aae(ap):
    a, p = ap
    assert rmse(a, p) >= aae(a, p) - 1e-12


@given(pairs())
def test_zero_iff_equal(ap):
    a, p = ap
    assert aare(a, a) == aae(a, a) == rmse(a, a) == 0.0
    if not np.array_equal(a, p):
        assert aare(a, p) > 0 and aae(a, p) > 0 and rmse(a, p) > 0


@given(pairs(), st.floats(0.01, 10.0))
def test_aard_scale_invariant(ap, k):
    a, b = ap
    assume(np.all(b > 0))
    assert aard(a * k, b * k) == pytest.approx(aard(a, b), rel=1e-12, abs=1e-15)


def test_aard_asymmetric_witness():
    a, b = [0.5, 1.0], [1.0, 1.0]
    assert aard(a, b) == 0.5
    assert aard(b, a) == 0.25
    assert aard(a, a) == aard(b, b) == 0.0


def test_average_reports():
    r = AccuracyReport(0.02, 1.0, 2.0, 288)
    avg = average_reports([r])
    assert (avg.aare, avg.aare_std, avg.count) == (0.02, 0.0, 1)
    two = average_reports([AccuracyReport(0.01, 1, 1, 1), AccuracyReport(0.03, 1, 1, 1)])
    assert two.aare == pytest.approx(0.02)


def test_average_reports_110_against_loop():
    rng = np.random.default_rng(3)
    reports = [AccuracyReport(*rng.uniform(0.01, 3.0, 3), 288) for _ in range(110)]
    avg = average_reports(reports)
    for name in ("aare", "aae", "rmse"):
        xs = [getattr(r, name) for r in reports]
        mean = sum(xs) / len(xs)
        std = math.sqrt(sum((x - mean) ** 2 for x in xs) / (len(xs) - 1))
        assert abs(getattr(avg, name) - mean) < 1e-12
        assert abs(getattr(avg, name + "_std") - std) < 1e-12
