import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disttune.core import AXES, DEFAULT_HYPERPARAMS, HyperParams, SpeedSeries, snap_to_grid
from disttune.errors import BudgetTooSmall, NonFiniteLoss
from disttune.surrogate import SurrogateBowl, bench_tuner, random_center
from disttune.tuner import (
    default_setting,
    customize,
    initial_simplex,
    read_trace_csv,
    tune,
    write_trace_csv,
)


def vertices(simplex):
    return {snap_to_grid(v).as_tuple() for v in simplex.vertices}


def test_default_setting():
    assert default_setting().as_tuple() == (0.01, 1, 2, 100)


def test_initial_simplex_from_default():
    got = vertices(initial_simplex(DEFAULT_HYPERPARAMS))
    assert got == {(0.01, 1, 2, 100), (0.03, 1, 2, 100), (0.01, 2, 2, 100),
                   (0.01, 1, 6, 100), (0.01, 1, 2, 200)}


def test_initial_simplex_at_upper_corner():
    got = vertices(initial_simplex(HyperParams(0.2, 10, 40, 1000)))
    assert got == {(0.2, 10, 40, 1000), (0.19, 10, 40, 1000), (0.2, 9, 40, 1000),
                   (0.2, 10, 38, 1000), (0.2, 10, 40, 980)}


def test_initial_simplex_reduced_space():
    s = initial_simplex(HyperParams(0.01, 1, 10, 100), free=("r_learn", "ep"))
    assert s.vertices.shape == (3, 2)


def test_bowl_reaches_threshold():
    bowl = SurrogateBowl(HyperParams(0.05, 2, 10, 200))
    region = set(bowl.satisfying_points(0.05))
    assert HyperParams(0.05, 2, 10, 200) in region
    out = tune(bowl)
    assert out.satisfied and out.evaluations <= 60
    assert out.best_hyper in region


def test_immediate_exit():
    out = tune(lambda h: 0.01 if h == DEFAULT_HYPERPARAMS else 0.5)
    assert (out.evaluations, out.satisfied, out.stop_reason) == (1, True, "satisfied")


def test_unsatisfiable_objective():
    out = tune(lambda h: 0.5, budget=40)
    assert not out.satisfied
    assert out.evaluations <= 40
    assert out.best_aare == 0.5


def test_budget_too_small():
    with pytest.raises(BudgetTooSmall):
        tune(lambda h: 0.5, budget=4)


def test_divergence_scores_infinity():
    def objective(h):
        if h.r_learn > 0.02:
            raise NonFiniteLoss("diverged")
        return 0.2

    out = tune(objective, budget=30)
    assert any(e.aare == np.inf for e in out.trace)
    assert out.best_aare == 0.2


def test_fixed_axes_stay_fixed():
    start = HyperParams(0.01, 2, 10, 100)
    out = tune(SurrogateBowl(HyperParams(0.1, 5, 30, 500)), initial=start,
               free=("r_learn", "ep"), budget=50)
    assert all((e.hyper.n_layer, e.hyper.n_unit) == (2, 10) for e in out.trace)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_trace_properties(seed):
    rng = np.random.default_rng(seed)
    bowl = SurrogateBowl(random_center(rng), scale=float(rng.uniform(0.001, 0.02)))
    start = HyperParams.from_sequence([a.value_at(int(rng.integers(a.size))) for a in AXES])
    out = tune(bowl, initial=start, budget=int(rng.integers(5, 80)), seed=seed)
    hypers = [e.hyper for e in out.trace]
    assert hypers[0] == start
    assert len(set(hypers)) == len(hypers)
    assert all(snap_to_grid(h.as_tuple()) == h for h in hypers)
    running = np.minimum.accumulate([e.aare for e in out.trace])
    assert running[-1] == out.best_aare
    assert np.all(np.diff(running) <= 0)
    # the search stops at the first satisfying evaluation
    ok = [i for i, e in enumerate(out.trace) if e.aare <= 0.05]
    if ok:
        assert ok == [len(out.trace) - 1]


def test_bench_small():
    res = bench_tuner(instances=20)
    assert res.satisfied >= 18


def test_customize_constant_detector():
    s = SpeedSeries("C", [60.0] * 400)
    out = customize(s.slice(0, 300), s.slice(300))
    assert out.evaluations == 1 and out.satisfied
    assert out.best_model is not None


def test_trace_csv_round_trip(tmp_path):
    out = tune(SurrogateBowl(HyperParams(0.05, 2, 10, 200)))
    write_trace_csv(out.trace, tmp_path / "t.csv")
    back = read_trace_csv(tmp_path / "t.csv")
    assert [e.hyper for e in back] == [e.hyper for e in out.trace]
    assert [e.aare for e in back] == [e.aare for e in out.trace]
