import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disttune import lstm
from disttune.core import DEFAULT_HYPERPARAMS, HyperParams, SpeedSeries
from disttune.errors import DeserializeError, NonFiniteLoss, SeriesTooShort, WrongHistoryLength
from disttune.lstm import TrainConfig
from disttune.metrics import accuracy_report


@pytest.fixture(scope="module")
def constant_model():
    return lstm.train(SpeedSeries("C", [60.0] * 200), DEFAULT_HYPERPARAMS)


def sine_days(days, detector="S"):
    t = np.arange(days * 288)
    return SpeedSeries(detector, 55.0 + 15.0 * np.sin(2 * np.pi * t / 288))


def test_constant_series_is_learned(constant_model):
    assert lstm.evaluate(constant_model, [60.0] * 100).aare <= 0.01
    assert 59.4 <= lstm.predict_one_step(constant_model, [60.0] * 12) <= 60.6


def test_history_length_checked(constant_model):
    with pytest.raises(WrongHistoryLength):
        lstm.predict_one_step(constant_model, [60.0] * 11)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(1.0, 120.0), min_size=12, max_size=12))
def test_prediction_is_finite(constant_model, history):
    assert np.isfinite(lstm.predict_one_step(constant_model, history))


def test_training_is_deterministic():
    s = sine_days(1)
    a = lstm.serialize(lstm.train(s, DEFAULT_HYPERPARAMS))
    b = lstm.serialize(lstm.train(s, DEFAULT_HYPERPARAMS))
    assert a == b


def test_sine_wave_with_tuned_setting():
    s = sine_days(6)
    model = lstm.train(s.slice(0, 1440), HyperParams(0.05, 1, 10, 180))
    assert lstm.evaluate(model, s.slice(1440)).aare <= 0.05


def test_evaluate_matches_metrics(constant_model):
    test = 60.0 + np.sin(np.arange(50))
    pair = lstm.forecast(constant_model, test)
    assert len(pair) == 50 - 12
    assert lstm.evaluate(constant_model, test) == accuracy_report(pair.actual, pair.predicted)


def test_too_short():
    with pytest.raises(SeriesTooShort):
        lstm.train([60.0] * 13, DEFAULT_HYPERPARAMS)


@pytest.mark.parametrize("hyper, lookback", [
    (HyperParams(0.01, 1, 2, 100), 4),
    (HyperParams(0.01, 2, 4, 100), 6),
    (HyperParams(0.01, 3, 2, 100), 5),
])
def test_gradient_matches_finite_differences(hyper, lookback):
    assert lstm.gradient_check(hyper, TrainConfig(lookback=lookback)) < 1e-4


def test_zero_network_gradient():
    hyper = HyperParams(0.01, 1, 2, 100)
    n = lstm._kernels.param_count(1, 2)
    zeros = np.zeros(n)
    _, grad = lstm.loss_and_grad(zeros, hyper, np.zeros(4), 0.5)
    h = 1e-6
    bias = n - 1
    plus, minus = zeros.copy(), zeros.copy()
    plus[bias] += h
    minus[bias] -= h
    fd = (lstm.loss_only(plus, hyper, np.zeros(4), 0.5)
          - lstm.loss_only(minus, hyper, np.zeros(4), 0.5)) / (2 * h)
    assert abs(grad[bias] - fd) < 1e-8
    assert abs(grad[bias] - (0.0 - 0.5)) < 1e-12


def test_gate_activations_bounded():
    rng = np.random.default_rng(0)
    model = lstm.train(sine_days(1), HyperParams(0.05, 2, 4, 100))
    u = model.hyper.n_unit
    for _ in range(20):
        g = lstm.gate_activations(model, rng.uniform(5, 90, 12))
        assert np.all((g[..., :3 * u] > 0) & (g[..., :3 * u] < 1))
        assert np.all(np.abs(g[..., 3 * u:]) < 1)


def test_serialize_round_trip(tmp_path, constant_model):
    blob = lstm.serialize(constant_model)
    back = lstm.deserialize(blob)
    assert back == constant_model
    assert np.array_equal(back.params, constant_model.params)
    lstm.save_model(constant_model, tmp_path / "m.dtlm")
    assert lstm.load_model(tmp_path / "m.dtlm") == constant_model
    with pytest.raises(DeserializeError):
        lstm.deserialize(blob[:-3])
    with pytest.raises(DeserializeError):
        lstm.deserialize(b"XXXX" + blob[4:])


def test_divergence_is_reported():
    # a huge reference-relative jump with no clipping blows up the weights
    s = SpeedSeries("X", np.tile([1.0, 1e6], 40))
    with pytest.raises(NonFiniteLoss):
        lstm.train(s, HyperParams(0.2, 1, 40, 1000),
                   TrainConfig(grad_clip_norm=np.inf, reference_speed=1.0))
