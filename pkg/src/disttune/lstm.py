"""Stacked LSTM one-step speed forecaster.

Training frames a normalized series as sliding windows of ``lookback`` values
mapped to the next value, and runs plain SGD with one update per window for
``hyper.ep`` passes. Every pass visits the windows in the same order, a
permutation fixed by the seed; walking them in time order leaves the weights
fitted to the tail of the series. Everything is seeded so that identical
inputs give bit-identical weights.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import DEFAULT_REFERENCE_SPEED, HyperParams, SpeedSeries
from .errors import (
    DeserializeError,
    NonFiniteLoss,
    SeriesTooShort,
    WrongHistoryLength,
)
from .metrics import AccuracyReport, ForecastPair, accuracy_report

MAGIC = b"DTLM"
FORMAT_VERSION = 1
INIT_SCALE = 0.08
FORGET_BIAS = 1.0


@dataclass(frozen=True)
class TrainConfig:
    lookback: int = 12
    seed: int = 0
    grad_clip_norm: float = 5.0
    reference_speed: float = DEFAULT_REFERENCE_SPEED

    def __post_init__(self):
        if self.lookback < 1:
            raise ValueError("lookback must be >= 1")
        if not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be positive")
        if not self.reference_speed > 0:
            raise ValueError("reference_speed must be positive")


@dataclass(frozen=True, eq=False)
class LstmModel:
    hyper: HyperParams
    params: np.ndarray
    lookback: int
    reference_speed: float
    seed: int
    train_fingerprint: bytes

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float64)
        expected = _kernels.param_count(self.hyper.n_layer, self.hyper.n_unit)
        if params.shape != (expected,):
            raise ValueError(f"expected {expected} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("model weights must be finite")
        if len(self.train_fingerprint) != 32:
            raise ValueError("train_fingerprint must be 32 bytes")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @property
    def offsets(self) -> np.ndarray:
        return _kernels.layer_offsets(self.hyper.n_layer, self.hyper.n_unit)

    def tensors(self) -> list[np.ndarray]:
        """Weights in declared order: per layer (W, b), then head (w, b)."""
        u = self.hyper.n_unit
        out = []
        offsets = self.offsets
        for layer in range(self.hyper.n_layer):
            d = 1 if layer == 0 else u
            w0 = offsets[layer]
            w = self.params[w0:w0 + (d + u) * 4 * u].reshape(d + u, 4 * u)
            b = self.params[w0 + (d + u) * 4 * u:offsets[layer + 1]]
            out.extend([w, b])
        head = offsets[-1]
        out.append(self.params[head:head + u])
        out.append(self.params[head + u:head + u + 1])
        return out

    def content_hash(self) -> str:
        return hashlib.sha256(serialize(self)).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, LstmModel):
            return NotImplemented
        return serialize(self) == serialize(other)

    def __hash__(self):
        return hash(serialize(self))


def fingerprint(values) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(values, dtype="<f8").tobytes()).digest()


def derive_seed(detector: str, hyper: HyperParams, seed: int) -> int:
    """64-bit initialization seed from detector id, hyperparameters and base seed."""
    text = f"{detector}|{hyper.r_learn:.2f}|{hyper.n_layer}|{hyper.n_unit}|{hyper.ep}|{seed}"
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def window_order(n_windows: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=seed ^ 0x5EED))
    return rng.permutation(n_windows).astype(np.int64)


def init_params(hyper: HyperParams, seed: int) -> np.ndarray:
    n = _kernels.param_count(hyper.n_layer, hyper.n_unit)
    rng = np.random.Generator(np.random.Philox(key=seed))
    theta = rng.uniform(-INIT_SCALE, INIT_SCALE, n)
    u = hyper.n_unit
    offsets = _kernels.layer_offsets(hyper.n_layer, u)
    for layer in range(hyper.n_layer):
        d = 1 if layer == 0 else u
        b0 = offsets[layer] + (d + u) * 4 * u
        theta[b0 + u:b0 + 2 * u] = FORGET_BIAS
    return theta


def train(series: SpeedSeries, hyper: HyperParams, cfg: TrainConfig = TrainConfig(),
          *, return_losses: bool = False):
    """Train a model on ``series`` under ``hyper``.

    Raises :class:`NonFiniteLoss` if training diverges.
    """
    values = np.asarray(getattr(series, "values", series), dtype=np.float64)
    if values.size < cfg.lookback + 2:
        raise SeriesTooShort(
            f"need at least {cfg.lookback + 2} points for lookback {cfg.lookback}, got {values.size}"
        )
    detector = getattr(series, "detector", "")
    seed = derive_seed(detector, hyper, cfg.seed)
    theta = init_params(hyper, seed)
    norm = np.ascontiguousarray(values / cfg.reference_speed)
    losses = np.full(hyper.ep, np.nan)
    done = _kernels.sgd_train(
        theta, _kernels.layer_offsets(hyper.n_layer, hyper.n_unit),
        hyper.n_layer, hyper.n_unit, norm, cfg.lookback,
        hyper.r_learn, hyper.ep, cfg.grad_clip_norm,
        window_order(norm.size - cfg.lookback, seed), losses,
    )
    if done < hyper.ep or not np.all(np.isfinite(theta)):
        raise NonFiniteLoss(f"training diverged in epoch {done + 1} under {hyper}", epoch=done)
    model = LstmModel(hyper, theta, cfg.lookback, cfg.reference_speed, seed, fingerprint(values))
    if return_losses:
        return model, losses
    return model


def predict_one_step(model: LstmModel, history) -> float:
    """Forecast the next speed (mph) from the last ``model.lookback`` speeds."""
    h = np.asarray(getattr(history, "values", history), dtype=np.float64)
    if h.ndim != 1 or h.size != model.lookback:
        raise WrongHistoryLength(f"history must hold {model.lookback} values, got {h.size}")
    window = np.ascontiguousarray(np.append(h, 0.0) / model.reference_speed)
    out = _kernels.predict_windows(
        model.params, model.offsets, model.hyper.n_layer, model.hyper.n_unit,
        window, model.lookback,
    )
    return float(out[0] * model.reference_speed)


def forecast(model: LstmModel, series) -> ForecastPair:
    """Teacher-forced one-step forecasts for every point after the first lookback."""
    values = np.asarray(getattr(series, "values", series), dtype=np.float64)
    if values.size <= model.lookback:
        raise SeriesTooShort(f"need more than {model.lookback} points, got {values.size}")
    pred = _kernels.predict_windows(
        model.params, model.offsets, model.hyper.n_layer, model.hyper.n_unit,
        np.ascontiguousarray(values / model.reference_speed), model.lookback,
    )
    return ForecastPair(values[model.lookback:], pred * model.reference_speed)


def evaluate(model: LstmModel, test) -> AccuracyReport:
    pair = forecast(model, test)
    return accuracy_report(pair.actual, pair.predicted)


def gate_activations(model: LstmModel, window) -> np.ndarray:
    """Gate outputs (n_layer, lookback, 4*n_unit) for one window of speeds."""
    x = np.ascontiguousarray(np.asarray(window, dtype=np.float64) / model.reference_speed)
    return _kernels.trace_gates(model.params, model.offsets, model.hyper.n_layer,
                                model.hyper.n_unit, x)


def loss_and_grad(params, hyper: HyperParams, window, target):
    """Half squared error of one normalized window and its BPTT gradient."""
    theta = np.ascontiguousarray(params, dtype=np.float64)
    grad = np.empty_like(theta)
    offsets = _kernels.layer_offsets(hyper.n_layer, hyper.n_unit)
    x = np.ascontiguousarray(window, dtype=np.float64)
    loss = _kernels.window_loss_grad(theta, offsets, hyper.n_layer, hyper.n_unit, x,
                                     float(target), grad)
    return loss, grad


def loss_only(params, hyper: HyperParams, window, target) -> float:
    offsets = _kernels.layer_offsets(hyper.n_layer, hyper.n_unit)
    return _kernels.window_loss(np.ascontiguousarray(params, dtype=np.float64), offsets,
                                hyper.n_layer, hyper.n_unit,
                                np.ascontiguousarray(window, dtype=np.float64), float(target))


def gradient_check(hyper: HyperParams, cfg: TrainConfig = TrainConfig(lookback=4), *,
                   h: float = 1e-5, params=None, window=None, target=None,
                   floor: float = 1e-8) -> float:
    """Max relative error between BPTT and central finite differences.

    Weights, window and target are random (seeded by ``cfg.seed``) unless
    given. Relative error is ``|g - fd| / max(|g|, |fd|, floor)``.
    """
    rng = np.random.default_rng(cfg.seed)
    n = _kernels.param_count(hyper.n_layer, hyper.n_unit)
    theta = rng.uniform(-0.5, 0.5, n) if params is None else np.array(params, dtype=np.float64)
    x = rng.uniform(0.3, 1.2, cfg.lookback) if window is None else np.asarray(window, dtype=np.float64)
    y = float(rng.uniform(0.3, 1.2)) if target is None else float(target)
    _, grad = loss_and_grad(theta, hyper, x, y)
    worst = 0.0
    for i in range(n):
        plus = theta.copy()
        minus = theta.copy()
        plus[i] += h
        minus[i] -= h
        fd = (loss_only(plus, hyper, x, y) - loss_only(minus, hyper, x, y)) / (2 * h)
        denom = max(abs(grad[i]), abs(fd), floor)
        worst = max(worst, abs(grad[i] - fd) / denom)
    return worst


# --- model file -----------------------------------------------------------

_HEADER = struct.Struct("<4sHdIIIIdQ32s")


def _tensor_shapes(hyper: HyperParams) -> list[tuple]:
    u = hyper.n_unit
    shapes = []
    for layer in range(hyper.n_layer):
        d = 1 if layer == 0 else u
        shapes += [(d + u, 4 * u), (4 * u,)]
    return shapes + [(u,), (1,)]


def serialize(model: LstmModel) -> bytes:
    hp = model.hyper
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, hp.r_learn, hp.n_layer, hp.n_unit, hp.ep,
                          model.lookback, model.reference_speed, model.seed,
                          model.train_fingerprint)]
    tensors = model.tensors()
    parts.append(struct.pack("<I", len(tensors)))
    for t in tensors:
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize(blob: bytes) -> LstmModel:
    blob = bytes(blob)
    if len(blob) < _HEADER.size:
        raise DeserializeError("truncated model header")
    (magic, version, r_learn, n_layer, n_unit, ep, lookback, ref, seed,
     fp) = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DeserializeError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DeserializeError(f"unsupported model format version {version}")
    try:
        hyper = HyperParams(r_learn, n_layer, n_unit, ep)
    except ValueError as exc:
        raise DeserializeError(f"invalid hyperparameters in header: {exc}") from None
    pos = _HEADER.size

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise DeserializeError("truncated model body")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    if count != 2 * n_layer + 2:
        raise DeserializeError(f"expected {2 * n_layer + 2} tensors, found {count}")
    chunks = []
    for expected in _tensor_shapes(hyper):
        (ndim,) = struct.unpack("<I", take(4))
        if ndim != len(expected):
            raise DeserializeError(f"tensor rank {ndim}, expected {len(expected)}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if shape != expected:
            raise DeserializeError(f"tensor shape {shape}, expected {expected}")
        size = int(np.prod(shape))
        chunks.append(np.frombuffer(take(8 * size), dtype="<f8"))
    if pos != len(blob):
        raise DeserializeError(f"{len(blob) - pos} trailing bytes")
    params = np.concatenate(chunks).astype(np.float64)
    try:
        return LstmModel(hyper, params, lookback, ref, seed, fp)
    except ValueError as exc:
        raise DeserializeError(str(exc)) from None


def save_model(model: LstmModel, path) -> None:
    from pathlib import Path

    Path(path).write_bytes(serialize(model))


def load_model(path) -> LstmModel:
    from pathlib import Path

    return deserialize(Path(path).read_bytes())
