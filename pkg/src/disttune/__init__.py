"""Auto-tuning and sharing of LSTM speed predictors across a detector network."""

from .coordinator import Assignment, Coordinator, Registry, registry_report
from .core import (
    AXES,
    DEFAULT_HYPERPARAMS,
    HyperParams,
    NormalizedSeries,
    SpeedSeries,
    Thresholds,
    normalize,
    snap_to_grid,
)
from .data import NetworkManifest, SyntheticSpec, load_csv, split_train_test, synthesize
from .lstm import LstmModel, TrainConfig, evaluate, forecast, predict_one_step, train
from .metrics import AccuracyReport, aae, aard, aare, accuracy_report, average_reports, rmse
from .tuner import TuneOutcome, customize, default_setting, initial_simplex, tune

__version__ = "0.1.0"

__all__ = [
    "AXES", "AccuracyReport", "Assignment", "Coordinator", "DEFAULT_HYPERPARAMS", "HyperParams",
    "LstmModel", "NetworkManifest", "NormalizedSeries", "Registry", "SpeedSeries",
    "SyntheticSpec", "Thresholds", "TrainConfig", "TuneOutcome", "aae", "aard", "aare",
    "accuracy_report", "average_reports", "customize", "default_setting", "evaluate",
    "forecast", "initial_simplex", "load_csv", "normalize", "predict_one_step",
    "registry_report", "rmse", "snap_to_grid", "split_train_test", "synthesize", "train", "tune",
]
