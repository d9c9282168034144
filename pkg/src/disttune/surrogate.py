"""Closed-form stand-ins for the training objective, used to benchmark the tuner.

A surrogate bowl has its floor at a chosen grid point and grows with the
squared distance measured in grid steps. With the default scale only points
within two steps of the center reach an AARE of 0.05.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AXES, HyperParams, Thresholds

_STEPS = np.array([a.step for a in AXES])


@dataclass(frozen=True)
class SurrogateBowl:
    center: HyperParams
    floor: float = 0.01
    scale: float = 0.01

    def __call__(self, hyper: HyperParams) -> float:
        d = (np.array(hyper.as_tuple()) - np.array(self.center.as_tuple())) / _STEPS
        return self.floor + self.scale * float(d @ d)

    def satisfying_points(self, thd_aare: float = 0.05) -> list:
        """Exhaustive grid scan: every grid point whose value is within ``thd_aare``."""
        import itertools

        radius = int(np.ceil(np.sqrt(max(thd_aare - self.floor, 0.0) / self.scale)))
        # any point outside this box is farther than the radius on some axis
        ranges = []
        for axis, v in zip(AXES, self.center.as_tuple()):
            i = axis.index_of(v)
            ranges.append(range(max(i - radius, 0), min(i + radius, axis.size - 1) + 1))
        out = []
        for idx in itertools.product(*ranges):
            h = HyperParams.from_sequence([a.value_at(i) for a, i in zip(AXES, idx)])
            if self(h) <= thd_aare + 1e-12:
                out.append(h)
        return out


def random_center(rng: np.random.Generator) -> HyperParams:
    return HyperParams.from_sequence([a.value_at(int(rng.integers(a.size))) for a in AXES])


@dataclass(frozen=True)
class BenchResult:
    instances: int
    satisfied: int
    mean_evaluations: float
    max_evaluations: int


def bench_tuner(instances: int = 100, seed: int = 0, budget: int = 100,
                thresholds: Thresholds = Thresholds()) -> BenchResult:
    """Tune ``instances`` randomly centered bowls; count how many get satisfied."""
    from .tuner import tune

    rng = np.random.default_rng(seed)
    ok, evals = 0, []
    for i in range(instances):
        bowl = SurrogateBowl(random_center(rng))
        out = tune(bowl, budget=budget, thresholds=thresholds, seed=i)
        ok += out.satisfied
        evals.append(out.evaluations)
    return BenchResult(instances, ok, float(np.mean(evals)), int(max(evals)))
