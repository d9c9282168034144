"""Watch the Nelder-Mead tuner walk the hyperparameter grid.

The objective is a closed-form bowl centred on one grid point, so the run
takes milliseconds. Every trial is snapped to the grid and evaluated once.

    python3 demos/03_tuner_on_surrogate.py
"""

from disttune.core import HyperParams
from disttune.surrogate import SurrogateBowl, bench_tuner
from disttune.tuner import tune

bowl = SurrogateBowl(HyperParams(0.05, 2, 10, 200))
out = tune(bowl)
for e in out.trace:
    print(f"{e.index:>3}  {str(e.hyper):<22} AARE {e.aare:.4f}")
print(f"stopped: {out.stop_reason} after {out.evaluations} evaluations, best {out.best_hyper}")

res = bench_tuner(instances=100)
print(f"random bowls solved within budget: {res.satisfied}/{res.instances}, "
      f"mean evaluations {res.mean_evaluations:.1f}")
