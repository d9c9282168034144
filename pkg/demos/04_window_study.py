"""How much history should a detector model train on?

A synthetic detector drifts slowly week by week. Default-setting models are
trained on the last 1, 4, 8 and 12 working weeks and scored on the next day.

    python3 demos/04_window_study.py
"""

from disttune.data import drifting_series, window_study

series = drifting_series(weeks=12, drift_per_week=0.01)
print("weeks  points  train s   AARE    AAE    RMSE")
for r in window_study(series, (1, 4, 8, 12)):
    print(f"{r.weeks:>5} {r.train_points:>7} {r.train_time_s:>8.2f} {r.aare:.4f} {r.aae:6.3f} {r.rmse:6.3f}")
