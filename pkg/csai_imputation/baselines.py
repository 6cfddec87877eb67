"""Reference imputers scored next to the model.

All three work in feature units on a masked view and fall back to the training-split
feature mean where a sample never observes a feature.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import pandas as pd

from .tsdata import FloatArray, NormStats, TimeSeriesBatch, build_last_observation

Imputer = Callable[[TimeSeriesBatch, NormStats], FloatArray]


def mean_impute(view: TimeSeriesBatch, stats: NormStats) -> FloatArray:
    """Fill every missing cell with the training mean of its feature."""

    return np.where(view.mask == 1, view.values, np.broadcast_to(stats.mean, view.values.shape))


def locf_impute(view: TimeSeriesBatch, stats: NormStats) -> FloatArray:
    """Last observation carried forward; the training mean before the first observation."""

    return build_last_observation(view.values, view.mask, stats.mean)


def linear_impute(view: TimeSeriesBatch, stats: NormStats) -> FloatArray:
    """Interpolate linearly in time between observations; edges carry the nearest value."""

    out = np.array(view.values, dtype=np.float64)
    for n in range(view.n_samples):
        frame = pd.DataFrame(
            np.where(view.mask[n] == 1, view.values[n], np.nan),
            index=pd.Index(view.timestamps[n], name="time"),
        )
        filled = frame.interpolate(method="index", limit_direction="both")
        out[n] = filled.fillna(pd.Series(stats.mean, index=frame.columns)).to_numpy()
    return out


BASELINES: dict[str, Imputer] = {
    "mean": mean_impute,
    "locf": locf_impute,
    "linear": linear_impute,
}

__all__ = ["BASELINES", "Imputer", "mean_impute", "locf_impute", "linear_impute"]
