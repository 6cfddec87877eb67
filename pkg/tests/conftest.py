import sys
from pathlib import Path

import numpy as np
import pytest

root = Path(__file__).resolve().parents[1]
# Ensure project root is on ``sys.path`` so tests can import the package
sys.path.append(str(root))

from csai_imputation.tsdata import TimeSeriesBatch  # noqa: E402


def make_batch(
    n: int = 3,
    t: int = 5,
    d: int = 2,
    *,
    seed: int = 0,
    missing: float = 0.3,
    labels: bool = False,
) -> TimeSeriesBatch:
    """Random irregular batch with every feature observed at least once per sample."""

    rng = np.random.default_rng(seed)
    gaps = rng.uniform(0.5, 2.0, size=(n, t - 1))
    timestamps = np.concatenate([np.zeros((n, 1)), np.cumsum(gaps, axis=1)], axis=1)
    values = rng.normal(size=(n, t, d))
    mask = (rng.random((n, t, d)) >= missing).astype(float)
    mask[:, 0, :] = 1.0
    y = (np.arange(n) % 2).astype(float) if labels else None
    return TimeSeriesBatch.from_arrays(values, mask, timestamps, labels=y)


@pytest.fixture
def small_batch() -> TimeSeriesBatch:
    return make_batch()


def base_config_dict(**overrides):
    data = {
        "seed": 7,
        "dataset": {"synthetic": {"n_samples": 40, "n_steps": 6, "n_features": 3}},
        "model": {"d_model": 4, "n_heads": 2, "d_hidden": 5},
        "training": {"epochs": 2, "batch_size": 16},
        "masking": {"rate": 0.2},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return data
