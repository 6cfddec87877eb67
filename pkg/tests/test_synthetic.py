import numpy as np
import pytest
from scipy.stats import pointbiserialr

from csai_imputation.config import SyntheticConfig
from csai_imputation.synthetic import generate_synthetic


def test_generation_is_deterministic() -> None:
    cfg = SyntheticConfig(n_samples=20, n_steps=5, n_features=3)
    a = generate_synthetic(cfg, seed=11)
    b = generate_synthetic(cfg, seed=11)
    c = generate_synthetic(cfg, seed=12)
    np.testing.assert_array_equal(a.observed.values, b.observed.values)
    np.testing.assert_array_equal(a.observed.mask, b.observed.mask)
    np.testing.assert_array_equal(a.ground_truth, b.ground_truth)
    assert not np.array_equal(a.ground_truth, c.ground_truth)


def test_observed_cells_match_ground_truth() -> None:
    data = generate_synthetic(SyntheticConfig(n_samples=10, n_steps=6, n_features=4), seed=0)
    obs = data.observed
    assert data.ground_truth.shape == (10, 6, 4)
    np.testing.assert_array_equal(
        obs.values[obs.mask == 1], data.ground_truth[obs.mask == 1]
    )
    assert np.all(obs.values[obs.mask == 0] == 0)
    assert np.all(np.diff(obs.timestamps, axis=1) > 0)
    assert obs.labels is not None
    assert set(np.unique(obs.labels)) <= {0.0, 1.0}


def test_missing_rates_follow_configuration() -> None:
    cfg = SyntheticConfig(n_samples=200, n_steps=24, n_features=3, missing_rates=[0.0, 0.3, 0.7])
    data = generate_synthetic(cfg, seed=5)
    realized = data.realized_missing_rates()
    assert realized[0] == 0.0
    assert realized[1] == pytest.approx(0.3, abs=0.05)
    assert realized[2] == pytest.approx(0.7, abs=0.05)


def test_missingness_depends_on_value() -> None:
    cfg = SyntheticConfig(
        n_samples=300, n_steps=24, n_features=1, missing_rates=[0.5], mnar_strength=3.0,
        noise_std=0.0,
    )
    data = generate_synthetic(cfg, seed=2)
    truth = data.ground_truth[..., 0]
    deviation = np.abs(truth - np.median(truth))
    observed = data.observed.mask[..., 0] == 1
    assert deviation[observed].mean() > deviation[~observed].mean()


def test_manifest_reports_shape_and_rates() -> None:
    cfg = SyntheticConfig(n_samples=8, n_steps=3, n_features=2)
    manifest = generate_synthetic(cfg, seed=1).manifest()
    assert manifest["n_samples"] == 8
    assert manifest["seed"] == 1
    assert len(manifest["realized_missing_rates"]) == 2
    assert manifest["config"]["n_features"] == 2


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_zero_strength_is_missing_completely_at_random(seed: int) -> None:
    cfg = SyntheticConfig(
        n_samples=500, n_steps=20, n_features=1, missing_rates=[0.5], mnar_strength=0.0
    )
    data = generate_synthetic(cfg, seed=seed)
    truth = data.ground_truth[..., 0].reshape(-1)
    missing = (data.observed.mask[..., 0] == 0).reshape(-1)
    assert truth.size == 10_000
    deviation = np.abs(truth - np.median(truth))
    assert abs(pointbiserialr(missing, truth)[0]) < 0.05
    assert abs(pointbiserialr(missing, deviation)[0]) < 0.05

    coupled = generate_synthetic(cfg.model_copy(update={"mnar_strength": 3.0}), seed=seed)
    missing = (coupled.observed.mask[..., 0] == 0).reshape(-1)
    deviation = np.abs(coupled.ground_truth[..., 0] - np.median(coupled.ground_truth)).reshape(-1)
    assert pointbiserialr(missing, deviation)[0] < -0.2
