from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tests.conftest import make_batch
from csai_imputation.errors import MaskPlanError
from csai_imputation.masking import (
    MaskPlan,
    MissingDistribution,
    apply_mask_plan,
    audit_mask_plan,
    feature_missing_distribution,
    nonuniform_feature_counts,
    plan_for_split,
    plan_nonuniform_mask,
    plan_uniform_mask,
    select_split_policy,
)
from csai_imputation.tsdata import TimeSeriesBatch
from csai_imputation.util import round_half_away


@st.composite
def masks(draw):
    n = draw(st.integers(1, 6))
    t = draw(st.integers(1, 6))
    d = draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**16))
    keep = draw(st.floats(0.05, 1.0))
    rng = np.random.default_rng(seed)
    return (rng.random((n, t, d)) < keep).astype(float)


def observed_set(mask):
    return {tuple(c) for c in np.argwhere(mask == 1).tolist()}


@settings(max_examples=60, deadline=None)
@given(masks(), st.floats(0.0, 0.99), st.integers(0, 1000))
def test_corrected_uniform_masks_exact_count(mask, rate, seed) -> None:
    plan = plan_uniform_mask(mask, rate, seed)
    n_obs = int(mask.sum())
    assert len(plan) == round_half_away(rate * n_obs)
    cells = [tuple(c) for c in plan.cells.tolist()]
    assert len(set(cells)) == len(cells)
    assert set(cells) <= observed_set(mask)


@settings(max_examples=60, deadline=None)
@given(masks(), st.floats(0.0, 0.99), st.floats(0.0, 20.0), st.integers(0, 1000))
def test_nonuniform_masks_exact_count(mask, rate, factor, seed) -> None:
    dist = feature_missing_distribution(mask)
    plan = plan_nonuniform_mask(mask, rate, factor, dist, seed)
    assert len(plan) == round_half_away(rate * int(mask.sum()))
    cells = [tuple(c) for c in plan.cells.tolist()]
    assert len(set(cells)) == len(cells)
    assert set(cells) <= observed_set(mask)


def test_nonuniform_counts_worked_example() -> None:
    dist = MissingDistribution(p_dist=np.array([0.8, 0.2]), n_obs=np.array([100, 400]))
    assert nonuniform_feature_counts(0.1, 5.0, dist) == [19, 31]


def test_nonuniform_without_adjustment_is_proportional() -> None:
    dist = MissingDistribution(p_dist=np.array([0.8, 0.2]), n_obs=np.array([100, 400]))
    assert nonuniform_feature_counts(0.1, 0.0, dist) == [10, 40]


def test_nonuniform_caps_and_redistributes() -> None:
    # feature 0 would need 3 of its 2 observed cells
    dist = MissingDistribution(p_dist=np.array([0.9, 0.0]), n_obs=np.array([2, 20]))
    counts = nonuniform_feature_counts(0.5, 100.0, dist)
    assert counts == [2, 9]


def test_rate_out_of_range_raises() -> None:
    mask = np.ones((2, 2, 2))
    with pytest.raises(MaskPlanError):
        plan_uniform_mask(mask, 1.0, seed=0)
    with pytest.raises(MaskPlanError):
        plan_uniform_mask(mask, -0.1, seed=0)
    dist = feature_missing_distribution(mask)
    with pytest.raises(MaskPlanError):
        nonuniform_feature_counts(0.1, -1.0, dist)


def test_zero_rate_gives_empty_plan(small_batch) -> None:
    plan = plan_uniform_mask(small_batch.mask, 0.0, seed=1)
    assert len(plan) == 0
    view, targets = apply_mask_plan(small_batch, plan)
    assert view is small_batch
    assert len(targets) == 0


def test_legacy_mode_under_masks() -> None:
    rng = np.random.default_rng(0)
    mask = (rng.random((20, 10, 5)) < 0.5).astype(float)
    n_obs = mask.sum()
    kept = np.array([len(plan_uniform_mask(mask, 0.1, seed, "legacy")) for seed in range(100)])
    # 100 draws over all 1000 cells, distinct observed ones kept
    expected = n_obs * (1 - (1 - 1 / mask.size) ** 100)
    assert kept.mean() == pytest.approx(expected, rel=0.05)
    assert kept.mean() / n_obs < 0.1
    assert kept.mean() / mask.size < 0.07
    corrected = [len(plan_uniform_mask(mask, 0.1, seed)) / n_obs for seed in range(10)]
    assert all(r == pytest.approx(0.1, abs=1 / n_obs) for r in corrected)


def test_plans_are_reproducible() -> None:
    mask = make_batch(n=5, t=6, d=3, seed=4).mask
    dist = feature_missing_distribution(mask)
    a = plan_nonuniform_mask(mask, 0.2, 3.0, dist, seed=9)
    b = plan_nonuniform_mask(mask, 0.2, 3.0, dist, seed=9)
    np.testing.assert_array_equal(a.cells, b.cells)
    assert a.strategy == "nonuniform"


def test_plan_save_and_load(tmp_path: Path) -> None:
    mask = make_batch(n=4, t=5, d=2, seed=1).mask
    plan = plan_uniform_mask(mask, 0.3, seed=2)
    loaded = MaskPlan.load(plan.save(tmp_path / "plan.json"))
    assert loaded.to_dict() == plan.to_dict()
    with pytest.raises(MaskPlanError):
        MaskPlan.from_dict({**plan.to_dict(), "strategy": "random"})


def test_apply_mask_plan_hides_cells() -> None:
    values = np.array([[[1.0], [2.0], [3.0]]])
    mask = np.ones((1, 3, 1))
    batch = TimeSeriesBatch.from_arrays(values, mask, [[0.0, 1.0, 3.0]])
    plan = MaskPlan(np.array([[0, 1, 0]]), 0.3, 0.0, "uniform-corrected", 0)
    view, targets = apply_mask_plan(batch, plan)
    assert view.mask[0, :, 0].tolist() == [1.0, 0.0, 1.0]
    assert view.values[0, 1, 0] == 0.0
    assert view.delta[0, :, 0].tolist() == [0.0, 1.0, 3.0]
    assert targets.values.tolist() == [2.0]
    assert targets.take(values).tolist() == [2.0]
    # the source batch is untouched
    assert batch.mask[0, 1, 0] == 1.0


@pytest.mark.parametrize(
    "cells",
    [
        [[0, 5, 0]],
        [[0, 0, -1]],
        [[0, 0, 0], [0, 0, 0]],
    ],
)
def test_corrupt_plans_are_rejected(small_batch, cells) -> None:
    plan = MaskPlan(np.array(cells), 0.1, 0.0, "uniform-corrected", 0)
    with pytest.raises(MaskPlanError):
        apply_mask_plan(small_batch, plan)


def test_plan_on_missing_cell_is_rejected() -> None:
    batch = make_batch(n=2, t=4, d=2, seed=0, missing=0.9)
    missing = np.argwhere(batch.mask == 0)[0]
    plan = MaskPlan(np.array([missing]), 0.1, 0.0, "uniform-corrected", 0)
    with pytest.raises(MaskPlanError, match="already missing"):
        apply_mask_plan(batch, plan)


def test_audit_reports_rates_and_correlation() -> None:
    rng = np.random.default_rng(3)
    keep = np.array([0.2, 0.4, 0.6, 0.8, 0.95])
    mask = (rng.random((40, 12, 5)) < keep).astype(float)
    dist = feature_missing_distribution(mask)
    plan = plan_nonuniform_mask(mask, 0.2, 10.0, dist, seed=0)
    audit = audit_mask_plan(plan, mask)
    assert audit.n_masked == len(plan)
    assert audit.realized_rate == pytest.approx(0.2, abs=1 / audit.n_observed)
    assert audit.rate_missingness_correlation == pytest.approx(1.0)
    assert audit.to_dict()["strategy"] == "nonuniform"

    flat = audit_mask_plan(MaskPlan(np.empty((0, 3)), 0.0, 0.0, "uniform-corrected", 0), mask)
    assert flat.rate_missingness_correlation is None
    assert flat.realized_rate == 0.0


@pytest.mark.parametrize(
    "permutation, expected",
    [
        ("All", ("nonuniform", "nonuniform", "nonuniform")),
        ("Train_only", ("nonuniform", "uniform-corrected", "uniform-corrected")),
        ("Val_only", ("uniform-corrected", "nonuniform", "uniform-corrected")),
        ("Test_only", ("uniform-corrected", "uniform-corrected", "nonuniform")),
        ("Val_Test", ("uniform-corrected", "nonuniform", "nonuniform")),
        ("None", ("uniform-corrected", "uniform-corrected", "uniform-corrected")),
    ],
)
def test_split_policy(permutation, expected) -> None:
    got = tuple(select_split_policy(permutation, s) for s in ("train", "val", "test"))
    assert got == expected


def test_split_policy_rejects_unknown() -> None:
    with pytest.raises(MaskPlanError):
        select_split_policy("Some", "train")
    with pytest.raises(MaskPlanError):
        select_split_policy("All", "holdout")


def test_plan_for_split_legacy_only_affects_uniform_arms() -> None:
    mask = make_batch(n=6, t=5, d=3, seed=2).mask
    dist = feature_missing_distribution(mask)
    kwargs = dict(rate=0.2, adjust_factor=2.0, dist=dist, seed=1, mode="legacy")
    assert plan_for_split(mask, "train", permutation="Train_only", **kwargs).strategy == "nonuniform"
    assert plan_for_split(mask, "val", permutation="Train_only", **kwargs).strategy == "uniform-legacy"
