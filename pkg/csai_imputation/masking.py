"""Artificial masking of observed cells.

Masking hides a fraction ``U`` of the *observed* cells of a split so that the hidden
values serve as ground truth (evaluation) or as a changing augmentation (training).
Three planners are available:

``uniform-corrected``
    Exactly ``round(U * n_observed)`` distinct observed cells, drawn uniformly without
    replacement.

``uniform-legacy``
    Reproduces the common under-masking flaw: ``round(U * n_total)`` candidates are
    drawn with replacement over *all* cells (observed or not) and only the distinct
    observed ones are kept, so the realized rate falls below ``U``.

``nonuniform``
    Shifts mask mass toward sparsely observed features. Feature ``d`` gets weight
    ``w(d) = 1 + I * p_dist(d)``; rates ``r(d) = U * w(d) / W`` with ``W`` the
    observation-weighted mean weight keep the overall rate at ``U``. Rates above 1 are
    capped and the excess is redistributed over the remaining features; integer counts
    come from largest-remainder apportionment of ``round(U * n_observed)``.

Plans are pure functions of their inputs and seed, and are serializable for replay.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, get_args

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from .config import Permutation
from .errors import MaskPlanError
from .tsdata import FloatArray, TimeSeriesBatch
from .util import largest_remainder, round_half_away

logger = logging.getLogger(__name__)

Strategy = Literal["uniform-corrected", "uniform-legacy", "nonuniform"]
SplitName = Literal["train", "val", "test"]

_PERMUTATION_SPLITS: dict[str, frozenset[str]] = {
    "All": frozenset({"train", "val", "test"}),
    "Train_only": frozenset({"train"}),
    "Val_only": frozenset({"val"}),
    "Test_only": frozenset({"test"}),
    "Val_Test": frozenset({"val", "test"}),
    "None": frozenset(),
}


def _cells_array(cells: Any) -> NDArray[np.int64]:
    arr = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    if arr.size:
        order = np.lexsort((arr[:, 2], arr[:, 1], arr[:, 0]))
        arr = arr[order]
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MaskPlan:
    """Explicit set of ``(sample, step, feature)`` cells to hide."""

    cells: NDArray[np.int64]
    """``[K, 3]`` index triples in lexicographic order."""

    target_rate: float
    adjust_factor: float
    strategy: Strategy
    seed: int

    def __len__(self) -> int:
        return int(self.cells.shape[0])

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy,
            "target_rate": self.target_rate,
            "adjust_factor": self.adjust_factor,
            "seed": self.seed,
            "cells": self.cells.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MaskPlan":
        strategy = data["strategy"]
        if strategy not in get_args(Strategy):
            raise MaskPlanError(f"unknown mask strategy {strategy!r}")
        return cls(
            cells=_cells_array(data["cells"]),
            target_rate=float(data["target_rate"]),
            adjust_factor=float(data["adjust_factor"]),
            strategy=strategy,
            seed=int(data["seed"]),
        )

    def save(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True))
        return path

    @classmethod
    def load(cls, path: Path) -> "MaskPlan":
        return cls.from_dict(json.loads(path.read_text()))


@dataclass(frozen=True)
class MissingDistribution:
    """Per-feature missing rate and observed-cell count."""

    p_dist: FloatArray
    n_obs: NDArray[np.int64]


def feature_missing_distribution(mask: FloatArray) -> MissingDistribution:
    """Count observed cells per feature over all samples and steps of ``[N, T, D]`` *mask*."""

    m = np.asarray(mask)
    if m.ndim != 3 or m.size == 0:
        raise MaskPlanError(f"need a nonempty [N, T, D] mask, got shape {m.shape}")
    n_obs = (m == 1).sum(axis=(0, 1)).astype(np.int64)
    total = m.shape[0] * m.shape[1]
    return MissingDistribution(p_dist=1.0 - n_obs / total, n_obs=n_obs)


def _check_rate(rate: float) -> None:
    if not 0 <= rate < 1:
        raise MaskPlanError(f"masking rate U={rate} must lie in [0, 1)")


def plan_uniform_mask(
    mask: FloatArray,
    rate: float,
    seed: int,
    mode: Literal["corrected", "legacy"] = "corrected",
) -> MaskPlan:
    """Plan uniform masking of *mask*'s observed cells."""

    _check_rate(rate)
    m = np.asarray(mask)
    rng = np.random.default_rng(seed)
    observed = np.argwhere(m == 1)
    k = round_half_away(rate * len(observed))
    if mode == "corrected":
        chosen = rng.choice(len(observed), size=k, replace=False) if k else np.empty(0, np.int64)
        cells = observed[chosen]
        strategy: Strategy = "uniform-corrected"
    elif mode == "legacy":
        n_draws = round_half_away(rate * m.size)
        flat = rng.integers(0, m.size, size=n_draws) if n_draws else np.empty(0, np.int64)
        candidates = np.unique(flat)
        keep = candidates[m.reshape(-1)[candidates] == 1]
        cells = np.column_stack(np.unravel_index(keep, m.shape))
        strategy = "uniform-legacy"
    else:
        raise MaskPlanError(f"unknown uniform masking mode {mode!r}")
    plan = MaskPlan(_cells_array(cells), rate, 0.0, strategy, seed)
    logger.debug("mask_planned", extra={"strategy": strategy, "cells": len(plan)})
    return plan


def nonuniform_feature_counts(
    rate: float, adjust_factor: float, dist: MissingDistribution
) -> list[int]:
    """Return per-feature mask counts of the non-uniform strategy.

    Raises
    ------
    MaskPlanError
        If every feature is capped and the total still cannot be reached.
    """

    _check_rate(rate)
    if adjust_factor < 0:
        raise MaskPlanError(f"adjustment factor I={adjust_factor} must be non-negative")
    n_obs = dist.n_obs.astype(np.float64)
    total_obs = float(n_obs.sum())
    target = round_half_away(rate * total_obs)
    if target == 0:
        return [0] * len(n_obs)

    weights = 1.0 + adjust_factor * dist.p_dist
    capped = np.zeros(len(n_obs), dtype=bool)
    expected = np.zeros(len(n_obs))
    while True:
        free = ~capped & (n_obs > 0)
        remaining = rate * total_obs - float(n_obs[capped].sum())
        mass = float((weights[free] * n_obs[free]).sum())
        if mass <= 0:
            raise MaskPlanError("all features are capped; target masking rate is unreachable")
        rates = np.where(free, remaining * weights / mass, 0.0)
        over = free & (rates > 1.0)
        if not over.any():
            expected = np.where(capped, n_obs, rates * n_obs)
            break
        capped |= over

    try:
        return largest_remainder(expected.tolist(), target, caps=dist.n_obs.tolist())
    except ValueError as exc:
        raise MaskPlanError(str(exc)) from exc


def plan_nonuniform_mask(
    mask: FloatArray,
    rate: float,
    adjust_factor: float,
    dist: MissingDistribution,
    seed: int,
) -> MaskPlan:
    """Plan non-uniform masking; cells are drawn uniformly within each feature.

    *dist* describes the dataset whose missingness shapes the weights; *mask* is the
    split being masked. Counts are apportioned over *mask*'s own observed cells.
    """

    m = np.asarray(mask)
    local = feature_missing_distribution(m)
    shaped = MissingDistribution(p_dist=np.asarray(dist.p_dist), n_obs=local.n_obs)
    counts = nonuniform_feature_counts(rate, adjust_factor, shaped)
    rng = np.random.default_rng(seed)
    chosen: list[NDArray[np.int64]] = []
    for d, count in enumerate(counts):
        if count == 0:
            continue
        observed = np.argwhere(m[..., d] == 1)
        picks = observed[rng.choice(len(observed), size=count, replace=False)]
        chosen.append(np.column_stack([picks, np.full(count, d)]))
    cells = np.concatenate(chosen) if chosen else np.empty((0, 3), np.int64)
    plan = MaskPlan(_cells_array(cells), rate, adjust_factor, "nonuniform", seed)
    logger.debug("mask_planned", extra={"strategy": "nonuniform", "counts": counts})
    return plan


@dataclass(frozen=True)
class EvalTargets:
    """Hidden cells and the values they held before masking."""

    cells: NDArray[np.int64]
    values: FloatArray

    def __len__(self) -> int:
        return int(self.cells.shape[0])

    def take(self, array: FloatArray) -> FloatArray:
        """Gather ``array[n, t, d]`` at every target cell."""

        c = self.cells
        return np.asarray(array)[c[:, 0], c[:, 1], c[:, 2]] if len(self) else np.empty(0)


def apply_mask_plan(
    batch: TimeSeriesBatch, plan: MaskPlan
) -> tuple[TimeSeriesBatch, EvalTargets]:
    """Hide the planned cells; indicators are recomputed from the reduced mask.

    Raises
    ------
    MaskPlanError
        If the plan references a cell outside the batch or one that is not observed.
    """

    cells = plan.cells
    if len(plan) == 0:
        return batch, EvalTargets(cells=cells, values=np.empty(0))
    shape = np.array(batch.mask.shape)
    if np.any(cells < 0) or np.any(cells >= shape):
        raise MaskPlanError("mask plan references cells outside the batch")
    idx = (cells[:, 0], cells[:, 1], cells[:, 2])
    if np.any(batch.mask[idx] != 1):
        raise MaskPlanError("corrupt mask plan: it targets cells that are already missing")
    if len(np.unique(cells, axis=0)) != len(cells):
        raise MaskPlanError("corrupt mask plan: duplicate cells")
    truth = np.array(batch.values[idx])
    new_mask = np.array(batch.mask)
    new_mask[idx] = 0.0
    view = batch.with_values(np.where(new_mask == 1, batch.values, 0.0), mask=new_mask)
    truth.setflags(write=False)
    return view, EvalTargets(cells=cells, values=truth)


@dataclass(frozen=True)
class MaskAudit:
    """Realized masking rates of a plan against its source mask."""

    strategy: str
    target_rate: float
    n_observed: int
    n_masked: int
    realized_rate: float
    deviation: float
    per_feature_rate: list[float]
    p_dist: list[float]
    rate_missingness_correlation: float | None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def audit_mask_plan(plan: MaskPlan, mask: FloatArray) -> MaskAudit:
    """Report realized overall and per-feature rates of *plan* on *mask*.

    The correlation is Spearman's rank correlation between per-feature realized rate and
    per-feature missing rate; ``None`` when either side is constant.
    """

    dist = feature_missing_distribution(mask)
    n_observed = int(dist.n_obs.sum())
    per_feature_masked = np.bincount(plan.cells[:, 2], minlength=len(dist.n_obs)) if len(plan) else np.zeros(len(dist.n_obs))
    with np.errstate(divide="ignore", invalid="ignore"):
        per_feature = np.where(dist.n_obs > 0, per_feature_masked / np.maximum(dist.n_obs, 1), 0.0)
    realized = len(plan) / n_observed if n_observed else 0.0
    ranks = pd.DataFrame({"rate": per_feature, "p": dist.p_dist}).rank()
    corr: float | None = None
    if ranks["rate"].nunique() > 1 and ranks["p"].nunique() > 1:
        corr = float(ranks["rate"].corr(ranks["p"]))
    return MaskAudit(
        strategy=plan.strategy,
        target_rate=plan.target_rate,
        n_observed=n_observed,
        n_masked=len(plan),
        realized_rate=realized,
        deviation=realized - plan.target_rate,
        per_feature_rate=[float(v) for v in per_feature],
        p_dist=[float(v) for v in dist.p_dist],
        rate_missingness_correlation=corr,
    )


def select_split_policy(permutation: str, split: str) -> Literal["nonuniform", "uniform-corrected"]:
    """Return the masking strategy a split receives under a masking permutation."""

    if permutation not in _PERMUTATION_SPLITS:
        raise MaskPlanError(
            f"unknown masking permutation {permutation!r} (expected one of {sorted(_PERMUTATION_SPLITS)})"
        )
    if split not in ("train", "val", "test"):
        raise MaskPlanError(f"unknown split {split!r}")
    return "nonuniform" if split in _PERMUTATION_SPLITS[permutation] else "uniform-corrected"


def plan_for_split(
    mask: FloatArray,
    split: SplitName,
    *,
    rate: float,
    adjust_factor: float,
    permutation: Permutation | str,
    mode: Literal["corrected", "legacy"],
    dist: MissingDistribution,
    seed: int,
) -> MaskPlan:
    """Plan masking of one split according to the permutation policy.

    Splits outside the permutation use uniform masking in the configured *mode*; the
    legacy mode therefore only changes the uniform arms.
    """

    strategy = select_split_policy(str(permutation), split)
    if strategy == "nonuniform":
        return plan_nonuniform_mask(mask, rate, adjust_factor, dist, seed)
    return plan_uniform_mask(mask, rate, seed, mode)


__all__ = [
    "Strategy",
    "MaskPlan",
    "MissingDistribution",
    "EvalTargets",
    "MaskAudit",
    "feature_missing_distribution",
    "plan_uniform_mask",
    "nonuniform_feature_counts",
    "plan_nonuniform_mask",
    "apply_mask_plan",
    "audit_mask_plan",
    "select_split_policy",
    "plan_for_split",
]
