"""Losses, metrics and the training loop.

Data flow for one run (a single split or one cross-validation fold):

1. The raw splits are taken as given. Normalization constants, median gaps and the
   per-feature missing distribution come from the training split only.
2. Validation and test splits get one fixed mask plan each; the hidden cells keep their
   raw values as evaluation targets.
3. Every epoch draws a fresh mask plan on the training split. The loss sees only the
   cells that remain observed in that view.
4. After each epoch the model imputes the validation view; the parameters with the
   lowest validation MAE (in feature units) are kept.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
from sklearn.metrics import roc_auc_score
from torch.nn import functional as F

from .baselines import BASELINES
from .config import ExperimentConfig, MaskingConfig, ModelConfig
from .csai import CsaiParams, ModelOutput, csai_forward, init_csai_params, make_store
from .errors import DataValidationError, TrainingError
from .masking import (
    EvalTargets,
    MaskAudit,
    MaskPlan,
    MissingDistribution,
    apply_mask_plan,
    audit_mask_plan,
    feature_missing_distribution,
    plan_for_split,
)
from .numcore import ParamStore, adam_step, as_tensor
from .tsdata import (
    FloatArray,
    MedianGaps,
    NormStats,
    SplitIndices,
    TimeSeriesBatch,
    apply_normalizer,
    compute_median_gaps,
    fit_normalizer,
    invert_normalizer,
)
from .util import derive_seed

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    consistency: float = 0.1
    classification: float = 1.0


@dataclass(frozen=True)
class LossComponents:
    total: torch.Tensor
    reconstruction: float
    consistency: float
    classification: float


def _observed_mae(estimate: torch.Tensor, values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return ((estimate - values).abs() * mask).sum() / mask.sum()


def compute_loss(
    output: ModelOutput,
    weights: LossWeights,
    labels: torch.Tensor | None = None,
) -> LossComponents:
    """Reconstruction on observed cells plus weighted consistency and classification.

    Reconstruction averages the observed-cell MAE of the history, feature and combined
    estimates of both directions; a batch without observed cells contributes no
    reconstruction term. The classification term is binary cross-entropy on the logits
    and only enters when *labels* are given and its weight is positive.
    """

    values, mask = output.values, output.mask
    consistency = output.consistency
    if float(mask.sum()) == 0:
        logger.warning("no_observed_cells", extra={"cells": int(mask.numel())})
        reconstruction = torch.zeros((), dtype=consistency.dtype)
    else:
        heads = [
            estimate
            for direction in (output.directions.forward, output.directions.backward)
            for estimate in (direction.x_hat, direction.x_fc, direction.x_c)
        ]
        reconstruction = torch.stack([_observed_mae(e, values, mask) for e in heads]).mean()
    total = reconstruction + weights.consistency * consistency
    classification = torch.zeros((), dtype=total.dtype)
    if labels is not None and weights.classification > 0:
        classification = F.binary_cross_entropy_with_logits(output.logits, labels)
        total = total + weights.classification * classification
    return LossComponents(
        total=total,
        reconstruction=reconstruction.detach().item(),
        consistency=consistency.detach().item(),
        classification=classification.detach().item(),
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    mae: float
    mre: float | None
    auc: float | None
    per_feature_mae: list[float | None]
    n_cells: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "mae": self.mae,
            "mre": self.mre,
            "auc": self.auc,
            "per_feature_mae": self.per_feature_mae,
            "n_cells": self.n_cells,
        }


def auc(scores: Sequence[float] | FloatArray, labels: Sequence[float] | FloatArray) -> float:
    """Area under the ROC curve; tied scores count one half.

    Raises
    ------
    DataValidationError
        If labels are not binary or only one class is present.
    """

    y = np.asarray(labels, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise DataValidationError(f"{s.size} scores for {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise DataValidationError("labels must be 0 or 1")
    if np.unique(y).size < 2:
        raise DataValidationError("AUC needs both classes among the labels")
    return float(roc_auc_score(y, s))


def score_imputation(
    prediction: FloatArray,
    targets: EvalTargets,
    *,
    scores: FloatArray | None = None,
    labels: FloatArray | None = None,
) -> Metrics:
    """Score an ``[N, T, D]`` *prediction* on the target cells (both in feature units).

    MRE is ``sum|err| / sum|truth|`` and ``None`` when the truths sum to zero. AUC is
    computed when *scores* and *labels* are given and both classes occur.
    """

    if len(targets) == 0:
        raise DataValidationError("no evaluation cells")
    pred = targets.take(prediction)
    err = np.abs(pred - targets.values)
    denom = float(np.abs(targets.values).sum())
    n_features = np.asarray(prediction).shape[-1]
    feature = targets.cells[:, 2]
    per_feature: list[float | None] = []
    for d in range(n_features):
        sel = err[feature == d]
        per_feature.append(float(sel.mean()) if sel.size else None)
    auc_value = None
    if scores is not None and labels is not None and np.unique(labels).size == 2:
        auc_value = auc(scores, labels)
    return Metrics(
        mae=float(err.mean()),
        mre=float(err.sum()) / denom if denom > 0 else None,
        auc=auc_value,
        per_feature_mae=per_feature,
        n_cells=len(targets),
    )


# ---------------------------------------------------------------------------
# Split preparation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalSet:
    """A masked split: raw and normalized views plus the hidden raw values."""

    raw: TimeSeriesBatch
    normalized: TimeSeriesBatch
    targets: EvalTargets
    plan: MaskPlan
    audit: MaskAudit


@dataclass(frozen=True)
class PreparedData:
    train: TimeSeriesBatch
    """Normalized training split before artificial masking."""
    val: EvalSet
    test: EvalSet
    stats: NormStats
    tau: MedianGaps
    dist: MissingDistribution
    seed: int


def plan_split(
    batch: TimeSeriesBatch,
    split: str,
    masking: MaskingConfig,
    dist: MissingDistribution,
    seed: int,
) -> MaskPlan:
    """Plan masking of one split; the seed stream depends only on *seed* and *split*."""

    return plan_for_split(
        batch.mask,
        split,  # type: ignore[arg-type]
        rate=masking.rate,
        adjust_factor=masking.adjust_factor,
        permutation=masking.permutation,
        mode=masking.mode,
        dist=dist,
        seed=derive_seed(seed, "mask", split),
    )


def make_eval_set(raw: TimeSeriesBatch, plan: MaskPlan, stats: NormStats) -> EvalSet:
    view, targets = apply_mask_plan(raw, plan)
    return EvalSet(
        raw=view,
        normalized=apply_normalizer(view, stats),
        targets=targets,
        plan=plan,
        audit=audit_mask_plan(plan, raw.mask),
    )


def prepare_data(
    train_raw: TimeSeriesBatch,
    val_raw: TimeSeriesBatch,
    test_raw: TimeSeriesBatch,
    masking: MaskingConfig,
    seed: int,
    *,
    val_plan: MaskPlan | None = None,
    test_plan: MaskPlan | None = None,
) -> PreparedData:
    """Fit training-only statistics and mask the evaluation splits.

    Raises
    ------
    DataValidationError
        If the validation or test plan hides no cells.
    """

    stats = fit_normalizer(train_raw)
    tau = compute_median_gaps(train_raw)
    dist = feature_missing_distribution(train_raw.mask)
    val_plan = val_plan or plan_split(val_raw, "val", masking, dist, seed)
    test_plan = test_plan or plan_split(test_raw, "test", masking, dist, seed)
    for name, plan in (("validation", val_plan), ("test", test_plan)):
        if len(plan) == 0:
            raise DataValidationError(
                f"the {name} mask plan hides no cells; raise the masking rate or the split size"
            )
    return PreparedData(
        train=apply_normalizer(train_raw, stats),
        val=make_eval_set(val_raw, val_plan, stats),
        test=make_eval_set(test_raw, test_plan, stats),
        stats=stats,
        tau=tau,
        dist=dist,
        seed=seed,
    )


def prepare_from_indices(
    dataset: TimeSeriesBatch, split: SplitIndices, masking: MaskingConfig, seed: int
) -> PreparedData:
    return prepare_data(
        dataset.subset(split.train),
        dataset.subset(split.val),
        dataset.subset(split.test),
        masking,
        seed,
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def predict(
    params: CsaiParams, config: ModelConfig, batch: TimeSeriesBatch, tau: MedianGaps
) -> ModelOutput:
    with torch.no_grad():
        return csai_forward(batch, params, config, tau)


def evaluate(
    params: CsaiParams,
    config: ModelConfig,
    eval_set: EvalSet,
    stats: NormStats,
    tau: MedianGaps,
    *,
    with_auc: bool = False,
) -> tuple[Metrics, FloatArray]:
    """Impute the masked view and score it in feature units.

    Returns the metrics and the completed series in feature units.
    """

    out = predict(params, config, eval_set.normalized, tau)
    completed = invert_normalizer(out.completed.numpy(), stats)
    labels = eval_set.raw.labels
    scores = out.probability.numpy() if with_auc and labels is not None else None
    metrics = score_imputation(completed, eval_set.targets, scores=scores, labels=labels)
    return metrics, completed


def evaluate_baselines(eval_set: EvalSet, stats: NormStats) -> dict[str, Metrics]:
    return {
        name: score_imputation(impute(eval_set.raw, stats), eval_set.targets)
        for name, impute in BASELINES.items()
    }


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float | None
    reconstruction: float | None
    consistency: float | None
    classification: float | None
    train_mask_rate: float | None
    val_mae: float
    val_mre: float | None
    val_auc: float | None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class TrainResult:
    params: CsaiParams
    store: ParamStore
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mae: float = math.inf

    @property
    def best_record(self) -> EpochRecord:
        return next(r for r in self.history if r.epoch == self.best_epoch)


def _non_finite(store: ParamStore, epoch: int, batch: int, loss: LossComponents) -> TrainingError:
    norms = store.norms()
    worst = sorted(norms.items(), key=lambda kv: kv[1] if math.isfinite(kv[1]) else math.inf)[-5:]
    return TrainingError(
        f"non-finite loss at epoch {epoch}, batch {batch}: "
        f"reconstruction={loss.reconstruction}, consistency={loss.consistency}, "
        f"classification={loss.classification}; largest parameter norms {worst}",
        epoch=epoch,
        batch=batch,
        norms=norms,
    )


def train(config: ExperimentConfig, data: PreparedData, *, seed: int | None = None) -> TrainResult:
    """Train a model on *data* and return the best-validation parameters and history.

    Every random stream (initial weights, per-epoch training masks, minibatch order)
    derives from *seed* (default ``data.seed``), so equal inputs give equal histories.

    Raises
    ------
    TrainingError
        If a minibatch loss is not finite.
    """

    seed = data.seed if seed is None else seed
    tc = config.training
    train_batch = data.train
    params = init_csai_params(
        config.model, train_batch.n_features, train_batch.n_steps, derive_seed(seed, "init")
    )
    store = make_store(params)
    weights = LossWeights(tc.consistency_weight, tc.effective_classification_weight())
    with_auc = tc.task == "classification"

    def validate() -> Metrics:
        metrics, _ = evaluate(params, config.model, data.val, data.stats, data.tau, with_auc=with_auc)
        return metrics

    initial = validate()
    result = TrainResult(params=params, store=store, best_epoch=0, best_val_mae=initial.mae)
    result.history.append(
        EpochRecord(0, None, None, None, None, None, initial.mae, initial.mre, initial.auc)
    )
    best = store.snapshot()
    logger.info("epoch_end", extra={"epoch": 0, "val_mae": initial.mae})

    for epoch in range(1, tc.epochs + 1):
        plan = plan_split(train_batch, "train", config.masking, data.dist, derive_seed(seed, "epoch", epoch))
        view, _ = apply_mask_plan(train_batch, plan)
        order = np.random.default_rng(derive_seed(seed, "shuffle", epoch)).permutation(view.n_samples)
        totals = np.zeros(4)
        n_batches = 0
        for b, start in enumerate(range(0, view.n_samples, tc.batch_size)):
            mb = view.subset(order[start : start + tc.batch_size])
            labels = as_tensor(mb.labels) if mb.labels is not None else None
            store.zero_grad()
            out = csai_forward(mb, params, config.model, data.tau)
            loss = compute_loss(out, weights, labels)
            if not torch.isfinite(loss.total):
                raise _non_finite(store, epoch, b, loss)
            loss.total.backward()
            adam_step(store, tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps, t=store.step + 1)
            totals += [
                loss.total.detach().item(),
                loss.reconstruction,
                loss.consistency,
                loss.classification,
            ]
            n_batches += 1
        means = totals / max(n_batches, 1)
        metrics = validate()
        mask_rate = audit_mask_plan(plan, train_batch.mask).realized_rate
        result.history.append(
            EpochRecord(
                epoch,
                float(means[0]),
                float(means[1]),
                float(means[2]),
                float(means[3]),
                mask_rate,
                metrics.mae,
                metrics.mre,
                metrics.auc,
            )
        )
        logger.info(
            "epoch_end",
            extra={"epoch": epoch, "train_loss": float(means[0]), "val_mae": metrics.mae},
        )
        if metrics.mae < result.best_val_mae:
            result.best_val_mae = metrics.mae
            result.best_epoch = epoch
            best = store.snapshot()
        elif epoch - result.best_epoch >= tc.patience:
            logger.info("early_stop", extra={"epoch": epoch, "best_epoch": result.best_epoch})
            break

    store.restore(best)
    logger.info(
        "training_done",
        extra={"best_epoch": result.best_epoch, "best_val_mae": result.best_val_mae},
    )
    return result


__all__ = [
    "LossWeights",
    "LossComponents",
    "compute_loss",
    "Metrics",
    "auc",
    "score_imputation",
    "EvalSet",
    "PreparedData",
    "plan_split",
    "make_eval_set",
    "prepare_data",
    "prepare_from_indices",
    "predict",
    "evaluate",
    "evaluate_baselines",
    "EpochRecord",
    "TrainResult",
    "train",
]
