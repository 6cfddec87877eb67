"""Experiment harnesses: dataset loading, single runs, cross-validation and ablations.

Cross-validation assigns every sample to one of five folds (stratified by label when
possible). Fold ``k`` is the test fold, fold ``k + 1`` (mod 5) validates, and the rest
train. Each fold refits normalization and median gaps on its own training portion.
Ablations rerun the cross-validation once per axis value with the same seeds so arms
differ only in the ablated setting.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np
from sklearn.model_selection import KFold, StratifiedKFold

from .config import ExperimentConfig
from .errors import ConfigError, DataValidationError
from .synthetic import generate_synthetic
from .table_loader import load_labels, load_table
from .trainer import (
    Metrics,
    PreparedData,
    TrainResult,
    evaluate,
    evaluate_baselines,
    prepare_from_indices,
    train,
)
from .tsdata import SplitIndices, TimeSeriesBatch, split_dataset
from .util import derive_seed

logger = logging.getLogger(__name__)

N_FOLDS = 5
AblationAxis = Literal["permutation", "factor", "mode", "ratio", "model"]
_MODEL_HIDDEN_INIT = {"csai": True, "brits": False}
METRIC_KEYS = ("mae", "mre", "auc")


def load_dataset(config: ExperimentConfig, base_dir: Path | None = None) -> TimeSeriesBatch:
    """Materialize the configured dataset (synthetic draw or table on disk).

    Relative table paths resolve against *base_dir* when given.

    Raises
    ------
    ConfigError
        If a referenced file does not exist.
    """

    ds = config.dataset
    if ds.synthetic is not None:
        return generate_synthetic(ds.synthetic, config.seed).observed

    def resolve(p: str) -> Path:
        path = Path(p)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"data file not found: {path}")
        return path

    assert ds.table is not None
    batch = load_table(resolve(ds.table))
    if ds.labels is not None:
        labels = load_labels(resolve(ds.labels), batch.sample_ids)
        batch = TimeSeriesBatch.from_arrays(
            batch.values, batch.mask, batch.timestamps, labels=labels, sample_ids=batch.sample_ids
        )
    return batch


@dataclass(frozen=True)
class RunResult:
    """Outcome of one train/validate/test run."""

    best_epoch: int
    val: Metrics
    test: Metrics
    baselines: dict[str, Metrics]
    mask_rates: dict[str, float]
    history: list[dict[str, Any]]
    normalizer_mean: list[float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "best_epoch": self.best_epoch,
            "val": self.val.to_dict(),
            "test": self.test.to_dict(),
            "baselines": {k: v.to_dict() for k, v in sorted(self.baselines.items())},
            "mask_rates": self.mask_rates,
            "history": self.history,
            "normalizer_mean": self.normalizer_mean,
        }


def run_prepared(config: ExperimentConfig, data: PreparedData) -> tuple[RunResult, TrainResult]:
    """Train on *data* and score the best parameters on its test split."""

    trained = train(config, data)
    with_auc = config.training.task == "classification"
    test, _ = evaluate(
        trained.params, config.model, data.test, data.stats, data.tau, with_auc=with_auc
    )
    val, _ = evaluate(
        trained.params, config.model, data.val, data.stats, data.tau, with_auc=with_auc
    )
    first_train = next((r.train_mask_rate for r in trained.history if r.epoch == 1), None)
    rates = {"val": data.val.audit.realized_rate, "test": data.test.audit.realized_rate}
    if first_train is not None:
        rates["train"] = first_train
    result = RunResult(
        best_epoch=trained.best_epoch,
        val=val,
        test=test,
        baselines=evaluate_baselines(data.test, data.stats),
        mask_rates=rates,
        history=[r.to_dict() for r in trained.history],
        normalizer_mean=[float(v) for v in data.stats.mean],
    )
    return result, trained


def run_single(config: ExperimentConfig, dataset: TimeSeriesBatch) -> tuple[RunResult, TrainResult, PreparedData, SplitIndices]:
    """Split *dataset* by ``config.split`` and run once."""

    stratify = dataset.labels if config.split.stratify else None
    split = split_dataset(
        dataset.n_samples, config.split.ratios, derive_seed(config.seed, "split"), labels=stratify
    )
    data = prepare_from_indices(dataset, split, config.masking, config.seed)
    result, trained = run_prepared(config, data)
    return result, trained, data, split


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


def fold_assignments(
    n_samples: int, seed: int, labels: np.ndarray | None = None, n_folds: int = N_FOLDS
) -> list[np.ndarray]:
    """Return *n_folds* disjoint, sorted index arrays covering ``range(n_samples)``.

    Raises
    ------
    DataValidationError
        If any fold would hold fewer than 5 samples.
    """

    if n_samples < 5 * n_folds:
        raise DataValidationError(
            f"{n_samples} samples cannot fill {n_folds} folds of at least 5 samples"
        )
    idx = np.arange(n_samples)
    stratified = False
    if labels is not None:
        _, counts = np.unique(labels, return_counts=True)
        stratified = counts.size > 1 and int(counts.min()) >= n_folds
    if stratified:
        splitter = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed)
        parts = [test for _, test in splitter.split(idx, labels)]
    else:
        parts = [test for _, test in KFold(n_splits=n_folds, shuffle=True, random_state=seed).split(idx)]
    return [np.sort(p) for p in parts]


def fold_split(folds: Sequence[np.ndarray], k: int) -> SplitIndices:
    n = len(folds)
    test, val = folds[k], folds[(k + 1) % n]
    train = np.sort(np.concatenate([folds[j] for j in range(n) if j not in (k, (k + 1) % n)]))
    return SplitIndices(train=train, val=val, test=test)


@dataclass(frozen=True)
class FoldResult:
    fold: int
    split: SplitIndices
    run: RunResult

    def to_dict(self) -> dict[str, Any]:
        return {
            "fold": self.fold,
            "sizes": {
                "train": int(self.split.train.size),
                "val": int(self.split.val.size),
                "test": int(self.split.test.size),
            },
            **self.run.to_dict(),
        }


def _aggregate(values: Sequence[float | None]) -> dict[str, float | None]:
    present = [v for v in values if v is not None]
    if not present:
        return {"mean": None, "std": None}
    arr = np.asarray(present, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


@dataclass(frozen=True)
class CrossValReport:
    folds: list[FoldResult]
    config: dict[str, Any]

    def aggregate(self) -> dict[str, Any]:
        """Mean and population std over folds of every test metric and baseline MAE."""

        out: dict[str, Any] = {
            key: _aggregate([getattr(f.run.test, key) for f in self.folds]) for key in METRIC_KEYS
        }
        out["epochs_to_best"] = _aggregate([float(f.run.best_epoch) for f in self.folds])
        names = sorted({n for f in self.folds for n in f.run.baselines})
        out["baselines"] = {
            n: _aggregate([f.run.baselines[n].mae for f in self.folds if n in f.run.baselines])
            for n in names
        }
        for split in ("train", "val", "test"):
            out[f"{split}_mask_rate"] = _aggregate([f.run.mask_rates.get(split) for f in self.folds])
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "folds": [f.to_dict() for f in self.folds],
            "aggregate": self.aggregate(),
        }


def _run_fold(config: ExperimentConfig, dataset: TimeSeriesBatch, folds: list[np.ndarray], k: int) -> FoldResult:
    split = fold_split(folds, k)
    data = prepare_from_indices(dataset, split, config.masking, derive_seed(config.seed, "fold", k))
    run, _ = run_prepared(config, data)
    logger.info("fold_done", extra={"fold": k, "test_mae": run.test.mae, "best_epoch": run.best_epoch})
    return FoldResult(fold=k, split=split, run=run)


def cross_validate(
    config: ExperimentConfig, dataset: TimeSeriesBatch, *, workers: int | None = None
) -> CrossValReport:
    """Run five-fold cross-validation; folds may run on *workers* threads."""

    labels = dataset.labels if config.split.stratify else None
    folds = fold_assignments(dataset.n_samples, derive_seed(config.seed, "folds"), labels)
    workers = workers or config.runtime.workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda k: _run_fold(config, dataset, folds, k), range(len(folds))))
    else:
        results = [_run_fold(config, dataset, folds, k) for k in range(len(folds))]
    return CrossValReport(folds=sorted(results, key=lambda r: r.fold), config=config.resolved())


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


def parse_axis_values(axis: str, raw: str | Sequence[Any]) -> list[Any]:
    """Parse a comma-separated value list for *axis*.

    Raises
    ------
    ConfigError
        On an unknown axis or a value the axis does not accept.
    """

    items = [v.strip() for v in raw.split(",")] if isinstance(raw, str) else list(raw)
    items = [v for v in items if v != ""]
    if not items:
        raise ConfigError(f"no values given for axis {axis!r}")
    if axis in ("factor", "ratio"):
        try:
            return [float(v) for v in items]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"axis {axis!r} takes numbers, got {items}") from exc
    if axis == "permutation":
        allowed = {"All", "Train_only", "Val_only", "Test_only", "Val_Test", "None"}
    elif axis == "mode":
        allowed = {"corrected", "legacy"}
    elif axis == "model":
        allowed = set(_MODEL_HIDDEN_INIT)
    else:
        raise ConfigError(
            f"unknown ablation axis {axis!r}; use permutation, factor, mode, ratio or model"
        )
    bad = [v for v in items if v not in allowed]
    if bad:
        raise ConfigError(f"axis {axis!r} does not accept {bad}; expected {sorted(allowed)}")
    return [str(v) for v in items]


_AXIS_FIELD = {
    "permutation": ("masking", "permutation"),
    "factor": ("masking", "adjust_factor"),
    "mode": ("masking", "mode"),
    "ratio": ("masking", "rate"),
    "model": ("model", "use_hidden_init"),
}


def arm_config(config: ExperimentConfig, axis: str, value: Any) -> ExperimentConfig:
    """Copy *config* with the setting behind *axis* replaced by *value*.

    The ``model`` axis compares the full model (``csai``) with the same backbone started
    from zero hidden states (``brits``).
    """

    section, name = _AXIS_FIELD[axis]
    data = config.model_dump()
    data[section][name] = _MODEL_HIDDEN_INIT[value] if axis == "model" else value
    return ExperimentConfig.model_validate(data)


@dataclass(frozen=True)
class AblationRow:
    value: Any
    report: CrossValReport

    def flat(self, axis: str) -> dict[str, Any]:
        agg = self.report.aggregate()
        row: dict[str, Any] = {axis: self.value}
        for key in METRIC_KEYS:
            row[f"{key}_mean"] = agg[key]["mean"]
            row[f"{key}_std"] = agg[key]["std"]
        row["epochs_to_best"] = agg["epochs_to_best"]["mean"]
        for split in ("train", "val", "test"):
            row[f"{split}_mask_rate"] = agg[f"{split}_mask_rate"]["mean"]
        for name, stats in agg["baselines"].items():
            row[f"{name}_mae_mean"] = stats["mean"]
        return row


@dataclass(frozen=True)
class AblationReport:
    axis: str
    rows: list[AblationRow] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    def table(self) -> list[dict[str, Any]]:
        return [r.flat(self.axis) for r in self.rows]

    def to_dict(self) -> dict[str, Any]:
        return {
            "axis": self.axis,
            "config": self.config,
            "rows": self.table(),
            "arms": [
                {"value": r.value, **r.report.to_dict()} for r in self.rows
            ],
        }


def ablate(
    config: ExperimentConfig,
    axis: AblationAxis | str,
    values: Sequence[Any],
    dataset: TimeSeriesBatch,
    *,
    workers: int | None = None,
) -> AblationReport:
    """Cross-validate once per axis value; all arms share seeds and folds."""

    values = parse_axis_values(axis, values)
    rows = []
    for value in values:
        arm = arm_config(config, axis, value)
        logger.info("ablation_arm", extra={"axis": axis, "value": value})
        rows.append(AblationRow(value=value, report=cross_validate(arm, dataset, workers=workers)))
    return AblationReport(axis=axis, rows=rows, config=config.resolved())


__all__ = [
    "N_FOLDS",
    "AblationAxis",
    "load_dataset",
    "RunResult",
    "run_prepared",
    "run_single",
    "fold_assignments",
    "fold_split",
    "FoldResult",
    "CrossValReport",
    "cross_validate",
    "parse_axis_values",
    "arm_config",
    "AblationRow",
    "AblationReport",
    "ablate",
]
