"""Incomplete multivariate time series and their derived indicators.

A :class:`TimeSeriesBatch` bundles ``N`` samples of ``T`` steps and ``D`` features
together with everything the imputation model derives from them:

* ``mask`` marks observed cells (1) and missing cells (0).
* ``delta`` holds the hours since the feature was last observed. The recursion
  conditions on the *previous* step's mask, so a feature observed at hours 0 and 9
  with nothing in between has ``delta = 9`` at hour 9.
* ``last_obs`` carries the most recent observed value forward, starting from a
  per-feature fill value.

Values at missing cells are stored as ``0`` and are never read except through
``last_obs`` or an imputation. Normalization statistics and median gaps are fitted on
the training split only; the helpers here never look at another split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray
from sklearn.model_selection import train_test_split

from .errors import DataValidationError, ShapeError
from .util import round_half_away

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]


def _frozen(array: Any, dtype: Any = np.float64) -> NDArray[Any]:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def compute_delta(
    timestamps: Sequence[float] | FloatArray,
    mask: Sequence[float] | FloatArray,
    *,
    sample: int = 0,
) -> FloatArray:
    """Return the time-gap vector of one feature of one sample.

    ``delta[0] = 0``; afterwards the raw step gap is added to the previous delta when
    the feature was missing at the previous step, and replaces it otherwise.

    Raises
    ------
    DataValidationError
        If the timestamps are not strictly increasing; the message names *sample*.
    """

    s = np.asarray(timestamps, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if s.ndim != 1 or s.shape != m.shape:
        raise ShapeError(f"timestamps {s.shape} and mask {m.shape} must be equal 1-D shapes")
    if s.size == 0:
        raise DataValidationError("a series needs at least one step")
    if np.any(np.diff(s) <= 0):
        raise DataValidationError(f"sample {sample}: timestamps must be strictly increasing")
    delta = np.zeros_like(s)
    for t in range(1, s.size):
        gap = s[t] - s[t - 1]
        delta[t] = gap + delta[t - 1] if m[t - 1] == 0 else gap
    return delta


def compute_deltas(timestamps: FloatArray, mask: FloatArray) -> FloatArray:
    """Vectorised :func:`compute_delta` over ``[N, T]`` timestamps and ``[N, T, D]`` masks."""

    s = np.asarray(timestamps, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if s.ndim != 2 or m.ndim != 3 or m.shape[:2] != s.shape:
        raise ShapeError(f"timestamps {s.shape} do not match mask {m.shape}")
    bad = np.flatnonzero(np.any(np.diff(s, axis=1) <= 0, axis=1))
    if bad.size:
        raise DataValidationError(f"sample {int(bad[0])}: timestamps must be strictly increasing")
    delta = np.zeros_like(m)
    gaps = np.diff(s, axis=1)
    for t in range(1, s.shape[1]):
        gap = gaps[:, t - 1, None]
        delta[:, t, :] = np.where(m[:, t - 1, :] == 0, gap + delta[:, t - 1, :], gap)
    return delta


def build_last_observation(
    values: FloatArray, mask: FloatArray, fill: Sequence[float] | FloatArray
) -> FloatArray:
    """Carry the most recent observed value forward along the time axis.

    Works on ``[T, D]`` or ``[N, T, D]`` arrays; cells before the first observation of a
    feature take ``fill[d]``.
    """

    x = np.asarray(values, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    f = np.asarray(fill, dtype=np.float64)
    if x.shape != m.shape or x.ndim not in (2, 3) or f.shape != (x.shape[-1],):
        raise ShapeError(f"values {x.shape}, mask {m.shape} and fill {f.shape} disagree")
    squeeze = x.ndim == 2
    if squeeze:
        x, m = x[None], m[None]
    out = np.empty_like(x)
    carry = np.broadcast_to(f, (x.shape[0], x.shape[2])).copy()
    for t in range(x.shape[1]):
        carry = np.where(m[:, t, :] == 1, x[:, t, :], carry)
        out[:, t, :] = carry
    return out[0] if squeeze else out


@dataclass(frozen=True)
class TimeSeriesBatch:
    """One batch (or a whole split) of incomplete multivariate series."""

    values: FloatArray
    """``[N, T, D]`` feature values; 0 wherever ``mask`` is 0."""

    mask: FloatArray
    """``[N, T, D]`` observation indicator."""

    timestamps: FloatArray
    """``[N, T]`` hours since admission, strictly increasing per sample."""

    delta: FloatArray
    """``[N, T, D]`` hours since the previous observation of each feature."""

    last_obs: FloatArray
    """``[N, T, D]`` last observation carried forward."""

    fill: FloatArray
    """``[D]`` value used by ``last_obs`` before the first observation."""

    labels: FloatArray | None = None
    """Optional ``[N]`` binary outcome."""

    sample_ids: tuple[str, ...] = field(default_factory=tuple)

    @classmethod
    def from_arrays(
        cls,
        values: Any,
        mask: Any,
        timestamps: Any,
        *,
        labels: Any | None = None,
        fill: Any | None = None,
        sample_ids: Sequence[str] | None = None,
    ) -> "TimeSeriesBatch":
        """Build a batch, deriving ``delta`` and ``last_obs`` from the mask."""

        m = np.asarray(mask, dtype=np.float64)
        x = np.asarray(values, dtype=np.float64)
        s = np.asarray(timestamps, dtype=np.float64)
        if x.ndim != 3 or x.shape != m.shape or s.shape != x.shape[:2]:
            raise ShapeError(
                f"values {x.shape}, mask {m.shape} and timestamps {s.shape} disagree"
            )
        if not np.all((m == 0) | (m == 1)):
            raise DataValidationError("mask must be binary")
        x = np.where(m == 1, np.nan_to_num(x), 0.0)
        f = np.zeros(x.shape[2]) if fill is None else np.asarray(fill, dtype=np.float64)
        ids = tuple(sample_ids) if sample_ids is not None else tuple(str(i) for i in range(len(x)))
        if len(ids) != x.shape[0]:
            raise ShapeError(f"{len(ids)} sample ids for {x.shape[0]} samples")
        lab = None
        if labels is not None:
            lab = _frozen(labels)
            if lab.shape != (x.shape[0],):
                raise ShapeError(f"labels {lab.shape} do not match {x.shape[0]} samples")
        return cls(
            values=_frozen(x),
            mask=_frozen(m),
            timestamps=_frozen(s),
            delta=_frozen(compute_deltas(s, m)),
            last_obs=_frozen(build_last_observation(x, m, f)),
            fill=_frozen(f),
            labels=lab,
            sample_ids=ids,
        )

    @property
    def n_samples(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_steps(self) -> int:
        return int(self.values.shape[1])

    @property
    def n_features(self) -> int:
        return int(self.values.shape[2])

    def subset(self, indices: Sequence[int] | NDArray[np.int64]) -> "TimeSeriesBatch":
        idx = np.asarray(indices, dtype=np.int64)
        return TimeSeriesBatch(
            values=_frozen(self.values[idx]),
            mask=_frozen(self.mask[idx]),
            timestamps=_frozen(self.timestamps[idx]),
            delta=_frozen(self.delta[idx]),
            last_obs=_frozen(self.last_obs[idx]),
            fill=self.fill,
            labels=None if self.labels is None else _frozen(self.labels[idx]),
            sample_ids=tuple(self.sample_ids[i] for i in idx),
        )

    def with_values(self, values: Any, mask: Any | None = None, fill: Any | None = None) -> "TimeSeriesBatch":
        """Return a copy with new values (and optionally mask/fill), re-deriving indicators."""

        return TimeSeriesBatch.from_arrays(
            values,
            self.mask if mask is None else mask,
            self.timestamps,
            labels=self.labels,
            fill=self.fill if fill is None else fill,
            sample_ids=self.sample_ids,
        )

    def reversed(self) -> "TimeSeriesBatch":
        """Return the time-reversed batch with deltas recomputed from reversed timestamps."""

        s = self.timestamps
        rev_s = s[:, -1:] - s[:, ::-1]
        return TimeSeriesBatch.from_arrays(
            self.values[:, ::-1, :],
            self.mask[:, ::-1, :],
            rev_s,
            labels=self.labels,
            fill=self.fill,
            sample_ids=self.sample_ids,
        )


@dataclass(frozen=True)
class NormStats:
    """Per-feature standardization constants fitted on observed training cells."""

    mean: FloatArray
    std: FloatArray
    fitted_on: str = "train"
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "fitted_on": self.fitted_on,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NormStats":
        return cls(
            mean=_frozen(data["mean"]),
            std=_frozen(data["std"]),
            fitted_on=str(data.get("fitted_on", "train")),
            warnings=tuple(data.get("warnings", ())),
        )


@dataclass(frozen=True)
class MedianGaps:
    """Per-feature median hours between consecutive observations (training split)."""

    tau: FloatArray

    def to_dict(self) -> dict[str, Any]:
        return {"tau": [float(v) for v in self.tau]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MedianGaps":
        return cls(tau=_frozen(data["tau"]))


def compute_median_gaps(train: TimeSeriesBatch) -> MedianGaps:
    """Return the median inter-observation gap per feature, pooled over samples.

    Features observed fewer than twice in every sample take the median of the other
    features' medians.
    """

    if train.n_samples == 0:
        raise DataValidationError("cannot compute median gaps of an empty training set")
    tau = np.full(train.n_features, np.nan)
    for d in range(train.n_features):
        gaps: list[FloatArray] = []
        for n in range(train.n_samples):
            times = train.timestamps[n][train.mask[n, :, d] == 1]
            if times.size >= 2:
                gaps.append(np.diff(times))
        if gaps:
            tau[d] = float(np.median(np.concatenate(gaps)))
    known = tau[~np.isnan(tau)]
    if known.size == 0:
        spacing = np.diff(train.timestamps, axis=1)
        fallback = float(np.median(spacing)) if spacing.size else 0.0
    else:
        fallback = float(np.median(known))
    if known.size < tau.size:
        logger.warning(
            "median_gap_fallback",
            extra={"features": np.flatnonzero(np.isnan(tau)).tolist(), "tau": fallback},
        )
    return MedianGaps(tau=_frozen(np.where(np.isnan(tau), fallback, tau)))


@dataclass(frozen=True)
class SplitIndices:
    """Disjoint, exhaustive sample indices of a three-way split."""

    train: NDArray[np.int64]
    val: NDArray[np.int64]
    test: NDArray[np.int64]

    def to_dict(self) -> dict[str, list[int]]:
        return {
            "train": self.train.tolist(),
            "val": self.val.tolist(),
            "test": self.test.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Sequence[int]]) -> "SplitIndices":
        return cls(**{k: _frozen(data[k], np.int64) for k in ("train", "val", "test")})


def _can_stratify(labels: NDArray[Any] | None, n_pick: int) -> bool:
    if labels is None:
        return False
    _, counts = np.unique(labels, return_counts=True)
    n_classes = counts.size
    return (
        n_classes > 1
        and int(counts.min()) >= 2
        and n_classes <= n_pick <= labels.size - n_classes
    )


def split_dataset(
    n_samples: int,
    ratios: tuple[float, float, float],
    seed: int,
    *,
    labels: Sequence[float] | NDArray[Any] | None = None,
) -> SplitIndices:
    """Split ``range(n_samples)`` into train/validation/test index sets.

    Validation and test sizes are ``round(ratio * N)``; training takes the rest. When
    labels are given the split is stratified by label (falling back to a plain random
    split when a class is too small to stratify).

    Raises
    ------
    DataValidationError
        If the ratios do not sum to 1 or any split would be empty.
    """

    if n_samples <= 0:
        raise DataValidationError("cannot split an empty dataset")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataValidationError(f"split ratios {ratios} must be non-negative and sum to 1")
    n_val = round_half_away(ratios[1] * n_samples)
    n_test = round_half_away(ratios[2] * n_samples)
    n_train = n_samples - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise DataValidationError(
            f"ratios {ratios} give an empty split for {n_samples} samples "
            f"(train={n_train}, val={n_val}, test={n_test})"
        )

    idx = np.arange(n_samples)
    lab = None if labels is None else np.asarray(labels)
    rest, test = train_test_split(
        idx,
        test_size=n_test,
        random_state=seed,
        stratify=lab if _can_stratify(lab, n_test) else None,
    )
    rest_lab = None if lab is None else lab[rest]
    train, val = train_test_split(
        rest,
        test_size=n_val,
        random_state=seed,
        stratify=rest_lab if _can_stratify(rest_lab, n_val) else None,
    )
    return SplitIndices(
        train=_frozen(np.sort(train), np.int64),
        val=_frozen(np.sort(val), np.int64),
        test=_frozen(np.sort(test), np.int64),
    )


def fit_normalizer(train: TimeSeriesBatch, *, fitted_on: str = "train") -> NormStats:
    """Fit per-feature mean and population std on the observed training cells.

    Zero-variance features get ``std = 1``; features with no observation at all get
    ``mean = 0, std = 1`` and a warning.
    """

    d = train.n_features
    mean = np.zeros(d)
    std = np.ones(d)
    warnings: list[str] = []
    for j in range(d):
        observed = train.values[..., j][train.mask[..., j] == 1]
        if observed.size == 0:
            msg = f"feature {j} has no observed training cells; using mean 0, std 1"
            warnings.append(msg)
            logger.warning("normalizer_unobserved_feature", extra={"feature": j})
            continue
        mean[j] = float(observed.mean())
        sd = float(observed.std())
        std[j] = sd if sd > 0 else 1.0
    return NormStats(mean=_frozen(mean), std=_frozen(std), fitted_on=fitted_on, warnings=tuple(warnings))


def apply_normalizer(batch: TimeSeriesBatch, stats: NormStats) -> TimeSeriesBatch:
    """Standardize observed cells with *stats*; indicators are re-derived with fill 0."""

    if stats.mean.shape != (batch.n_features,):
        raise ShapeError(
            f"normalizer has {stats.mean.shape[0]} features, batch has {batch.n_features}"
        )
    scaled = np.where(batch.mask == 1, (batch.values - stats.mean) / stats.std, 0.0)
    return batch.with_values(scaled, fill=np.zeros(batch.n_features))


def invert_normalizer(values: Any, stats: NormStats) -> FloatArray:
    """Map standardized *values* (last axis = features) back to feature units."""

    arr = np.asarray(values, dtype=np.float64)
    if arr.shape[-1] != stats.mean.shape[0]:
        raise ShapeError(f"last axis {arr.shape[-1]} does not match {stats.mean.shape[0]} features")
    return arr * stats.std + stats.mean


__all__ = [
    "TimeSeriesBatch",
    "NormStats",
    "MedianGaps",
    "SplitIndices",
    "compute_delta",
    "compute_deltas",
    "build_last_observation",
    "compute_median_gaps",
    "split_dataset",
    "fit_normalizer",
    "apply_normalizer",
    "invert_normalizer",
]
