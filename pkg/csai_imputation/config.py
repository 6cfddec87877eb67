"""Experiment configuration using Pydantic models."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

Permutation = Literal["All", "Train_only", "Val_only", "Test_only", "Val_Test", "None"]
MaskMode = Literal["corrected", "legacy"]

ENV_PREFIX = "CSAI"


class SyntheticConfig(BaseModel):
    """Settings for the synthetic MNAR generator."""

    n_samples: int = Field(200, ge=1, description="Number of samples (N)")
    n_steps: int = Field(24, ge=1, description="Time steps per sample (T)")
    n_features: int = Field(8, ge=1, description="Features per step (D)")
    missing_rates: list[float] | None = Field(
        None,
        description="Per-feature missing rate in [0, 1); defaults to a 0.1..0.7 ramp",
    )
    mnar_strength: float = Field(
        1.0, ge=0, description="Coupling between value magnitude and missingness"
    )
    ar_coefficient: float = Field(
        0.9, ge=0, lt=1, description="Per-hour autoregressive persistence of the latent state"
    )
    feature_correlation: float = Field(
        0.6, ge=0, lt=1, description="Correlation between the latent feature innovations"
    )
    mean_gap_hours: float = Field(1.0, gt=0, description="Mean spacing between time steps")
    noise_std: float = Field(0.1, ge=0, description="Measurement noise on observed values")
    label_noise: float = Field(
        0.5, ge=0, description="Logit noise of the outcome label; 0 makes labels deterministic"
    )

    @field_validator("missing_rates")
    @classmethod
    def _validate_rates(cls, v: list[float] | None) -> list[float] | None:
        if v is None:
            return v
        for rate in v:
            if not 0 <= rate < 1:
                raise ValueError(f"missing rate {rate} must lie in [0, 1)")
        return v

    @model_validator(mode="after")
    def _rates_match_features(self) -> "SyntheticConfig":
        if self.missing_rates is not None and len(self.missing_rates) != self.n_features:
            raise ValueError(
                f"missing_rates has {len(self.missing_rates)} entries, expected {self.n_features}"
            )
        return self

    def resolved_missing_rates(self) -> list[float]:
        """Return the configured rates, or an evenly spaced 0.1..0.7 ramp."""

        if self.missing_rates is not None:
            return list(self.missing_rates)
        if self.n_features == 1:
            return [0.4]
        step = 0.6 / (self.n_features - 1)
        return [round(0.1 + i * step, 6) for i in range(self.n_features)]


class DatasetConfig(BaseModel):
    """Where the data comes from: the synthetic generator or a delimited table."""

    synthetic: SyntheticConfig | None = None
    table: str | None = Field(None, description="Path to a sample_id,time,feature_* table")
    labels: str | None = Field(None, description="Optional sample_id,label table")

    @model_validator(mode="after")
    def _one_source(self) -> "DatasetConfig":
        if (self.synthetic is None) == (self.table is None):
            raise ValueError("dataset needs exactly one of 'synthetic' or 'table'")
        return self


class SplitConfig(BaseModel):
    """Train/validation/test split for single runs."""

    ratios: tuple[float, float, float] = Field((0.8, 0.1, 0.1))
    stratify: bool = Field(True, description="Stratify by label when labels exist")

    @field_validator("ratios")
    @classmethod
    def _ratios_sum_to_one(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(r < 0 for r in v):
            raise ValueError("split ratios must be non-negative")
        if abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        return v


class MaskingConfig(BaseModel):
    """Artificial masking of observed cells."""

    rate: float = Field(0.10, ge=0, lt=1, description="Target masking rate U")
    adjust_factor: float = Field(0.0, ge=0, description="Adjustment factor I")
    permutation: Permutation = Field(
        "Train_only", description="Splits that receive non-uniform masking"
    )
    mode: MaskMode = Field("corrected", description="Uniform masking implementation")


class ModelConfig(BaseModel):
    """CSAI model hyperparameters and switches."""

    d_model: int = Field(16, gt=0, description="Width of the initializer encoder")
    n_heads: int = Field(2, gt=0, description="Self-attention heads")
    d_hidden: int = Field(108, gt=0, description="Recurrent hidden units")
    use_hidden_init: bool = Field(
        True, description="Conditional hidden-state initialization; False gives plain BRITS"
    )
    literal_decay_attention: bool = Field(
        False, description="Use the signed exp(-a(d - tau)) attention form"
    )
    recurrent_input: Literal["product", "concat"] = Field(
        "product", description="Recurrent input [C * m] or the concatenation [C, m]"
    )
    attention_eps: float = Field(1e-6, gt=0, description="Smoothing of |delta - tau|")

    @model_validator(mode="after")
    def _check_widths(self) -> "ModelConfig":
        if self.d_model % 2:
            raise ValueError("d_model must be even for the positional encoding")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        return self


class TrainConfig(BaseModel):
    """Optimisation settings."""

    epochs: int = Field(50, ge=0)
    batch_size: int = Field(64, gt=0)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    consistency_weight: float = Field(0.1, ge=0, description="lambda_c")
    classification_weight: float = Field(1.0, ge=0, description="lambda_y")
    patience: int = Field(20, ge=1, description="Early stopping on validation MAE")
    task: Literal["imputation", "classification"] = Field("imputation")

    def effective_classification_weight(self) -> float:
        return self.classification_weight if self.task == "classification" else 0.0


class RuntimeConfig(BaseModel):
    """Process-level settings; the only ones environment variables may override."""

    output_dir: str = Field("runs", description="Directory for reports and artifacts")
    threads: int = Field(1, ge=1, description="Torch intra-op threads")
    workers: int = Field(1, ge=1, description="Folds or arms evaluated concurrently")
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = Field("INFO")

    @field_validator("log_level", mode="before")
    @classmethod
    def _validate_log_level(cls, v: Any) -> str:
        if isinstance(v, str):
            level = v.strip().upper()
            if level in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
                return level
        raise ValueError("log_level must be one of: DEBUG, INFO, WARNING, ERROR, CRITICAL")


class ExperimentConfig(BaseModel):
    """Top level configuration driving one experiment."""

    seed: int = Field(..., ge=0, description="Root seed; every random stream derives from it")
    dataset: DatasetConfig
    split: SplitConfig = Field(default_factory=SplitConfig)
    masking: MaskingConfig = Field(default_factory=MaskingConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)

    def resolved(self) -> dict[str, Any]:
        """Return the fully-resolved configuration as plain JSON-ready data."""

        return self.model_dump(mode="json")


def _apply_env_overrides(data: dict[str, Any]) -> dict[str, Any]:
    """Apply ``CSAI__OUTPUT_DIR`` and ``CSAI__THREADS`` to *data* in place."""

    runtime = data.setdefault("runtime", {})
    out = os.environ.get(f"{ENV_PREFIX}__OUTPUT_DIR")
    if out:
        runtime["output_dir"] = out
    threads = os.environ.get(f"{ENV_PREFIX}__THREADS")
    if threads:
        try:
            runtime["threads"] = int(threads)
        except ValueError as exc:
            raise ConfigError(f"{ENV_PREFIX}__THREADS must be an integer, got {threads!r}") from exc
    return data


def load_config(path: Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Load an :class:`ExperimentConfig` from a JSON file.

    Environment variables ``CSAI__OUTPUT_DIR`` and ``CSAI__THREADS`` override the
    ``runtime`` block; *overrides* (nested dicts, typically from CLI flags) are merged
    last.

    Raises
    ------
    ConfigError
        If the file is missing, is not valid JSON or fails validation.
    """

    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")

    data = _apply_env_overrides(data)
    if overrides:
        data = deep_merge(data, overrides)
    try:
        return ExperimentConfig(**data)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Recursively merge *override* into a copy of *base*."""

    result = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = value
    return result


__all__ = [
    "Permutation",
    "MaskMode",
    "SyntheticConfig",
    "DatasetConfig",
    "SplitConfig",
    "MaskingConfig",
    "ModelConfig",
    "TrainConfig",
    "RuntimeConfig",
    "ExperimentConfig",
    "load_config",
    "deep_merge",
]
