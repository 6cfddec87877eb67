"""Custom exception hierarchy and exit codes for the CLI."""

from __future__ import annotations

from enum import IntEnum


class CsaiError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(CsaiError):
    """Configuration or IO error."""


class DataValidationError(CsaiError):
    """Input data violates a structural rule (shapes, timestamps, table rows)."""


class ShapeError(DataValidationError):
    """Tensor or array shapes do not agree."""


class MaskPlanError(CsaiError):
    """A mask plan is infeasible or references cells it must not touch."""


class TrainingError(CsaiError):
    """Training diverged or cannot proceed.

    Carries the epoch, minibatch and parameter norms at the point of failure.
    """

    def __init__(
        self,
        message: str,
        *,
        epoch: int | None = None,
        batch: int | None = None,
        norms: dict[str, float] | None = None,
    ) -> None:
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.norms = norms or {}


class ExitCode(IntEnum):
    """Exit codes for different error categories."""

    OK = 0
    VALIDATION = 1
    RUNTIME = 2


def exit_code_for(exc: BaseException) -> ExitCode:
    """Map *exc* onto the CLI exit code contract."""

    from pydantic import ValidationError

    if isinstance(exc, (ConfigError, DataValidationError, MaskPlanError, ValidationError)):
        return ExitCode.VALIDATION
    return ExitCode.RUNTIME


__all__ = [
    "CsaiError",
    "ConfigError",
    "DataValidationError",
    "ShapeError",
    "MaskPlanError",
    "TrainingError",
    "ExitCode",
    "exit_code_for",
]
