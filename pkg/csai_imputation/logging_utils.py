from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Tuple

__all__ = ["setup_logging", "reset_logging"]

_BASE_RECORD_FACTORY = logging.getLogRecordFactory()
_RUN_ID = ""

# Attributes every LogRecord carries; anything else arrived through ``extra=``.
_STANDARD_ATTRS = set(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {
    "message",
    "asctime",
    "run_id",
}


def _extra_fields(record: logging.LogRecord) -> dict[str, Any]:
    return {k: v for k, v in vars(record).items() if k not in _STANDARD_ATTRS}


class JsonFormatter(logging.Formatter):
    def __init__(self, datefmt: str | None = None) -> None:
        super().__init__(datefmt=datefmt)

    def format(self, record: logging.LogRecord) -> str:
        data: dict[str, Any] = {
            "time": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "run_id": getattr(record, "run_id", ""),
            "logger": record.name,
            "message": record.getMessage(),
        }
        data.update(_extra_fields(record))
        if record.exc_info:
            data["exc_info"] = self.formatException(record.exc_info)
        return json.dumps(data, default=str)


class TextFormatter(logging.Formatter):
    """Plain formatter that appends ``extra`` fields as ``key=value`` pairs."""

    def format(self, record: logging.LogRecord) -> str:
        line = super().format(record)
        extras = _extra_fields(record)
        if extras:
            line += " " + " ".join(f"{k}={v}" for k, v in sorted(extras.items()))
        return line


def setup_logging(
    output_dir: Path,
    *,
    level: str = "INFO",
    json_logs: bool = False,
    run_id: str = "run",
) -> Tuple[Path, str]:
    """Configure global logging for one CLI run.

    Parameters
    ----------
    output_dir:
        Directory where the log file will be written.
    level:
        Logging verbosity.
    json_logs:
        Emit JSON formatted logs when ``True``; otherwise plain text.
    run_id:
        Identifier stamped on every record and used in the log file name. The CLI
        derives it from the resolved configuration so reruns share a name.

    Returns
    -------
    Tuple[Path, str]
        The path to the created log file and the run identifier.
    """

    global _RUN_ID
    _RUN_ID = run_id
    output_dir.mkdir(parents=True, exist_ok=True)
    log_path = output_dir / f"run_{_RUN_ID}.log"

    handler = logging.FileHandler(log_path)
    if json_logs:
        formatter: logging.Formatter = JsonFormatter("%Y-%m-%dT%H:%M:%S%z")
    else:
        formatter = TextFormatter(
            "%(asctime)s %(levelname)s [%(run_id)s] %(name)s %(message)s",
            "%Y-%m-%dT%H:%M:%S%z",
        )
    handler.setFormatter(formatter)

    root = logging.getLogger()
    for h in root.handlers[:]:
        root.removeHandler(h)
        h.close()
    root.addHandler(handler)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))

    def record_factory(*args: Any, **kwargs: Any) -> logging.LogRecord:
        record = _BASE_RECORD_FACTORY(*args, **kwargs)
        record.run_id = _RUN_ID
        return record

    logging.setLogRecordFactory(record_factory)
    return log_path, _RUN_ID


def reset_logging() -> None:
    """Detach the run handler and restore the default record factory."""

    root = logging.getLogger()
    for h in root.handlers[:]:
        root.removeHandler(h)
        h.close()
    logging.setLogRecordFactory(_BASE_RECORD_FACTORY)
