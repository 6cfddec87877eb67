"""Report serialization: JSON documents, flat tables and plot-ready series."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping, Sequence

import numpy as np
import pandas as pd

from .util import round_significant

ReportFormat = Literal["json", "table"]


def normalize_numbers(obj: Any, digits: int = 12) -> Any:
    """Return *obj* as plain JSON data with floats rounded to *digits* significant digits.

    Non-finite floats become ``None``; numpy scalars and arrays become Python values.
    """

    if isinstance(obj, Mapping):
        return {str(k): normalize_numbers(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [normalize_numbers(v, digits) for v in obj]
    if isinstance(obj, np.ndarray):
        return normalize_numbers(obj.tolist(), digits)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return round_significant(value, digits) if math.isfinite(value) else None
    return obj


def dumps_report(data: Any) -> str:
    """Serialize deterministically: sorted keys, rounded numbers, trailing newline."""

    return json.dumps(normalize_numbers(data), sort_keys=True, indent=2) + "\n"


def report_rows(results: Any) -> list[dict[str, Any]]:
    """Extract the flat rows a report renders as a table.

    Ablation reports contribute their ``rows``; cross-validation reports one row per
    fold; single-run reports one row of test metrics; a list passes through.
    """

    if isinstance(results, list):
        return [dict(r) for r in results]
    if not isinstance(results, Mapping) or not results:
        return []
    if "rows" in results:
        return [dict(r) for r in results["rows"]]
    if "folds" in results:
        return [
            {
                "fold": f["fold"],
                "best_epoch": f["best_epoch"],
                **{k: f["test"][k] for k in ("mae", "mre", "auc")},
                **{f"{name}_mae": b["mae"] for name, b in sorted(f["baselines"].items())},
            }
            for f in results["folds"]
        ]
    if "test" in results:
        row = {"best_epoch": results.get("best_epoch")}
        row.update({k: results["test"][k] for k in ("mae", "mre", "auc")})
        for name, b in sorted(results.get("baselines", {}).items()):
            row[f"{name}_mae"] = b["mae"]
        return [row]
    return []


def _columns(rows: Iterable[Mapping[str, Any]]) -> list[str]:
    seen: dict[str, None] = {}
    for r in rows:
        for k in r:
            seen.setdefault(k, None)
    return list(seen)


def rows_to_frame(rows: Sequence[Mapping[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(normalize_numbers(list(rows)), columns=_columns(rows))


def write_table(rows: Sequence[Mapping[str, Any]], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = rows_to_frame(rows)
    path.write_text(frame.to_csv(index=False) if len(frame.columns) else "")
    return path


def read_table(path: Path) -> list[dict[str, Any]]:
    """Read a table written by :func:`write_table` back into row dictionaries."""

    if not path.read_text().strip():
        return []
    frame = pd.read_csv(path, keep_default_na=False, na_values=[""])
    rows = frame.astype(object).where(frame.notna(), None).to_dict(orient="records")
    return [
        {k: (v.item() if isinstance(v, np.generic) else v) for k, v in r.items()} for r in rows
    ]


def emit_report(results: Any, fmt: ReportFormat | str, path: Path) -> Path:
    """Write *results* as a JSON document or as a flat delimited table.

    Raises
    ------
    ValueError
        On an unknown format.
    OSError
        If *path* cannot be written.
    """

    if fmt == "json":
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps_report(results))
        return path
    if fmt == "table":
        return write_table(report_rows(results), path)
    raise ValueError(f"unknown report format {fmt!r}; use json or table")


def markdown_table(rows: Sequence[Mapping[str, Any]]) -> str:
    """Render *rows* as a GitHub-flavoured Markdown table."""

    df = rows_to_frame(rows)
    headers = list(df.columns)
    if not headers:
        return ""
    lines = ["| " + " | ".join(headers) + " |\n", "| " + " | ".join(["---"] * len(headers)) + " |\n"]
    for _, row in df.iterrows():
        cells = []
        for val in row.tolist():
            if val is None or (isinstance(val, float) and math.isnan(val)):
                cells.append("")
            elif isinstance(val, float):
                cells.append(f"{val:.4f}")
            else:
                cells.append(str(val))
        lines.append("| " + " | ".join(cells) + " |\n")
    return "".join(lines)


def epoch_series(history: Sequence[Mapping[str, Any]]) -> pd.DataFrame:
    """Epoch vs. validation MAE and training loss."""

    return rows_to_frame(
        [{"epoch": h["epoch"], "val_mae": h["val_mae"], "train_loss": h.get("train_loss")} for h in history]
    )


def axis_series(report: Mapping[str, Any]) -> pd.DataFrame:
    """Axis value vs. MAE and AUC (mean and std over folds) of an ablation report."""

    axis = report["axis"]
    return rows_to_frame(
        [
            {
                axis: r[axis],
                "mae_mean": r.get("mae_mean"),
                "mae_std": r.get("mae_std"),
                "auc_mean": r.get("auc_mean"),
                "auc_std": r.get("auc_std"),
            }
            for r in report.get("rows", [])
        ]
    )


def write_plot_series(results: Mapping[str, Any], out_dir: Path, stem: str) -> list[Path]:
    """Write the plot-ready series *results* supports; returns the written paths."""

    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if "history" in results:
        path = out_dir / f"{stem}_epoch_mae.csv"
        path.write_text(epoch_series(results["history"]).to_csv(index=False))
        written.append(path)
    if "axis" in results:
        path = out_dir / f"{stem}_{results['axis']}_series.csv"
        path.write_text(axis_series(results).to_csv(index=False))
        written.append(path)
    return written


__all__ = [
    "ReportFormat",
    "normalize_numbers",
    "dumps_report",
    "report_rows",
    "rows_to_frame",
    "write_table",
    "read_table",
    "emit_report",
    "markdown_table",
    "epoch_series",
    "axis_series",
    "write_plot_series",
]
