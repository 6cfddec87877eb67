import json
import math
from pathlib import Path

import numpy as np
import pytest

from csai_imputation.reporting import (
    axis_series,
    dumps_report,
    emit_report,
    epoch_series,
    markdown_table,
    normalize_numbers,
    read_table,
    report_rows,
    write_plot_series,
    write_table,
)


def test_normalize_numbers_rounds_and_cleans() -> None:
    data = {
        "a": np.float64(1.23456789012345),
        "b": [np.int64(3), math.nan, math.inf],
        "c": np.array([0.5, 2.0]),
        "d": np.bool_(True),
    }
    assert normalize_numbers(data) == {
        "a": 1.23456789012,
        "b": [3, None, None],
        "c": [0.5, 2.0],
        "d": True,
    }


def test_dumps_report_is_deterministic() -> None:
    text = dumps_report({"b": 1.0, "a": {"z": 2, "y": None}})
    assert text == dumps_report({"a": {"y": None, "z": 2}, "b": 1.0})
    assert text.endswith("\n")
    assert list(json.loads(text)) == ["a", "b"]


def test_table_round_trip(tmp_path: Path) -> None:
    rows = [
        {"mode": "corrected", "mae_mean": 0.25, "auc_mean": None},
        {"mode": "legacy", "mae_mean": 0.5, "auc_mean": 0.75},
    ]
    path = write_table(rows, tmp_path / "t.csv")
    assert read_table(path) == rows


def test_empty_table(tmp_path: Path) -> None:
    path = write_table([], tmp_path / "empty.csv")
    assert path.read_text() == ""
    assert read_table(path) == []
    assert markdown_table([]) == ""


def test_report_rows_by_shape() -> None:
    assert report_rows({"rows": [{"x": 1}]}) == [{"x": 1}]
    folds = {
        "folds": [
            {
                "fold": 0,
                "best_epoch": 3,
                "test": {"mae": 0.1, "mre": 0.2, "auc": None},
                "baselines": {"mean": {"mae": 0.4}},
            }
        ]
    }
    assert report_rows(folds) == [
        {"fold": 0, "best_epoch": 3, "mae": 0.1, "mre": 0.2, "auc": None, "mean_mae": 0.4}
    ]
    single = {"best_epoch": 2, "test": {"mae": 1.0, "mre": None, "auc": 0.6}}
    assert report_rows(single) == [{"best_epoch": 2, "mae": 1.0, "mre": None, "auc": 0.6}]
    assert report_rows({}) == []
    assert report_rows({"other": 1}) == []


def test_emit_report_formats(tmp_path: Path) -> None:
    results = {"rows": [{"factor": 0.0, "mae_mean": 0.3}]}
    json_path = emit_report(results, "json", tmp_path / "r.json")
    assert json.loads(json_path.read_text()) == results
    table_path = emit_report(results, "table", tmp_path / "r.csv")
    assert table_path.read_text().splitlines()[0] == "factor,mae_mean"
    with pytest.raises(ValueError):
        emit_report(results, "xml", tmp_path / "r.xml")


def test_markdown_table() -> None:
    text = markdown_table([{"axis": "All", "mae": 0.123456, "auc": None}])
    lines = text.splitlines()
    assert lines[0] == "| axis | mae | auc |"
    assert lines[1] == "| --- | --- | --- |"
    assert lines[2] == "| All | 0.1235 |  |"


def test_plot_series(tmp_path: Path) -> None:
    history = [
        {"epoch": 0, "val_mae": 1.0, "train_loss": None},
        {"epoch": 1, "val_mae": 0.8, "train_loss": 2.0},
    ]
    assert epoch_series(history)["val_mae"].tolist() == [1.0, 0.8]
    report = {"axis": "factor", "rows": [{"factor": 5.0, "mae_mean": 0.2, "mae_std": 0.01}]}
    frame = axis_series(report)
    assert list(frame.columns) == ["factor", "mae_mean", "mae_std", "auc_mean", "auc_std"]
    written = write_plot_series({"history": history, **report}, tmp_path, "run")
    assert [p.name for p in written] == ["run_epoch_mae.csv", "run_factor_series.csv"]
