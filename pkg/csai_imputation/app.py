"""Command line interface for CSAI imputation experiments.

One JSON configuration drives an experiment; flags only override fields of it. The
subcommands chain the library modules:

* ``generate`` – draw the synthetic MNAR dataset and write tables plus a manifest.
* ``preprocess`` – split the dataset and fit the training-only statistics.
* ``mask`` – plan artificial masking of one split and save the plan for replay.
* ``train`` – train on one split (or cross-validate) and write a checkpoint.
* ``evaluate`` – score a checkpoint on a masked split next to the baselines.
* ``ablate`` – cross-validate once per value of a masking axis or the model variant.
* ``audit`` – report realized masking rates of a plan.
* ``report`` – convert a JSON report into a table and print it.

Example
-------

Training and evaluating on the synthetic desk-scale dataset::

    csai train --config experiment.json --out runs/desk
    csai evaluate --config experiment.json --checkpoint runs/desk

Exit codes: 0 on success, 1 on validation errors (bad config, data, flags), 2 on
runtime failures.
"""

from __future__ import annotations

import hashlib
import importlib.metadata
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence, TypeVar, cast

import typer

try:  # typer >= 0.26 vendors click; catch the exceptions it actually raises
    from typer._click import exceptions as click
except ImportError:  # pragma: no cover - older typer uses standalone click
    import click  # type: ignore[no-redef]

from . import __version__
from .config import ExperimentConfig, load_config
from .csai import init_csai_params, make_store
from .errors import ConfigError, ExitCode, exit_code_for
from .experiments import ablate, cross_validate, load_dataset, parse_axis_values, run_single
from .logging_utils import setup_logging
from .masking import MaskPlan, audit_mask_plan, feature_missing_distribution
from .numcore import set_threads
from .reporting import dumps_report, emit_report, markdown_table, report_rows, write_plot_series
from .synthetic import generate_synthetic
from .table_loader import write_labels, write_table
from .trainer import evaluate, evaluate_baselines, make_eval_set, plan_split
from .tsdata import (
    MedianGaps,
    NormStats,
    SplitIndices,
    compute_median_gaps,
    fit_normalizer,
    split_dataset,
)
from .util import derive_seed

app = typer.Typer(help="Conditional self-attention imputation experiments")

# ``typer.Typer`` decorators are untyped; casting keeps decorated commands type-checked.
F = TypeVar("F", bound=Callable[..., Any])
callback = cast(Callable[..., Callable[[F], F]], app.callback)
command = cast(Callable[..., Callable[[F], F]], app.command)

SPLITS = ("train", "val", "test")


def _version() -> str:
    try:
        return importlib.metadata.version("csai-impute")
    except importlib.metadata.PackageNotFoundError:
        return __version__


def _version_callback(value: bool) -> None:
    """Print the package version and exit."""
    if value:
        typer.echo(_version())
        raise typer.Exit()


@dataclass
class CLIOptions:
    """Global command line flags."""

    log_level: str | None = None
    log_json: bool = False


@callback()
def cli(
    ctx: typer.Context,
    version: bool = typer.Option(
        False,
        "--version",
        callback=_version_callback,
        is_eager=True,
        help="Show the package version and exit",
    ),
    log_level: str | None = typer.Option(
        None, "--log-level", help="Logging verbosity (overrides runtime.log_level)"
    ),
    log_json: bool = typer.Option(
        False, "--log-json/--log-text", help="Write JSON logs instead of plain text"
    ),
) -> None:
    """CSAI imputation command line utilities."""
    ctx.obj = CLIOptions(log_level=log_level, log_json=log_json)


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def run_id_for(cfg: ExperimentConfig) -> str:
    """Stable identifier of a resolved configuration."""

    blob = json.dumps(cfg.resolved(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _masking_overrides(
    rate: float | None = None,
    factor: float | None = None,
    permutation: str | None = None,
    mode: str | None = None,
) -> dict[str, Any]:
    masking = {
        k: v
        for k, v in {
            "rate": rate,
            "adjust_factor": factor,
            "permutation": permutation,
            "mode": mode,
        }.items()
        if v is not None
    }
    return {"masking": masking} if masking else {}


def _start(
    ctx: typer.Context,
    config: Path,
    command_name: str,
    out: Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> tuple[ExperimentConfig, Path, logging.Logger]:
    """Load the config, set threads and start run-scoped logging."""

    options: CLIOptions = ctx.obj if isinstance(ctx.obj, CLIOptions) else CLIOptions()
    cfg = load_config(config, overrides)
    set_threads(cfg.runtime.threads)
    out_dir = out or Path(cfg.runtime.output_dir)
    setup_logging(
        out_dir,
        level=options.log_level or cfg.runtime.log_level,
        json_logs=options.log_json,
        run_id=run_id_for(cfg),
    )
    logger = logging.getLogger(__name__)
    logger.info("config: %s", json.dumps(cfg.resolved(), sort_keys=True))
    logger.info("command_start", extra={"command": command_name})
    return cfg, out_dir, logger


def _write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_report(data))
    return path


def _fail(exc: BaseException) -> typer.Exit:
    code = exit_code_for(exc)
    typer.echo(f"error: {exc}", err=True)
    logging.getLogger(__name__).error(
        "command_failed", extra={"error": type(exc).__name__, "exit_code": int(code)}
    )
    return typer.Exit(code=int(code))


def _split_for(cfg: ExperimentConfig, n_samples: int, labels: Any) -> SplitIndices:
    stratify = labels if cfg.split.stratify else None
    return split_dataset(
        n_samples, cfg.split.ratios, derive_seed(cfg.seed, "split"), labels=stratify
    )


def _check_split(split: str) -> None:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; use one of {', '.join(SPLITS)}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@command()
def generate(
    ctx: typer.Context,
    config: Path = typer.Option(..., "--config", help="Experiment config JSON"),
    out: Path | None = typer.Option(None, "--out", "-o", help="Directory for the dataset"),
) -> None:
    """Draw the synthetic dataset and write observed, ground-truth and label tables."""

    try:
        cfg, out_dir, logger = _start(ctx, config, "generate", out)
        if cfg.dataset.synthetic is None:
            raise ConfigError(f"{config}: generate needs a 'dataset.synthetic' block")
        ds = generate_synthetic(cfg.dataset.synthetic, cfg.seed)
        obs = ds.observed
        files = {
            "observed": write_table(
                out_dir / "observed.csv", obs.values, obs.mask, obs.timestamps, obs.sample_ids
            ).name,
            "ground_truth": write_table(
                out_dir / "ground_truth.csv", ds.ground_truth, None, obs.timestamps, obs.sample_ids
            ).name,
        }
        if obs.labels is not None:
            files["labels"] = write_labels(out_dir / "labels.csv", obs.labels, obs.sample_ids).name
        manifest = _write_json(out_dir / "manifest.json", {**ds.manifest(), "files": files})
        logger.info("dataset_written", extra={"dir": str(out_dir)})
    except Exception as exc:
        raise _fail(exc)
    typer.echo(f"Dataset written to {out_dir}")
    typer.echo(f"Manifest written to {manifest}")


@command()
def preprocess(
    ctx: typer.Context,
    config: Path = typer.Option(..., "--config", help="Experiment config JSON"),
    out: Path | None = typer.Option(None, "--out", "-o", help="Directory for the outputs"),
) -> None:
    """Split the dataset and fit normalization and median gaps on the training split."""

    try:
        cfg, out_dir, logger = _start(ctx, config, "preprocess", out)
        dataset = load_dataset(cfg, config.parent)
        split = _split_for(cfg, dataset.n_samples, dataset.labels)
        train = dataset.subset(split.train)
        stats = fit_normalizer(train)
        tau = compute_median_gaps(train)
        dist = feature_missing_distribution(train.mask)
        path = _write_json(
            out_dir / "preprocess.json",
            {
                "config": cfg.resolved(),
                "split": split.to_dict(),
                "norm_stats": stats.to_dict(),
                "median_gaps": tau.to_dict(),
                "missing_distribution": {
                    "p_dist": dist.p_dist.tolist(),
                    "n_obs": dist.n_obs.tolist(),
                },
            },
        )
        logger.info("preprocess_done", extra={"train": int(split.train.size)})
    except Exception as exc:
        raise _fail(exc)
    typer.echo(f"Preprocessing written to {path}")


@command()
def mask(
    ctx: typer.Context,
    config: Path = typer.Option(..., "--config", help="Experiment config JSON"),
    split: str = typer.Option("test", "--split", help="train, val or test"),
    out: Path | None = typer.Option(None, "--out", "-o", help="Output directory"),
    rate: float | None = typer.Option(None, "--rate", help="Override masking.rate"),
    factor: float | None = typer.Option(None, "--factor", help="Override masking.adjust_factor"),
    permutation: str | None = typer.Option(None, "--permutation", help="Override masking.permutation"),
    mode: str | None = typer.Option(None, "--mode", help="Override masking.mode"),
) -> None:
    """Plan artificial masking of one split and save the plan for replay."""

    try:
        _check_split(split)
        overrides = _masking_overrides(rate, factor, permutation, mode)
        cfg, out_dir, logger = _start(ctx, config, "mask", out, overrides)
        dataset = load_dataset(cfg, config.parent)
        indices = _split_for(cfg, dataset.n_samples, dataset.labels)
        train = dataset.subset(indices.train)
        target = dataset.subset(getattr(indices, split))
        dist = feature_missing_distribution(train.mask)
        plan = plan_split(target, split, cfg.masking, dist, cfg.seed)
        path = plan.save(out_dir / f"{split}_plan.json")
        audit = audit_mask_plan(plan, target.mask)
        logger.info("mask_written", extra={"split": split, "cells": len(plan)})
    except Exception as exc:
        raise _fail(exc)
    typer.echo(f"{plan.strategy} plan with {len(plan)} cells (realized rate {audit.realized_rate:.4f})")
    typer.echo(f"Mask plan written to {path}")


@command()
def train(
    ctx: typer.Context,
    config: Path = typer.Option(..., "--config", help="Experiment config JSON"),
    out: Path | None = typer.Option(None, "--out", "-o", help="Output directory"),
    cross_validate_: bool = typer.Option(
        False, "--cross-validate", help="Run five-fold cross-validation instead of one split"
    ),
    epochs: int | None = typer.Option(None, "--epochs", help="Override training.epochs"),
    rate: float | None = typer.Option(None, "--rate", help="Override masking.rate"),
    factor: float | None = typer.Option(None, "--factor", help="Override masking.adjust_factor"),
    permutation: str | None = typer.Option(None, "--permutation", help="Override masking.permutation"),
    mode: str | None = typer.Option(None, "--mode", help="Override masking.mode"),
) -> None:
    """Train on one split (writing a checkpoint) or cross-validate."""

    try:
        overrides = _masking_overrides(rate, factor, permutation, mode)
        if epochs is not None:
            overrides["training"] = {"epochs": epochs}
        cfg, out_dir, logger = _start(ctx, config, "train", out, overrides)
        dataset = load_dataset(cfg, config.parent)
        written: list[Path] = []
        if cross_validate_:
            report = cross_validate(cfg, dataset).to_dict()
            written.append(_write_json(out_dir / "cv_report.json", report))
            written.append(emit_report(report, "table", out_dir / "cv_report.csv"))
        else:
            result, trained, data, split = run_single(cfg, dataset)
            report = {"config": cfg.resolved(), **result.to_dict()}
            written.append(trained.store.save(out_dir / "params.bin"))
            written.append(
                _write_json(
                    out_dir / "model.json",
                    {
                        "config": cfg.resolved(),
                        "n_features": dataset.n_features,
                        "n_steps": dataset.n_steps,
                        "split": split.to_dict(),
                        "norm_stats": data.stats.to_dict(),
                        "median_gaps": data.tau.to_dict(),
                    },
                )
            )
            written.append(data.val.plan.save(out_dir / "val_plan.json"))
            written.append(data.test.plan.save(out_dir / "test_plan.json"))
            written.append(_write_json(out_dir / "train_report.json", report))
            written.append(emit_report(report["history"], "table", out_dir / "history.csv"))
            written.extend(write_plot_series(report, out_dir, "train"))
        logger.info("train_done", extra={"files": [p.name for p in written]})
    except Exception as exc:
        raise _fail(exc)
    for p in written:
        typer.echo(f"Wrote {p}")


@command("evaluate")
def evaluate_cmd(
    ctx: typer.Context,
    config: Path = typer.Option(..., "--config", help="Experiment config JSON"),
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Directory written by train"),
    plan_path: Path | None = typer.Option(
        None, "--plan", help="Mask plan to score (defaults to the checkpoint's plan)"
    ),
    split: str = typer.Option("test", "--split", help="val or test"),
    out: Path | None = typer.Option(None, "--out", "-o", help="Output directory"),
) -> None:
    """Score a trained checkpoint on a masked split next to the baselines."""

    try:
        _check_split(split)
        cfg, out_dir, logger = _start(ctx, config, "evaluate", out)
        model_path = checkpoint / "model.json"
        if not model_path.exists():
            raise ConfigError(f"checkpoint metadata not found: {model_path}")
        meta = json.loads(model_path.read_text())
        stats = NormStats.from_dict(meta["norm_stats"])
        tau = MedianGaps.from_dict(meta["median_gaps"])
        indices = SplitIndices.from_dict(meta["split"])
        params = init_csai_params(cfg.model, meta["n_features"], meta["n_steps"], seed=0)
        make_store(params).load(checkpoint / "params.bin")

        dataset = load_dataset(cfg, config.parent)
        raw = dataset.subset(getattr(indices, split))
        plan_file = plan_path or checkpoint / f"{split}_plan.json"
        if not plan_file.exists():
            raise ConfigError(f"mask plan not found: {plan_file}")
        eval_set = make_eval_set(raw, MaskPlan.load(plan_file), stats)
        with_auc = cfg.training.task == "classification"
        metrics, _ = evaluate(params, cfg.model, eval_set, stats, tau, with_auc=with_auc)
        report = {
            "config": cfg.resolved(),
            "split": split,
            "test": metrics.to_dict(),
            "baselines": {
                k: v.to_dict() for k, v in sorted(evaluate_baselines(eval_set, stats).items())
            },
            "mask_audit": eval_set.audit.to_dict(),
        }
        path = _write_json(out_dir / "evaluate_report.json", report)
        logger.info("evaluate_done", extra={"mae": metrics.mae})
    except Exception as exc:
        raise _fail(exc)
    typer.echo(f"MAE {metrics.mae:.6f}  MRE {metrics.mre if metrics.mre is not None else 'n/a'}")
    typer.echo(f"Evaluation written to {path}")


@command("ablate")
def ablate_cmd(
    ctx: typer.Context,
    config: Path = typer.Option(..., "--config", help="Experiment config JSON"),
    axis: str = typer.Option(..., "--axis", help="permutation, factor, mode, ratio or model (csai,brits)"),
    values: str = typer.Option(..., "--values", help="Comma separated axis values"),
    out: Path | None = typer.Option(None, "--out", "-o", help="Output directory"),
    epochs: int | None = typer.Option(None, "--epochs", help="Override training.epochs"),
) -> None:
    """Cross-validate once per axis value and write the comparison table."""

    try:
        overrides = {"training": {"epochs": epochs}} if epochs is not None else None
        parsed = parse_axis_values(axis, values)
        cfg, out_dir, logger = _start(ctx, config, "ablate", out, overrides)
        dataset = load_dataset(cfg, config.parent)
        report = ablate(cfg, axis, parsed, dataset).to_dict()
        json_path = _write_json(out_dir / f"ablation_{axis}.json", report)
        table_path = emit_report(report, "table", out_dir / f"ablation_{axis}.csv")
        series = write_plot_series(report, out_dir, "ablation")
        logger.info("ablate_done", extra={"axis": axis, "rows": len(report["rows"])})
    except Exception as exc:
        raise _fail(exc)
    typer.echo(markdown_table(report["rows"]), nl=False)
    for p in (json_path, table_path, *series):
        typer.echo(f"Wrote {p}")


@command()
def audit(
    ctx: typer.Context,
    config: Path = typer.Option(..., "--config", help="Experiment config JSON"),
    plan_path: Path | None = typer.Option(
        None, "--plan", help="Mask plan to audit (defaults to the configured plan)"
    ),
    split: str = typer.Option("test", "--split", help="Split the plan masks"),
    out: Path | None = typer.Option(None, "--out", "-o", help="Output directory"),
) -> None:
    """Report realized overall and per-feature masking rates of a plan."""

    try:
        _check_split(split)
        cfg, out_dir, logger = _start(ctx, config, "audit", out)
        dataset = load_dataset(cfg, config.parent)
        indices = _split_for(cfg, dataset.n_samples, dataset.labels)
        target = dataset.subset(getattr(indices, split))
        if plan_path is not None:
            if not plan_path.exists():
                raise ConfigError(f"mask plan not found: {plan_path}")
            plan = MaskPlan.load(plan_path)
        else:
            dist = feature_missing_distribution(dataset.subset(indices.train).mask)
            plan = plan_split(target, split, cfg.masking, dist, cfg.seed)
        result = audit_mask_plan(plan, target.mask)
        path = _write_json(
            out_dir / f"audit_{split}.json", {"config": cfg.resolved(), "audit": result.to_dict()}
        )
        logger.info("audit_done", extra={"realized_rate": result.realized_rate})
    except Exception as exc:
        raise _fail(exc)
    typer.echo(
        f"{result.strategy}: target {result.target_rate:.4f}, realized {result.realized_rate:.4f} "
        f"({result.n_masked}/{result.n_observed} observed cells)"
    )
    typer.echo(f"Audit written to {path}")


@command()
def report(
    input_path: Path = typer.Option(..., "--input", help="JSON report written by another command"),
    fmt: str = typer.Option("table", "--format", help="json or table"),
    out: Path = typer.Option(..., "--out", "-o", help="Destination file"),
) -> None:
    """Re-emit a JSON report as a table (or normalized JSON) and print it."""

    try:
        if not input_path.exists():
            raise ConfigError(f"report not found: {input_path}")
        try:
            results = json.loads(input_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{input_path}: invalid JSON ({exc})") from exc
        if fmt not in ("json", "table"):
            raise ConfigError(f"unknown report format {fmt!r}; use json or table")
        path = emit_report(results, fmt, out)
    except Exception as exc:
        raise _fail(exc)
    typer.echo(markdown_table(report_rows(results)), nl=False)
    typer.echo(f"Report written to {path}")


def run(argv: Sequence[str] | None = None) -> int:
    """Execute the CLI with *argv* and return the exit code.

    Usage errors (unknown subcommand or flag) print to stderr and return 1.
    """

    cmd = typer.main.get_command(app)
    try:
        result = cmd.main(
            args=list(sys.argv[1:] if argv is None else argv),
            prog_name="csai",
            standalone_mode=False,
        )
    except click.UsageError as exc:
        exc.show()
        return int(ExitCode.VALIDATION)
    except click.ClickException as exc:
        exc.show()
        return int(ExitCode.RUNTIME)
    except click.Abort:
        typer.echo("Aborted!", err=True)
        return int(ExitCode.RUNTIME)
    return int(result) if isinstance(result, int) else int(ExitCode.OK)


def main() -> None:
    """Console script entry point."""

    sys.exit(run())


if __name__ == "__main__":  # pragma: no cover
    main()
