#!/usr/bin/env python3
"""
MTL-TSMOM Command-Line Interface.

One JSON run-config drives every subcommand; flags only pick the config,
the run directory and the log level.

    synth     write the synthetic universe described by data.synthetic
    validate  dry run: config, data coverage, fold plan, training-run count
    backtest  run every strategy tag (and the ablation), then the report
    report    re-emit the report files of an existing run directory

Exit codes: 0 ok, 2 config, 3 data, 4 training, 5 io, 130 interrupted.
"""

import json
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Optional

import typer

# Add backend to path
backend_path = Path(__file__).parent.parent / "backend"
sys.path.insert(0, str(backend_path))

import torch  # noqa: E402
from pydantic import ValidationError  # noqa: E402

from app.core.config import settings  # noqa: E402
from app.core.errors import ConfigError, InvalidSpec, MtlTsmomError  # noqa: E402
from app.core.logging import setup_logging  # noqa: E402
from app.data.market_data import Universe, build_universe, generate_synthetic, load_csv, write_universe  # noqa: E402
from app.pipeline.features import build_panel  # noqa: E402
from app.schemas import RunConfig  # noqa: E402
from app.services.analytics import emit_report, load_index_csv  # noqa: E402
from app.services.backtest_engine import (  # noqa: E402
    ABLATION_PREFIX,
    BASELINE_TAGS,
    DEFAULT_ABLATION_SUBSETS,
    BacktestRun,
    plan_folds,
    read_runs,
    run_ablation,
    run_backtest,
    write_run,
)

EXIT_INTERRUPTED = 130
RESOLVED_CONFIG = "resolved_config.json"

app = typer.Typer(help=f"{settings.PROJECT_NAME} {settings.VERSION}: multi-task time-series momentum backtester")

ConfigOption = typer.Option(..., "--config", "-c", help="Run-config JSON file")
LogLevelOption = typer.Option(None, "--log-level", "-l", help="DEBUG, INFO, WARNING or ERROR")


@contextmanager
def handle_errors():
    """Map domain errors to their exit code."""
    try:
        yield
    except MtlTsmomError as e:
        typer.echo(f"Error ({e.category}): {e}", err=True)
        raise typer.Exit(e.exit_code)
    except KeyboardInterrupt:
        typer.echo("Interrupted", err=True)
        raise typer.Exit(EXIT_INTERRUPTED)


def load_config(path: Path) -> RunConfig:
    """Parse and validate a run-config; relative CSV paths resolve against the config's folder."""
    if not path.is_file():
        raise InvalidSpec(f"config file not found: {path}", field="--config")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InvalidSpec(f"invalid JSON: {e}") from e
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as e:
        err = e.errors()[0]
        raise InvalidSpec(err["msg"], field=".".join(str(p) for p in err["loc"]) or None) from e
    if config.data.csv_paths is not None:
        base = path.parent.resolve()
        config.data.csv_paths = [str(p if Path(p).is_absolute() else base / p) for p in config.data.csv_paths]
    return config


def output_dir(config: RunConfig) -> Path:
    directory = Path(config.output.directory)
    return directory if directory.is_absolute() else Path(settings.OUTPUT_ROOT) / directory


def write_resolved_config(config: RunConfig, run_dir: Path) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / RESOLVED_CONFIG
    path.write_text(config.model_dump_json(by_alias=True, indent=2) + "\n", encoding="utf-8")
    return path


def load_universe(config: RunConfig) -> Universe:
    data = config.data
    if data.synthetic is not None:
        return generate_synthetic(data.synthetic, data.seed)
    series = [load_csv(p, data.csv_schema) for p in data.csv_paths]
    return build_universe(series, data.fill_policy)


def _start(log_level: Optional[str]) -> None:
    setup_logging(log_level)
    torch.set_num_threads(settings.TORCH_NUM_THREADS)


@app.command()
def synth(config: Path = ConfigOption, log_level: Optional[str] = LogLevelOption):
    """Write the synthetic universe as one CSV per asset under <run dir>/data."""
    _start(log_level)
    with handle_errors():
        cfg = load_config(config)
        if cfg.data.synthetic is None:
            raise InvalidSpec("synth needs a synthetic data section", field="data.synthetic")
        run_dir = output_dir(cfg)
        paths = write_universe(load_universe(cfg), run_dir / "data")
        write_resolved_config(cfg, run_dir)
        typer.echo(f"Wrote {len(paths)} asset files to {run_dir / 'data'}")


@app.command()
def validate(config: Path = ConfigOption, log_level: Optional[str] = LogLevelOption):
    """Dry run: config schema, data coverage, fold table and training-run estimate."""
    _start(log_level)
    with handle_errors():
        cfg = load_config(config)
        bt = cfg.backtest
        universe = load_universe(cfg)
        calendar = universe.calendar
        typer.echo(
            f"Data: {len(universe.assets)} assets, {len(calendar)} dates "
            f"({calendar[0].date()} to {calendar[-1].date()})"
        )

        folds = plan_folds(calendar, bt.first_test_year, bt.last_test_year, bt.train_start, bt.validation_fraction)
        typer.echo(f"\n{'fold':>4}  {'train':<23}  {'test':<23}  {'train days':>10}  {'test days':>9}")
        for fold in folds:
            n_train = int(((calendar >= fold.train_start) & (calendar <= fold.train_end)).sum())
            n_test = int(((calendar >= fold.test_start) & (calendar <= fold.test_end)).sum())
            typer.echo(
                f"{fold.fold_index:>4}  {fold.train_start.date()} .. {fold.train_end.date()}  "
                f"{fold.test_start.date()} .. {fold.test_end.date()}  {n_train:>10}  {n_test:>9}"
            )
            if n_test == 0:
                typer.echo(f"Warning: no data in test year {fold.test_year}")

        if "MTL-TSMOM" in cfg.strategy.tags or cfg.strategy.ablation:
            panel = build_panel(universe, cfg.strategy.features)
            valid = panel.valid_mask.any(axis=0)
            if valid.any():
                typer.echo(f"\nFirst date with valid features: {panel.dates[valid.argmax()].date()}")
            else:
                typer.echo("\nWarning: no date has a complete feature vector")

        grid = cfg.strategy.grid
        per_fold = grid.size if bt.grid_budget == "exhaustive" else min(bt.grid_k, grid.size)
        n_neural = int("MTL-TSMOM" in cfg.strategy.tags)
        if cfg.strategy.ablation:
            n_neural += len(cfg.strategy.ablation_subsets or DEFAULT_ABLATION_SUBSETS)
        total = per_fold * len(folds) * n_neural
        typer.echo(f"\nEstimated training runs: {total} ({per_fold} per fold x {len(folds)} folds x {n_neural} neural)")
        if bt.grid_budget == "exhaustive" and grid.size > 1000:
            typer.echo(f"Warning: exhaustive grid budget means {grid.size} runs per fold")
        typer.echo("Config OK")


def _report(
    cfg: RunConfig, runs: Dict[str, BacktestRun], ablation: Dict[str, BacktestRun], run_dir: Path
) -> None:
    index = load_index_csv(cfg.report.index_csv) if cfg.report.index_csv else None
    paths = emit_report(runs, index, run_dir / "report", cfg.report, ablation or None)
    typer.echo(f"Report: {len(paths)} files in {run_dir / 'report'}")


@app.command()
def backtest(config: Path = ConfigOption, log_level: Optional[str] = LogLevelOption):
    """Run the configured strategies and write the run directory."""
    _start(log_level)
    with handle_errors():
        cfg = load_config(config)
        run_dir = output_dir(cfg)
        write_resolved_config(cfg, run_dir)
        universe = load_universe(cfg)
        needs_panel = any(t not in BASELINE_TAGS for t in cfg.strategy.tags) or cfg.strategy.ablation
        panel = build_panel(universe, cfg.strategy.features) if needs_panel else None

        runs: Dict[str, BacktestRun] = {}
        interrupted = False
        for tag in cfg.strategy.tags:
            run = run_backtest(universe, tag, cfg, panel, run_dir=run_dir)
            write_run(run, run_dir)
            runs[tag] = run
            typer.echo(f"{tag}: {len(run.returns)} out-of-sample days")
            if run.interrupted:
                interrupted = True
                break

        ablation: Dict[str, BacktestRun] = {}
        if cfg.strategy.ablation and not interrupted:
            ablation = run_ablation(universe, cfg.strategy.ablation_subsets, cfg, panel, run_dir)
            for run in ablation.values():
                write_run(run, run_dir)
                interrupted = interrupted or run.interrupted

        if runs:
            _report(cfg, runs, ablation, run_dir)
        if interrupted:
            typer.echo("Interrupted: completed folds written", err=True)
            raise typer.Exit(EXIT_INTERRUPTED)
        typer.echo(f"Run directory: {run_dir}")


@app.command()
def report(
    run_dir: Path = typer.Argument(..., help="Run directory written by `backtest`"),
    log_level: Optional[str] = LogLevelOption,
):
    """Re-emit the report files from a run directory."""
    _start(log_level)
    with handle_errors():
        resolved = run_dir / RESOLVED_CONFIG
        if not resolved.is_file():
            raise ConfigError(f"{run_dir} has no {RESOLVED_CONFIG}")
        cfg = load_config(resolved)
        stored = read_runs(run_dir)
        runs = {t: r for t, r in stored.items() if not t.startswith(ABLATION_PREFIX)}
        ablation = {t: r for t, r in stored.items() if t.startswith(ABLATION_PREFIX)}
        ordered = {t: runs[t] for t in cfg.strategy.tags if t in runs}
        _report(cfg, ordered or runs, ablation, run_dir)


if __name__ == "__main__":
    app()
