"""
CLI commands using Typer and Rich for user-friendly interface.
"""

import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional

# Fix imports to work when running from any directory
# Add parent directory to path so 'sharpctl' package can be found
_current_dir = Path(__file__).parent
_parent_dir = _current_dir.parent
if str(_parent_dir) not in sys.path:
    sys.path.insert(0, str(_parent_dir))

import click
import typer
from rich.console import Console
from rich.table import Table

from sharpctl.analysis import ge_ratio_table
from sharpctl.config import DEFAULT_CONFIG, Config
from sharpctl.db import get_run, get_run_counts, init_db, list_runs
from sharpctl.errors import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, ConfigError, SharpctlError
from sharpctl.harness import ExperimentConfig, prepare_data, record_runs, run_sweep, train_to_threshold
from sharpctl.landscape import DEFAULT_DIM, EXPERIMENTS, landscape_sweep
from sharpctl.models import build_mlp, load_checkpoint, save_checkpoint
from sharpctl.reports import (
    LANDSCAPE_COLUMNS,
    MEASURE_COLUMNS,
    Manifest,
    check_format,
    report_rows,
    write_table,
)
from sharpctl.selfcheck import run_checks
from sharpctl.sharpness import MeasureSettings, compute_measures
from sharpctl.utils import ensure_dir, get_logger

app = typer.Typer(help="sharpctl - train networks, measure sharpness, and correlate it with generalization.")
console = Console()
logger = get_logger(__name__)

CONFIG_OPTION = typer.Option(None, "--config", help="Path to a key = value configuration file.")
SEED_OPTION = typer.Option(None, "--seed", help="Master seed (overrides run.seeds).")
OUT_OPTION = typer.Option(None, "--out", help="Output directory (overrides run.output_dir).")
FORMAT_OPTION = typer.Option("csv", "--format", help="Report format: csv or json.")
CHECK_COLUMNS = ("check", "passed", "detail")


@app.callback()
def init_app(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log at DEBUG level."),
) -> None:
    """Initialize the app (runs before any command)."""
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


@contextmanager
def _handle_errors() -> Iterator[None]:
    """Print sharpctl errors in red and exit with their code."""
    try:
        yield
    except SharpctlError as e:
        console.print(f"[red]Error: {e}[/red]")
        raise typer.Exit(e.exit_code)


def _load_config(path: Optional[Path], seed: Optional[int] = None, out: Optional[Path] = None) -> Config:
    config = Config.from_file(path) if path else Config()
    if seed is not None:
        config.set("run.seeds", str(seed))
    if out is not None:
        config.set("run.output_dir", str(out))
    return config


def _output_dir(config: Config) -> Path:
    return ensure_dir(Path(config.get("run.output_dir") or "runs"))


def _parse_floats(text: str, option: str) -> List[float]:
    try:
        values = [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise ConfigError(f"{option} must be a comma-separated list of numbers, got {text!r}")
    if not values:
        raise ConfigError(f"{option} must list at least one value")
    return values


def _fmt(value: object) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


# ============================================================================
# TRAINING COMMANDS
# ============================================================================


@app.command()
def train(
    config_path: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    fmt: str = FORMAT_OPTION,
) -> None:
    """
    Train one network to the loss threshold, balance it, and compute the
    configured sharpness measures.

    Example:
        sharpctl train --config lpf.conf --seed 3 --out runs/lpf
    """
    with _handle_errors():
        check_format(fmt)
        config = _load_config(config_path, seed, out)
        cfg = ExperimentConfig.from_config(config)
        output_dir = _output_dir(config)
        run_seed = cfg.seeds[0]
        record = train_to_threshold(cfg, run_seed, keep_params=True)

        manifest = Manifest(output_dir, "train")
        if record.params is not None:
            checkpoint = save_checkpoint(
                output_dir / "checkpoints" / f"{record.run_id}.pt", record.model, record.params
            )
            manifest.add("checkpoint", checkpoint)
        record_runs([record], output_dir, fmt, manifest)
        manifest.write()

    style = "green" if record.converged else "yellow"
    console.print(
        f"[{style}]Run {record.run_id} {record.state} after {record.epochs} epochs "
        f"(train loss {record.final_train_loss:.4g}, test error {record.test_error:.4f}).[/{style}]"
    )
    if record.reason:
        console.print(f"[yellow]Reason: {record.reason}[/yellow]")
    if record.measures:
        table = Table(title="Sharpness Measures", show_header=True, header_style="bold magenta")
        table.add_column("Measure", style="cyan")
        table.add_column("Value", justify="right", style="green")
        for report in record.measures:
            table.add_row(report.name, _fmt(report.value))
        console.print(table)
    console.print(f"[cyan]Reports written to {output_dir}[/cyan]")


@app.command()
def measure(
    checkpoint: Path = typer.Argument(..., help="Checkpoint written by 'sharpctl train'."),
    config_path: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    fmt: str = FORMAT_OPTION,
    names: Optional[str] = typer.Option(
        None, "--names", help="Comma-separated measures (overrides measures.names)."
    ),
) -> None:
    """
    Compute sharpness measures on a saved checkpoint over the configured
    training data. The seed rebuilds the initialization for pac_bayes.

    Example:
        sharpctl measure runs/checkpoints/ab12-s0.pt --names lpf,lambda_max,trace
    """
    with _handle_errors():
        check_format(fmt)
        config = _load_config(config_path, seed, out)
        if names:
            config.set("measures.names", names)
        cfg = ExperimentConfig.from_config(config)
        output_dir = _output_dir(config)
        run_seed = cfg.seeds[0]
        model, params = load_checkpoint(checkpoint)
        train_batch, _, dataset_id = prepare_data(cfg, run_seed)
        activation = model.activations[0] if model.activations else "relu"
        _, initial = build_mlp(model.layer_sizes, run_seed, activation)
        reports = compute_measures(
            model,
            params,
            train_batch,
            cfg.measures,
            cfg.measure_settings,
            run_seed,
            initial_params=initial,
            dataset_id=dataset_id,
        )
        manifest = Manifest(output_dir, "measure")
        rows = report_rows(checkpoint.stem, reports)
        manifest.add("measures", write_table(rows, output_dir / "measures", fmt, MEASURE_COLUMNS))
        manifest.write()

    table = Table(title=f"Measures of {checkpoint.name}", show_header=True, header_style="bold magenta")
    table.add_column("Measure", style="cyan")
    table.add_column("Value", justify="right", style="green")
    for report in reports:
        table.add_row(report.name, _fmt(report.value))
    console.print(table)


@app.command()
def sweep(
    config_path: Optional[Path] = CONFIG_OPTION,
    axis: Optional[str] = typer.Option(
        None, "--axis", help="hyperparam, label_noise, data_noise or width (overrides sweep.axis)."
    ),
    seed: Optional[int] = typer.Option(None, "--seed", help="Run a single seed (overrides run.seeds)."),
    out: Optional[Path] = OUT_OPTION,
    fmt: str = FORMAT_OPTION,
    workers: Optional[int] = typer.Option(
        None, "--workers", help="Worker processes (overrides run.workers)."
    ),
) -> None:
    """
    Train every sweep value x seed and correlate the measures with the
    generalization gap.

    Example:
        sharpctl sweep --config width.conf --axis width --out runs/width
    """
    with _handle_errors():
        config = _load_config(config_path, seed, out)
        if workers is not None and workers < 1:
            raise ConfigError("--workers must be >= 1")
        result = run_sweep(config, axis, _output_dir(config), workers, fmt)

    summary = Table(title=f"Sweep over {result.axis}", show_header=True, header_style="bold magenta")
    summary.add_column("Value", style="cyan")
    summary.add_column("Runs", justify="right")
    summary.add_column("Converged", justify="right", style="green")
    summary.add_column("Mean test error", justify="right", style="yellow")
    for row in result.summary:
        summary.add_row(
            str(row["sweep_value"]), str(row["runs"]), str(row["converged"]), _fmt(row["mean_test_error"])
        )
    console.print(summary)

    if result.correlation:
        title = "Kendall tau vs. generalization gap"
        table = Table(title=title, show_header=True, header_style="bold magenta")
        table.add_column("Measure", style="cyan")
        table.add_column("tau", justify="right", style="green")
        table.add_column("95% CI", justify="right", style="yellow")
        table.add_column("n", justify="right")
        for row in result.correlation:
            table.add_row(str(row["measure"]), _fmt(row["tau"]), f"+-{_fmt(row['ci95'])}", str(row["n"]))
        console.print(table)
    else:
        console.print("[yellow]Correlation skipped: fewer than two converged sweep points.[/yellow]")
    console.print(f"[cyan]Manifest: {result.manifest_path}[/cyan]")


# ============================================================================
# SYNTHETIC & THEORY COMMANDS
# ============================================================================


@app.command()
def landscape(
    experiment: str = typer.Option("mean_scaled", "--experiment", help="flat_fraction or mean_scaled."),
    values: str = typer.Option("100,50,10,5,1", "--values", help="Comma-separated sweep values (K)."),
    dim: int = typer.Option(DEFAULT_DIM, "--dim", help="Landscape dimension d."),
    sigma: float = typer.Option(0.01, "--sigma", help="LPF filter radius."),
    config_path: Optional[Path] = CONFIG_OPTION,
    seed: int = typer.Option(0, "--seed", help="Seed of spectra, bases and estimators."),
    out: Optional[Path] = OUT_OPTION,
    fmt: str = FORMAT_OPTION,
) -> None:
    """
    Compare oracle and estimated measures on synthetic quadratics.

    Example:
        sharpctl landscape --experiment flat_fraction --values 0,25,50,75,100
    """
    with _handle_errors():
        check_format(fmt)
        if experiment not in EXPERIMENTS:
            raise ConfigError(f"--experiment must be one of {EXPERIMENTS}, got {experiment!r}")
        config = _load_config(config_path, out=out)
        settings = MeasureSettings.from_config(config)
        output_dir = _output_dir(config)
        rows = landscape_sweep(experiment, _parse_floats(values, "--values"), dim, seed, sigma, settings)
        manifest = Manifest(output_dir, "landscape")
        manifest.add(
            "landscape",
            write_table(rows, output_dir / f"landscape_{experiment}", fmt, LANDSCAPE_COLUMNS),
        )
        manifest.write()

    table = Table(title=f"Landscape sweep: {experiment}", show_header=True, header_style="bold magenta")
    table.add_column("K", style="cyan")
    table.add_column("Measure", style="white")
    table.add_column("Oracle", justify="right", style="green")
    table.add_column("Estimate", justify="right", style="yellow")
    for row in rows:
        table.add_row(
            _fmt(row["sweep_value"]),
            str(row["measure"]),
            _fmt(row["oracle_value"]),
            _fmt(row["estimated_value"]),
        )
    console.print(table)


@app.command()
def theory(
    alpha: float = typer.Option(1.0, "--alpha", help="Lipschitz constant of the loss."),
    beta: float = typer.Option(10.0, "--beta", help="Smoothness constant of the loss."),
    c: float = typer.Option(0.1, "--c", help="Step-size constant (lr_t = c / t)."),
    sigmas: str = typer.Option("0.05,0.1,0.5,1,2", "--sigmas", help="Comma-separated filter radii."),
    horizons: str = typer.Option("100,1000,10000", "--horizons", help="Comma-separated step counts T."),
    m: Optional[int] = typer.Option(None, "--m", help="Training set size; adds both bounds."),
    out: Optional[Path] = OUT_OPTION,
    fmt: str = FORMAT_OPTION,
) -> None:
    """
    Tabulate the generalization-bound ratio of LPF-SGD to SGD.

    Example:
        sharpctl theory --alpha 1 --beta 10 --sigmas 0.1,1 --horizons 1000
    """
    with _handle_errors():
        check_format(fmt)
        steps = [int(t) for t in _parse_floats(horizons, "--horizons")]
        rows = ge_ratio_table(alpha, beta, c, _parse_floats(sigmas, "--sigmas"), steps, m)
        output_dir = ensure_dir(out or Path("runs"))
        manifest = Manifest(output_dir, "theory")
        manifest.add("theory", write_table(rows, output_dir / "ge_ratio", fmt))
        manifest.write()

    table = Table(title="GE ratio rho", show_header=True, header_style="bold magenta")
    for column in ("sigma", "T", "p", "p_hat", "rho"):
        table.add_column(column, justify="right", style="green" if column == "rho" else "cyan")
    for row in rows:
        table.add_row(*(_fmt(row[column]) for column in ("sigma", "T", "p", "p_hat", "rho")))
    console.print(table)


@app.command()
def check(
    config_path: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = typer.Option(
        None, "--seed", help="Seed of every randomized check (default: first of run.seeds)."
    ),
    out: Optional[Path] = typer.Option(None, "--out", help="Also write the results table and a manifest."),
    fmt: str = FORMAT_OPTION,
) -> None:
    """
    Run the built-in oracle self-tests; exits with code 3 on any failure.

    Example:
        sharpctl check --seed 7 --out runs/checks
    """
    with _handle_errors():
        check_format(fmt)
        config = _load_config(config_path, seed, out)
        seeds = config.get_int_list("run.seeds")
        if not seeds:
            raise ConfigError("run.seeds must list at least one seed")
        check_seed = seeds[0]
        results = run_checks(check_seed)
        if out is not None:
            output_dir = _output_dir(config)
            manifest = Manifest(output_dir, "check")
            manifest.extra["seed"] = check_seed
            rows = [{"check": r.name, "passed": r.passed, "detail": r.detail} for r in results]
            path = write_table(rows, output_dir / "checks", fmt, CHECK_COLUMNS)
            manifest.add("checks", path)
            manifest.write()

    table = Table(title="Self-checks", show_header=True, header_style="bold magenta")
    table.add_column("Check", style="cyan")
    table.add_column("Result")
    table.add_column("Detail", style="white")
    for result in results:
        outcome = "[green]passed[/green]" if result.passed else "[red]FAILED[/red]"
        table.add_row(result.name, outcome, result.detail)
    console.print(table)
    failed = [r.name for r in results if not r.passed]
    if failed:
        console.print(f"[red]{len(failed)} check(s) failed: {', '.join(failed)}[/red]")
        raise typer.Exit(EXIT_NUMERIC)
    console.print("[green]All checks passed.[/green]")


# ============================================================================
# RUN REGISTRY COMMANDS
# ============================================================================

runs_app = typer.Typer(help="Inspect the run registry of an output directory.")
app.add_typer(runs_app, name="runs")


@runs_app.command(name="list")
def runs_list(
    out: Path = typer.Option(Path("runs"), "--out", help="Output directory holding runs.db."),
    state: Optional[str] = typer.Option(None, "--state", help="Filter by state (converged/discarded)."),
    limit: int = typer.Option(100, "--limit", help="Maximum number of runs to list."),
) -> None:
    """
    List recorded runs, optionally filtered by state.

    Example:
        sharpctl runs list --out runs/width --state converged
    """
    if not (out / "runs.db").exists():
        console.print(f"[yellow]No run registry in {out}.[/yellow]")
        return
    init_db(out)
    runs = list_runs(out, state, limit)
    if not runs:
        console.print("[yellow]No runs found.[/yellow]")
        return

    counts = get_run_counts(out)
    title = f"Runs (converged: {counts['converged']}, discarded: {counts['discarded']})"
    table = Table(title=title, show_header=True, header_style="bold magenta")
    table.add_column("Run ID", style="cyan", no_wrap=True)
    table.add_column("Value", style="white")
    table.add_column("State", style="green")
    table.add_column("Epochs", justify="right", style="yellow")
    table.add_column("Train loss", justify="right")
    table.add_column("Test error", justify="right")
    table.add_column("Reason", style="red", no_wrap=False)

    for run in runs:
        reason = run["reason"] or "-"
        if len(reason) > 40:
            reason = reason[:37] + "..."
        loss = run["final_train_loss"]
        table.add_row(
            run["run_id"],
            run["sweep_value"] or "-",
            run["state"],
            str(run["epochs"]),
            "-" if loss is None else _fmt(loss),
            _fmt(run["test_error"]),
            reason,
        )
    console.print(table)


@runs_app.command(name="show")
def runs_show(
    run_id: str = typer.Argument(..., help="Run ID to show."),
    out: Path = typer.Option(Path("runs"), "--out", help="Output directory holding runs.db."),
) -> None:
    """
    Show one run and its measures.

    Example:
        sharpctl runs show 3f2a9c1d0b7e-s0 --out runs/width
    """
    init_db(out)
    run = get_run(out, run_id)
    if run is None:
        console.print(f"[red]Run {run_id} not found in {out}.[/red]")
        raise typer.Exit(EXIT_USAGE)

    console.print(f"\n[cyan]Run: {run_id}[/cyan]")
    for key in ("state", "seed", "sweep_value", "epochs", "final_train_loss", "train_error", "test_error"):
        console.print(f"[dim]{key}:[/dim] {_fmt(run[key])}")
    if run["reason"]:
        console.print(f"[yellow]reason: {run['reason']}[/yellow]")
    for item in run["measures"]:
        console.print(f"[cyan]{item['measure']}[/cyan] = [green]{_fmt(item['value'])}[/green]")


# ============================================================================
# CONFIG COMMANDS
# ============================================================================

config_app = typer.Typer(help="Inspect configuration.")
app.add_typer(config_app, name="config")


@config_app.command(name="show")
def config_show(config_path: Optional[Path] = CONFIG_OPTION) -> None:
    """
    Print the effective configuration (defaults overlaid by the file).

    Example:
        sharpctl config show --config lpf.conf
    """
    with _handle_errors():
        config = _load_config(config_path)
    table = Table(title="Configuration", show_header=True, header_style="bold magenta")
    table.add_column("Key", style="cyan")
    table.add_column("Value", style="green")
    table.add_column("Default", style="dim")
    for key, value in config.get_all().items():
        table.add_row(key, value, "" if value == DEFAULT_CONFIG[key] else DEFAULT_CONFIG[key])
    console.print(table)


@config_app.command(name="get")
def config_get(
    key: str = typer.Argument(..., help="Configuration key."),
    config_path: Optional[Path] = CONFIG_OPTION,
) -> None:
    """
    Get a configuration value.

    Example:
        sharpctl config get optimizer.lr
        sharpctl config get lpf.gamma0 --config lpf.conf
    """
    with _handle_errors():
        config = _load_config(config_path)
    value = config.get(key)
    if value is None:
        console.print(f"[yellow]Key '{key}' not found.[/yellow]")
        raise typer.Exit(EXIT_USAGE)

    console.print(f"[cyan]{key}[/cyan] = [green]{value}[/green]")


def main() -> None:
    """Main entry point; usage errors exit with 1, sharpctl errors with their own code."""
    try:
        code = app(standalone_mode=False)
    except click.exceptions.Abort:
        console.print("[red]Aborted.[/red]")
        sys.exit(EXIT_USAGE)
    except click.exceptions.ClickException as e:
        e.show()
        sys.exit(EXIT_USAGE)
    sys.exit(code if isinstance(code, int) else EXIT_OK)


if __name__ == "__main__":
    main()
