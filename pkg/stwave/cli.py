"""STWave CLI - main entry point."""

from __future__ import annotations

import asyncio
import contextlib
from pathlib import Path

import click
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from stwave import __version__
from stwave.env import get_db_path, load_environment
from stwave.errors import STWaveError

# Load environment variables from .env file at startup
load_environment()

app = typer.Typer(
    name="stwave",
    help="STWave - disentangled spatio-temporal traffic forecasting",
    no_args_is_help=True,
)
variants_app = typer.Typer(help="Inspect ablation and efficiency variants")
app.add_typer(variants_app, name="variants")

console = Console()

EXIT_USAGE = 1
EXIT_DATA = 2

ConfigOption = typer.Option(None, "--config", "-c", help="Run config YAML (defaults built in)")
SeedOption = typer.Option(
    None, "--seed",
    help="Run seed; sets seed and train.seed (weight init, batch order, dropout), "
    "not the synthetic data seed",
)
OutOption = typer.Option(None, "--out", "-o", help="Artifact directory")
OverrideOption = typer.Option(
    None, "--override", "-O", help="key.path=value, repeatable (e.g. model.layers=3)"
)


def _run_async(coro):
    """Run an async coroutine from sync CLI context."""
    return asyncio.run(coro)


def _fail(title: str, message: str, code: int) -> None:
    console.print(Panel(f"[bold red]Error:[/] {message}", title=f"[bold red]{title}[/]",
                        border_style="red"))
    raise typer.Exit(code)


@contextlib.contextmanager
def _errors():
    """Map failures onto exit codes: 1 usage/config, 2 data, 3 numeric."""
    try:
        yield
    except typer.Exit:
        raise
    except STWaveError as e:
        title = {2: "Data error", 3: "Numeric failure"}.get(e.exit_code, "Error")
        _fail(title, str(e), e.exit_code)
    except FileNotFoundError as e:
        _fail("Missing file", str(e), EXIT_DATA)
    except (ValidationError, KeyError, ValueError) as e:
        _fail("Invalid configuration", str(e), EXIT_USAGE)


def _load_config(config: Path | None, overrides: list[str] | None, seed: int | None):
    from stwave.config import load_run_config

    if seed is not None:
        overrides = [*(overrides or []), f"seed={seed}"]
    try:
        run_config = load_run_config(config, overrides)
    except (FileNotFoundError, ValidationError, ValueError) as e:
        _fail("Invalid configuration", str(e), EXIT_USAGE)
    return run_config


def _report_table(title: str, reports) -> Table:
    table = Table(title=title)
    table.add_column("Model", style="bold cyan")
    table.add_column("Split")
    table.add_column("MAE", justify="right")
    table.add_column("RMSE", justify="right")
    table.add_column("MAPE", justify="right")
    table.add_column("Samples", justify="right")
    for r in reports:
        table.add_row(
            r.label, r.split, f"{r.mae:.3f}", f"{r.rmse:.3f}", f"{100 * r.mape:.2f}%",
            str(r.n_samples),
        )
    return table


def _horizon_table(report) -> Table:
    table = Table(title=f"Per-horizon ({report.split})")
    table.add_column("Step", justify="right")
    table.add_column("MAE", justify="right")
    table.add_column("RMSE", justify="right")
    table.add_column("MAPE", justify="right")
    for h in report.horizons:
        table.add_row(str(h.horizon), f"{h.mae:.3f}", f"{h.rmse:.3f}", f"{100 * h.mape:.2f}%")
    return table


@app.callback()
def _root(
    log_level: str = typer.Option(None, "--log-level", help="Overrides STWAVE_LOG_LEVEL"),
):
    from stwave.log import setup_logging

    setup_logging(log_level, console=console)


# ── Top-level commands ────────────────────────────────────────────────


@app.command()
def run(
    config: Path = ConfigOption,
    seed: int = SeedOption,
    out: Path = OutOption,
    override: list[str] = OverrideOption,
):
    """Train a model and write checkpoint, reports and predictions."""
    run_config = _load_config(config, override, seed)

    async def _run():
        from stwave.experiment import ExperimentRunner

        runner = await ExperimentRunner.create(run_config, out, get_db_path())
        try:
            run_id, outcome = await runner.run()
        finally:
            await runner.cleanup()

        console.print(_report_table("Test metrics", [outcome.test, outcome.baseline]))
        console.print(_horizon_table(outcome.test))
        result = outcome.result
        console.print(
            f"[dim]Best epoch {result.best_epoch}"
            + (" (stopped early)" if result.stopped_early else "")
            + f" | config {outcome.config_hash} | artifacts in {outcome.output_dir}[/]"
        )
        console.print(f"[dim]Run ID: {run_id}. View details with: stwave status[/]")

    with _errors():
        _run_async(_run())


@app.command()
def evaluate(
    checkpoint: Path = typer.Argument(..., help="checkpoint.pt written by `stwave run`"),
    split: str = typer.Option("test", "--split", help="train, val or test"),
):
    """Reload a checkpoint and recompute its report."""
    from stwave.config import RunConfig
    from stwave.experiment import SPLITS, ExperimentRunner
    from stwave.training import ForecastReport

    if split not in SPLITS:
        _fail("Invalid option", f"Unknown split: {split}. Available: {list(SPLITS)}", EXIT_USAGE)

    with _errors():
        runner = ExperimentRunner(RunConfig(), checkpoint.parent)
        report, _ = runner.evaluate(checkpoint, split)
        console.print(_report_table("Re-evaluation", [report]))
        console.print(_horizon_table(report))

        stored = checkpoint.parent / f"report_{split}.json"
        if stored.exists():
            previous = ForecastReport.from_json(stored)
            same = (previous.mae, previous.rmse, previous.mape) == (
                report.mae, report.rmse, report.mape
            )
            marker = "[green]✓ matches[/]" if same else "[yellow]⚠ differs from[/]"
            console.print(f"{marker} {stored.name}")
        report.to_json(checkpoint.parent / f"report_{split}_eval.json")


@app.command()
def synth(
    nodes: int = typer.Option(20, "--nodes", help="Number of sensors"),
    steps: int = typer.Option(4000, "--steps", help="Number of 5-minute steps"),
    seed: int = typer.Option(7, "--seed"),
    graph: str = typer.Option("ring", "--graph", help="ring or grid"),
    fmt: str = typer.Option("csv", "--format", help="csv or binary"),
    out: Path = typer.Option(Path("data/synthetic"), "--out", "-o"),
    config: Path = ConfigOption,
    override: list[str] = OverrideOption,
):
    """Write a synthetic dataset (flow file, edges.csv, manifest.json)."""
    from stwave.data import save_dataset, synth_traffic

    run_config = _load_config(config, override, None) if config or override else None
    syn_config = run_config.data.synthetic if run_config else None
    with _errors():
        dataset = synth_traffic(nodes, steps, seed, graph, syn_config)
        paths = save_dataset(dataset, out, fmt)

    table = Table(title=f"Synthetic dataset - {dataset.name}")
    table.add_column("File", style="bold")
    table.add_column("Path")
    for kind, path in paths.items():
        table.add_row(kind, str(path))
    console.print(table)
    console.print(
        f"[dim]T={dataset.n_steps} N={dataset.n_nodes} edges={dataset.graph.n_edges}[/]"
    )


@app.command()
def ablate(
    config: Path = ConfigOption,
    seed: int = SeedOption,
    out: Path = OutOption,
    override: list[str] = OverrideOption,
    variant: list[str] = typer.Option(None, "--variant", "-v", help="Restrict to these variants"),
):
    """Train each variant and write ablation.csv."""
    run_config = _load_config(config, override, seed)
    if variant:
        run_config.ablate.variants = list(variant)

    async def _ablate():
        from stwave.experiment import ExperimentRunner

        runner = await ExperimentRunner.create(run_config, out, get_db_path())
        try:
            table = await runner.ablate()
        finally:
            await runner.cleanup()

        view = Table(title="Ablation (test split)")
        view.add_column("Variant", style="bold cyan")
        view.add_column("Label")
        view.add_column("MAE", justify="right")
        view.add_column("RMSE", justify="right")
        view.add_column("MAPE", justify="right")
        view.add_column("ΔMAE", justify="right")
        for row in table.itertuples():
            change = "-" if row.mae_change != row.mae_change else f"{100 * row.mae_change:+.1f}%"
            view.add_row(
                row.variant, row.label, f"{row.mae:.3f}", f"{row.rmse:.3f}",
                f"{100 * row.mape:.2f}%", change,
            )
        console.print(view)
        console.print(f"[dim]Written to {runner.output_dir / 'ablation.csv'}[/]")

    with _errors():
        _run_async(_ablate())


@app.command()
def bench(
    config: Path = ConfigOption,
    out: Path = OutOption,
    override: list[str] = OverrideOption,
):
    """Time esgat, full and gat spatial attention over growing graphs."""
    from stwave.bench import run_bench, write_bench

    run_config = _load_config(config, override, None)
    target = (out or Path(run_config.output_dir)) / "bench.csv"

    def on_row(row) -> None:
        console.print(
            f"  [dim]{row.mode:>6} N={row.n_nodes:<5} queries={row.queries:<5}[/] "
            f"{row.median_seconds:.4f}s"
        )

    with _errors():
        frame = run_bench(
            run_config.bench, sample_base=run_config.model.sample_base, on_row=on_row
        )
        write_bench(frame, target)

    pivot = frame.pivot(index="n_nodes", columns="mode", values="median_seconds")
    table = Table(title="Median seconds per pass")
    table.add_column("N", justify="right", style="bold")
    for mode in pivot.columns:
        table.add_column(mode, justify="right")
    for n, row in pivot.iterrows():
        table.add_row(str(n), *(f"{v:.4f}" for v in row))
    console.print(table)
    console.print(f"[dim]Written to {target}[/]")


@app.command()
def status(
    run_id: str = typer.Option(None, "--run-id", "-r", help="Specific run ID (defaults to latest)"),
):
    """Show the latest run (or --run-id) with its epochs, reports and tasks."""
    async def _status():
        from stwave.state import RunStore

        state = RunStore(get_db_path())
        await state.initialize()
        try:
            if run_id:
                summary = await state.get_run_summary(run_id)
            else:
                runs = await state.list_runs(limit=1)
                if not runs:
                    console.print("[yellow]No runs recorded yet[/]")
                    return
                summary = await state.get_run_summary(runs[0]["id"])
        finally:
            await state.close()

        info = summary["run"]
        if not info:
            console.print("[yellow]Run not found[/]")
            return

        color = {"pending": "dim", "running": "blue", "completed": "green", "failed": "red"}.get(
            info["status"], "white"
        )
        console.print(Panel(
            f"[bold]Run:[/] {info['id']}\n"
            f"[bold]Name:[/] {info['name']} ({info['kind']})\n"
            f"[bold]Status:[/] [{color}]{info['status']}[/{color}]\n"
            f"[bold]Config hash:[/] {info['config_hash']}\n"
            f"[bold]Output:[/] {info['output_dir']}\n"
            f"[bold]Created:[/] {info['created_at']}",
            title="[bold cyan]Run Status[/]",
            border_style="cyan",
        ))

        if summary["epochs"]:
            epochs = Table(title="Epochs")
            epochs.add_column("Model", style="cyan")
            epochs.add_column("Epoch", justify="right")
            epochs.add_column("Train loss", justify="right")
            epochs.add_column("Val MAE", justify="right")
            epochs.add_column("LR", justify="right")
            for e in summary["epochs"]:
                epochs.add_row(
                    e["label"] or "-", str(e["epoch"]), f"{e['train_loss']:.4f}",
                    f"{e['val_mae']:.3f}", f"{e['lr']:.2g}",
                )
            console.print(epochs)

        if summary["reports"]:
            reports = Table(title="Reports")
            reports.add_column("Model", style="bold cyan")
            reports.add_column("Split")
            reports.add_column("MAE", justify="right")
            reports.add_column("RMSE", justify="right")
            reports.add_column("MAPE", justify="right")
            for r in summary["reports"]:
                reports.add_row(
                    r["label"], r["split"], f"{r['mae']:.3f}", f"{r['rmse']:.3f}",
                    f"{100 * r['mape']:.2f}%",
                )
            console.print(reports)

        if summary["tasks"]:
            styles = {
                "pending": "dim", "queued": "yellow", "running": "blue",
                "completed": "green", "failed": "red", "skipped": "dim",
            }
            tasks = Table(title="Tasks")
            tasks.add_column("ID", style="dim")
            tasks.add_column("Title")
            tasks.add_column("Status")
            tasks.add_column("Result")
            for t in summary["tasks"]:
                style = styles.get(t["status"], "white")
                tasks.add_row(
                    t["id"], t["title"], f"[{style}]{t['status']}[/{style}]", t["result"] or "-"
                )
            console.print(tasks)

    _run_async(_status())


@app.command()
def version():
    """Show STWave version."""
    console.print(f"[bold cyan]STWave[/] v{__version__}")


@app.command()
def clean(
    confirm: bool = typer.Option(False, "--yes", "-y", help="Skip confirmation prompt"),
):
    """Delete the run-history database."""
    db_path = get_db_path()
    if not db_path.exists():
        console.print(f"[yellow]No database found at {db_path}[/]")
        return

    if not confirm:
        response = typer.confirm(
            f"This will permanently delete all run history in {db_path}. Continue?"
        )
        if not response:
            console.print("[dim]Cancelled.[/]")
            raise typer.Exit(0)

    db_path.unlink()
    console.print(f"[green]✓[/] Database deleted: {db_path}")


# ── Variants subcommands ──────────────────────────────────────────────


@variants_app.command("list")
def variants_list():
    """List the shipped model variants."""
    from stwave.variant_manager import VariantManager

    manager = VariantManager()
    try:
        variants = manager.load_all()
    except FileNotFoundError:
        console.print("[red]Variants directory not found.[/]")
        raise typer.Exit(EXIT_USAGE)

    table = Table(title="Model variants")
    table.add_column("Name", style="bold cyan")
    table.add_column("Label")
    table.add_column("Overrides")
    table.add_column("Description")
    for v in variants.values():
        table.add_row(v.name, v.label, ", ".join(v.override_items()) or "-", v.description)
    console.print(table)


def main(argv: list[str] | None = None) -> int:
    """Console entry point returning the process exit code."""
    try:
        result = app(args=argv, prog_name="stwave", standalone_mode=False)
    except click.exceptions.Abort:
        console.print("[dim]Aborted.[/]")
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    raise SystemExit(main())
