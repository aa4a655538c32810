"""CLI entry point for omnisched."""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable

import click
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from omnisched.config import load_scenario
from omnisched.engine import RunResult, ScenarioEngine
from omnisched.errors import ConfigError, InvariantViolation

console = Console()
err_console = Console(stderr=True)

EXIT_OK, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2


def _setup_logging(verbose: bool) -> None:
    if verbose:
        level = logging.DEBUG
    else:
        name = os.environ.get("OMNISCHED_LOG", "WARNING").upper()
        level = logging.getLevelName(name)
        if not isinstance(level, int):
            level = logging.WARNING
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
        stream=sys.stderr,
        force=True,
    )


def _make_engine(config: str, seed: int | None, out: str | None) -> ScenarioEngine:
    cfg = load_scenario(Path(config), seed=seed, output_dir=Path(out) if out else None)
    return ScenarioEngine(cfg)


def _scenario_options(fn: Callable[..., Any]) -> Callable[..., Any]:
    """Flags shared by every subcommand."""
    fn = click.option("--format", "fmt", type=click.Choice(["json", "csv", "both"]),
                      default="json", show_default=True, help="Report file format.")(fn)
    fn = click.option("--trace/--no-trace", default=True, show_default=True,
                      help="Write Chrome-trace timelines.")(fn)
    fn = click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None,
                      help="Override the scenario seed.")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=None,
                      help="Output directory (overrides output_dir).")(fn)
    fn = click.option("--config", "config", required=True,
                      type=click.Path(exists=True, dir_okay=False),
                      help="Scenario JSON file.")(fn)
    return fn


def _emit(engine: ScenarioEngine, result: RunResult, fmt: str, trace: bool) -> None:
    paths = engine.write(result, fmt=fmt, trace=trace)  # type: ignore[arg-type]
    for p in paths:
        console.print(f"[dim]wrote[/] {escape(str(p))}")


def _metric_table(title: str, metrics: dict[str, Any], keys: list[str]) -> Table:
    table = Table(title=title)
    table.add_column("Metric", style="cyan")
    table.add_column("Value", style="green", justify="right")
    for k in keys:
        if k in metrics:
            v = metrics[k]
            table.add_row(k, f"{v:.6g}" if isinstance(v, float) else str(v))
    return table


# ---------------------------------------------------------------------------
# CLI group
# ---------------------------------------------------------------------------

@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Enable debug logging.")
def cli(verbose: bool) -> None:
    """omnisched: scheduling and performance simulation for video-model training."""
    _setup_logging(verbose)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

@cli.command()
@_scenario_options
def simulate(config: str, out: str | None, seed: int | None, trace: bool, fmt: str) -> None:
    """Simulate one training step and report bubble, memory and step time."""
    engine = _make_engine(config, seed, out)
    with console.status("[bold green]Simulating..."):
        result = engine.simulate()
    console.print(_metric_table("Simulation", result.report["metrics"], [
        "step_time", "dit_time", "encoder_time", "allreduce_time", "bubble_ratio",
        "stall_time", "offloaded_activations", "best_static_up_degree",
        "best_static_step_time", "elastic_gain",
    ]))
    _emit(engine, result, fmt, trace)


# ---------------------------------------------------------------------------
# balance
# ---------------------------------------------------------------------------

@cli.command()
@_scenario_options
def balance(config: str, out: str | None, seed: int | None, trace: bool, fmt: str) -> None:
    """Assign samples to DP groups, pack them and plan elastic UP degrees."""
    engine = _make_engine(config, seed, out)
    result = engine.balance()

    table = Table(title=f"DP Assignment ({len(result.report['groups'])} groups)")
    table.add_column("Group", style="dim", justify="right")
    table.add_column("Load", style="cyan", justify="right")
    table.add_column("Sequences", justify="right")
    table.add_column("Padding", justify="right")
    table.add_column("Slot max/mean", style="yellow", justify="right")
    for row in result.tables["balance"].rows:
        table.add_row(str(row["group_id"]), f"{row['load']:.6g}", str(row["sequences"]),
                      f"{row['padding_ratio']:.2%}", f"{row['slot_max_mean_ratio']:.4f}")
    console.print(table)
    console.print(_metric_table("Imbalance", result.report["imbalance"],
                                ["max_mean_ratio", "max_minus_mean", "idle"]))
    _emit(engine, result, fmt, trace)


# ---------------------------------------------------------------------------
# comms
# ---------------------------------------------------------------------------

@cli.command()
@_scenario_options
def comms(config: str, out: str | None, seed: int | None, trace: bool, fmt: str) -> None:
    """Compare direct and two-tier all-to-all plans."""
    engine = _make_engine(config, seed, out)
    result = engine.comms()

    table = Table(title="All-to-all Plans")
    table.add_column("Strategy", style="cyan")
    table.add_column("Seconds", justify="right")
    table.add_column("Messages", justify="right")
    table.add_column("Inter-node msgs", style="yellow", justify="right")
    table.add_column("Inter-node bytes", justify="right")
    for name, plan in result.report["plans"].items():
        table.add_row(name, f"{plan['total_seconds']:.6g}", str(plan["messages"]),
                      str(plan["inter_node_messages"]), str(plan["inter_node_bytes"]))
    console.print(table)
    _emit(engine, result, fmt, trace)


# ---------------------------------------------------------------------------
# attn-report
# ---------------------------------------------------------------------------

@cli.command("attn-report")
@_scenario_options
def attn_report(config: str, out: str | None, seed: int | None, trace: bool, fmt: str) -> None:
    """Window/condition mask sizes and KV-cache cost tables."""
    engine = _make_engine(config, seed, out)
    result = engine.attention_report()

    table = Table(title="Attention Masks")
    table.add_column("Mask", style="cyan")
    table.add_column("Length", justify="right")
    table.add_column("Blocks", justify="right")
    table.add_column("nnz", justify="right")
    table.add_column("Density", style="yellow", justify="right")
    for row in result.tables["attn_masks"].rows:
        table.add_row(row["mask"], str(row["length"]), str(row["blocks"]), str(row["nnz"]),
                      f"{row['density']:.4f}")
    console.print(table)

    steps = Table(title="Sampling with condition KV cache")
    steps.add_column("Schedule", style="cyan")
    steps.add_column("Steps", justify="right")
    steps.add_column("Uncached s", justify="right")
    steps.add_column("Cached s", justify="right")
    steps.add_column("Speedup", style="green", justify="right")
    for label, row in result.report["sampling"].items():
        steps.add_row(label, str(row["steps"]), f"{row['uncached_seconds']:.6g}",
                      f"{row['cached_seconds']:.6g}", f"{row['end_to_end_ratio']:.3f}x")
    console.print(steps)
    _emit(engine, result, fmt, trace)


# ---------------------------------------------------------------------------
# reliability
# ---------------------------------------------------------------------------

@cli.command()
@_scenario_options
def reliability(config: str, out: str | None, seed: int | None, trace: bool, fmt: str) -> None:
    """ETTR under the fault model, and the mtbf needed for each target."""
    engine = _make_engine(config, seed, out)
    result = engine.reliability()
    report = result.report
    console.print(_metric_table("ETTR", {
        "injected": report["timeline"]["ettr"],
        "failures": report["timeline"]["failures"],
        "expected": report["expected_ettr"],
        "renewal": report["renewal_ettr"],
        "monte_carlo": report["monte_carlo"]["ettr"],
    }, ["injected", "failures", "expected", "renewal", "monte_carlo"]))

    table = Table(title="MTBF needed per ETTR target")
    table.add_column("Target", style="cyan", justify="right")
    table.add_column("MTBF (h)", style="green", justify="right")
    for row in report["thresholds"]:
        value = f"{row['mtbf_hours']:.3f}" if row["reachable"] else "unreachable"
        table.add_row(f"{row['target']:.0%}", value)
    console.print(table)
    _emit(engine, result, fmt, trace)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

@cli.command()
@_scenario_options
@click.option("--jobs", "-j", type=click.IntRange(1), default=1, show_default=True,
              help="Sweep points simulated concurrently.")
def sweep(config: str, out: str | None, seed: int | None, trace: bool, fmt: str,
          jobs: int) -> None:
    """Simulate every point of the scenario's parameter grid."""
    engine = _make_engine(config, seed, out)
    with console.status(f"[bold green]Sweeping {len(engine.sweep_points())} points..."):
        result = engine.sweep(jobs=jobs)

    index = result.tables["index"]
    table = Table(title=f"Sweep ({len(index.rows)} points)")
    for col in index.columns:
        if col != "config_hash":
            table.add_column(col, justify="right")
    for row in index.rows:
        table.add_row(*(
            f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c])
            for c in index.columns if c != "config_hash"
        ))
    console.print(table)
    _emit(engine, result, fmt, trace)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def main(argv: list[str] | None = None) -> int:
    """Run the CLI and map failures to exit codes: 1 for config, 2 for internal errors."""
    try:
        cli.main(args=argv, prog_name="omnisched", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        err_console.print("[red]Aborted.")
        return EXIT_CONFIG
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except ConfigError as exc:
        err_console.print(f"[red]error:[/] {escape(str(exc))}")
        return EXIT_CONFIG
    except InvariantViolation as exc:
        err_console.print(f"[red]internal error:[/] {escape(str(exc))}")
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
