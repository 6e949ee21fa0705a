"""Diagnostic commands: the gradient suite and the attention benchmark."""
from typing import Annotated, Optional
import logging

import typer
from rich.table import Table

from motionreg.cli.common import console
from motionreg.diff.gradcheck import missing_cases, run_suite
from motionreg.services.bench import bench_attention

logger = logging.getLogger(__name__)

EXIT_NUMERICAL = 3


def gradcheck(
    op: Annotated[Optional[list[str]], typer.Option("--op", help="Check only these ops (repeatable)")] = None,
    seed: Annotated[int, typer.Option(help="Seed for inputs and directions")] = 0,
):
    """Finite-difference check of every registered op; exits 0 only if all pass."""
    uncovered = missing_cases()
    if uncovered:
        logger.error(f"Registered ops without a gradient case: {uncovered}")
    reports = run_suite(op or None, seed=seed)

    table = Table(title="gradient check (float64, central differences)")
    for column in ("op", "worst rel. error", "worst input", "tolerance", "time s", "status"):
        table.add_column(column)
    for r in reports:
        status = "[green]pass[/green]" if r.passed else f"[red]FAIL[/red] {r.failure or ''}".rstrip()
        table.add_row(r.op, f"{r.worst:.2e}", r.worst_input or "-", f"{r.tolerance:.0e}", f"{r.seconds:.2f}", status)
    console.print(table)

    if uncovered or not all(r.passed for r in reports):
        raise typer.Exit(code=EXIT_NUMERICAL)


def bench(
    dims: Annotated[int, typer.Option(help="Edge length of the cubic grid")] = 32,
    heads: Annotated[int, typer.Option(help="Attention heads S")] = 8,
    head_dim: Annotated[int, typer.Option("--head-dim", help="Channels per head d")] = 6,
    repeats: Annotated[int, typer.Option(help="Timed runs per implementation")] = 3,
    check: Annotated[bool, typer.Option(help="Fail unless fused beats naive on memory and time")] = True,
):
    """Fused versus naive neighborhood attention: time and peak auxiliary memory."""
    report = bench_attention(dims=dims, heads=heads, head_dim=head_dim, repeats=repeats)

    table = Table(title="neighborhood attention")
    for column in ("impl", "dims", "S", "time_ms", "peak_aux_bytes"):
        table.add_column(column, justify="right")
    for row in report.rows:
        table.add_row(row.impl, "x".join(map(str, row.dims)), str(row.S), f"{row.time_ms:.1f}", f"{row.peak_aux_bytes:,}")
    console.print(table)
    console.print(
        f"memory ratio {report.memory_ratio:.3f}, time ratio {report.time_ratio:.3f}, "
        f"max |fused - naive| {report.max_abs_diff:.2e}"
    )

    if check and not report.passed:
        logger.error("Fused attention did not meet the memory/time contract")
        raise typer.Exit(code=EXIT_NUMERICAL)


def add_commands(app: typer.Typer) -> None:
    app.command("gradcheck")(gradcheck)
    app.command("bench")(bench)
