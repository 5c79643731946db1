"""
`bilora gradcheck`: finite-difference oracle suite as a command.

Exit code 5 names the first component over tolerance. first_order_gap rows
are informational and never fail.
"""

import logging
from pathlib import Path
from typing import List, Optional

import typer

from bilora.dependencies import cli_errors
from bilora.services import gradcheck as oracle
from bilora.services.config_loader import load_gradcheck_spec

logger = logging.getLogger(__name__)


def gradcheck(
    config: Optional[Path] = typer.Option(None, "--config", help="Config with gradcheck.* keys"),
    suite: Optional[List[str]] = typer.Option(
        None, "--suite", help=f"One of {', '.join(oracle.SUITES)} (repeatable)"
    ),
    overrides: Optional[List[str]] = typer.Option(None, "--set", help="gradcheck.key=value"),
) -> None:
    """Check every analytic gradient against central differences."""
    with cli_errors():
        spec = load_gradcheck_spec(config, overrides or [])
        suites = suite or list(oracle.SUITES)
        unknown = sorted(set(suites) - set(oracle.SUITES))
        if unknown:
            typer.echo(f"error: unknown suite(s) {unknown}", err=True)
            raise typer.Exit(code=2)

        rows = oracle.run_gradcheck(spec, suites)
        typer.echo(oracle.format_report(rows))
        oracle.raise_on_failure(rows)

    typer.echo("All gradient checks passed")
