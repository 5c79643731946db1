"""
`bilora sweep`: Cartesian product of config axes, one run per cell.

Each cell is written under cell_<index>/ like a `run`; aggregate.csv holds
the axis values and per-cell medians once every cell has finished.
"""

import logging
from pathlib import Path
from typing import List, Optional

import typer

from bilora.dependencies import cli_errors, collect_overrides, resolve_jobs, resolve_output
from bilora.services.config_loader import load_config, parse_axis
from bilora.services.experiments import run_sweep

logger = logging.getLogger(__name__)


def sweep(
    config: Path = typer.Option(..., "--config", help="Base experiment config file"),
    axis: Optional[List[str]] = typer.Option(None, "--axis", help="key=v1,v2,... (repeatable)"),
    out: Optional[str] = typer.Option(None, "--out", help="Output directory"),
    seeds: Optional[str] = typer.Option(None, "--seeds", help="Comma-separated seeds"),
    jobs: Optional[int] = typer.Option(None, "--jobs", min=1, help="Worker processes"),
    overrides: Optional[List[str]] = typer.Option(None, "--set", help="key=value override"),
) -> None:
    """Sweep config axes and aggregate medians per cell."""
    with cli_errors():
        axes = [parse_axis(spec) for spec in axis or []]
        experiment = load_config(config, collect_overrides(overrides, seeds))
        out_dir = resolve_output(out, experiment.output_dir)
        aggregate = run_sweep(experiment, axes, out_dir, resolve_jobs(jobs))

    typer.echo(aggregate.to_string(index=False))
    typer.echo(f"Aggregate in {out_dir / 'aggregate.csv'}")
