"""
`bilora run`: train every configured seed and write the run artifacts.

Artifacts (in the output directory):
- trace_seed<seed>.csv, adapters_seed<seed>.json, summary_seed<seed>.json
- summary.json (per-seed summaries and medians)
- config.echo.toml (fully resolved config)
"""

import logging
from pathlib import Path
from typing import List, Optional

import typer

from bilora.dependencies import cli_errors, collect_overrides, resolve_jobs, resolve_output
from bilora.services.config_loader import load_config
from bilora.services.experiments import run_experiment

logger = logging.getLogger(__name__)


def run(
    config: Path = typer.Option(..., "--config", help="Experiment config file"),
    out: Optional[str] = typer.Option(None, "--out", help="Output directory"),
    seeds: Optional[str] = typer.Option(None, "--seeds", help="Comma-separated seeds"),
    jobs: Optional[int] = typer.Option(None, "--jobs", min=1, help="Worker processes"),
    overrides: Optional[List[str]] = typer.Option(None, "--set", help="key=value override"),
) -> None:
    """Run an experiment (LoRA baseline or BiLoRA) for every seed."""
    with cli_errors():
        experiment = load_config(config, collect_overrides(overrides, seeds))
        out_dir = resolve_output(out, experiment.output_dir)
        summary = run_experiment(experiment, out_dir, resolve_jobs(jobs))

    typer.echo(
        f"{summary.method.value}: {len(summary.runs)} seed(s), "
        f"median final test loss {summary.median_final_test_loss:.6g}, "
        f"median gap at best {summary.median_gap_at_best:.6g}"
    )
    typer.echo(f"Artifacts in {out_dir}")
