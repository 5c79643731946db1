"""
Shared helpers for the CLI commands.

Maps structured errors to exit codes and resolves the options every
experiment command accepts.
"""

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional

import typer

from bilora.config import get_settings
from bilora.exceptions import BiLoRAError

logger = logging.getLogger(__name__)


@contextmanager
def cli_errors() -> Iterator[None]:
    """
    Turn a BiLoRAError into its documented exit code.

    Raises:
        typer.Exit: With the error's exit_code
    """
    try:
        yield
    except BiLoRAError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        typer.echo(f"error: {e.message}", err=True)
        raise typer.Exit(code=e.exit_code)


def collect_overrides(overrides: Optional[List[str]], seeds: Optional[str]) -> List[str]:
    """--set overrides followed by the --seeds shorthand."""
    merged = list(overrides or [])
    if seeds:
        merged.append(f"seeds=[{seeds}]")
    return merged


def resolve_jobs(jobs: Optional[int]) -> int:
    """--jobs flag, then BILORA_JOBS."""
    return jobs if jobs is not None else get_settings().jobs


def resolve_output(out: Optional[str], configured: Optional[str] = None) -> Path:
    return get_settings().resolve_output_dir(out, configured)
