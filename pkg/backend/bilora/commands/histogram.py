"""
`bilora histogram`: binned tables from run artifacts.

--target lambda reads trace CSVs and writes histogram.csv and
lambda_sums.csv; --target gram reads adapter dumps and writes
gram_histogram.csv.
"""

import logging
from enum import Enum
from pathlib import Path
from typing import List, Optional

import typer

from bilora.config import ensure_output_directory
from bilora.dependencies import cli_errors, resolve_output
from bilora.services import histogram as tables

logger = logging.getLogger(__name__)


class Target(str, Enum):
    LAMBDA = "lambda"
    GRAM = "gram"


def histogram(
    files: List[Path] = typer.Argument(..., help="Trace CSVs (lambda) or adapter dumps (gram)"),
    target: Target = typer.Option(Target.LAMBDA, "--target", help="lambda or gram"),
    out: Optional[str] = typer.Option(None, "--out", help="Output directory"),
) -> None:
    """Histogram final singular values or Gram-matrix entries."""
    with cli_errors():
        out_dir = ensure_output_directory(resolve_output(out))
        if target == Target.LAMBDA:
            counts, sums = tables.lambda_histogram(files)
            tables.write_table(out_dir / "histogram.csv", counts)
            tables.write_table(out_dir / "lambda_sums.csv", sums)
        else:
            counts = tables.gram_histogram(files)
            tables.write_table(out_dir / "gram_histogram.csv", counts)

    typer.echo(counts.to_string(index=False))
