"""
bilora command-line entry point.

Configures logging and registers the subcommands: run, sweep, gradcheck
and histogram.

Exit codes: 0 ok, 2 invalid config or input, 3 divergence, 4 I/O failure,
5 gradient-check tolerance breach.
"""

import logging

import typer

from bilora import __version__
from bilora.commands import gradcheck, histogram, run, sweep
from bilora.config import get_settings

settings = get_settings()

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

app = typer.Typer(
    name="bilora",
    help="Bi-level optimization of pseudo-SVD low-rank adapters.",
    no_args_is_help=True,
    add_completion=False,
)


def _version(value: bool) -> None:
    if value:
        typer.echo(f"{settings.app_name} {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
    version: bool = typer.Option(
        False, "--version", callback=_version, is_eager=True, help="Show the version"
    ),
) -> None:
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    logger.debug(f"Starting {settings.app_name} v{__version__}")


app.command("run")(run.run)
app.command("sweep")(sweep.sweep)
app.command("gradcheck")(gradcheck.gradcheck)
app.command("histogram")(histogram.histogram)


if __name__ == "__main__":
    app()
