"""
Run and sweep orchestration.

Each (config, seed) pair is an isolated job: it builds its own task, model
and streams from Rng(seed), so jobs can run in any order or in a process
pool. Results are collected and written in submission order, which keeps
every artifact independent of the worker count.

Per-seed random streams (children of Rng(seed)):
    task   - datasets
    model  - W0, P and Q; shared by the baseline and BiLoRA
    train  - split and minibatch order
"""

import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from bilora.config import ensure_output_directory
from bilora.exceptions import ArtifactError, ConfigError, DivergenceError
from bilora.schemas import ExperimentConfig, ExperimentSummary, Method, RunSummary, SingularMode
from bilora.services import config_loader, training
from bilora.services.adapter import LoRAAdapter, dump_adapters
from bilora.services.linalg import Rng
from bilora.services.model import ToyModel, build_model
from bilora.services.tasks import Dataset, make_task
from bilora.services.traces import FLOAT_FORMAT, RunTrace, summarize_trace, write_trace_csv

logger = logging.getLogger(__name__)


@dataclass
class SeedOutcome:
    """Everything one seed produced; divergence is carried, not raised."""

    seed: int
    trace: RunTrace
    adapters: List[LoRAAdapter]
    summary: Optional[RunSummary]
    error: Optional[DivergenceError] = None


# =============================================================================
# Single seed
# =============================================================================


def build_experiment(
    config: ExperimentConfig, seed: int
) -> Tuple[Dataset, Dataset, ToyModel, Rng]:
    """
    Datasets, initial model and training stream for one seed.

    The LoRA baseline gets RealValue adapters drawn from the same model stream
    as BiLoRA, so both start from identical W0, P and Q.
    """
    root = Rng(seed)
    train, test, loss_kind = make_task(root.child("task"), config.task)
    if config.method == Method.LORA:
        mode = SingularMode.REAL_VALUE
        classic = config.model.classic_form
    else:
        mode = config.model.mode
        classic = False
    model = build_model(
        root.child("model"),
        config.model,
        train.d_in,
        train.d_out,
        loss_kind,
        mode=mode,
        classic_form=classic,
    )
    return train, test, model, root.child("train")


def run_seed(config: ExperimentConfig, seed: int) -> SeedOutcome:
    """Train one seed; a divergence is returned inside the outcome."""
    train, test, model, stream = build_experiment(config, seed)
    started = time.perf_counter()
    try:
        if config.method == Method.LORA:
            trace = training.train_lora_baseline(
                model, train, test, config.baseline, stream, config.snapshot_every
            )
        else:
            trace = training.train_bilora(
                model, train, test, config.split, config.bilevel, stream, config.snapshot_every
            )
    except DivergenceError as e:
        trace = e.trace if e.trace is not None else RunTrace(ranks=[a.rank for a in model.adapters])
        trace.method, trace.seed = config.method, seed
        summary = None
        if trace.records:
            summary = summarize_trace(
                trace, config.method, seed, time.perf_counter() - started, diverged=True
            )
        error = DivergenceError(e.step, e.stage, e.detail)
        return SeedOutcome(seed, trace, model.adapters, summary, error)

    trace.seed = seed
    summary = summarize_trace(trace, config.method, seed, time.perf_counter() - started)
    logger.info(
        f"Seed {seed} finished: test={summary.final_test_loss:.6f}, "
        f"gap@best={summary.gap_at_best:.6f} (step {summary.best_test_step})"
    )
    return SeedOutcome(seed, trace, model.adapters, summary)


def _run_job(job: Tuple[Dict[str, Any], int]) -> SeedOutcome:
    """Pool entry point; configs travel as plain dicts."""
    payload, seed = job
    return run_seed(ExperimentConfig.model_validate(payload), seed)


def execute(jobs: Sequence[Tuple[ExperimentConfig, int]], workers: int = 1) -> List[SeedOutcome]:
    """
    Run (config, seed) jobs, in process or in a pool of `workers` processes.

    Returns:
        Outcomes in submission order
    """
    if workers <= 1 or len(jobs) <= 1:
        return [run_seed(config, seed) for config, seed in jobs]

    payloads = [(config.model_dump(mode="json"), seed) for config, seed in jobs]
    logger.info(f"Running {len(jobs)} jobs on {workers} workers")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, payloads))


# =============================================================================
# Artifacts
# =============================================================================


def _write_json(path: Path, payload: str) -> None:
    try:
        path.write_text(payload, encoding="utf-8")
    except OSError as e:
        raise ArtifactError(f"Failed to write {path}: {e}") from e


def summarize_experiment(method: Method, outcomes: Sequence[SeedOutcome]) -> ExperimentSummary:
    """Per-seed summaries plus medians over the seeds that finished."""
    runs = [o.summary for o in outcomes if o.summary is not None]
    finished = [r for r in runs if not r.diverged]

    def median(field: str) -> float:
        if not finished:
            return float("nan")
        return float(np.median([getattr(r, field) for r in finished]))

    return ExperimentSummary(
        method=method,
        seeds=[o.seed for o in outcomes],
        runs=runs,
        median_final_test_loss=median("final_test_loss"),
        median_gap_at_best=median("gap_at_best"),
        median_final_gap=median("final_gap"),
    )


def write_outcomes(
    config: ExperimentConfig, outcomes: Sequence[SeedOutcome], out_dir: Path
) -> ExperimentSummary:
    """Write per-seed artifacts, summary.json and config.echo.toml."""
    ensure_output_directory(out_dir)
    config_loader.write_config_echo(out_dir / "config.echo.toml", config)

    for outcome in outcomes:
        write_trace_csv(out_dir / f"trace_seed{outcome.seed}.csv", outcome.trace)
        dump_adapters(out_dir / f"adapters_seed{outcome.seed}.json", outcome.adapters)
        if outcome.summary is not None:
            _write_json(
                out_dir / f"summary_seed{outcome.seed}.json",
                outcome.summary.model_dump_json(indent=2),
            )

    summary = summarize_experiment(config.method, outcomes)
    _write_json(out_dir / "summary.json", summary.model_dump_json(indent=2))
    logger.info(f"Artifacts for {len(outcomes)} seed(s) written to {out_dir}")
    return summary


def _first_error(outcomes: Sequence[SeedOutcome]) -> Optional[DivergenceError]:
    for outcome in outcomes:
        if outcome.error is not None:
            error = outcome.error
            error.trace = outcome.trace
            return error
    return None


# =============================================================================
# Commands
# =============================================================================


def run_experiment(config: ExperimentConfig, out_dir: Path, workers: int = 1) -> ExperimentSummary:
    """
    Train every configured seed and write the run artifacts.

    Raises:
        DivergenceError: After all artifacts are written, if any seed diverged
    """
    logger.info(f"Running {config.method.value} for seeds {config.seeds}")
    outcomes = execute([(config, seed) for seed in config.seeds], workers)
    summary = write_outcomes(config, outcomes, out_dir)

    error = _first_error(outcomes)
    if error is not None:
        raise error
    return summary


def expand_sweep(
    config: ExperimentConfig, axes: Sequence[Tuple[str, List[Any]]]
) -> List[Tuple[Dict[str, Any], ExperimentConfig]]:
    """
    Cartesian product of sweep axes, every cell validated before any compute.

    Returns:
        (axis assignment, cell config) per cell, first axis slowest
    """
    if not axes:
        raise ConfigError("A sweep needs at least one --axis")
    keys = [key for key, _ in axes]
    if len(set(keys)) != len(keys):
        raise ConfigError(f"Duplicate sweep axes in {keys}")
    for key, values in axes:
        if not values:
            raise ConfigError(f"Sweep axis {key} has no values", key=key)

    cells = []
    for combo in itertools.product(*[values for _, values in axes]):
        assignment = dict(zip(keys, combo))
        cells.append((assignment, config_loader.with_overrides(config, assignment)))
    return cells


def run_sweep(
    config: ExperimentConfig,
    axes: Sequence[Tuple[str, List[Any]]],
    out_dir: Path,
    workers: int = 1,
) -> pd.DataFrame:
    """
    Run every sweep cell for every seed; write cell_<index>/ and aggregate.csv.

    aggregate.csv is written only after all cells complete.

    Raises:
        DivergenceError: After all artifacts are written, if any run diverged
    """
    cells = expand_sweep(config, axes)
    logger.info(f"Sweep over {[key for key, _ in axes]}: {len(cells)} cells")

    jobs = [(cell_config, seed) for _, cell_config in cells for seed in cell_config.seeds]
    outcomes = execute(jobs, workers)

    rows = []
    errors = []
    offset = 0
    for index, (assignment, cell_config) in enumerate(cells):
        cell_outcomes = outcomes[offset : offset + len(cell_config.seeds)]
        offset += len(cell_config.seeds)
        summary = write_outcomes(cell_config, cell_outcomes, out_dir / f"cell_{index}")
        errors.append(_first_error(cell_outcomes))
        rows.append(
            {
                **assignment,
                "median_final_test_loss": summary.median_final_test_loss,
                "median_gap_at_best": summary.median_gap_at_best,
                "median_final_gap": summary.median_final_gap,
                "n_seeds": sum(1 for r in summary.runs if not r.diverged),
            }
        )
        logger.info(f"Sweep cell {index} {assignment} done")

    aggregate = pd.DataFrame(rows)
    path = out_dir / "aggregate.csv"
    try:
        aggregate.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        raise ArtifactError(f"Failed to write {path}: {e}") from e
    logger.info(f"Sweep aggregate written to {path}")

    error = next((e for e in errors if e is not None), None)
    if error is not None:
        raise error
    return aggregate


def load_summary(path: Path) -> ExperimentSummary:
    """Read a summary.json written by run."""
    try:
        return ExperimentSummary.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, ValueError) as e:
        raise ArtifactError(f"Failed to read summary {path}: {e}") from e
