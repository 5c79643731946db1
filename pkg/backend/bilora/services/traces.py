"""
Run traces and their versioned CSV codec.

A RunTrace is an append-only list of per-step records. The CSV schema (v1)
has one row per record:

    schema_version, step, lower_loss, upper_loss, train_loss, test_loss,
    defect_<k>..., lambda_<k>_<i>...

Absent values (baseline lower/upper losses, rows without a singular-value
snapshot) are empty cells. Floats are written with 17 significant digits and
parsed back with round-trip precision, so the codec is lossless.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from bilora.exceptions import ArtifactError
from bilora.schemas import Method, RunSummary
from bilora.services.linalg import Vector

logger = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.17g"
LOSS_COLUMNS = ["lower_loss", "upper_loss", "train_loss", "test_loss"]


@dataclass
class TraceRecord:
    """Metrics of one global step (BiLoRA) or epoch (baseline)."""

    step: int
    train_loss: float
    test_loss: float
    defects: List[float]
    lower_loss: Optional[float] = None
    upper_loss: Optional[float] = None
    lambdas: Optional[List[Vector]] = None

    @property
    def gap(self) -> float:
        return self.test_loss - self.train_loss


@dataclass
class RunTrace:
    """Append-only sequence of TraceRecords with strictly increasing steps."""

    ranks: List[int]
    method: Optional[Method] = None
    seed: Optional[int] = None
    records: List[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: TraceRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(
                f"Trace steps must increase: {record.step} after {self.records[-1].step}"
            )
        if len(record.defects) != len(self.ranks):
            raise ValueError(f"Expected {len(self.ranks)} defects, got {len(record.defects)}")
        if record.lambdas is not None and [lam.size for lam in record.lambdas] != self.ranks:
            raise ValueError("Singular-value snapshot doesn't match adapter ranks")
        self.records.append(record)

    def has_snapshots(self) -> bool:
        return any(r.lambdas is not None for r in self.records)

    def final_snapshot(self) -> Optional[List[Vector]]:
        """Latest recorded singular-value snapshot, if any."""
        for record in reversed(self.records):
            if record.lambdas is not None:
                return record.lambdas
        return None

    def best_record(self) -> TraceRecord:
        """Record with the lowest test loss; the earliest one wins ties."""
        return min(self.records, key=lambda r: (r.test_loss, r.step))

    def __repr__(self) -> str:
        return f"<RunTrace(method={self.method}, seed={self.seed}, records={len(self.records)})>"


# =============================================================================
# CSV codec
# =============================================================================


def trace_columns(ranks: List[int]) -> List[str]:
    columns = ["schema_version", "step"] + LOSS_COLUMNS
    columns += [f"defect_{k}" for k in range(len(ranks))]
    columns += [f"lambda_{k}_{i}" for k, r in enumerate(ranks) for i in range(r)]
    return columns


def trace_to_frame(trace: RunTrace) -> pd.DataFrame:
    n_lambda = sum(trace.ranks)
    rows = []
    for record in trace.records:
        row = [
            record.lower_loss if record.lower_loss is not None else np.nan,
            record.upper_loss if record.upper_loss is not None else np.nan,
            record.train_loss,
            record.test_loss,
            *record.defects,
        ]
        if record.lambdas is not None:
            row += list(np.concatenate(record.lambdas))
        else:
            row += [np.nan] * n_lambda
        rows.append(row)

    columns = trace_columns(trace.ranks)
    values = pd.DataFrame(rows, columns=columns[2:], dtype=np.float64)
    frame = pd.DataFrame(
        {
            "schema_version": np.full(len(trace.records), TRACE_SCHEMA_VERSION, dtype=np.int64),
            "step": np.array([r.step for r in trace.records], dtype=np.int64),
        }
    )
    return pd.concat([frame, values], axis=1)


def frame_to_trace(frame: pd.DataFrame) -> RunTrace:
    versions = set(frame["schema_version"].astype(int)) if len(frame) else {TRACE_SCHEMA_VERSION}
    if versions != {TRACE_SCHEMA_VERSION}:
        raise ArtifactError(f"Unsupported trace schema_version {sorted(versions)}")

    defect_cols = [c for c in frame.columns if c.startswith("defect_")]
    ranks = []
    for k in range(len(defect_cols)):
        ranks.append(sum(1 for c in frame.columns if c.startswith(f"lambda_{k}_")))
    lambda_cols = [c for c in frame.columns if c.startswith("lambda_")]

    def optional(value: float) -> Optional[float]:
        return None if pd.isna(value) else float(value)

    trace = RunTrace(ranks=ranks)
    for _, row in frame.iterrows():
        lambdas = None
        flat = row[lambda_cols].to_numpy(dtype=np.float64)
        if lambda_cols and not np.all(np.isnan(flat)):
            lambdas = np.split(flat, np.cumsum(ranks)[:-1])
        trace.append(
            TraceRecord(
                step=int(row["step"]),
                lower_loss=optional(row["lower_loss"]),
                upper_loss=optional(row["upper_loss"]),
                train_loss=float(row["train_loss"]),
                test_loss=float(row["test_loss"]),
                defects=[float(row[c]) for c in defect_cols],
                lambdas=lambdas,
            )
        )
    return trace


def write_trace_csv(path: Path, trace: RunTrace) -> Path:
    """Serialize a trace to CSV schema v1."""
    try:
        trace_to_frame(trace).to_csv(
            path, index=False, float_format=FLOAT_FORMAT, na_rep="", lineterminator="\n"
        )
    except OSError as e:
        raise ArtifactError(f"Failed to write trace {path}: {e}") from e
    logger.debug(f"Wrote {len(trace)} trace rows to {path}")
    return path


def read_trace_csv(path: Path) -> RunTrace:
    """Parse a CSV written by write_trace_csv."""
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ArtifactError(f"Failed to read trace {path}: {e}") from e
    missing = {"schema_version", "step", *LOSS_COLUMNS} - set(frame.columns)
    if missing:
        raise ArtifactError(f"{path} is missing trace columns {sorted(missing)}")
    return frame_to_trace(frame)


# =============================================================================
# Summaries
# =============================================================================


def summarize_trace(
    trace: RunTrace,
    method: Method,
    seed: int,
    wall_time_seconds: float,
    diverged: bool = False,
) -> RunSummary:
    """Final losses, best test checkpoint and generalization gaps of one run."""
    if not trace.records:
        raise ValueError("Can't summarize an empty trace")
    final = trace.records[-1]
    best = trace.best_record()
    total_steps = final.step
    return RunSummary(
        method=method,
        seed=seed,
        final_train_loss=final.train_loss,
        final_test_loss=final.test_loss,
        final_lower_loss=final.lower_loss,
        final_upper_loss=final.upper_loss,
        best_test_step=best.step,
        best_test_loss=best.test_loss,
        gap_at_best=best.gap,
        final_gap=final.gap,
        total_steps=total_steps,
        wall_time_seconds=wall_time_seconds,
        seconds_per_step=wall_time_seconds / total_steps if total_steps else 0.0,
        diverged=diverged,
    )
