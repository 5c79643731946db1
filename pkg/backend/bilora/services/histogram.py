"""
Histogram tables of learned singular values and Gram-matrix entries.
"""

import logging
from pathlib import Path
from typing import List, Sequence

import numpy as np
import pandas as pd

from bilora.exceptions import ArtifactError, SnapshotError
from bilora.services.adapter import load_adapters
from bilora.services.traces import FLOAT_FORMAT, read_trace_csv

logger = logging.getLogger(__name__)

N_BINS = 20


def binned(values: np.ndarray, bins: int = N_BINS) -> pd.DataFrame:
    """Equal-width bins over the observed range of values."""
    counts, edges = np.histogram(values, bins=bins, range=(float(np.min(values)), float(np.max(values))))
    return pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": counts.astype(np.int64)})


def lambda_histogram(trace_paths: Sequence[Path]) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Histogram of the final singular-value snapshot of every trace.

    Returns:
        Tuple of (histogram with bin_lo, bin_hi, count;
        per-adapter sums with trace, adapter, sum)

    Raises:
        SnapshotError: If no traces are given or one has no snapshot
    """
    if not trace_paths:
        raise SnapshotError("No trace files given")

    values: List[np.ndarray] = []
    sums = []
    for path in trace_paths:
        snapshot = read_trace_csv(Path(path)).final_snapshot()
        if snapshot is None:
            raise SnapshotError(f"{path} has no singular-value snapshots")
        for k, lam in enumerate(snapshot):
            values.append(lam)
            sums.append({"trace": Path(path).stem, "adapter": k, "sum": float(np.sum(lam))})

    histogram = binned(np.concatenate(values))
    logger.info(f"Binned {sum(v.size for v in values)} singular values from {len(trace_paths)} traces")
    return histogram, pd.DataFrame(sums, columns=["trace", "adapter", "sum"])


def gram_histogram(adapter_paths: Sequence[Path]) -> pd.DataFrame:
    """
    Histogram of P^T P and Q Q^T entries, split into diagonal and off-diagonal counts.

    Orthonormal singular vectors put every diagonal entry at 1 and every
    off-diagonal entry at 0.
    """
    if not adapter_paths:
        raise ArtifactError("No adapter dumps given")

    diagonal: List[np.ndarray] = []
    off_diagonal: List[np.ndarray] = []
    for path in adapter_paths:
        for adapter in load_adapters(Path(path)):
            for gram in (adapter.p.T @ adapter.p, adapter.q @ adapter.q.T):
                mask = np.eye(gram.shape[0], dtype=bool)
                diagonal.append(gram[mask])
                off_diagonal.append(gram[~mask])

    diag = np.concatenate(diagonal)
    off = np.concatenate(off_diagonal)
    everything = np.concatenate([diag, off])
    value_range = (float(np.min(everything)), float(np.max(everything)))
    diag_counts, edges = np.histogram(diag, bins=N_BINS, range=value_range)
    off_counts, _ = np.histogram(off, bins=N_BINS, range=value_range)
    return pd.DataFrame(
        {
            "bin_lo": edges[:-1],
            "bin_hi": edges[1:],
            "diagonal_count": diag_counts.astype(np.int64),
            "off_diagonal_count": off_counts.astype(np.int64),
        }
    )


def write_table(path: Path, table: pd.DataFrame) -> Path:
    try:
        table.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        raise ArtifactError(f"Failed to write {path}: {e}") from e
    logger.info(f"Wrote {path}")
    return path
