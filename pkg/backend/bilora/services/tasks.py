"""
Synthetic datasets, train-set splitting and minibatch sampling.

Tasks are built to overfit: few training samples, label noise and an
over-parameterized adapted model. Samples are stored column-wise
(features x samples) to match the adapters' d_in x batch convention.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional

import numpy as np

from bilora.exceptions import ArtifactError, ShapeError, SplitError
from bilora.schemas import LossKind, SplitSpec, TaskKind, TaskSpec
from bilora.services import linalg
from bilora.services.linalg import Matrix, Rng

logger = logging.getLogger(__name__)

DATASET_HEADER = "# bilora-dataset v1"


@dataclass
class Dataset:
    """Inputs (d_in x n) and targets (d_out x n); classification targets are one-hot."""

    inputs: Matrix
    targets: Matrix
    name: str
    seed: int = 0

    def __post_init__(self) -> None:
        if self.inputs.shape[1] != self.targets.shape[1]:
            raise ShapeError(
                f"Dataset {self.name}: {self.inputs.shape[1]} inputs vs "
                f"{self.targets.shape[1]} targets"
            )

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[1]

    @property
    def d_in(self) -> int:
        return self.inputs.shape[0]

    @property
    def d_out(self) -> int:
        return self.targets.shape[0]

    def subset(self, indices: np.ndarray, name: str) -> "Dataset":
        return Dataset(
            inputs=self.inputs[:, indices].copy(),
            targets=self.targets[:, indices].copy(),
            name=name,
            seed=self.seed,
        )

    def __repr__(self) -> str:
        return f"<Dataset(name={self.name}, d_in={self.d_in}, d_out={self.d_out}, n={self.n_samples})>"


# =============================================================================
# Splitting
# =============================================================================


def split_dataset(dataset: Dataset, spec: SplitSpec, rng: Optional[Rng] = None) -> tuple[Dataset, Dataset]:
    """
    Seed-shuffled partition of the training set into D1 and D2.

    |D1| = round(lower_fraction * n). lower_fraction = 1.0 leaves D2 empty;
    the bi-level trainer rejects that. When rounding would leave D2 empty for
    a fraction below one, one sample moves back to D2.

    Args:
        dataset: Training set to split
        spec: Split fraction and optional explicit seed
        rng: Stream used when spec.seed is unset

    Returns:
        Tuple of (D1, D2)
    """
    n = dataset.n_samples
    if spec.seed is not None:
        rng = Rng(spec.seed)
    if rng is None:
        raise SplitError("split_dataset needs spec.seed or an rng")

    if spec.lower_fraction < 1.0 and n < 2:
        raise SplitError(f"Can't split {n} sample(s) into two non-empty subsets")

    n_lower = int(np.floor(spec.lower_fraction * n + 0.5))
    if spec.lower_fraction < 1.0 and n_lower >= n:
        n_lower = n - 1
        logger.warning(
            f"Split fraction {spec.lower_fraction} of {n} samples rounds to an empty "
            f"upper set; using {n_lower}:{n - n_lower}"
        )
    if n_lower < 1:
        n_lower = 1
        logger.warning(f"Split fraction {spec.lower_fraction} rounds to an empty lower set; using 1")

    order = rng.permutation(n)
    lower = dataset.subset(order[:n_lower], f"{dataset.name}/D1")
    upper = dataset.subset(order[n_lower:], f"{dataset.name}/D2")
    logger.info(f"Split {dataset.name}: |D1|={lower.n_samples}, |D2|={upper.n_samples}")
    return lower, upper


# =============================================================================
# Synthetic tasks
# =============================================================================


def _low_rank_teacher(rng: Rng, d_out: int, d_in: int, teacher_rank: int) -> Matrix:
    left = linalg.gaussian_matrix(rng, d_out, teacher_rank, 1.0 / np.sqrt(teacher_rank))
    right = linalg.gaussian_matrix(rng, teacher_rank, d_in, 1.0 / np.sqrt(d_in))
    return linalg.matmul(left, right)


def make_teacher_task(
    rng: Rng,
    d_in: int,
    d_out: int,
    n_train: int,
    n_test: int,
    noise_std: float,
    teacher_rank: int,
) -> tuple[Dataset, Dataset]:
    """
    Regression task y = T x + noise with a fixed low-rank teacher T.

    Train and test share T; their inputs and noise are drawn independently.
    """
    if n_train < 1 or n_test < 1:
        raise ShapeError(f"Need at least one sample per set, got {n_train}/{n_test}")

    teacher = _low_rank_teacher(rng.child("teacher"), d_out, d_in, teacher_rank)

    def draw(stream: Rng, n: int, name: str) -> Dataset:
        x = linalg.gaussian_matrix(stream, d_in, n, 1.0)
        noise = linalg.gaussian_matrix(stream, d_out, n, noise_std)
        return Dataset(inputs=x, targets=teacher @ x + noise, name=name, seed=rng.seed)

    return draw(rng.child("train"), n_train, "teacher/train"), draw(rng.child("test"), n_test, "teacher/test")


def make_classification_task(
    rng: Rng,
    d_in: int,
    n_classes: int,
    n_train: int,
    n_test: int,
    noise_std: float,
    teacher_rank: int,
) -> tuple[Dataset, Dataset]:
    """
    Classification task: labels are argmax(T x + logit noise), one-hot encoded.

    Logit noise flips labels near decision boundaries, which a small training
    set then memorizes.
    """
    if n_train < 1 or n_test < 1:
        raise ShapeError(f"Need at least one sample per set, got {n_train}/{n_test}")

    teacher = _low_rank_teacher(rng.child("teacher"), n_classes, d_in, teacher_rank)

    def draw(stream: Rng, n: int, name: str) -> Dataset:
        x = linalg.gaussian_matrix(stream, d_in, n, 1.0)
        logits = teacher @ x + linalg.gaussian_matrix(stream, n_classes, n, noise_std)
        one_hot = np.zeros((n_classes, n))
        one_hot[np.argmax(logits, axis=0), np.arange(n)] = 1.0
        return Dataset(inputs=x, targets=one_hot, name=name, seed=rng.seed)

    return draw(rng.child("train"), n_train, "classes/train"), draw(rng.child("test"), n_test, "classes/test")


def make_task(rng: Rng, spec: TaskSpec) -> tuple[Dataset, Dataset, LossKind]:
    """Build the configured task and the loss it's trained with."""
    if spec.kind == TaskKind.CLASSIFICATION:
        train, test = make_classification_task(
            rng, spec.d_in, spec.d_out, spec.n_train, spec.n_test, spec.noise_std, spec.teacher_rank
        )
        return train, test, LossKind.SOFTMAX_CROSS_ENTROPY
    train, test = make_teacher_task(
        rng, spec.d_in, spec.d_out, spec.n_train, spec.n_test, spec.noise_std, spec.teacher_rank
    )
    return train, test, LossKind.MSE


# =============================================================================
# Minibatches
# =============================================================================


@dataclass
class Batch:
    indices: np.ndarray
    x: Matrix
    y: Matrix


class BatchSampler:
    """
    Sequential epochs over a permutation reshuffled every epoch.

    A batch size at least as large as the dataset yields the whole dataset on
    every draw.
    """

    def __init__(self, dataset: Dataset, batch_size: int, rng: Rng) -> None:
        if dataset.n_samples < 1:
            raise SplitError(f"Can't sample batches from empty dataset {dataset.name}")
        self.dataset = dataset
        self.batch_size = min(batch_size, dataset.n_samples)
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)
        self._position = 0
        self.epoch = 0

        if batch_size >= dataset.n_samples:
            logger.warning(
                f"Batch size {batch_size} >= |{dataset.name}|={dataset.n_samples}; "
                f"using the whole set as one batch"
            )

    def _make_batch(self, indices: np.ndarray) -> Batch:
        return Batch(
            indices=indices,
            x=self.dataset.inputs[:, indices],
            y=self.dataset.targets[:, indices],
        )

    def next_batch(self) -> Batch:
        if self._position >= self._order.size:
            self._order = self.rng.permutation(self.dataset.n_samples)
            self._position = 0
            self.epoch += 1
        indices = self._order[self._position : self._position + self.batch_size]
        self._position += self.batch_size
        return self._make_batch(indices)

    def iter_epoch(self) -> Iterator[Batch]:
        """One fresh pass over the dataset."""
        self._order = self.rng.permutation(self.dataset.n_samples)
        self._position = 0
        self.epoch += 1
        while self._position < self._order.size:
            indices = self._order[self._position : self._position + self.batch_size]
            self._position += self.batch_size
            yield self._make_batch(indices)


# =============================================================================
# Dump / load
# =============================================================================


def dump_dataset(path: Path, dataset: Dataset) -> Path:
    """
    Write a dataset in the column-major text format.

    Header lines start with '#'; each following line is one sample: its
    d_in inputs then its d_out targets, as %.17g.
    """
    lines: List[str] = [
        DATASET_HEADER,
        f"# name={dataset.name}",
        f"# d_in={dataset.d_in} d_out={dataset.d_out} n={dataset.n_samples} seed={dataset.seed}",
    ]
    for j in range(dataset.n_samples):
        row = np.concatenate([dataset.inputs[:, j], dataset.targets[:, j]])
        lines.append(" ".join(f"{value:.17g}" for value in row))
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise ArtifactError(f"Failed to write dataset to {path}: {e}") from e
    return path


def load_dataset(path: Path) -> Dataset:
    """Read a dataset written by dump_dataset."""
    try:
        text = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ArtifactError(f"Failed to read dataset {path}: {e}") from e
    if not text or text[0] != DATASET_HEADER:
        raise ArtifactError(f"{path} is not a bilora dataset file")

    try:
        name = text[1].removeprefix("# name=")
        fields = dict(item.split("=", 1) for item in text[2].removeprefix("# ").split())
        d_in, d_out, n = int(fields["d_in"]), int(fields["d_out"]), int(fields["n"])
        seed = int(fields["seed"])
    except (IndexError, KeyError, ValueError) as e:
        raise ArtifactError(f"{path}: malformed dataset header: {e}") from e

    rows = [line.split() for line in text[3:] if line.strip()]
    if len(rows) != n:
        raise ArtifactError(f"{path}: header says {n} samples, found {len(rows)}")
    try:
        data = np.array([[float(value) for value in row] for row in rows], dtype=np.float64)
        data = data.reshape(n, d_in + d_out)
    except ValueError as e:
        raise ArtifactError(f"{path}: malformed sample rows: {e}") from e
    return Dataset(
        inputs=np.ascontiguousarray(data[:, :d_in].T),
        targets=np.ascontiguousarray(data[:, d_in:].T),
        name=name,
        seed=seed,
    )
