"""
Dense linear algebra and seeded random numbers.

Matrices are float64 numpy arrays with ndim 2. The public operations check
shapes and reject non-finite results so that a NaN never travels silently
through a training run.

Seeding: an integer seed is mixed with SplitMix64 and the 64-bit output keys
numpy's PCG64 bit generator. Child streams hash a text tag with SHA-256,
xor the first 8 bytes into the parent seed and mix again, so children depend
only on (seed, tag) and never on how many draws the parent has made.
"""

import hashlib
import logging

import numpy as np
from numpy.typing import NDArray

from bilora.exceptions import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Matrix = NDArray[np.float64]
Vector = NDArray[np.float64]

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """
    Advance a SplitMix64 state.

    Args:
        state: Current 64-bit state

    Returns:
        Tuple of (next_state, output)
    """
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _tag_key(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")


class Rng:
    """Seeded random stream; identical seed gives identical draws."""

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & _MASK64
        _, key = splitmix64(self.seed)
        self._generator = np.random.Generator(np.random.PCG64(key))

    def child(self, tag: str) -> "Rng":
        """Derive an independent stream from (seed, tag)."""
        _, mixed = splitmix64(self.seed ^ _tag_key(tag))
        return Rng(mixed)

    def normal(self, size: int | tuple[int, ...]) -> NDArray[np.float64]:
        return self._generator.standard_normal(size)

    def uniform(self, low: float, high: float, size: int | tuple[int, ...]) -> NDArray[np.float64]:
        return self._generator.uniform(low, high, size)

    def permutation(self, n: int) -> NDArray[np.int64]:
        return self._generator.permutation(n)

    def __repr__(self) -> str:
        return f"<Rng(seed={self.seed})>"


# =============================================================================
# Checks
# =============================================================================


def as_matrix(data) -> Matrix:
    """Coerce nested lists or arrays to a float64 matrix."""
    array = np.asarray(data, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise ShapeError(f"Expected a 2-D matrix, got ndim={array.ndim}")
    return array


def ensure_finite(array: NDArray[np.float64], what: str = "result") -> NDArray[np.float64]:
    """Raise NonFiniteError if any entry is NaN or Inf."""
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"Non-finite values in {what}")
    return array


def _same_shape(a: NDArray, b: NDArray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# =============================================================================
# Operations
# =============================================================================


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """
    Matrix product a @ b.

    Raises:
        ShapeError: If a.cols != b.rows
        NonFiniteError: If the product overflows
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return ensure_finite(a @ b, "matmul")


def add(a: Matrix, b: Matrix) -> Matrix:
    _same_shape(a, b, "add")
    return ensure_finite(a + b, "add")


def sub(a: Matrix, b: Matrix) -> Matrix:
    _same_shape(a, b, "sub")
    return ensure_finite(a - b, "sub")


def scale(a: Matrix, factor: float) -> Matrix:
    return ensure_finite(a * factor, "scale")


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    _same_shape(a, b, "hadamard")
    return ensure_finite(a * b, "hadamard")


def transpose(a: Matrix) -> Matrix:
    return np.ascontiguousarray(a.T)


def flatten(a: NDArray[np.float64]) -> Vector:
    """Row-major view of all entries."""
    return a.reshape(-1)


def dot(u: Vector, w: Vector) -> float:
    if u.shape != w.shape:
        raise ShapeError(f"dot: length mismatch {u.shape} vs {w.shape}")
    return float(np.dot(u, w))


def frobenius_sq(a: Matrix) -> float:
    """Sum of squared entries."""
    flat = flatten(a)
    return dot(flat, flat)


def identity(n: int) -> Matrix:
    return np.eye(n, dtype=np.float64)


def diag_from_vector(v: Vector) -> Matrix:
    return np.diag(np.asarray(v, dtype=np.float64))


def softmax_vector(v: Vector) -> Vector:
    """Max-shifted softmax."""
    shifted = np.exp(v - np.max(v))
    return shifted / np.sum(shifted)


def sigmoid_vector(v: Vector) -> Vector:
    """Elementwise logistic sigmoid, stable for large |v|."""
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def gaussian_matrix(rng: Rng, rows: int, cols: int, stddev: float) -> Matrix:
    """
    I.i.d. zero-mean normal entries.

    The draw is consumed even when stddev is zero so that later draws from the
    same stream don't depend on it.
    """
    if stddev < 0:
        raise ValueError(f"stddev must be >= 0, got {stddev}")
    draws = rng.normal((rows, cols))
    if stddev == 0:
        return np.zeros((rows, cols), dtype=np.float64)
    return draws * stddev


def orthogonal_matrix(rng: Rng, n: int) -> Matrix:
    """Random n x n orthogonal matrix (QR of a Gaussian, signs fixed)."""
    q, r = np.linalg.qr(rng.normal((n, n)))
    return q * np.sign(np.diag(r))


def relative_error(a: NDArray[np.float64], b: NDArray[np.float64], floor: float = 1e-12) -> float:
    """Norm-wise relative error: max|a-b| / max(max|a|, max|b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b, "relative_error")
    if a.size == 0:
        return 0.0
    denominator = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / denominator
