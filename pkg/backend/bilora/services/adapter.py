"""
Pseudo-SVD low-rank adapter layer.

An adapter holds a frozen base weight W0 and a trainable increment
Delta W = (alpha / r) * P diag(lambda) Q, where lambda is materialized from a
raw vector v through one of three parameterizations. Gradients are exact and
analytic; the regularizers and the bi-level engine build on them.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from bilora.exceptions import ArtifactError, ShapeError
from bilora.schemas import AdapterDump, AdapterRecord, SingularMode, W0Init
from bilora.services import linalg
from bilora.services.linalg import Matrix, Rng, Vector

logger = logging.getLogger(__name__)

ADAPTER_FORMAT_VERSION = 1


def _frozen(array) -> Matrix:
    """Read-only float64 copy, reused as-is if it already is one."""
    if isinstance(array, np.ndarray) and array.dtype == np.float64 and not array.flags.writeable:
        return array
    frozen = np.array(array, dtype=np.float64, copy=True)
    frozen.flags.writeable = False
    return frozen


@dataclass
class LoRAAdapter:
    """
    One adapted linear layer.

    W0 is stored read-only and shared between copies, so it stays
    bit-identical for the adapter's whole life.
    """

    w0: Matrix
    p: Matrix
    q: Matrix
    v: Vector
    mode: SingularMode
    alpha: float
    layer_index: int = 0
    train_v: bool = True

    def __post_init__(self) -> None:
        self.w0 = _frozen(self.w0)
        self.p = np.asarray(self.p, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(-1)
        self.mode = SingularMode(self.mode)

        d_out, d_in = self.w0.shape
        r = self.v.shape[0]
        if self.p.shape != (d_out, r) or self.q.shape != (r, d_in):
            raise ShapeError(
                f"Adapter {self.layer_index}: P {self.p.shape}, Q {self.q.shape}, "
                f"v ({r},) don't match W0 {self.w0.shape}"
            )
        if r < 1 or r > min(d_out, d_in):
            raise ShapeError(f"Adapter {self.layer_index}: rank {r} outside [1, {min(d_out, d_in)}]")

    @property
    def rank(self) -> int:
        return self.v.shape[0]

    @property
    def d_out(self) -> int:
        return self.w0.shape[0]

    @property
    def d_in(self) -> int:
        return self.w0.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def lambdas(self) -> Vector:
        """Materialized pseudo singular values."""
        return materialize_lambda(self.v, self.mode)

    def delta_weight(self) -> Matrix:
        """Dense increment (alpha/r) P diag(lambda) Q."""
        return self.scaling * (self.p * self.lambdas()) @ self.q

    def orthogonality_defect(self) -> float:
        """||P^T P - I||_F + ||Q Q^T - I||_F."""
        eye = linalg.identity(self.rank)
        return float(
            np.sqrt(linalg.frobenius_sq(self.p.T @ self.p - eye))
            + np.sqrt(linalg.frobenius_sq(self.q @ self.q.T - eye))
        )

    def copy(self) -> "LoRAAdapter":
        return LoRAAdapter(
            w0=self.w0,
            p=self.p.copy(),
            q=self.q.copy(),
            v=self.v.copy(),
            mode=self.mode,
            alpha=self.alpha,
            layer_index=self.layer_index,
            train_v=self.train_v,
        )

    def __repr__(self) -> str:
        return (
            f"<LoRAAdapter(layer={self.layer_index}, {self.d_out}x{self.d_in}, "
            f"r={self.rank}, mode={self.mode.value})>"
        )


@dataclass
class AdapterGrads:
    """Gradients with respect to one adapter's trainable blocks."""

    dp: Matrix
    dq: Matrix
    dv: Vector

    @classmethod
    def zeros_like(cls, adapter: LoRAAdapter) -> "AdapterGrads":
        return cls(
            dp=np.zeros_like(adapter.p),
            dq=np.zeros_like(adapter.q),
            dv=np.zeros_like(adapter.v),
        )


# =============================================================================
# Singular value parameterizations
# =============================================================================


def materialize_lambda(v: Vector, mode: SingularMode) -> Vector:
    """
    Map raw parameters to pseudo singular values.

    RealValue returns v unchanged, Softmax returns softmax(v) (positive, sums
    to one), ApproxBinary returns sigmoid(v) (strictly inside (0, 1)).
    """
    v = linalg.ensure_finite(np.asarray(v, dtype=np.float64), "singular parameters")
    if mode == SingularMode.SOFTMAX:
        return linalg.softmax_vector(v)
    if mode == SingularMode.APPROX_BINARY:
        return linalg.sigmoid_vector(v)
    return v.copy()


def lambda_jacobian_vp(v: Vector, mode: SingularMode, upstream: Vector) -> Vector:
    """
    Transposed Jacobian of materialize_lambda applied to upstream.

    Softmax uses lambda * (u - lambda . u) so the r x r Jacobian is never built.
    """
    v = np.asarray(v, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if v.shape != upstream.shape:
        raise ShapeError(f"lambda_jacobian_vp: length mismatch {v.shape} vs {upstream.shape}")

    if mode == SingularMode.SOFTMAX:
        lam = linalg.softmax_vector(v)
        return lam * (upstream - np.dot(lam, upstream))
    if mode == SingularMode.APPROX_BINARY:
        lam = linalg.sigmoid_vector(v)
        return lam * (1.0 - lam) * upstream
    return upstream.copy()


# =============================================================================
# Forward / backward
# =============================================================================


def _check_input(adapter: LoRAAdapter, x: Matrix) -> None:
    if x.ndim != 2 or x.shape[0] != adapter.d_in:
        raise ShapeError(
            f"Adapter {adapter.layer_index} expects input with {adapter.d_in} rows, got {x.shape}"
        )


def forward(adapter: LoRAAdapter, x: Matrix) -> Matrix:
    """W0 x + (alpha/r) P diag(lambda) Q x for x of shape d_in x batch."""
    _check_input(adapter, x)
    lam = adapter.lambdas()
    base = linalg.matmul(adapter.w0, x)
    increment = adapter.p @ (lam[:, None] * (adapter.q @ x))
    return linalg.ensure_finite(base + adapter.scaling * increment, "adapter forward")


def backward(
    adapter: LoRAAdapter, x: Matrix, upstream_grad: Matrix
) -> tuple[AdapterGrads, Matrix]:
    """
    Reverse pass through one adapter.

    Args:
        adapter: Layer the forward pass ran through
        x: Layer input (d_in x batch)
        upstream_grad: dLoss/d(output) (d_out x batch)

    Returns:
        Tuple of (AdapterGrads for P, Q, v; dLoss/dx). W0 gets no gradient.
    """
    _check_input(adapter, x)
    if upstream_grad.shape != (adapter.d_out, x.shape[1]):
        raise ShapeError(
            f"Adapter {adapter.layer_index}: upstream gradient {upstream_grad.shape} "
            f"doesn't match output ({adapter.d_out}, {x.shape[1]})"
        )

    s = adapter.scaling
    lam = adapter.lambdas()
    h = adapter.q @ x
    g = lam[:, None] * h

    dp = s * (upstream_grad @ g.T)
    dg = s * (adapter.p.T @ upstream_grad)
    dlam = np.sum(dg * h, axis=1)
    dh = lam[:, None] * dg
    dq = dh @ x.T
    dx = adapter.w0.T @ upstream_grad + adapter.q.T @ dh
    dv = lambda_jacobian_vp(adapter.v, adapter.mode, dlam)

    grads = AdapterGrads(
        dp=linalg.ensure_finite(dp, "dP"),
        dq=linalg.ensure_finite(dq, "dQ"),
        dv=linalg.ensure_finite(dv, "dv"),
    )
    return grads, linalg.ensure_finite(dx, "dx")


# =============================================================================
# Initialization
# =============================================================================


def _init_w0(rng: Rng, d_out: int, d_in: int, w0_init: W0Init, w0_std: Optional[float]) -> Matrix:
    stddev = w0_std if w0_std is not None else 1.0 / np.sqrt(d_in)
    draws = linalg.gaussian_matrix(rng, d_out, d_in, stddev)
    if W0Init(w0_init) == W0Init.ZERO:
        return np.zeros((d_out, d_in), dtype=np.float64)
    return draws


def init_adapter(
    rng: Rng,
    d_out: int,
    d_in: int,
    r: int,
    alpha: float,
    mode: SingularMode,
    w0_init: W0Init = W0Init.GAUSSIAN,
    w0_std: Optional[float] = None,
    layer_index: int = 0,
    factor_std: Optional[float] = None,
) -> LoRAAdapter:
    """
    Build an adapter with Gaussian P, Q (stddev factor_std, default 1/sqrt(r)) and v = 0.

    v = 0 makes lambda uniform in every mode: zero increment for RealValue,
    1/r for Softmax and 0.5 for ApproxBinary.
    """
    if r < 1 or d_out < 1 or d_in < 1 or r > min(d_out, d_in):
        raise ShapeError(f"Invalid adapter dims: d_out={d_out}, d_in={d_in}, r={r}")

    w0 = _init_w0(rng, d_out, d_in, w0_init, w0_std)
    stddev = factor_std if factor_std is not None else 1.0 / np.sqrt(r)
    p = linalg.gaussian_matrix(rng, d_out, r, stddev)
    q = linalg.gaussian_matrix(rng, r, d_in, stddev)
    return LoRAAdapter(
        w0=w0,
        p=p,
        q=q,
        v=np.zeros(r),
        mode=mode,
        alpha=alpha,
        layer_index=layer_index,
    )


def init_classic_adapter(
    rng: Rng,
    d_out: int,
    d_in: int,
    r: int,
    alpha: float,
    w0_init: W0Init = W0Init.GAUSSIAN,
    w0_std: Optional[float] = None,
    layer_index: int = 0,
    factor_std: Optional[float] = None,
) -> LoRAAdapter:
    """
    Two-factor LoRA, Delta W = (alpha/r) B A, as a fixed-lambda adapter.

    B (stored as P) starts at zero, A (stored as Q) is Gaussian, lambda is
    pinned at ones and excluded from training.
    """
    adapter = init_adapter(
        rng, d_out, d_in, r, alpha, SingularMode.REAL_VALUE, w0_init, w0_std, layer_index,
        factor_std,
    )
    adapter.p = np.zeros_like(adapter.p)
    adapter.v = np.ones(r)
    adapter.train_v = False
    return adapter


# =============================================================================
# Serialization
# =============================================================================


def to_record(adapter: LoRAAdapter) -> AdapterRecord:
    return AdapterRecord(
        layer_index=adapter.layer_index,
        mode=adapter.mode,
        alpha=adapter.alpha,
        rank=adapter.rank,
        d_out=adapter.d_out,
        d_in=adapter.d_in,
        train_v=adapter.train_v,
        w0=adapter.w0.tolist(),
        p=adapter.p.tolist(),
        q=adapter.q.tolist(),
        v=adapter.v.tolist(),
    )


def from_record(record: AdapterRecord) -> LoRAAdapter:
    return LoRAAdapter(
        w0=np.array(record.w0, dtype=np.float64).reshape(record.d_out, record.d_in),
        p=np.array(record.p, dtype=np.float64).reshape(record.d_out, record.rank),
        q=np.array(record.q, dtype=np.float64).reshape(record.rank, record.d_in),
        v=np.array(record.v, dtype=np.float64),
        mode=record.mode,
        alpha=record.alpha,
        layer_index=record.layer_index,
        train_v=record.train_v,
    )


def dump_adapters(path: Path, adapters: Sequence[LoRAAdapter]) -> Path:
    """
    Write adapters as a versioned JSON document.

    Floats go through json's repr-based encoder, which round-trips float64
    bit-exactly.
    """
    dump = AdapterDump(
        format_version=ADAPTER_FORMAT_VERSION,
        adapters=[to_record(a) for a in adapters],
    )
    try:
        path.write_text(json.dumps(dump.model_dump(mode="json")), encoding="utf-8")
    except OSError as e:
        raise ArtifactError(f"Failed to write adapters to {path}: {e}") from e
    logger.debug(f"Wrote {len(adapters)} adapters to {path}")
    return path


def load_adapters(path: Path) -> List[LoRAAdapter]:
    """Read adapters written by dump_adapters."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ArtifactError(f"Failed to read adapters from {path}: {e}") from e

    if not isinstance(payload, dict):
        raise ArtifactError(f"{path} is not an adapter dump")
    version = payload.get("format_version")
    if version != ADAPTER_FORMAT_VERSION:
        raise ArtifactError(f"Unsupported adapter format_version {version} in {path}")
    try:
        dump = AdapterDump.model_validate(payload)
        return [from_record(record) for record in dump.adapters]
    except (ValidationError, ValueError, ShapeError) as e:
        raise ArtifactError(f"Malformed adapter dump {path}: {e}") from e
