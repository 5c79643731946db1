"""
Bi-level optimization of pseudo singular vectors and values.

One global step runs T1 lower updates of the singular vectors V = {P, Q} on
minibatches of D1 against L1 = C(V, E; D1) + gamma1 R1(V), then T2 upper
updates of the raw singular parameters E = {v} on minibatches of D2 against
L2 = C(V^(T1), E; D2) + gamma2 R2(E).

The upper gradient is either first-order (dL2/dE with V^(T1) held fixed) or
the exact hypergradient through the T1-step SGD unroll:

    dL2/dE = dL2/dE|_V + (dV^(T1)/dE)^T dL2/dV^(T1)

computed by a reverse pass over the recorded tape. Each reversed step applies
V_{t+1} = (1 - eta wd) V_t - eta grad_V L1(V_t, E), so

    g_E <- g_E - eta (d2 L1 / dE dV) g_V
    g_V <- (1 - eta wd) g_V - eta (d2 L1 / dV2) g_V

Both second-order products come from one central-difference Hessian-vector
product of the joint (V, E) gradient of L1.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from bilora.exceptions import DivergenceError, HypergradientModeError, NonFiniteError
from bilora.schemas import BiLevelConfig, HypergradMode, OptimizerKind, RegWeights
from bilora.services import regularizers
from bilora.services.linalg import Vector
from bilora.services.model import ToyModel
from bilora.services.optim import OptimizerState, clip_by_global_norm
from bilora.services.tasks import Batch, BatchSampler

logger = logging.getLogger(__name__)


@dataclass
class LevelEval:
    """Loss and gradients of one level's objective at the current parameters."""

    data_loss: float
    objective: float
    grad_lower: Vector
    grad_upper: Vector


@dataclass
class TapeEntry:
    """State before one lower step, enough to replay or reverse it."""

    lower_before: Vector
    batch: Batch
    loss: float
    data_loss: float
    lr: float
    weight_decay: float


@dataclass
class UnrollTape:
    """The T1 lower steps of one global step."""

    upper_at_record: Vector
    kind: OptimizerKind = OptimizerKind.SGD
    clip_norm: Optional[float] = None
    entries: List[TapeEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def replay(self, model: ToyModel, upper: Vector, gammas: RegWeights) -> Vector:
        """
        Re-run the SGD unroll from the first snapshot under a given E.

        With upper equal to upper_at_record this reproduces V^(T1) bit-exactly.
        """
        if self.kind != OptimizerKind.SGD:
            raise HypergradientModeError("Only SGD unrolls can be replayed")
        work = model.copy()
        work.load_upper_vector(upper)
        if not self.entries:
            return work.lower_vector()

        lower = self.entries[0].lower_before.copy()
        for entry in self.entries:
            work.load_lower_vector(lower)
            grad = lower_objective(work, entry.batch, gammas).grad_lower
            if self.clip_norm is not None:
                grad = clip_by_global_norm(grad, self.clip_norm)
            lower = lower * (1.0 - entry.lr * entry.weight_decay) - entry.lr * grad
        return lower


@dataclass
class StepMetrics:
    """Mean minibatch data losses of one global step."""

    lower_loss: float
    upper_loss: float


# =============================================================================
# Level objectives
# =============================================================================


def lower_objective(model: ToyModel, batch: Batch, gammas: RegWeights) -> LevelEval:
    """L1 = C(V, E; B1) + gamma1 R1(V) with gradients for V and E."""
    data_loss, grads = model.loss_and_grads(batch.x, batch.y)
    grad_lower = model.lower_grad_vector(grads)
    objective = data_loss
    if gammas.gamma1 > 0:
        r1, r1_grads = regularizers.r1_value_and_grads(model.adapters)
        objective += gammas.gamma1 * r1
        grad_lower = grad_lower + gammas.gamma1 * model.lower_from_adapter_blocks(r1_grads)
    return LevelEval(data_loss, objective, grad_lower, model.upper_grad_vector(grads))


def upper_objective(model: ToyModel, batch: Batch, gammas: RegWeights) -> LevelEval:
    """L2 = C(V, E; B2) + gamma2 R2(E) with gradients for V and E."""
    data_loss, grads = model.loss_and_grads(batch.x, batch.y)
    r2, r2_dvs = regularizers.r2_adapter_grads(model.adapters, gammas.gamma2, gammas.r2_sign)
    grad_upper = model.upper_grad_vector(grads) + model.upper_from_adapter_vectors(r2_dvs)
    return LevelEval(data_loss, data_loss + r2, model.lower_grad_vector(grads), grad_upper)


# =============================================================================
# Hessian-vector products
# =============================================================================


def hvp(
    grad_fn: Callable[[Vector], Vector],
    params: Vector,
    direction: Vector,
    h: float = 1e-4,
) -> Vector:
    """
    Central-difference Hessian-vector product.

    The direction is scaled to unit max-norm, stepped by
    eps = h (1 + max|params|) either side, and the difference rescaled back.

    Args:
        grad_fn: Exact gradient at a parameter vector
        params: Point to differentiate at
        direction: Vector the Hessian acts on
        h: Relative step

    Returns:
        Approximation of Hessian(params) @ direction
    """
    if h <= 0:
        raise ValueError(f"hvp step must be positive, got {h}")
    scale = float(np.max(np.abs(direction))) if direction.size else 0.0
    if scale == 0.0:
        trial = grad_fn(params)
        return np.zeros_like(trial)

    unit = direction / scale
    eps = h * (1.0 + float(np.max(np.abs(params))))
    plus = grad_fn(params + eps * unit)
    minus = grad_fn(params - eps * unit)
    result = (plus - minus) / (2.0 * eps) * scale
    if not np.all(np.isfinite(result)):
        raise NonFiniteError("Hessian-vector product is not finite")
    return result


# =============================================================================
# Steps
# =============================================================================


def lower_step(
    model: ToyModel,
    batch: Batch,
    gammas: RegWeights,
    opt: OptimizerState,
    step_index: int = 0,
) -> TapeEntry:
    """
    Update P and Q against dL1/dV on a D1 minibatch; v is never touched.

    Returns:
        The tape entry describing the step
    """
    before = model.lower_vector()
    lr = opt.current_lr()
    try:
        evaluation = lower_objective(model, batch, gammas)
        if not np.isfinite(evaluation.objective):
            raise NonFiniteError(f"L1={evaluation.objective}")
        after = opt.apply(before, evaluation.grad_lower)
    except NonFiniteError as e:
        raise DivergenceError(step_index, "lower", e.message) from e
    if not np.all(np.isfinite(after)):
        raise DivergenceError(step_index, "lower", "non-finite singular vectors")

    model.load_lower_vector(after)
    return TapeEntry(
        lower_before=before,
        batch=batch,
        loss=evaluation.objective,
        data_loss=evaluation.data_loss,
        lr=lr,
        weight_decay=opt.weight_decay,
    )


def hypergradient(
    model: ToyModel,
    tape: UnrollTape,
    batch: Batch,
    gammas: RegWeights,
    mode: HypergradMode,
    hvp_eps: float = 1e-4,
) -> tuple[Vector, LevelEval]:
    """
    Gradient of L2 with respect to the upper vector at V^(T1).

    Returns:
        Tuple of (hypergradient in upper-vector layout, upper-level evaluation)

    Raises:
        HypergradientModeError: UnrolledExact over a non-SGD unroll
    """
    evaluation = upper_objective(model, batch, gammas)
    grad_upper = evaluation.grad_upper.copy()
    if mode == HypergradMode.FIRST_ORDER or not tape.entries:
        return grad_upper, evaluation

    if tape.kind != OptimizerKind.SGD:
        raise HypergradientModeError(
            f"Unrolled exact hypergradients need an SGD lower optimizer, got {tape.kind.value}"
        )
    if tape.clip_norm is not None:
        raise HypergradientModeError("Unrolled exact hypergradients can't pass through clipping")

    work = model.copy()
    work.load_upper_vector(tape.upper_at_record)
    n_lower = tape.entries[0].lower_before.size
    grad_lower = evaluation.grad_lower.copy()

    for entry in reversed(tape.entries):

        def joint_grad(lower: Vector, entry: TapeEntry = entry) -> Vector:
            work.load_lower_vector(lower)
            inner = lower_objective(work, entry.batch, gammas)
            return np.concatenate([inner.grad_lower, inner.grad_upper])

        product = hvp(joint_grad, entry.lower_before, grad_lower, hvp_eps)
        grad_upper = grad_upper - entry.lr * product[n_lower:]
        grad_lower = (1.0 - entry.lr * entry.weight_decay) * grad_lower - entry.lr * product[:n_lower]

    if not np.all(np.isfinite(grad_upper)):
        raise NonFiniteError("Hypergradient is not finite")
    return grad_upper, evaluation


def upper_step(
    model: ToyModel,
    batch: Batch,
    gammas: RegWeights,
    opt: OptimizerState,
    tape: UnrollTape,
    mode: HypergradMode,
    hvp_eps: float = 1e-4,
    step_index: int = 0,
) -> float:
    """
    Update the raw singular parameters against the hypergradient on a D2 batch.

    P and Q stay at V^(T1).

    Returns:
        Upper-level data loss before the update
    """
    try:
        grad, evaluation = hypergradient(model, tape, batch, gammas, mode, hvp_eps)
        if not np.isfinite(evaluation.objective):
            raise NonFiniteError(f"L2={evaluation.objective}")
        updated = opt.apply(model.upper_vector(), grad)
    except NonFiniteError as e:
        raise DivergenceError(step_index, "upper", e.message) from e
    if not np.all(np.isfinite(updated)):
        raise DivergenceError(step_index, "upper", "non-finite singular values")
    model.load_upper_vector(updated)
    return evaluation.data_loss


def global_step(
    model: ToyModel,
    lower_sampler: BatchSampler,
    upper_sampler: BatchSampler,
    config: BiLevelConfig,
    lower_opt: OptimizerState,
    upper_opt: OptimizerState,
    step_index: int = 0,
) -> StepMetrics:
    """T1 lower steps on D1 minibatches, then T2 upper steps on D2 minibatches."""
    tape = UnrollTape(
        upper_at_record=model.upper_vector(),
        kind=lower_opt.kind,
        clip_norm=lower_opt.spec.clip_norm,
    )
    for _ in range(config.t1):
        entry = lower_step(model, lower_sampler.next_batch(), config.gammas, lower_opt, step_index)
        tape.entries.append(entry)

    upper_losses = []
    for s in range(config.t2):
        if s == 1 and config.hypergrad_mode == HypergradMode.UNROLLED_EXACT:
            logger.debug(f"Step {step_index}: upper steps after the first reuse the recorded unroll")
        upper_losses.append(
            upper_step(
                model,
                upper_sampler.next_batch(),
                config.gammas,
                upper_opt,
                tape,
                config.hypergrad_mode,
                config.hvp_eps,
                step_index,
            )
        )

    metrics = StepMetrics(
        lower_loss=float(np.mean([e.data_loss for e in tape.entries])),
        upper_loss=float(np.mean(upper_losses)),
    )
    logger.debug(
        f"Global step {step_index}: lower={metrics.lower_loss:.6f}, upper={metrics.upper_loss:.6f}"
    )
    return metrics
