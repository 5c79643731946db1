"""
Per-level optimizers: SGD and AdamW with decoupled weight decay.

Parameters travel as flat float64 vectors; the bi-level engine flattens
P/Q blocks (lower level) or raw singular vectors (upper level) before each
update.
"""

import logging
from typing import Optional

import numpy as np

from bilora.exceptions import NonFiniteError, ShapeError
from bilora.schemas import OptimizerKind, OptimizerSpec
from bilora.services.linalg import Vector

logger = logging.getLogger(__name__)


class OptimizerState:
    """
    Mutable optimizer state for one level.

    Moment buffers exist only for AdamW and are shaped like the parameters on
    first use. step_count grows by exactly one per apply().
    """

    def __init__(self, spec: OptimizerSpec) -> None:
        self.spec = spec
        self.step_count = 0
        self.exp_avg: Optional[Vector] = None
        self.exp_avg_sq: Optional[Vector] = None

        logger.debug(
            f"Initialized {spec.kind.value} optimizer: lr={spec.lr}, "
            f"weight_decay={spec.weight_decay}, warmup_steps={spec.warmup_steps}"
        )

    @property
    def kind(self) -> OptimizerKind:
        return self.spec.kind

    @property
    def weight_decay(self) -> float:
        return self.spec.weight_decay

    def current_lr(self) -> float:
        """Learning rate for the next apply(), after linear warmup."""
        warmup = self.spec.warmup_steps
        if warmup and self.step_count < warmup:
            return self.spec.lr * (self.step_count + 1) / (warmup + 1)
        return self.spec.lr

    def apply(self, params: Vector, grads: Vector) -> Vector:
        """Return updated parameters; the inputs are left untouched."""
        if params.shape != grads.shape:
            raise ShapeError(f"Optimizer: params {params.shape} vs grads {grads.shape}")
        if not np.all(np.isfinite(grads)):
            raise NonFiniteError("Optimizer received a non-finite gradient")

        if self.spec.clip_norm is not None:
            grads = clip_by_global_norm(grads, self.spec.clip_norm)

        if self.kind == OptimizerKind.ADAMW:
            return adamw_apply(self, params, grads)
        return sgd_apply(self, params, grads)


def clip_by_global_norm(grads: Vector, max_norm: float) -> Vector:
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads


def sgd_apply(state: OptimizerState, params: Vector, grads: Vector) -> Vector:
    """p <- p (1 - lr wd) - lr g."""
    lr = state.current_lr()
    state.step_count += 1
    return params * (1.0 - lr * state.weight_decay) - lr * grads


def adamw_apply(state: OptimizerState, params: Vector, grads: Vector) -> Vector:
    """
    AdamW step with decoupled weight decay.

    Decay multiplies the parameters before the moment update; moments are
    bias-corrected.
    """
    spec = state.spec
    if state.exp_avg is None or state.exp_avg.shape != params.shape:
        state.exp_avg = np.zeros_like(params)
        state.exp_avg_sq = np.zeros_like(params)

    lr = state.current_lr()
    state.step_count += 1
    t = state.step_count

    decayed = params * (1.0 - lr * spec.weight_decay)
    state.exp_avg = spec.beta1 * state.exp_avg + (1.0 - spec.beta1) * grads
    state.exp_avg_sq = spec.beta2 * state.exp_avg_sq + (1.0 - spec.beta2) * grads * grads

    m_hat = state.exp_avg / (1.0 - spec.beta1**t)
    v_hat = state.exp_avg_sq / (1.0 - spec.beta2**t)
    return decayed - lr * m_hat / (np.sqrt(v_hat) + spec.eps)
