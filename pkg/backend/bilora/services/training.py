"""
End-to-end trainers: the single-level LoRA baseline and the bi-level loop.

Both record a RunTrace with an initial row (step 0) and then one row per
epoch (baseline) or global step (BiLoRA). Full-set train and test losses are
evaluated after every step; singular-value snapshots are taken at step 0,
every snapshot_every steps and at the final step.
"""

import logging
from typing import Callable, Optional

import numpy as np

from bilora.exceptions import ConfigError, DivergenceError, NonFiniteError, SplitError
from bilora.schemas import (
    BaselineSpec,
    BiLevelConfig,
    HypergradMode,
    Method,
    SingularMode,
    SplitSpec,
)
from bilora.services import bilevel, regularizers
from bilora.services.bilevel import StepMetrics
from bilora.services.linalg import Rng
from bilora.services.model import ToyModel
from bilora.services.optim import OptimizerState
from bilora.services.tasks import BatchSampler, Dataset, split_dataset
from bilora.services.traces import RunTrace, TraceRecord

logger = logging.getLogger(__name__)

StepHook = Callable[[int, ToyModel, Optional[StepMetrics]], None]


def _record(
    model: ToyModel,
    train: Dataset,
    test: Dataset,
    step: int,
    snapshot: bool,
    metrics: Optional[StepMetrics] = None,
) -> TraceRecord:
    try:
        train_loss = model.loss(train.inputs, train.targets)
        test_loss = model.loss(test.inputs, test.targets)
    except NonFiniteError as e:
        raise DivergenceError(step, "eval", e.message) from e
    if not (np.isfinite(train_loss) and np.isfinite(test_loss)):
        raise DivergenceError(step, "eval", f"train={train_loss}, test={test_loss}")
    return TraceRecord(
        step=step,
        lower_loss=metrics.lower_loss if metrics else None,
        upper_loss=metrics.upper_loss if metrics else None,
        train_loss=train_loss,
        test_loss=test_loss,
        defects=regularizers.orthogonality_defects(model.adapters),
        lambdas=model.lambdas() if snapshot else None,
    )


def _wants_snapshot(step: int, total: int, every: int) -> bool:
    return step == 0 or step == total or step % every == 0


def train_lora_baseline(
    model: ToyModel,
    train: Dataset,
    test: Dataset,
    spec: BaselineSpec,
    rng: Rng,
    snapshot_every: int = 10,
    on_step: Optional[StepHook] = None,
) -> RunTrace:
    """
    Single-level LoRA: P, Q and v trained jointly on the full training set.

    Adapters must be RealValue (the standard LoRA equivalent). Classic-form
    adapters keep v out of training, so only P and Q move.

    Args:
        model: Model to train in place
        train: Full training set
        test: Held-out set, evaluated only
        spec: Epochs, batch size and optimizer
        rng: Stream for minibatch order
        snapshot_every: Singular-value snapshot cadence in epochs
        on_step: Called after every epoch with (epoch, model, None)

    Returns:
        RunTrace with epochs + 1 records

    Raises:
        ConfigError: If an adapter isn't RealValue
        DivergenceError: On a non-finite loss or update, carrying the partial trace
    """
    if any(a.mode != SingularMode.REAL_VALUE for a in model.adapters):
        raise ConfigError("The LoRA baseline needs real_value adapters", key="model.mode")

    trace = RunTrace(ranks=[a.rank for a in model.adapters], method=Method.LORA)
    opt = OptimizerState(spec.optimizer)
    sampler = BatchSampler(train, spec.batch_size, rng.child("baseline_batches"))
    n_lower = model.lower_vector().size

    logger.info(f"Training LoRA baseline for {spec.epochs} epochs on {train}")
    try:
        trace.append(_record(model, train, test, 0, True))
        for epoch in range(1, spec.epochs + 1):
            for batch in sampler.iter_epoch():
                params = np.concatenate([model.lower_vector(), model.upper_vector()])
                try:
                    loss, grads = model.loss_and_grads(batch.x, batch.y)
                    if not np.isfinite(loss):
                        raise NonFiniteError(f"loss={loss}")
                    flat_grads = np.concatenate(
                        [model.lower_grad_vector(grads), model.upper_grad_vector(grads)]
                    )
                    updated = opt.apply(params, flat_grads)
                except NonFiniteError as e:
                    raise DivergenceError(epoch, "baseline", e.message) from e
                model.load_lower_vector(updated[:n_lower])
                model.load_upper_vector(updated[n_lower:])

            trace.append(
                _record(model, train, test, epoch, _wants_snapshot(epoch, spec.epochs, snapshot_every))
            )
            if on_step is not None:
                on_step(epoch, model, None)
            logger.debug(
                f"Epoch {epoch}: train={trace.records[-1].train_loss:.6f}, "
                f"test={trace.records[-1].test_loss:.6f}"
            )
    except DivergenceError as e:
        e.trace = trace
        logger.error(f"LoRA baseline diverged: {e.message}")
        raise

    return trace


def train_bilora(
    model: ToyModel,
    train: Dataset,
    test: Dataset,
    split: SplitSpec,
    config: BiLevelConfig,
    rng: Rng,
    snapshot_every: int = 10,
    on_step: Optional[StepHook] = None,
) -> RunTrace:
    """
    Bi-level training: split the training set, then run global steps.

    Args:
        model: Model to train in place
        train: Full training set, split into D1 and D2
        test: Held-out set, evaluated only
        split: D1 fraction and optional split seed
        config: Unroll lengths, optimizers, regularizer weights, hypergradient mode
        rng: Stream for the split and minibatch order; config.seed replaces it
        snapshot_every: Singular-value snapshot cadence in global steps
        on_step: Called after every global step with (step, model, metrics)

    Returns:
        RunTrace with global_steps + 1 records

    Raises:
        SplitError: If the split leaves D2 empty
        DivergenceError: On a non-finite loss or update, carrying the partial trace
    """
    if config.seed is not None:
        rng = Rng(config.seed)

    lower_set, upper_set = split_dataset(train, split, rng.child("split"))
    if upper_set.n_samples == 0:
        raise SplitError(
            f"split.lower_fraction={split.lower_fraction} leaves no data for the upper level"
        )

    lower_sampler = BatchSampler(lower_set, config.lower_batch, rng.child("lower_batches"))
    upper_sampler = BatchSampler(upper_set, config.upper_batch, rng.child("upper_batches"))
    lower_opt = OptimizerState(config.lower)
    upper_opt = OptimizerState(config.upper)

    if config.t2 > 1 and config.hypergrad_mode == HypergradMode.UNROLLED_EXACT:
        logger.warning(
            f"t2={config.t2}: upper steps after the first in each global step "
            f"differentiate the unroll recorded before them"
        )

    trace = RunTrace(ranks=[a.rank for a in model.adapters], method=Method.BILORA)
    logger.info(
        f"Training BiLoRA for {config.global_steps} global steps "
        f"(t1={config.t1}, t2={config.t2}, {config.hypergrad_mode.value})"
    )
    try:
        trace.append(_record(model, train, test, 0, True))
        for step in range(1, config.global_steps + 1):
            metrics = bilevel.global_step(
                model, lower_sampler, upper_sampler, config, lower_opt, upper_opt, step
            )
            snapshot = _wants_snapshot(step, config.global_steps, snapshot_every)
            trace.append(_record(model, train, test, step, snapshot, metrics))
            if on_step is not None:
                on_step(step, model, metrics)
    except DivergenceError as e:
        e.trace = trace
        logger.error(f"BiLoRA diverged: {e.message}")
        raise

    return trace
