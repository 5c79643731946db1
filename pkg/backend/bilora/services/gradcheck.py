"""
Finite-difference oracle suite for every analytic gradient in the package.

Suites:
    adapter          forward/backward of one adapter, per singular mode
    r1               orthogonality regularizer
    r2               entropy regularizer chained into v (ApproxBinary)
    hypergradient    UnrolledExact against central differences of the whole
                     T1-step unroll, on a bilinear and a 2-layer tanh model
    first_order_gap  FirstOrder against the same oracle; informational

Analytic code is reached through module attributes (adapter_ops.backward,
regularizers.r1_value_and_grads, bilevel.hypergradient) so a patched
implementation is what gets checked.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional

import numpy as np

from bilora.exceptions import ToleranceError
from bilora.schemas import (
    GradcheckSpec,
    HypergradMode,
    LossKind,
    OptimizerKind,
    OptimizerSpec,
    RegWeights,
    SingularMode,
)
from bilora.services import adapter as adapter_ops
from bilora.services import bilevel, linalg, regularizers
from bilora.services.adapter import LoRAAdapter
from bilora.services.linalg import Rng, Vector
from bilora.services.model import Layer, ToyModel, mse_loss
from bilora.services.optim import OptimizerState
from bilora.services.tasks import Batch

logger = logging.getLogger(__name__)

SUITES = ("adapter", "r1", "r2", "hypergradient", "first_order_gap")
APPROXIMATION_GAP = "approximation gap"

# gradients smaller than this are compared in absolute terms
HYPERGRAD_FLOOR = 1e-3
FIRST_ORDER_FLOOR = 1e-8

LOWER_WEIGHT_DECAY = 0.01


@dataclass
class GradcheckRow:
    component: str
    max_rel_error: float
    tolerance: Optional[float]
    status: str

    @property
    def failed(self) -> bool:
        return self.status == "FAIL"


def central_difference(fn: Callable[[Vector], float], x: Vector, h: float) -> Vector:
    """Numerical gradient of a scalar function, one coordinate at a time."""
    grad = np.zeros_like(x)
    trial = np.array(x, dtype=np.float64, copy=True)
    for i in range(trial.size):
        original = trial.flat[i]
        trial.flat[i] = original + h
        plus = fn(trial)
        trial.flat[i] = original - h
        minus = fn(trial)
        trial.flat[i] = original
        grad.flat[i] = (plus - minus) / (2.0 * h)
    return grad


def _row(component: str, error: float, tolerance: float) -> GradcheckRow:
    status = "ok" if error <= tolerance else "FAIL"
    return GradcheckRow(component, error, tolerance, status)


def _random_adapter(rng: Rng, spec: GradcheckSpec, mode: SingularMode, d_out: int, d_in: int) -> LoRAAdapter:
    return LoRAAdapter(
        w0=linalg.gaussian_matrix(rng, d_out, d_in, 1.0 / np.sqrt(d_in)),
        p=linalg.gaussian_matrix(rng, d_out, spec.rank, 1.0 / np.sqrt(spec.rank)),
        q=linalg.gaussian_matrix(rng, spec.rank, d_in, 1.0 / np.sqrt(spec.rank)),
        v=rng.uniform(-1.5, 1.5, spec.rank),
        mode=mode,
        alpha=float(spec.rank),
    )


# =============================================================================
# Single-level suites
# =============================================================================


def check_adapter(spec: GradcheckSpec, mode: SingularMode, rng: Rng) -> GradcheckRow:
    adapter = _random_adapter(rng, spec, mode, spec.d_out, spec.d_in)
    x = linalg.gaussian_matrix(rng, spec.d_in, spec.batch, 1.0)
    y = linalg.gaussian_matrix(rng, spec.d_out, spec.batch, 1.0)
    sizes = [adapter.p.size, adapter.q.size, adapter.v.size, x.size]
    cuts = np.cumsum(sizes)[:-1]

    def loss(flat: Vector) -> float:
        p, q, v, inputs = np.split(flat, cuts)
        trial = LoRAAdapter(
            w0=adapter.w0,
            p=p.reshape(adapter.p.shape),
            q=q.reshape(adapter.q.shape),
            v=v,
            mode=mode,
            alpha=adapter.alpha,
        )
        return mse_loss(adapter_ops.forward(trial, inputs.reshape(x.shape)), y)[0]

    _, upstream = mse_loss(adapter_ops.forward(adapter, x), y)
    grads, dx = adapter_ops.backward(adapter, x, upstream)
    point = np.concatenate([adapter.p.ravel(), adapter.q.ravel(), adapter.v, x.ravel()])
    numeric = np.split(central_difference(loss, point, spec.h), cuts)
    # each block against its own scale
    analytic = [grads.dp.ravel(), grads.dq.ravel(), grads.dv, dx.ravel()]
    error = max(
        linalg.relative_error(block, reference, FIRST_ORDER_FLOOR)
        for block, reference in zip(analytic, numeric)
    )
    return _row(f"adapter[{mode.value}]", error, spec.first_order_tol)


def check_r1(spec: GradcheckSpec, rng: Rng) -> GradcheckRow:
    adapters = [
        _random_adapter(rng, spec, SingularMode.REAL_VALUE, spec.d_out, spec.d_in),
        _random_adapter(rng, spec, SingularMode.REAL_VALUE, spec.d_in, spec.d_out),
    ]
    model = ToyModel([Layer(a) for a in adapters])
    _, blocks = regularizers.r1_value_and_grads(adapters)
    analytic = model.lower_from_adapter_blocks(blocks)

    def value(flat: Vector) -> float:
        trial = model.copy()
        trial.load_lower_vector(flat)
        return regularizers.r1_value_and_grads(trial.adapters)[0]

    numeric = central_difference(value, model.lower_vector(), spec.h)
    error = linalg.relative_error(analytic, numeric, FIRST_ORDER_FLOOR)
    return _row("r1", error, spec.first_order_tol)


def check_r2(spec: GradcheckSpec, rng: Rng) -> GradcheckRow:
    adapters = [
        _random_adapter(rng, spec, SingularMode.APPROX_BINARY, spec.d_out, spec.d_in),
        _random_adapter(rng, spec, SingularMode.APPROX_BINARY, spec.d_in, spec.d_out),
    ]
    model = ToyModel([Layer(a) for a in adapters])
    _, dvs = regularizers.r2_adapter_grads(adapters, 1.0)
    analytic = model.upper_from_adapter_vectors(dvs)

    def value(flat: Vector) -> float:
        trial = model.copy()
        trial.load_upper_vector(flat)
        return regularizers.r2_adapter_grads(trial.adapters, 1.0)[0]

    numeric = central_difference(value, model.upper_vector(), spec.h)
    error = linalg.relative_error(analytic, numeric, FIRST_ORDER_FLOOR)
    return _row("r2", error, spec.first_order_tol)


# =============================================================================
# Hypergradient suites
# =============================================================================


@dataclass
class BilevelProblem:
    """A tiny model plus the minibatches of one global step."""

    name: str
    model: ToyModel
    lower_batches: List[Batch]
    upper_batch: Batch
    gammas: RegWeights
    lower_lr: float


def make_bilevel_problem(
    spec: GradcheckSpec, mode: SingularMode, problem: str, t1: int, rng: Rng
) -> BilevelProblem:
    """
    Build the bilinear (one linear adapter) or tanh2 (two adapters, tanh) problem.

    R2 is switched on for ApproxBinary so its chain through v is covered.
    """
    if problem == "bilinear":
        layers = [Layer(_random_adapter(rng, spec, mode, spec.d_out, spec.d_in))]
    elif problem == "tanh2":
        hidden = max(spec.d_out, spec.rank)
        first = _random_adapter(rng, spec, mode, hidden, spec.d_in)
        second = _random_adapter(rng, spec, mode, spec.d_out, hidden)
        second.layer_index = 1
        layers = [Layer(first, "tanh"), Layer(second)]
    else:
        raise ValueError(f"Unknown gradcheck problem {problem}")

    def batch() -> Batch:
        return Batch(
            indices=np.arange(spec.batch),
            x=linalg.gaussian_matrix(rng, spec.d_in, spec.batch, 1.0),
            y=linalg.gaussian_matrix(rng, spec.d_out, spec.batch, 1.0),
        )

    gamma2 = 0.05 if mode == SingularMode.APPROX_BINARY else 0.0
    return BilevelProblem(
        name=problem,
        model=ToyModel(layers, LossKind.MSE),
        lower_batches=[batch() for _ in range(t1)],
        upper_batch=batch(),
        gammas=RegWeights(gamma1=0.1, gamma2=gamma2),
        lower_lr=spec.lower_lr,
    )


def _lower_optimizer(problem: BilevelProblem) -> OptimizerState:
    return OptimizerState(
        OptimizerSpec(
            kind=OptimizerKind.SGD, lr=problem.lower_lr, weight_decay=LOWER_WEIGHT_DECAY
        )
    )


def unrolled_upper_loss(problem: BilevelProblem, upper: Vector) -> float:
    """L2 after running the whole lower unroll from the given upper vector."""
    work = problem.model.copy()
    work.load_upper_vector(upper)
    opt = _lower_optimizer(problem)
    for batch in problem.lower_batches:
        bilevel.lower_step(work, batch, problem.gammas, opt)
    return bilevel.upper_objective(work, problem.upper_batch, problem.gammas).objective


def analytic_hypergradient(
    problem: BilevelProblem, mode: HypergradMode, hvp_eps: float = 1e-4
) -> Vector:
    work = problem.model.copy()
    opt = _lower_optimizer(problem)
    tape = bilevel.UnrollTape(upper_at_record=work.upper_vector())
    for batch in problem.lower_batches:
        tape.entries.append(bilevel.lower_step(work, batch, problem.gammas, opt))
    grad, _ = bilevel.hypergradient(work, tape, problem.upper_batch, problem.gammas, mode, hvp_eps)
    return grad


def oracle_hypergradient(problem: BilevelProblem, h: float) -> Vector:
    return central_difference(
        lambda upper: unrolled_upper_loss(problem, upper), problem.model.upper_vector(), h
    )


def check_hypergradient(
    spec: GradcheckSpec, mode: SingularMode, problem_name: str, t1: int, rng: Rng
) -> GradcheckRow:
    problem = make_bilevel_problem(spec, mode, problem_name, t1, rng)
    analytic = analytic_hypergradient(problem, HypergradMode.UNROLLED_EXACT)
    numeric = oracle_hypergradient(problem, spec.hypergrad_h)
    error = linalg.relative_error(analytic, numeric, HYPERGRAD_FLOOR)
    return _row(f"hypergradient[{problem_name},{mode.value},t1={t1}]", error, spec.hypergrad_tol)


def first_order_gap(spec: GradcheckSpec, mode: SingularMode, rng: Rng) -> GradcheckRow:
    """How far FirstOrder lands from the full oracle; never a failure."""
    problem = make_bilevel_problem(spec, mode, "tanh2", spec.max_t1, rng)
    analytic = analytic_hypergradient(problem, HypergradMode.FIRST_ORDER)
    numeric = oracle_hypergradient(problem, spec.hypergrad_h)
    error = linalg.relative_error(analytic, numeric, HYPERGRAD_FLOOR)
    return GradcheckRow(
        f"first_order_gap[tanh2,{mode.value},t1={spec.max_t1}]", error, None, APPROXIMATION_GAP
    )


# =============================================================================
# Driver
# =============================================================================


def run_gradcheck(spec: GradcheckSpec, suites: Iterable[str] = SUITES) -> List[GradcheckRow]:
    """Run the requested suites on the configured shapes."""
    suites = list(suites)
    unknown = set(suites) - set(SUITES)
    if unknown:
        raise ValueError(f"Unknown gradcheck suites {sorted(unknown)}")

    root = Rng(spec.seed)
    rows: List[GradcheckRow] = []
    if "adapter" in suites:
        for mode in SingularMode:
            rows.append(check_adapter(spec, mode, root.child(f"adapter/{mode.value}")))
    if "r1" in suites:
        rows.append(check_r1(spec, root.child("r1")))
    if "r2" in suites:
        rows.append(check_r2(spec, root.child("r2")))
    if "hypergradient" in suites:
        for problem in ("bilinear", "tanh2"):
            for mode in SingularMode:
                for t1 in range(1, spec.max_t1 + 1):
                    stream = root.child(f"hypergradient/{problem}/{mode.value}/{t1}")
                    rows.append(check_hypergradient(spec, mode, problem, t1, stream))
    if "first_order_gap" in suites:
        for mode in SingularMode:
            rows.append(first_order_gap(spec, mode, root.child(f"first_order_gap/{mode.value}")))

    for row in rows:
        logger.debug(f"{row.component}: {row.max_rel_error:.3e} ({row.status})")
    return rows


def raise_on_failure(rows: Iterable[GradcheckRow]) -> None:
    """Raise ToleranceError for the first failing component."""
    for row in rows:
        if row.failed:
            raise ToleranceError(row.component, row.max_rel_error, row.tolerance)


def format_report(rows: Iterable[GradcheckRow]) -> str:
    rows = list(rows)
    width = max([len("component")] + [len(r.component) for r in rows])
    lines = [f"{'component':<{width}}  {'max_rel_error':>13}  {'tolerance':>9}  status"]
    for row in rows:
        tolerance = f"{row.tolerance:.1e}" if row.tolerance is not None else "-"
        lines.append(
            f"{row.component:<{width}}  {row.max_rel_error:>13.3e}  {tolerance:>9}  {row.status}"
        )
    return "\n".join(lines)
