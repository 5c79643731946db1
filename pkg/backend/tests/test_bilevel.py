import numpy as np
import pytest

from bilora.exceptions import DivergenceError, HypergradientModeError
from bilora.schemas import (
    BiLevelConfig,
    GradcheckSpec,
    HypergradMode,
    OptimizerKind,
    OptimizerSpec,
    RegWeights,
    SingularMode,
)
from bilora.services import bilevel, linalg
from bilora.services.bilevel import UnrollTape, global_step, hvp, hypergradient, lower_step, upper_step
from bilora.services.gradcheck import (
    HYPERGRAD_FLOOR,
    analytic_hypergradient,
    make_bilevel_problem,
    oracle_hypergradient,
)
from bilora.services.linalg import Rng
from bilora.services.adapter import LoRAAdapter
from bilora.services.model import Layer, ToyModel
from bilora.services.optim import OptimizerState
from bilora.services.tasks import Batch, BatchSampler

GAMMAS = RegWeights(gamma1=0.1)


def _sgd(lr=0.1, weight_decay=0.0):
    return OptimizerState(OptimizerSpec(kind=OptimizerKind.SGD, lr=lr, weight_decay=weight_decay))


def _record(model, batches, gammas=GAMMAS, opt=None):
    opt = opt or _sgd()
    tape = UnrollTape(upper_at_record=model.upper_vector())
    for batch in batches:
        tape.entries.append(lower_step(model, batch, gammas, opt))
    return tape


# -- hvp -----------------------------------------------------------------------------


def test_hvp_on_quadratic_is_exact(rng):
    a = linalg.gaussian_matrix(rng, 5, 5, 1.0)
    hessian = a + a.T
    direction = rng.normal(5)
    result = hvp(lambda x: hessian @ x, rng.normal(5), direction)
    assert np.allclose(result, hessian @ direction, rtol=1e-8, atol=1e-10)


def test_hvp_zero_direction_skips_differencing():
    calls = []

    def grad_fn(x):
        calls.append(x.copy())
        return np.concatenate([x, x])

    result = hvp(grad_fn, np.ones(3), np.zeros(3))
    assert np.array_equal(result, np.zeros(6))
    assert len(calls) == 1


def test_hvp_is_linear_in_direction(rng):
    def grad_fn(x):
        return x**3 + np.sin(x)

    params = rng.normal(4)
    d1, d2 = rng.normal(4), rng.normal(4)
    combined = hvp(grad_fn, params, 2.0 * d1 - d2)
    separate = 2.0 * hvp(grad_fn, params, d1) - hvp(grad_fn, params, d2)
    assert np.allclose(combined, separate, rtol=1e-5, atol=1e-7)


def test_hvp_rejects_non_positive_step():
    with pytest.raises(ValueError):
        hvp(lambda x: x, np.ones(2), np.ones(2), h=0.0)


# -- hypergradient -------------------------------------------------------------------


@pytest.mark.parametrize("mode", list(SingularMode))
@pytest.mark.parametrize("t1", [1, 2, 3])
def test_exact_hypergradient_matches_unrolled_differences(mode, t1):
    spec = GradcheckSpec()
    problem = make_bilevel_problem(spec, mode, "tanh2", t1, Rng(100 + t1))
    analytic = analytic_hypergradient(problem, HypergradMode.UNROLLED_EXACT)
    numeric = oracle_hypergradient(problem, spec.hypergrad_h)
    assert linalg.relative_error(analytic, numeric, HYPERGRAD_FLOOR) <= spec.hypergrad_tol


def test_single_step_hypergradient_matches_closed_form():
    # f(x) = p v q x, one sample per level, one SGD step on (p, q)
    p, q, v, lr = 0.8, -0.6, 1.3, 0.1
    a, b, c, d = 1.5, 0.4, -0.7, 0.9
    adapter = LoRAAdapter(
        w0=[[0.0]], p=[[p]], q=[[q]], v=[v], mode=SingularMode.REAL_VALUE, alpha=1.0
    )
    model = ToyModel([Layer(adapter)])
    lower_batch = Batch(indices=np.arange(1), x=np.array([[a]]), y=np.array([[b]]))
    upper_batch = Batch(indices=np.arange(1), x=np.array([[c]]), y=np.array([[d]]))
    gammas = RegWeights(gamma1=0.0)
    tape = _record(model, [lower_batch], gammas, _sgd(lr))

    e0 = p * v * q * a - b
    p1 = p - 2 * lr * e0 * a * v * q
    q1 = q - 2 * lr * e0 * a * p * v
    dp1 = -2 * lr * a * q * (p * q * a * v + e0)
    dq1 = -2 * lr * a * p * (p * q * a * v + e0)
    e1 = p1 * v * q1 * c - d
    direct = 2 * e1 * c * p1 * q1
    total = direct + 2 * e1 * c * v * (q1 * dp1 + p1 * dq1)

    assert np.allclose(model.lower_vector(), [p1, q1], rtol=1e-12, atol=0)
    exact, _ = hypergradient(model, tape, upper_batch, gammas, HypergradMode.UNROLLED_EXACT)
    first, _ = hypergradient(model, tape, upper_batch, gammas, HypergradMode.FIRST_ORDER)
    assert exact[0] == pytest.approx(total, rel=1e-6)
    assert first[0] == pytest.approx(direct, rel=1e-12)
    assert abs(total - direct) > 1e-3


def test_first_order_misses_the_unroll_correction():
    spec = GradcheckSpec()
    problem = make_bilevel_problem(spec, SingularMode.SOFTMAX, "tanh2", 3, Rng(7))
    exact = analytic_hypergradient(problem, HypergradMode.UNROLLED_EXACT)
    first = analytic_hypergradient(problem, HypergradMode.FIRST_ORDER)
    assert np.max(np.abs(exact - first)) > 1e-8


def test_zero_lower_lr_makes_modes_agree():
    problem = make_bilevel_problem(GradcheckSpec(lower_lr=0.0), SingularMode.SOFTMAX, "tanh2", 2, Rng(3))
    exact = analytic_hypergradient(problem, HypergradMode.UNROLLED_EXACT)
    first = analytic_hypergradient(problem, HypergradMode.FIRST_ORDER)
    assert np.array_equal(exact, first)


def test_empty_tape_gives_direct_gradient(make_model, make_batch):
    model = make_model()
    batch = make_batch()
    tape = UnrollTape(upper_at_record=model.upper_vector())
    exact, _ = hypergradient(model, tape, batch, GAMMAS, HypergradMode.UNROLLED_EXACT)
    direct = bilevel.upper_objective(model, batch, GAMMAS).grad_upper
    assert np.array_equal(exact, direct)


def test_loss_blind_to_singular_values_gives_regularizer_gradient(make_model, make_batch):
    model = make_model(SingularMode.APPROX_BINARY)
    for adapter in model.adapters:
        adapter.p = np.zeros_like(adapter.p)
        adapter.q = np.zeros_like(adapter.q)
    gammas = RegWeights(gamma1=0.1, gamma2=0.2)
    tape = _record(model, [make_batch(), make_batch()], gammas)
    batch = make_batch()

    exact, _ = hypergradient(model, tape, batch, gammas, HypergradMode.UNROLLED_EXACT)
    first, _ = hypergradient(model, tape, batch, gammas, HypergradMode.FIRST_ORDER)
    assert np.array_equal(exact, first)
    assert np.any(exact)


def test_exact_mode_rejects_adamw_tape(make_model, make_batch):
    model = make_model()
    tape = _record(model, [make_batch()])
    tape.kind = OptimizerKind.ADAMW
    with pytest.raises(HypergradientModeError):
        hypergradient(model, tape, make_batch(), GAMMAS, HypergradMode.UNROLLED_EXACT)
    # first-order never looks at the tape
    hypergradient(model, tape, make_batch(), GAMMAS, HypergradMode.FIRST_ORDER)


def test_exact_mode_rejects_clipped_tape(make_model, make_batch):
    model = make_model()
    tape = _record(model, [make_batch()])
    tape.clip_norm = 1.0
    with pytest.raises(HypergradientModeError):
        hypergradient(model, tape, make_batch(), GAMMAS, HypergradMode.UNROLLED_EXACT)


# -- steps ---------------------------------------------------------------------------


def test_tape_replay_reproduces_unroll_bit_exactly(make_model, make_batch):
    model = make_model()
    tape = _record(model, [make_batch() for _ in range(3)], opt=_sgd(weight_decay=0.01))
    replayed = tape.replay(model, tape.upper_at_record, GAMMAS)
    assert np.array_equal(replayed, model.lower_vector())


def test_replay_rejects_adamw(make_model):
    model = make_model()
    tape = UnrollTape(upper_at_record=model.upper_vector(), kind=OptimizerKind.ADAMW)
    with pytest.raises(HypergradientModeError):
        tape.replay(model, tape.upper_at_record, GAMMAS)


def test_lower_step_touches_only_singular_vectors(make_model, make_batch):
    model = make_model()
    before = model.block_digests()
    v_before = model.upper_vector()
    entry = lower_step(model, make_batch(), GAMMAS, _sgd())
    after = model.block_digests()

    assert after["w0"] == before["w0"]
    assert after["upper"] == before["upper"]
    assert after["lower"] != before["lower"]
    assert np.array_equal(model.upper_vector(), v_before)
    assert entry.lr == 0.1


def test_upper_step_touches_only_singular_values(make_model, make_batch):
    model = make_model()
    tape = _record(model, [make_batch()])
    before = model.block_digests()
    upper_opt = OptimizerState(OptimizerSpec(kind=OptimizerKind.ADAMW, lr=0.02))
    upper_step(model, make_batch(), GAMMAS, upper_opt, tape, HypergradMode.UNROLLED_EXACT)
    after = model.block_digests()

    assert after["w0"] == before["w0"]
    assert after["lower"] == before["lower"]
    assert after["upper"] != before["upper"]


def test_lower_step_divergence_names_the_stage(make_model, make_batch):
    model = make_model()
    batch = make_batch()
    batch.y[0, 0] = np.inf
    with pytest.raises(DivergenceError) as info:
        lower_step(model, batch, GAMMAS, _sgd(), step_index=4)
    assert info.value.step == 4 and info.value.stage == "lower"


def _config(**kwargs):
    return BiLevelConfig(
        t1=2,
        t2=2,
        lower_batch=3,
        upper_batch=3,
        lower=OptimizerSpec(lr=0.05),
        upper=OptimizerSpec(kind=OptimizerKind.ADAMW, lr=0.02),
        **kwargs,
    )


def _run_global_steps(model, dataset, config, n_steps=3):
    lower_sampler = BatchSampler(dataset, config.lower_batch, Rng(1))
    upper_sampler = BatchSampler(dataset, config.upper_batch, Rng(2))
    lower_opt = OptimizerState(config.lower)
    upper_opt = OptimizerState(config.upper)
    metrics = [
        global_step(model, lower_sampler, upper_sampler, config, lower_opt, upper_opt, step)
        for step in range(1, n_steps + 1)
    ]
    return metrics, lower_opt, upper_opt


def test_global_step_is_deterministic(make_model, tiny_dataset):
    model = make_model()
    twin = model.copy()
    first, _, _ = _run_global_steps(model, tiny_dataset, _config())
    second, _, _ = _run_global_steps(twin, tiny_dataset, _config())
    assert np.array_equal(model.lower_vector(), twin.lower_vector())
    assert np.array_equal(model.upper_vector(), twin.upper_vector())
    assert [m.upper_loss for m in first] == [m.upper_loss for m in second]


def test_global_step_counts_optimizer_steps(make_model, tiny_dataset):
    _, lower_opt, upper_opt = _run_global_steps(make_model(), tiny_dataset, _config(), n_steps=3)
    assert lower_opt.step_count == 6
    assert upper_opt.step_count == 6


def test_zero_upper_lr_freezes_lambda(make_model, tiny_dataset):
    model = make_model()
    lambdas = [lam.copy() for lam in model.lambdas()]
    config = _config().model_copy(update={"upper": OptimizerSpec(kind=OptimizerKind.ADAMW, lr=0.0)})
    _run_global_steps(model, tiny_dataset, config)
    for before, after in zip(lambdas, model.lambdas()):
        assert np.array_equal(before, after)


def test_softmax_lambdas_stay_normalized(make_model, tiny_dataset):
    model = make_model(SingularMode.SOFTMAX)
    _run_global_steps(model, tiny_dataset, _config(), n_steps=4)
    for lam in model.lambdas():
        assert abs(lam.sum() - 1.0) <= 1e-12
