import numpy as np
import pytest

from bilora.exceptions import ArtifactError, ShapeError
from bilora.schemas import SingularMode, W0Init
from bilora.services import adapter as adapter_ops
from bilora.services import linalg
from bilora.services.adapter import (
    LoRAAdapter,
    dump_adapters,
    init_adapter,
    init_classic_adapter,
    lambda_jacobian_vp,
    load_adapters,
    materialize_lambda,
)
from bilora.services.gradcheck import central_difference
from bilora.services.linalg import Rng
from bilora.services.model import mse_loss

ALL_MODES = list(SingularMode)


# -- parameterizations ---------------------------------------------------------


def test_materialize_lambda_closed_forms():
    assert np.allclose(materialize_lambda(np.zeros(4), SingularMode.SOFTMAX), 0.25)
    assert materialize_lambda(np.zeros(1), SingularMode.APPROX_BINARY)[0] == 0.5
    e = np.e
    assert np.allclose(
        materialize_lambda(np.array([1.0, 2.0]), SingularMode.SOFTMAX),
        [1 / (1 + e), e / (1 + e)],
    )
    v = np.array([-3.0, 0.5, 7.0])
    assert np.array_equal(materialize_lambda(v, SingularMode.REAL_VALUE), v)


def test_softmax_sums_to_one_on_wide_range(rng):
    for _ in range(20):
        lam = materialize_lambda(rng.uniform(-20.0, 20.0, 8), SingularMode.SOFTMAX)
        assert np.all(lam > 0)
        assert abs(lam.sum() - 1.0) <= 1e-12


def test_approx_binary_strictly_inside_unit_interval(rng):
    lam = materialize_lambda(rng.uniform(-20.0, 20.0, 50), SingularMode.APPROX_BINARY)
    assert np.all((lam > 0) & (lam < 1))


def test_lambda_jacobian_vp_examples():
    u = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(lambda_jacobian_vp(np.zeros(3), SingularMode.REAL_VALUE, u), u)
    assert np.allclose(lambda_jacobian_vp(np.zeros(3), SingularMode.SOFTMAX, np.full(3, 5.0)), 0.0)
    assert lambda_jacobian_vp(np.zeros(1), SingularMode.APPROX_BINARY, np.ones(1))[0] == 0.25
    with pytest.raises(ShapeError):
        lambda_jacobian_vp(np.zeros(2), SingularMode.SOFTMAX, np.ones(3))


@pytest.mark.parametrize("mode", [SingularMode.SOFTMAX, SingularMode.APPROX_BINARY])
def test_lambda_jacobian_matches_dense_jacobian(mode, rng):
    v = rng.uniform(-1.0, 1.0, 4)
    u = rng.normal(4)
    lam = materialize_lambda(v, mode)
    if mode == SingularMode.SOFTMAX:
        jacobian = np.diag(lam) - np.outer(lam, lam)
    else:
        jacobian = np.diag(lam * (1 - lam))
    assert np.allclose(lambda_jacobian_vp(v, mode, u), jacobian.T @ u, atol=1e-14)


# -- forward ---------------------------------------------------------------------


def test_real_value_zero_init_is_exactly_base(rng):
    adapter = init_adapter(rng, 6, 4, 2, 2.0, SingularMode.REAL_VALUE)
    x = linalg.gaussian_matrix(rng, 4, 3, 1.0)
    assert np.array_equal(adapter_ops.forward(adapter, x), adapter.w0 @ x)


def test_identity_factors_add_identity(rng):
    r = 3
    w0 = linalg.gaussian_matrix(rng, r, r, 1.0)
    adapter = LoRAAdapter(
        w0=w0, p=np.eye(r), q=np.eye(r), v=np.ones(r), mode=SingularMode.REAL_VALUE, alpha=float(r)
    )
    x = linalg.gaussian_matrix(rng, r, 2, 1.0)
    assert np.allclose(adapter_ops.forward(adapter, x), (w0 + np.eye(r)) @ x, atol=1e-12)


@pytest.mark.parametrize("mode", ALL_MODES)
def test_forward_matches_dense_increment(mode, make_adapter, rng):
    adapter = make_adapter(mode)
    x = linalg.gaussian_matrix(rng, adapter.d_in, 5, 1.0)
    dense = (adapter.w0 + adapter.delta_weight()) @ x
    assert np.allclose(adapter_ops.forward(adapter, x), dense, atol=1e-12)


@pytest.mark.parametrize("mode", ALL_MODES)
def test_increment_is_weighted_sum_of_rank_one_terms(mode, make_adapter, rng):
    adapter = make_adapter(mode, d_out=7, d_in=5, rank=3)
    x = linalg.gaussian_matrix(rng, 5, 4, 1.0)
    lam = adapter.lambdas()
    rank_one = sum(lam[i] * np.outer(adapter.p[:, i], adapter.q[i, :]) for i in range(3))
    increment = adapter_ops.forward(adapter, x) - adapter.w0 @ x
    assert np.allclose(increment, adapter.scaling * rank_one @ x, atol=1e-10)


def test_forward_rejects_wrong_input_rows(make_adapter):
    with pytest.raises(ShapeError):
        adapter_ops.forward(make_adapter(), np.ones((5, 2)))


# -- backward --------------------------------------------------------------------


def test_zero_upstream_gives_zero_grads(make_adapter, rng):
    adapter = make_adapter()
    x = linalg.gaussian_matrix(rng, 4, 3, 1.0)
    grads, dx = adapter_ops.backward(adapter, x, np.zeros((6, 3)))
    for block in (grads.dp, grads.dq, grads.dv, dx):
        assert not np.any(block)


def test_dx_with_zero_lambda_is_frozen_path(rng):
    adapter = init_adapter(rng, 6, 4, 2, 2.0, SingularMode.REAL_VALUE)
    x = linalg.gaussian_matrix(rng, 4, 3, 1.0)
    upstream = linalg.gaussian_matrix(rng, 6, 3, 1.0)
    _, dx = adapter_ops.backward(adapter, x, upstream)
    assert np.allclose(dx, adapter.w0.T @ upstream, atol=1e-14)


@pytest.mark.parametrize("mode", ALL_MODES)
@pytest.mark.parametrize("shape", [(6, 4, 2), (3, 5, 1), (8, 8, 4)])
def test_backward_matches_central_differences(mode, shape, make_adapter, rng):
    d_out, d_in, rank = shape
    adapter = make_adapter(mode, d_out=d_out, d_in=d_in, rank=rank)
    x = linalg.gaussian_matrix(rng, d_in, 3, 1.0)
    y = linalg.gaussian_matrix(rng, d_out, 3, 1.0)

    _, upstream = mse_loss(adapter_ops.forward(adapter, x), y)
    grads, dx = adapter_ops.backward(adapter, x, upstream)

    def loss_of(name):
        def fn(value):
            trial = adapter.copy()
            inputs = x
            if name == "x":
                inputs = value.reshape(x.shape)
            else:
                setattr(trial, name, value.reshape(getattr(adapter, name).shape))
            return mse_loss(adapter_ops.forward(trial, inputs), y)[0]

        return fn

    for name, analytic in (("p", grads.dp), ("q", grads.dq), ("v", grads.dv), ("x", dx)):
        point = (x if name == "x" else getattr(adapter, name)).ravel()
        numeric = central_difference(loss_of(name), point, 1e-5)
        assert linalg.relative_error(analytic.ravel(), numeric, 1e-8) <= 1e-6, name


# -- init ------------------------------------------------------------------------


def test_softmax_init_is_uniform_one_over_r():
    adapter = init_adapter(Rng(0), 16, 16, 8, 8.0, SingularMode.SOFTMAX)
    assert np.allclose(adapter.lambdas(), 0.125)


def test_init_is_deterministic():
    a = init_adapter(Rng(5), 6, 4, 2, 2.0, SingularMode.APPROX_BINARY)
    b = init_adapter(Rng(5), 6, 4, 2, 2.0, SingularMode.APPROX_BINARY)
    for name in ("w0", "p", "q", "v"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_init_shares_factors_across_modes():
    a = init_adapter(Rng(5), 6, 4, 2, 2.0, SingularMode.REAL_VALUE)
    b = init_adapter(Rng(5), 6, 4, 2, 2.0, SingularMode.SOFTMAX)
    assert np.array_equal(a.p, b.p) and np.array_equal(a.q, b.q) and np.array_equal(a.w0, b.w0)


def test_factor_std_rescales_the_same_draws():
    default = init_adapter(Rng(5), 6, 4, 2, 2.0, SingularMode.SOFTMAX)
    narrow = init_adapter(Rng(5), 6, 4, 2, 2.0, SingularMode.SOFTMAX, factor_std=0.25)
    ratio = 0.25 * np.sqrt(2.0)
    assert np.array_equal(narrow.w0, default.w0)
    assert np.allclose(narrow.p, ratio * default.p, rtol=1e-14, atol=0)
    assert np.allclose(narrow.q, ratio * default.q, rtol=1e-14, atol=0)


def test_classic_form_honours_factor_std():
    default = init_classic_adapter(Rng(5), 6, 4, 2, 2.0)
    narrow = init_classic_adapter(Rng(5), 6, 4, 2, 2.0, factor_std=0.25)
    assert np.allclose(narrow.q, 0.25 * np.sqrt(2.0) * default.q, rtol=1e-14, atol=0)
    assert not np.any(narrow.p)


def test_zero_w0_init(rng):
    adapter = init_adapter(rng, 6, 4, 2, 2.0, SingularMode.SOFTMAX, w0_init=W0Init.ZERO)
    assert not np.any(adapter.w0)


def test_init_rejects_rank_above_dims(rng):
    with pytest.raises(ShapeError):
        init_adapter(rng, 3, 2, 3, 1.0, SingularMode.SOFTMAX)


def test_w0_is_read_only_and_shared_by_copies(make_adapter):
    adapter = make_adapter()
    with pytest.raises(ValueError):
        adapter.w0[0, 0] = 1.0
    clone = adapter.copy()
    assert clone.w0 is adapter.w0
    clone.p[0, 0] += 1.0
    assert clone.p[0, 0] != adapter.p[0, 0]


def test_classic_form_starts_at_base_and_pins_lambda(rng):
    adapter = init_classic_adapter(rng, 6, 4, 2, 2.0)
    x = linalg.gaussian_matrix(rng, 4, 3, 1.0)
    assert not adapter.train_v
    assert np.array_equal(adapter.lambdas(), np.ones(2))
    assert np.allclose(adapter_ops.forward(adapter, x), adapter.w0 @ x, atol=0)


# -- serialization -----------------------------------------------------------------


def test_dump_and_load_are_bit_exact(tmp_path, make_adapter):
    adapters = [make_adapter(SingularMode.APPROX_BINARY), make_adapter(SingularMode.SOFTMAX, layer_index=1)]
    path = dump_adapters(tmp_path / "adapters.json", adapters)
    loaded = load_adapters(path)
    assert len(loaded) == 2
    for before, after in zip(adapters, loaded):
        assert after.mode == before.mode and after.layer_index == before.layer_index
        for name in ("w0", "p", "q", "v"):
            assert np.array_equal(getattr(before, name), getattr(after, name))


def test_load_rejects_unknown_format_version(tmp_path):
    path = tmp_path / "adapters.json"
    path.write_text('{"format_version": 99, "adapters": []}', encoding="utf-8")
    with pytest.raises(ArtifactError):
        load_adapters(path)


def test_load_missing_file(tmp_path):
    with pytest.raises(ArtifactError):
        load_adapters(tmp_path / "nope.json")
