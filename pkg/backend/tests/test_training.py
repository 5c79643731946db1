import numpy as np
import pytest

from bilora.exceptions import ConfigError, DivergenceError, SplitError
from bilora.schemas import Method, SingularMode, W0Init
from bilora.services.experiments import build_experiment
from bilora.services.linalg import Rng
from bilora.services.training import train_bilora, train_lora_baseline


def _bilora(config, seed=0, **kwargs):
    train, test, model, stream = build_experiment(config, seed)
    trace = train_bilora(
        model, train, test, config.split, config.bilevel, stream, config.snapshot_every, **kwargs
    )
    return trace, model


def _baseline(config, seed=0, **kwargs):
    train, test, model, stream = build_experiment(config, seed)
    trace = train_lora_baseline(model, train, test, config.baseline, stream, config.snapshot_every, **kwargs)
    return trace, model


def test_bilora_trace_has_one_row_per_step(smoke_config):
    config = smoke_config()
    trace, _ = _bilora(config)
    assert [r.step for r in trace.records] == list(range(config.bilevel.global_steps + 1))
    assert trace.records[0].lower_loss is None
    assert all(r.lower_loss is not None and r.upper_loss is not None for r in trace.records[1:])


def test_baseline_trace_has_one_row_per_epoch(smoke_config):
    config = smoke_config(method="lora")
    trace, _ = _baseline(config)
    assert len(trace) == config.baseline.epochs + 1
    assert all(r.lower_loss is None for r in trace.records)


def test_snapshots_follow_cadence(smoke_config):
    trace, _ = _bilora(smoke_config(snapshot_every=4))
    with_snapshot = [r.step for r in trace.records if r.lambdas is not None]
    assert with_snapshot == [0, 4, 6]


def test_zero_learning_rates_keep_losses_flat(smoke_config):
    config = smoke_config(
        bilevel={"lower": {"lr": 0.0}, "upper": {"kind": "adamw", "lr": 0.0}},
    )
    trace, _ = _bilora(config)
    first = trace.records[0]
    for record in trace.records[1:]:
        assert record.train_loss == first.train_loss
        assert record.test_loss == first.test_loss


def test_zero_lr_baseline_is_flat(smoke_config):
    config = smoke_config(method="lora", baseline={"optimizer": {"lr": 0.0}})
    trace, _ = _baseline(config)
    assert len({r.train_loss for r in trace.records}) == 1


def test_empty_upper_split_is_rejected(smoke_config):
    config = smoke_config(split={"lower_fraction": 1.0})
    with pytest.raises(SplitError):
        _bilora(config)


def test_baseline_needs_real_value_adapters(smoke_config):
    config = smoke_config()
    train, test, model, stream = build_experiment(config, 0)
    assert model.adapters[0].mode == SingularMode.SOFTMAX
    with pytest.raises(ConfigError) as info:
        train_lora_baseline(model, train, test, config.baseline, stream)
    assert info.value.key == "model.mode"


def test_softmax_lambdas_sum_to_one_every_step(smoke_config):
    sums = []

    def hook(step, model, metrics):
        sums.extend(float(lam.sum()) for lam in model.lambdas())

    _bilora(smoke_config(), on_step=hook)
    assert len(sums) == 6 * 2
    assert all(abs(s - 1.0) <= 1e-12 for s in sums)


def test_bilora_freezes_base_weights(smoke_config):
    config = smoke_config()
    _, _, fresh, _ = build_experiment(config, 0)
    _, trained = _bilora(config)
    assert trained.block_digests()["w0"] == fresh.block_digests()["w0"]
    assert trained.block_digests()["lower"] != fresh.block_digests()["lower"]


def test_baseline_and_bilora_share_initial_factors(smoke_config):
    _, _, lora_model, _ = build_experiment(smoke_config(method="lora"), 5)
    _, _, bilora_model, _ = build_experiment(smoke_config(), 5)
    lora, bilora = lora_model.block_digests(), bilora_model.block_digests()
    assert lora["w0"] == bilora["w0"]
    assert lora["lower"] == bilora["lower"]


def test_bilora_is_deterministic(smoke_config):
    config = smoke_config()
    a, model_a = _bilora(config, seed=2)
    b, model_b = _bilora(config, seed=2)
    assert [r.test_loss for r in a.records] == [r.test_loss for r in b.records]
    assert np.array_equal(model_a.upper_vector(), model_b.upper_vector())


def test_different_seeds_differ(smoke_config):
    a, _ = _bilora(smoke_config(), seed=0)
    b, _ = _bilora(smoke_config(), seed=1)
    assert a.records[-1].test_loss != b.records[-1].test_loss


def test_bilevel_seed_overrides_stream(smoke_config):
    config = smoke_config(bilevel={"seed": 99})
    train, test, model, _ = build_experiment(config, 0)
    twin = model.copy()
    a = train_bilora(model, train, test, config.split, config.bilevel, Rng(0))
    b = train_bilora(twin, train, test, config.split, config.bilevel, Rng(1))
    assert [r.train_loss for r in a.records] == [r.train_loss for r in b.records]


def test_divergence_carries_partial_trace(smoke_config):
    config = smoke_config(bilevel={"lower": {"lr": 1e6}})
    with pytest.raises(DivergenceError) as info:
        _bilora(config)
    assert info.value.stage in {"lower", "upper", "eval"}
    assert info.value.trace is not None
    assert info.value.trace.records[0].step == 0


def test_classic_baseline_trains_only_factors(smoke_config):
    config = smoke_config(method="lora", model={"classic_form": True})
    train, test, model, stream = build_experiment(config, 0)
    v_before = [a.v.copy() for a in model.adapters]
    assert model.upper_vector().size == 0
    train_lora_baseline(model, train, test, config.baseline, stream)
    for before, adapter in zip(v_before, model.adapters):
        assert np.array_equal(before, adapter.v)


@pytest.mark.slow
def test_noise_free_single_layer_fits_training_set(smoke_config):
    config = smoke_config(
        method=Method.BILORA.value,
        task={"noise_std": 0.0, "teacher_rank": 2},
        model={"depth": 1, "rank": 2, "w0_init": W0Init.ZERO.value, "mode": "real_value"},
        bilevel={
            "global_steps": 3000,
            "lower": {"lr": 0.05},
            "upper": {"kind": "adamw", "lr": 0.01},
            "gammas": {"gamma1": 0.0},
        },
        snapshot_every=1000,
    )
    trace, _ = _bilora(config)
    assert trace.records[-1].train_loss < 1e-3
