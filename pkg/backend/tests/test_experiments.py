import json

import numpy as np
import pandas as pd
import pytest

from bilora.exceptions import ConfigError, DivergenceError
from bilora.schemas import Method
from bilora.services.adapter import load_adapters
from bilora.services.config_loader import load_config
from bilora.services.experiments import (
    execute,
    expand_sweep,
    load_summary,
    run_experiment,
    run_seed,
    run_sweep,
)
from bilora.services.traces import read_trace_csv


def test_run_writes_every_artifact(tmp_path, smoke_config):
    config = smoke_config(seeds=[1, 2])
    summary = run_experiment(config, tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == sorted(
        [
            "config.echo.toml",
            "summary.json",
            "trace_seed1.csv",
            "trace_seed2.csv",
            "adapters_seed1.json",
            "adapters_seed2.json",
            "summary_seed1.json",
            "summary_seed2.json",
        ]
    )
    assert summary.seeds == [1, 2]
    assert load_summary(tmp_path / "summary.json") == summary
    assert len(read_trace_csv(tmp_path / "trace_seed1.csv")) == config.bilevel.global_steps + 1
    assert len(load_adapters(tmp_path / "adapters_seed2.json")) == config.model.depth


def test_median_over_seeds(tmp_path, smoke_config):
    summary = run_experiment(smoke_config(seeds=[0, 1, 2]), tmp_path)
    finals = [r.final_test_loss for r in summary.runs]
    assert summary.median_final_test_loss == float(np.median(finals))


def test_echo_reproduces_the_run(tmp_path, smoke_config):
    first = tmp_path / "first"
    second = tmp_path / "second"
    run_experiment(smoke_config(), first)
    run_experiment(load_config(first / "config.echo.toml"), second)
    assert (first / "trace_seed0.csv").read_bytes() == (second / "trace_seed0.csv").read_bytes()


def test_pool_matches_serial(smoke_config):
    config = smoke_config(seeds=[0, 1])
    jobs = [(config, seed) for seed in config.seeds]
    serial = execute(jobs, workers=1)
    pooled = execute(jobs, workers=2)
    for a, b in zip(serial, pooled):
        assert a.seed == b.seed
        assert [r.test_loss for r in a.trace.records] == [r.test_loss for r in b.trace.records]


def test_divergence_writes_artifacts_then_raises(tmp_path, smoke_config):
    config = smoke_config(bilevel={"lower": {"lr": 1e6}})
    with pytest.raises(DivergenceError):
        run_experiment(config, tmp_path)
    assert (tmp_path / "trace_seed0.csv").exists()
    summary = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    assert all(run["diverged"] for run in summary["runs"])


def test_run_seed_carries_divergence(smoke_config):
    outcome = run_seed(smoke_config(bilevel={"lower": {"lr": 1e6}}), 0)
    assert outcome.error is not None
    assert outcome.summary is None or outcome.summary.diverged


def test_lora_run(tmp_path, smoke_config):
    summary = run_experiment(smoke_config(method="lora"), tmp_path)
    assert summary.method == Method.LORA
    assert summary.runs[0].final_lower_loss is None


def test_expand_sweep_cells(smoke_config):
    cells = expand_sweep(smoke_config(), [("model.rank", [1, 2]), ("lower.lr", [0.01, 0.1])])
    assert [assignment for assignment, _ in cells] == [
        {"model.rank": 1, "lower.lr": 0.01},
        {"model.rank": 1, "lower.lr": 0.1},
        {"model.rank": 2, "lower.lr": 0.01},
        {"model.rank": 2, "lower.lr": 0.1},
    ]
    assert cells[3][1].bilevel.lower.lr == 0.1


@pytest.mark.parametrize(
    "axes",
    [[], [("model.rank", [])], [("model.rank", [1]), ("model.rank", [2])], [("model.rank", [1, 99])]],
)
def test_expand_sweep_rejects_bad_axes(smoke_config, axes):
    with pytest.raises(ConfigError):
        expand_sweep(smoke_config(), axes)


def test_sweep_writes_cells_and_aggregate(tmp_path, smoke_config):
    aggregate = run_sweep(smoke_config(), [("model.mode", ["softmax", "real_value"])], tmp_path)
    assert (tmp_path / "cell_0" / "trace_seed0.csv").exists()
    assert (tmp_path / "cell_1" / "summary.json").exists()
    written = pd.read_csv(tmp_path / "aggregate.csv")
    assert list(written.columns) == [
        "model.mode", "median_final_test_loss", "median_gap_at_best", "median_final_gap", "n_seeds",
    ]
    assert written["model.mode"].tolist() == ["softmax", "real_value"]
    assert aggregate["n_seeds"].tolist() == [1, 1]
