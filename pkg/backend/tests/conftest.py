"""Shared fixtures: seeded streams, tiny adapters and models, smoke configs."""

import copy

import numpy as np
import pytest

from bilora.config import get_settings
from bilora.schemas import ExperimentConfig, LossKind, SingularMode
from bilora.services import linalg
from bilora.services.adapter import LoRAAdapter
from bilora.services.linalg import Rng
from bilora.services.model import Layer, ToyModel
from bilora.services.tasks import Batch, Dataset

SMOKE = {
    "method": "bilora",
    "seeds": [0],
    "snapshot_every": 3,
    "task": {"d_in": 6, "d_out": 6, "n_train": 12, "n_test": 20, "teacher_rank": 2},
    "model": {"depth": 2, "hidden": 6, "rank": 2, "alpha": 2.0},
    "bilevel": {"global_steps": 6, "lower_batch": 4, "upper_batch": 3},
    "baseline": {"epochs": 4, "batch_size": 4},
}

SMOKE_TOML = """\
# tiny run
method = "bilora"
seeds = [0]
snapshot_every = 3

task.d_in = 6
task.d_out = 6
task.n_train = 12
task.n_test = 20
task.teacher_rank = 2

model.depth = 2
model.hidden = 6
model.rank = 2
model.alpha = 2.0

bilevel.global_steps = 6
bilevel.lower_batch = 4
bilevel.upper_batch = 3

lower.lr = 0.05
upper.lr = 0.02
regularizers.gamma1 = 0.1

baseline.epochs = 4
baseline.batch_size = 4
"""


@pytest.fixture(autouse=True)
def _clean_settings(monkeypatch):
    for var in ("BILORA_OUT", "BILORA_JOBS", "BILORA_LOG_LEVEL"):
        monkeypatch.delenv(var, raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def make_adapter(rng):
    """Factory for a random adapter with non-trivial v."""

    def factory(mode=SingularMode.SOFTMAX, d_out=6, d_in=4, rank=2, layer_index=0):
        return LoRAAdapter(
            w0=linalg.gaussian_matrix(rng, d_out, d_in, 1.0 / np.sqrt(d_in)),
            p=linalg.gaussian_matrix(rng, d_out, rank, 1.0 / np.sqrt(rank)),
            q=linalg.gaussian_matrix(rng, rank, d_in, 1.0 / np.sqrt(rank)),
            v=rng.uniform(-1.0, 1.0, rank),
            mode=mode,
            alpha=float(rank),
            layer_index=layer_index,
        )

    return factory


@pytest.fixture
def make_model(make_adapter):
    """Factory for a 2-layer tanh model (4 -> 6 -> 5)."""

    def factory(mode=SingularMode.SOFTMAX, loss_kind=LossKind.MSE):
        first = make_adapter(mode, d_out=6, d_in=4, rank=2, layer_index=0)
        second = make_adapter(mode, d_out=5, d_in=6, rank=2, layer_index=1)
        return ToyModel([Layer(first, "tanh"), Layer(second)], loss_kind)

    return factory


@pytest.fixture
def make_batch(rng):
    def factory(d_in=4, d_out=5, n=3):
        return Batch(
            indices=np.arange(n),
            x=linalg.gaussian_matrix(rng, d_in, n, 1.0),
            y=linalg.gaussian_matrix(rng, d_out, n, 1.0),
        )

    return factory


@pytest.fixture
def tiny_dataset(rng):
    x = linalg.gaussian_matrix(rng, 4, 10, 1.0)
    y = linalg.gaussian_matrix(rng, 5, 10, 1.0)
    return Dataset(inputs=x, targets=y, name="tiny", seed=1234)


@pytest.fixture
def smoke_config():
    def factory(**sections):
        payload = copy.deepcopy(SMOKE)
        for key, value in sections.items():
            if isinstance(value, dict):
                payload.setdefault(key, {}).update(value)
            else:
                payload[key] = value
        return ExperimentConfig.model_validate(payload)

    return factory


@pytest.fixture
def smoke_toml(tmp_path):
    path = tmp_path / "smoke.toml"
    path.write_text(SMOKE_TOML, encoding="utf-8")
    return path
