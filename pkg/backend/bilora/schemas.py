"""
Pydantic schemas for experiment configuration and artifacts.

ExperimentConfig is validated before any compute. Every section forbids
unknown keys so a typo in a config file fails loudly instead of silently
falling back to a default.
"""

from enum import Enum
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# =============================================================================
# Enumerations
# =============================================================================


class SingularMode(str, Enum):
    """Parameterization of the pseudo singular values."""

    REAL_VALUE = "real_value"
    SOFTMAX = "softmax"
    APPROX_BINARY = "approx_binary"


class W0Init(str, Enum):
    """Initialization of the frozen base weight."""

    ZERO = "zero"
    GAUSSIAN = "gaussian"


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAMW = "adamw"


class HypergradMode(str, Enum):
    """How the upper level differentiates through the lower unroll."""

    UNROLLED_EXACT = "unrolled_exact"
    FIRST_ORDER = "first_order"


class R2Sign(str, Enum):
    """Sign convention of the binary entropy regularizer."""

    ENTROPY = "entropy"
    PAPER_LITERAL = "paper_literal"


class Method(str, Enum):
    LORA = "lora"
    BILORA = "bilora"


class TaskKind(str, Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


class LossKind(str, Enum):
    MSE = "mse"
    SOFTMAX_CROSS_ENTROPY = "softmax_cross_entropy"


class _Section(BaseModel):
    """Base for config sections: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")


# =============================================================================
# Optimizer / Regularizer Schemas
# =============================================================================


class OptimizerSpec(_Section):
    """One level's optimizer: SGD or AdamW with decoupled weight decay."""

    kind: OptimizerKind = Field(OptimizerKind.SGD, description="Optimizer family")
    lr: float = Field(0.05, ge=0.0, description="Learning rate (eta)")
    weight_decay: float = Field(0.0, ge=0.0, description="Decoupled weight decay")
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    clip_norm: Optional[float] = Field(
        None, gt=0.0, description="Opt-in global gradient-norm clipping"
    )
    warmup_steps: int = Field(0, ge=0, description="Linear learning-rate warmup length")


class RegWeights(_Section):
    """Tradeoff weights of the orthogonality (R1) and entropy (R2) regularizers."""

    gamma1: float = Field(0.1, ge=0.0, allow_inf_nan=False)
    gamma2: float = Field(0.0, ge=0.0, allow_inf_nan=False)
    r2_sign: R2Sign = Field(R2Sign.ENTROPY, description="entropy or paper_literal")


# =============================================================================
# Experiment Sections
# =============================================================================


class TaskSpec(_Section):
    """Synthetic teacher task parameters."""

    kind: TaskKind = TaskKind.REGRESSION
    d_in: int = Field(32, ge=1)
    d_out: int = Field(32, ge=1)
    n_train: int = Field(32, ge=2)
    n_test: int = Field(256, ge=1)
    noise_std: float = Field(0.5, ge=0.0)
    teacher_rank: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _teacher_rank_fits(self) -> "TaskSpec":
        if self.teacher_rank > min(self.d_in, self.d_out):
            raise ValueError("task.teacher_rank must be <= min(task.d_in, task.d_out)")
        return self


class ModelSpec(_Section):
    """Toy model built from LoRA-adapted linear layers."""

    depth: int = Field(2, ge=1, description="Number of adapted linear layers")
    hidden: int = Field(32, ge=1, description="Hidden width between layers")
    rank: int = Field(8, ge=1)
    alpha: float = Field(8.0, gt=0.0, description="LoRA scaling numerator (alpha/r)")
    mode: SingularMode = SingularMode.SOFTMAX
    activation: Literal["tanh", "none"] = "tanh"
    w0_init: W0Init = W0Init.GAUSSIAN
    w0_std: Optional[float] = Field(
        None, ge=0.0, description="Base weight stddev; default 1/sqrt(fan_in)"
    )
    factor_std: Optional[float] = Field(
        None, gt=0.0, description="Stddev of the P and Q draws; default 1/sqrt(rank)"
    )
    classic_form: bool = Field(False, description="Baseline only: Delta W = B A")


class SplitSpec(_Section):
    """Train-set split into D1 (lower level) and D2 (upper level)."""

    lower_fraction: float = Field(0.8, gt=0.0, le=1.0)
    seed: Optional[int] = Field(None, description="Defaults to a stream of the run seed")


class BiLevelConfig(_Section):
    """Algorithm-level knobs of one bi-level run."""

    t1: int = Field(1, ge=1, description="Lower unroll steps per global step")
    t2: int = Field(1, ge=1, description="Upper steps per global step")
    global_steps: int = Field(200, ge=1)
    hypergrad_mode: HypergradMode = HypergradMode.UNROLLED_EXACT
    lower_batch: int = Field(8, ge=1)
    upper_batch: int = Field(8, ge=1)
    hvp_eps: float = Field(1e-4, gt=0.0, description="Relative HVP finite-difference step")
    lower: OptimizerSpec = Field(default_factory=OptimizerSpec)
    upper: OptimizerSpec = Field(
        default_factory=lambda: OptimizerSpec(kind=OptimizerKind.ADAMW, lr=0.02)
    )
    gammas: RegWeights = Field(default_factory=RegWeights)
    seed: Optional[int] = Field(None, description="Defaults to the run seed")

    @model_validator(mode="after")
    def _exact_needs_plain_sgd(self) -> "BiLevelConfig":
        if self.hypergrad_mode == HypergradMode.UNROLLED_EXACT:
            if self.lower.kind != OptimizerKind.SGD:
                raise ValueError(
                    "bilevel.hypergrad_mode=unrolled_exact requires bilevel.lower.kind=sgd"
                )
            if self.lower.clip_norm is not None:
                raise ValueError(
                    "bilevel.hypergrad_mode=unrolled_exact can't differentiate "
                    "through bilevel.lower.clip_norm"
                )
        return self


class BaselineSpec(_Section):
    """Single-level LoRA baseline training."""

    epochs: int = Field(200, ge=0)
    batch_size: int = Field(8, ge=1)
    optimizer: OptimizerSpec = Field(default_factory=OptimizerSpec)


class GradcheckSpec(_Section):
    """Shapes and tolerances of the finite-difference oracle suite."""

    d_out: int = Field(6, ge=1)
    d_in: int = Field(4, ge=1)
    rank: int = Field(2, ge=1)
    batch: int = Field(5, ge=1)
    h: float = Field(1e-5, gt=0.0)
    hypergrad_h: float = Field(1e-4, gt=0.0)
    first_order_tol: float = Field(1e-6, gt=0.0)
    hypergrad_tol: float = Field(1e-4, gt=0.0)
    lower_lr: float = Field(0.1, ge=0.0)
    max_t1: int = Field(3, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _rank_fits(self) -> "GradcheckSpec":
        if self.rank > min(self.d_out, self.d_in):
            raise ValueError("gradcheck.rank must be <= min(gradcheck.d_out, gradcheck.d_in)")
        return self


# =============================================================================
# Experiment Config
# =============================================================================


class ExperimentConfig(_Section):
    """A complete experiment: task, model, method and per-method knobs."""

    method: Method = Field(..., description="lora or bilora")
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    snapshot_every: int = Field(10, ge=1, description="Lambda snapshot cadence")
    output_dir: Optional[str] = None
    task: TaskSpec = Field(default_factory=TaskSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    split: SplitSpec = Field(default_factory=SplitSpec)
    bilevel: BiLevelConfig = Field(default_factory=BiLevelConfig)
    baseline: BaselineSpec = Field(default_factory=BaselineSpec)
    gradcheck: GradcheckSpec = Field(default_factory=GradcheckSpec)

    @field_validator("seeds")
    @classmethod
    def _unique_seeds(cls, seeds: List[int]) -> List[int]:
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be unique")
        return seeds

    @model_validator(mode="after")
    def _rank_fits_layers(self) -> "ExperimentConfig":
        for d_out, d_in in self.layer_dims():
            if self.model.rank > min(d_out, d_in):
                raise ValueError(
                    f"model.rank={self.model.rank} exceeds min(d_out, d_in) of a "
                    f"{d_out}x{d_in} layer"
                )
        if (
            self.method == Method.BILORA
            and self.bilevel.gammas.gamma2 > 0
            and self.model.mode != SingularMode.APPROX_BINARY
        ):
            raise ValueError(
                "bilevel.gammas.gamma2 > 0 requires model.mode=approx_binary"
            )
        return self

    def layer_dims(self) -> List[tuple[int, int]]:
        """(d_out, d_in) of every adapted layer, input to output."""
        widths = [self.task.d_in] + [self.model.hidden] * (self.model.depth - 1)
        widths.append(self.task.d_out)
        return [(widths[i + 1], widths[i]) for i in range(self.model.depth)]


# =============================================================================
# Artifact Schemas
# =============================================================================


class AdapterRecord(BaseModel):
    """One serialized adapter (row-major nested lists)."""

    layer_index: int
    mode: SingularMode
    alpha: float
    rank: int
    d_out: int
    d_in: int
    train_v: bool = True
    w0: List[List[float]]
    p: List[List[float]]
    q: List[List[float]]
    v: List[float]


class AdapterDump(BaseModel):
    """Versioned adapter dump file."""

    format_version: int = 1
    adapters: List[AdapterRecord]


class RunSummary(BaseModel):
    """Per-seed run summary written next to the trace CSV."""

    method: Method
    seed: int
    final_train_loss: float
    final_test_loss: float
    final_lower_loss: Optional[float] = None
    final_upper_loss: Optional[float] = None
    best_test_step: int
    best_test_loss: float
    gap_at_best: float
    final_gap: float
    total_steps: int
    wall_time_seconds: float
    seconds_per_step: float
    diverged: bool = False


class ExperimentSummary(BaseModel):
    """All seeds of one run command plus medians (NaN when every seed diverged)."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    method: Method
    seeds: List[int]
    runs: List[RunSummary]
    median_final_test_loss: float
    median_gap_at_best: float
    median_final_gap: float
