"""
Toy model made of LoRA-adapted linear layers.

Stands in for the pre-trained network being adapted: every layer's W0 is
frozen, only the adapters train. The model exposes flat views of the two
parameter groups the bi-level engine alternates between:

- lower vector: every adapter's P and Q (the pseudo singular vectors)
- upper vector: every trainable adapter's raw singular parameters v
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from bilora.exceptions import ShapeError
from bilora.schemas import LossKind, ModelSpec, SingularMode
from bilora.services import adapter as adapter_ops
from bilora.services.adapter import AdapterGrads, LoRAAdapter
from bilora.services.linalg import Matrix, Rng, Vector

logger = logging.getLogger(__name__)


@dataclass
class Layer:
    """One adapted linear layer followed by an optional tanh."""

    adapter: LoRAAdapter
    activation: str = "none"


# =============================================================================
# Losses
# =============================================================================


def mse_loss(output: Matrix, target: Matrix) -> tuple[float, Matrix]:
    """(1/n) sum_j ||output_j - target_j||^2 and its gradient."""
    n = output.shape[1]
    diff = output - target
    return float(np.sum(diff * diff)) / n, 2.0 * diff / n


def softmax_cross_entropy(logits: Matrix, target: Matrix) -> tuple[float, Matrix]:
    """Mean cross entropy of column-wise softmax against one-hot targets."""
    n = logits.shape[1]
    shifted = logits - np.max(logits, axis=0, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=0, keepdims=True))
    log_probs = shifted - log_norm
    loss = -float(np.sum(target * log_probs)) / n
    return loss, (np.exp(log_probs) - target) / n


LOSSES = {
    LossKind.MSE: mse_loss,
    LossKind.SOFTMAX_CROSS_ENTROPY: softmax_cross_entropy,
}


# =============================================================================
# Model
# =============================================================================


class ToyModel:
    """Stack of adapted layers with an MSE or softmax cross-entropy loss."""

    def __init__(self, layers: Sequence[Layer], loss_kind: LossKind = LossKind.MSE) -> None:
        for prev, nxt in zip(layers, layers[1:]):
            if prev.adapter.d_out != nxt.adapter.d_in:
                raise ShapeError(
                    f"Layer {prev.adapter.layer_index} outputs {prev.adapter.d_out} "
                    f"but layer {nxt.adapter.layer_index} expects {nxt.adapter.d_in}"
                )
        self.layers = list(layers)
        self.loss_kind = LossKind(loss_kind)

    @property
    def adapters(self) -> List[LoRAAdapter]:
        return [layer.adapter for layer in self.layers]

    @property
    def d_in(self) -> int:
        return self.layers[0].adapter.d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].adapter.d_out

    def copy(self) -> "ToyModel":
        return ToyModel(
            [Layer(layer.adapter.copy(), layer.activation) for layer in self.layers],
            self.loss_kind,
        )

    # -- forward / backward ---------------------------------------------------

    def _run(self, x: Matrix) -> tuple[Matrix, List[Matrix]]:
        inputs = []
        h = x
        for layer in self.layers:
            inputs.append(h)
            h = adapter_ops.forward(layer.adapter, h)
            if layer.activation == "tanh":
                h = np.tanh(h)
        return h, inputs

    def predict(self, x: Matrix) -> Matrix:
        return self._run(x)[0]

    def loss(self, x: Matrix, y: Matrix) -> float:
        output = self.predict(x)
        return LOSSES[self.loss_kind](output, y)[0]

    def loss_and_grads(self, x: Matrix, y: Matrix) -> tuple[float, List[AdapterGrads]]:
        """Data loss C on (x, y) and exact gradients for every adapter."""
        output, inputs = self._run(x)
        loss, upstream = LOSSES[self.loss_kind](output, y)

        grads: List[Optional[AdapterGrads]] = [None] * len(self.layers)
        for idx in reversed(range(len(self.layers))):
            layer = self.layers[idx]
            if layer.activation == "tanh":
                # tanh output of this layer is the next layer's input
                activated = inputs[idx + 1] if idx + 1 < len(inputs) else output
                upstream = upstream * (1.0 - activated * activated)
            grads[idx], upstream = adapter_ops.backward(layer.adapter, inputs[idx], upstream)
        return loss, grads

    # -- flat parameter views -------------------------------------------------

    def lower_vector(self) -> Vector:
        return np.concatenate(
            [np.concatenate([a.p.ravel(), a.q.ravel()]) for a in self.adapters]
        )

    def load_lower_vector(self, vector: Vector) -> None:
        offset = 0
        for a in self.adapters:
            a.p = vector[offset : offset + a.p.size].reshape(a.p.shape).copy()
            offset += a.p.size
            a.q = vector[offset : offset + a.q.size].reshape(a.q.shape).copy()
            offset += a.q.size
        if offset != vector.size:
            raise ShapeError(f"Lower vector has {vector.size} entries, model needs {offset}")

    def upper_vector(self) -> Vector:
        blocks = [a.v for a in self.adapters if a.train_v]
        return np.concatenate(blocks) if blocks else np.zeros(0)

    def load_upper_vector(self, vector: Vector) -> None:
        offset = 0
        for a in self.adapters:
            if not a.train_v:
                continue
            a.v = vector[offset : offset + a.rank].copy()
            offset += a.rank
        if offset != vector.size:
            raise ShapeError(f"Upper vector has {vector.size} entries, model needs {offset}")

    def lower_grad_vector(self, grads: Sequence[AdapterGrads]) -> Vector:
        return np.concatenate([np.concatenate([g.dp.ravel(), g.dq.ravel()]) for g in grads])

    def upper_grad_vector(self, grads: Sequence[AdapterGrads]) -> Vector:
        blocks = [g.dv for a, g in zip(self.adapters, grads) if a.train_v]
        return np.concatenate(blocks) if blocks else np.zeros(0)

    def upper_from_adapter_vectors(self, per_adapter: Sequence[Vector]) -> Vector:
        """Concatenate per-adapter v-shaped vectors in upper-vector order."""
        blocks = [vec for a, vec in zip(self.adapters, per_adapter) if a.train_v]
        return np.concatenate(blocks) if blocks else np.zeros(0)

    def lower_from_adapter_blocks(self, per_adapter: Sequence[tuple[Matrix, Matrix]]) -> Vector:
        """Concatenate per-adapter (dP, dQ) pairs in lower-vector order."""
        return np.concatenate([np.concatenate([dp.ravel(), dq.ravel()]) for dp, dq in per_adapter])

    # -- diagnostics -----------------------------------------------------------

    def block_digests(self) -> Dict[str, str]:
        """SHA-256 of the W0, P/Q and v blocks, for freeze-partition checks."""
        digests = {}
        for name, arrays in (
            ("w0", [a.w0 for a in self.adapters]),
            ("lower", [np.concatenate([a.p.ravel(), a.q.ravel()]) for a in self.adapters]),
            ("upper", [a.v for a in self.adapters]),
        ):
            h = hashlib.sha256()
            for array in arrays:
                h.update(np.ascontiguousarray(array).tobytes())
            digests[name] = h.hexdigest()
        return digests

    def lambdas(self) -> List[Vector]:
        return [a.lambdas() for a in self.adapters]

    def __repr__(self) -> str:
        dims = " -> ".join([str(self.d_in)] + [str(a.d_out) for a in self.adapters])
        return f"<ToyModel({dims}, loss={self.loss_kind.value})>"


def build_model(
    rng: Rng,
    spec: ModelSpec,
    d_in: int,
    d_out: int,
    loss_kind: LossKind = LossKind.MSE,
    mode: Optional[SingularMode] = None,
    classic_form: bool = False,
) -> ToyModel:
    """
    Build a ToyModel from a ModelSpec.

    Adapters draw from rng in layer order, so two builds with the same stream
    produce identical W0, P and Q whatever the singular mode.
    """
    mode = SingularMode(mode or spec.mode)
    widths = [d_in] + [spec.hidden] * (spec.depth - 1) + [d_out]
    layers = []
    for k in range(spec.depth):
        if classic_form:
            adapter = adapter_ops.init_classic_adapter(
                rng, widths[k + 1], widths[k], spec.rank, spec.alpha,
                spec.w0_init, spec.w0_std, layer_index=k, factor_std=spec.factor_std,
            )
        else:
            adapter = adapter_ops.init_adapter(
                rng, widths[k + 1], widths[k], spec.rank, spec.alpha, mode,
                spec.w0_init, spec.w0_std, layer_index=k, factor_std=spec.factor_std,
            )
        activation = spec.activation if k < spec.depth - 1 else "none"
        layers.append(Layer(adapter, activation))

    model = ToyModel(layers, loss_kind)
    logger.debug(f"Built {model} with rank {spec.rank}, mode {mode.value}")
    return model

