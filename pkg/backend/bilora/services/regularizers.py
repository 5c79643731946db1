"""
Orthogonality (R1) and binary-entropy (R2) regularizers with exact gradients.

R1 = sum_k ||P_k^T P_k - I||_F^2 + ||Q_k Q_k^T - I||_F^2 pushes the pseudo
singular vectors toward orthonormality.

R2 = sum_k sum_i H(lambda_ki), H the binary entropy in nats. Minimizing it
drives ApproxBinary singular values toward 0 or 1. The literal form
sum lambda ln lambda + (1 - lambda) ln(1 - lambda) equals -H and is kept
behind R2Sign.PAPER_LITERAL for comparison.
"""

import logging
from typing import List, Sequence

import numpy as np

from bilora.exceptions import NonFiniteError
from bilora.schemas import R2Sign
from bilora.services import linalg
from bilora.services.adapter import LoRAAdapter, lambda_jacobian_vp
from bilora.services.linalg import Matrix, Vector

logger = logging.getLogger(__name__)


def r1_value_and_grads(
    adapters: Sequence[LoRAAdapter],
) -> tuple[float, List[tuple[Matrix, Matrix]]]:
    """
    Orthogonality regularizer value and per-adapter (dP, dQ).

    dP = 4 P (P^T P - I), dQ = 4 (Q Q^T - I) Q.
    """
    value = 0.0
    grads: List[tuple[Matrix, Matrix]] = []
    for adapter in adapters:
        eye = linalg.identity(adapter.rank)
        p_defect = adapter.p.T @ adapter.p - eye
        q_defect = adapter.q @ adapter.q.T - eye
        value += linalg.frobenius_sq(p_defect) + linalg.frobenius_sq(q_defect)
        grads.append((4.0 * adapter.p @ p_defect, 4.0 * q_defect @ adapter.q))
    return value, grads


def binary_entropy(lam: Vector) -> Vector:
    """H(lambda) = -[lambda ln lambda + (1 - lambda) ln(1 - lambda)]."""
    return -(lam * np.log(lam) + (1.0 - lam) * np.log1p(-lam))


def r2_value_and_grad(
    lambdas: Sequence[Vector], sign: R2Sign = R2Sign.ENTROPY
) -> tuple[float, List[Vector]]:
    """
    Entropy regularizer value and per-adapter dR2/dlambda.

    Args:
        lambdas: Materialized singular values per adapter, each strictly in (0, 1)
        sign: ENTROPY (minimized at 0/1) or PAPER_LITERAL (its negation)

    Raises:
        ValueError: If any value is outside the open interval (0, 1)
    """
    factor = 1.0 if R2Sign(sign) == R2Sign.ENTROPY else -1.0
    value = 0.0
    grads: List[Vector] = []
    for k, lam in enumerate(lambdas):
        lam = np.asarray(lam, dtype=np.float64)
        if np.any(lam <= 0.0) or np.any(lam >= 1.0):
            raise ValueError(f"R2 needs singular values strictly inside (0, 1); adapter {k} violates it")
        value += factor * float(np.sum(binary_entropy(lam)))
        grads.append(factor * np.log((1.0 - lam) / lam))
    if not np.isfinite(value):
        raise NonFiniteError("R2 value is not finite")
    return value, grads


def r2_adapter_grads(
    adapters: Sequence[LoRAAdapter], gamma2: float, sign: R2Sign = R2Sign.ENTROPY
) -> tuple[float, List[Vector]]:
    """
    gamma2 * R2 and its gradient chained into each adapter's raw v.

    Returns zeros without evaluating R2 when gamma2 is 0, so modes whose
    singular values leave (0, 1) are fine as long as R2 is switched off.

    Raises:
        NonFiniteError: If a singular value sits on or outside the boundary of (0, 1)
    """
    if gamma2 == 0.0:
        return 0.0, [np.zeros_like(a.v) for a in adapters]

    try:
        value, dlams = r2_value_and_grad([a.lambdas() for a in adapters], sign)
    except ValueError as e:
        # a sigmoid saturated to exactly 0 or 1
        raise NonFiniteError(str(e)) from e
    dvs = [
        gamma2 * lambda_jacobian_vp(a.v, a.mode, dlam)
        for a, dlam in zip(adapters, dlams)
    ]
    return gamma2 * value, dvs


def orthogonality_defects(adapters: Sequence[LoRAAdapter]) -> List[float]:
    """Per-adapter ||P^T P - I||_F + ||Q Q^T - I||_F."""
    return [a.orthogonality_defect() for a in adapters]
