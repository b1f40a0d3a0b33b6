"""Pinball loss, its multi-node mean, and exact subgradients.

``pinball(q, ...)`` charges q per unit of overestimation and 1-q per
unit of underestimation, so a constant minimizing its sample mean sits
at the (1-q)-quantile of the labels. The multi-node loss therefore
scores the node that targets level q at formula level 1-q, which puts
each node's minimizer on its own target quantile (0.1 node low, 0.9
node high). The subgradient at a zero residual is taken as 0. With a
single node at q=0.5 both parameterizations coincide and the loss
equals 0.5 * |residual| (L1 up to a constant factor, which never moves
the minimizer).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class QuantileSpec:
    """Ordered quantile levels, one per model output node."""

    levels: tuple[float, ...]

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ConfigError("quantile spec needs at least one level")
        prev = 0.0
        for q in self.levels:
            if not 0.0 < q < 1.0:
                raise ConfigError(f"quantile level {q} outside (0, 1)")
            if q <= prev:
                raise ConfigError(
                    f"quantile levels must be strictly increasing, got {self.levels}"
                )
            prev = q

    @property
    def k(self) -> int:
        return len(self.levels)

    def median_index(self) -> int | None:
        """Index of the 0.5 node, or None if the spec has no median node."""
        for i, q in enumerate(self.levels):
            if q == 0.5:
                return i
        return None

    def as_array(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=np.float64)


DEFAULT_QUANTILES = QuantileSpec((0.1, 0.5, 0.9))


@dataclass
class LossValue:
    """Mean pinball loss over the K nodes plus per-node detail."""

    value: float
    per_node: np.ndarray  # (K,)
    gradient: np.ndarray  # (K,) d value / d prediction_n


def pinball(q: float, y: float, y_hat: float) -> float:
    """Node-wise pinball loss for one prediction against one label."""
    if not 0.0 < q < 1.0:
        raise ConfigError(f"quantile level {q} outside (0, 1)")
    residual = y_hat - y
    if residual >= 0:
        return q * residual
    return (1.0 - q) * (-residual)


def quantile_loss(y: float, y_hat: np.ndarray, spec: QuantileSpec) -> LossValue:
    """Mean of the K node-wise pinball losses with its exact subgradient.

    Node n targets level q_n, so it is charged at formula level 1-q_n:
    underestimation costs q_n per unit and overestimation 1-q_n. Its
    constant-sample minimizer is then the q_n-quantile of the labels.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_hat.shape != (spec.k,):
        raise ConfigError(
            f"expected {spec.k} predictions, got shape {y_hat.shape}"
        )
    # Effective formula level per node; 1-q flips the asymmetry so the
    # node lands on its target quantile instead of the mirrored one.
    eff = 1.0 - spec.as_array()
    residual = y_hat - float(y)
    per_node = np.where(residual >= 0, eff * residual, (eff - 1.0) * residual)
    grad = np.where(residual > 0, eff, np.where(residual < 0, eff - 1.0, 0.0))
    grad = grad / spec.k
    return LossValue(
        value=float(per_node.mean()), per_node=per_node, gradient=grad
    )


def batch_loss(
    labels: np.ndarray, predictions: np.ndarray, spec: QuantileSpec
) -> tuple[float, np.ndarray]:
    """Mean quantile loss over a batch and its gradient w.r.t. predictions.

    labels: (B,); predictions: (B, K). Nodes are charged at their
    flipped levels exactly as in quantile_loss. The returned gradient
    is (B, K) and already carries the 1/(B*K) scaling of the double
    mean.
    """
    labels = np.asarray(labels, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if labels.ndim != 1 or labels.size == 0:
        raise ConfigError("batch must contain at least one labeled sample")
    if predictions.shape != (labels.size, spec.k):
        raise ConfigError(
            f"predictions shape {predictions.shape} does not match "
            f"{labels.size} labels x {spec.k} nodes"
        )
    eff = 1.0 - spec.as_array()[None, :]
    residual = predictions - labels[:, None]
    per = np.where(residual >= 0, eff * residual, (eff - 1.0) * residual)
    grad = np.where(residual > 0, eff, np.where(residual < 0, eff - 1.0, 0.0))
    b = labels.size
    return float(per.mean()), grad / (b * spec.k)
