"""Finite-difference verification of the hand-written backward passes.

Central differences at step h compare against the analytic gradient for
randomly sampled parameter coordinates. Both the ReLU activations and the
quantile-loss residuals are piecewise linear, so a coordinate whose two
evaluation points land in different linear regions would produce a bogus
difference quotient; those coordinates are detected by comparing the
activation masks and residual signs at theta+h and theta-h, and skipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..qloss import QuantileSpec, batch_loss
from .model import QuantileNet

_REL_ERR_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    max_rel_err: float
    n_checked: int
    n_skipped: int
    worst_param: str

    def __str__(self):
        return (
            f"max rel err {self.max_rel_err:.3e} over {self.n_checked} "
            f"coordinates ({self.n_skipped} skipped near kinks), "
            f"worst at {self.worst_param}"
        )


def _relu_layers(net: QuantileNet):
    layers = [net.stem_relu]
    for block in net.blocks:
        layers.extend((block.relu1, block.relu2))
    layers.extend((net.head_relu, net.out_relu))
    return layers


def _loss_and_signature(net, x, labels, spec, train, dropout_state):
    if dropout_state is not None:
        net._dropout_rng.bit_generator.state = dropout_state
    preds = net.forward(x, train=train).astype(np.float64)
    loss, _ = batch_loss(labels, preds, spec)
    masks = tuple(layer._mask.copy() for layer in _relu_layers(net))
    signs = np.sign(preds - np.asarray(labels, dtype=np.float64)[:, None])
    return loss, (masks, signs)


def _signatures_equal(a, b) -> bool:
    masks_a, signs_a = a
    masks_b, signs_b = b
    if not np.array_equal(signs_a, signs_b):
        return False
    return all(np.array_equal(ma, mb) for ma, mb in zip(masks_a, masks_b))


def jitter_parameters(
    net: QuantileNet, rng: np.random.Generator, scale: float = 0.05
) -> None:
    """Add Gaussian noise to every parameter in place.

    A freshly built network holds its final layer at zero so untrained
    predictions sit exactly at the count offset; every upstream gradient
    is then zero and a finite-difference sweep would compare zero against
    zero. Jitter first so signal flows through the whole composition.
    """
    for _, p in net.parameters():
        p.value = p.value + rng.normal(0.0, scale, size=p.value.shape).astype(net.dtype)


def check_network_gradients(
    net: QuantileNet,
    x: np.ndarray,
    labels: np.ndarray,
    spec: QuantileSpec | None = None,
    n_coords: int = 30,
    rng: np.random.Generator | None = None,
    h: float = 1e-5,
    train: bool = False,
) -> GradCheckResult:
    """Compare analytic and finite-difference gradients at the current weights.

    The network should be built with dtype float64; float32 rounding noise
    at h=1e-5 swamps the comparison otherwise. With train=True the dropout
    generator state is pinned so all evaluations see identical masks.
    """
    if net.dtype != np.float64:
        raise ValueError("gradient check requires a float64 network")
    spec = spec or net.config.quantiles
    rng = rng or np.random.default_rng()
    labels = np.asarray(labels, dtype=np.float64)

    dropout_state = net._dropout_rng.bit_generator.state if train else None

    preds = net.forward(x, train=train).astype(np.float64)
    _, grad = batch_loss(labels, preds, spec)
    net.zero_grad()
    if train and dropout_state is not None:
        # re-run so the cached dropout masks match the pinned state
        net._dropout_rng.bit_generator.state = dropout_state
        preds = net.forward(x, train=train).astype(np.float64)
        _, grad = batch_loss(labels, preds, spec)
        net.zero_grad()
    net.backward(grad)

    params = net.parameters()
    sizes = np.array([p.value.size for _, p in params])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    max_rel = 0.0
    worst = "(all coordinates exact)"
    checked = 0
    skipped = 0
    budget = n_coords * 20  # cap resampling so a pathological point terminates
    while checked < n_coords and budget > 0:
        budget -= 1
        flat = int(rng.integers(total))
        pi = int(np.searchsorted(offsets, flat, side="right")) - 1
        name, param = params[pi]
        idx = flat - offsets[pi]
        orig = param.value.flat[idx]

        param.value.flat[idx] = orig + h
        loss_plus, sig_plus = _loss_and_signature(
            net, x, labels, spec, train, dropout_state
        )
        param.value.flat[idx] = orig - h
        loss_minus, sig_minus = _loss_and_signature(
            net, x, labels, spec, train, dropout_state
        )
        param.value.flat[idx] = orig

        if not _signatures_equal(sig_plus, sig_minus):
            skipped += 1
            continue

        fd = (loss_plus - loss_minus) / (2.0 * h)
        an = float(param.grad.flat[idx])
        rel = abs(fd - an) / max(abs(fd), abs(an), _REL_ERR_FLOOR)
        checked += 1
        if rel > max_rel:
            max_rel = rel
            worst = f"{name}[{idx}]"

    if checked < n_coords:
        raise RuntimeError(
            f"could not find {n_coords} kink-free coordinates "
            f"(got {checked}, skipped {skipped})"
        )
    return GradCheckResult(max_rel, checked, skipped, worst)
