"""Minimal layer zoo with hand-written backward passes.

Every layer caches what its backward pass needs during forward; calling
backward before forward is a usage error. Convolutions are 3x3, stride 1,
pad 1 (shape-preserving) via im2col + GEMM, which is the only variant the
network needs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Parameter:
    """A learnable array with its accumulated gradient."""

    def __init__(self, value: np.ndarray):
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


class Layer:
    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> list[tuple[str, Parameter]]:
        return []

    def _require_cache(self, cache, name: str):
        if cache is None:
            raise RuntimeError(f"{name}.backward called before forward")


class Conv3x3(Layer):
    """3x3 cross-correlation, stride 1, pad 1, no bias (a shift follows)."""

    def __init__(self, in_channels: int, out_channels: int, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = Parameter(
            np.zeros((out_channels, in_channels, 3, 3), dtype=dtype)
        )
        self._cols = None
        self._x_shape = None

    def init_he(self, rng: np.random.Generator):
        fan_in = self.in_channels * 9
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=self.weight.shape)
        self.weight.value = w.astype(self.weight.value.dtype)

    def forward(self, x, train=False):
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(
                f"conv expected {self.in_channels} input channels, got {c}"
            )
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B,C,H,W,3,3)
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(
            c * 9, b * h * w
        )
        wmat = self.weight.value.reshape(self.out_channels, c * 9)
        out = wmat @ cols
        self._cols = cols
        self._x_shape = x.shape
        return out.reshape(self.out_channels, b, h, w).transpose(1, 0, 2, 3)

    def backward(self, grad):
        self._require_cache(self._cols, "Conv3x3")
        b, c, h, w = self._x_shape
        gmat = np.ascontiguousarray(grad.transpose(1, 0, 2, 3)).reshape(
            self.out_channels, b * h * w
        )
        self.weight.grad += (gmat @ self._cols.T).reshape(self.weight.shape)
        dcols = self.weight.value.reshape(self.out_channels, c * 9).T @ gmat
        dcols = dcols.reshape(c, 3, 3, b, h, w)
        dxp = np.zeros((b, c, h + 2, w + 2), dtype=grad.dtype)
        for ki in range(3):
            for kj in range(3):
                dxp[:, :, ki : ki + h, kj : kj + w] += dcols[
                    :, ki, kj
                ].transpose(1, 0, 2, 3)
        return dxp[:, :, 1 : h + 1, 1 : w + 1]

    def parameters(self):
        return [("w", self.weight)]


class ScaleShift(Layer):
    """Per-channel learnable y = gamma[c] * x + beta[c].

    Stands in for batch norm: same affine expressiveness, but free of
    cross-sample coupling, so per-sample gradients stay exact.
    """

    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return x * self.gamma.value[None, :, None, None] + self.beta.value[
            None, :, None, None
        ]

    def backward(self, grad):
        self._require_cache(self._x, "ScaleShift")
        self.gamma.grad += (grad * self._x).sum(axis=(0, 2, 3))
        self.beta.grad += grad.sum(axis=(0, 2, 3))
        return grad * self.gamma.value[None, :, None, None]

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class ReLU(Layer):
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""

    def __init__(self):
        self._mask = None

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, grad):
        self._require_cache(self._mask, "ReLU")
        return grad * self._mask


class Dropout(Layer):
    """Inverted dropout: survivors scaled by 1/(1-p), eval is identity."""

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate {rate} outside [0, 1)")
        self.rate = rate
        self.rng = rng
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._mask = 1.0
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = keep.astype(x.dtype) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad):
        self._require_cache(self._mask, "Dropout")
        return grad * self._mask


class AvgPool2x2(Layer):
    """2x2 average pooling with stride 2; spatial dims must be even."""

    def __init__(self):
        self._x_shape = None

    def forward(self, x, train=False):
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"avg pool needs even spatial dims, got {h}x{w}")
        self._x_shape = x.shape
        return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, grad):
        self._require_cache(self._x_shape, "AvgPool2x2")
        b, c, h, w = self._x_shape
        g = grad / 4.0
        return np.broadcast_to(
            g[:, :, :, None, :, None], (b, c, h // 2, 2, w // 2, 2)
        ).reshape(b, c, h, w)


class GlobalAvgPool(Layer):
    """(B, C, H, W) -> (B, C) spatial mean."""

    def __init__(self):
        self._x_shape = None

    def forward(self, x, train=False):
        self._x_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        self._require_cache(self._x_shape, "GlobalAvgPool")
        b, c, h, w = self._x_shape
        return np.broadcast_to(
            grad[:, :, None, None] / (h * w), self._x_shape
        ).astype(grad.dtype)


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(np.zeros((out_features, in_features), dtype=dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))
        self._x = None

    def init_he(self, rng: np.random.Generator, bias_value: float = 0.0):
        std = np.sqrt(2.0 / self.in_features)
        dtype = self.weight.value.dtype
        self.weight.value = rng.normal(0.0, std, size=self.weight.shape).astype(dtype)
        self.bias.value = np.full(self.out_features, bias_value, dtype=dtype)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(
                f"linear expected (B, {self.in_features}), got {x.shape}"
            )
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad):
        self._require_cache(self._x, "Linear")
        self.weight.grad += grad.T @ self._x
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value

    def parameters(self):
        return [("w", self.weight), ("b", self.bias)]


class ResidualBlock(Layer):
    """Two (conv3x3 -> scale/shift -> relu) units plus an identity skip."""

    def __init__(self, channels: int, dtype=np.float32):
        self.conv1 = Conv3x3(channels, channels, dtype)
        self.ss1 = ScaleShift(channels, dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv3x3(channels, channels, dtype)
        self.ss2 = ScaleShift(channels, dtype)
        self.relu2 = ReLU()

    def init_he(self, rng: np.random.Generator):
        self.conv1.init_he(rng)
        self.conv2.init_he(rng)

    def forward(self, x, train=False):
        t = self.relu1.forward(self.ss1.forward(self.conv1.forward(x, train), train), train)
        u = self.relu2.forward(self.ss2.forward(self.conv2.forward(t, train), train), train)
        return u + x

    def backward(self, grad):
        g = self.relu2.backward(grad)
        g = self.conv2.backward(self.ss2.backward(g))
        g = self.relu1.backward(g)
        g = self.conv1.backward(self.ss1.backward(g))
        return g + grad

    def parameters(self):
        out = []
        for sub, layer in (
            ("conv1", self.conv1),
            ("ss1", self.ss1),
            ("conv2", self.conv2),
            ("ss2", self.ss2),
        ):
            out.extend((f"{sub}.{n}", p) for n, p in layer.parameters())
        return out
