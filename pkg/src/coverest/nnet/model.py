"""The quantile-head regression CNN.

Architecture: 3x3 stem conv over the input channels, 2x2 average pool,
n residual blocks (constant width, dropout after each block), global
average pooling, then two fully connected layers each followed by ReLU.
The K outputs are scaled by a fixed gain so the head weights stay O(1)
while predictions span the raw pixel-count range [0, 2500].

The network regresses count + count_offset rather than the count
itself. With an output ReLU, a node whose target sits at zero operates
exactly on the ReLU kink, and a node whose pre-activation goes negative
for every input stops receiving gradient permanently (observed in
practice: the median node dying mid-training). The offset moves every
node's operating range strictly into the active region; count
estimates subtract it back out and floor at zero. The final-layer bias
initializes to count_offset / output_scale, so an untrained network
predicts exactly zero count everywhere and every node approaches its
target from the living side of the kink.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..qloss import DEFAULT_QUANTILES, QuantileSpec
from ..raster import PATCH_SIZE
from .layers import (
    AvgPool2x2,
    Conv3x3,
    Dropout,
    GlobalAvgPool,
    Linear,
    Parameter,
    ReLU,
    ResidualBlock,
    ScaleShift,
)

# Sub-stream indices for deriving independent RNGs from one model seed.
_INIT_STREAM = 1
_DROPOUT_STREAM = 2


@dataclass
class ModelConfig:
    in_channels: int = 5
    n_blocks: int = 3
    base_width: int = 16
    dropout_rate: float = 0.2
    quantiles: QuantileSpec = field(default_factory=lambda: DEFAULT_QUANTILES)
    head_hidden: int = 32
    output_scale: float = 500.0
    count_offset: float = 500.0

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.n_blocks < 1:
            raise ConfigError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.base_width < 1 or self.head_hidden < 1:
            raise ConfigError("base_width and head_hidden must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(
                f"dropout_rate {self.dropout_rate} outside [0, 1)"
            )
        if self.output_scale <= 0:
            raise ConfigError(f"output_scale must be positive, got {self.output_scale}")
        if self.count_offset < 0:
            raise ConfigError(
                f"count_offset must be nonnegative, got {self.count_offset}"
            )
        if not isinstance(self.quantiles, QuantileSpec):
            self.quantiles = QuantileSpec(tuple(self.quantiles))

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "n_blocks": self.n_blocks,
            "base_width": self.base_width,
            "dropout_rate": self.dropout_rate,
            "quantiles": list(self.quantiles.levels),
            "head_hidden": self.head_hidden,
            "output_scale": self.output_scale,
            "count_offset": self.count_offset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - {
            "in_channels", "n_blocks", "base_width", "dropout_rate",
            "quantiles", "head_hidden", "output_scale", "count_offset",
        }
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "quantiles" in d:
            d["quantiles"] = QuantileSpec(tuple(d["quantiles"]))
        return cls(**d)


class QuantileNet:
    """Residual CNN with one output node per quantile level.

    Inference reads the 0.5 node, so the quantile spec must contain the
    median; violating that is a construction-time error.
    """

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float32):
        self.config = config
        self.rng_seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.median_index = config.quantiles.median_index()
        if self.median_index is None:
            raise ConfigError(
                f"quantile levels {config.quantiles.levels} lack the 0.5 node "
                f"required for median inference"
            )
        self.norm_mean: np.ndarray | None = None
        self.norm_std: np.ndarray | None = None

        w = config.base_width
        self.stem_conv = Conv3x3(config.in_channels, w, dtype)
        self.stem_ss = ScaleShift(w, dtype)
        self.stem_relu = ReLU()
        self.pool = AvgPool2x2()
        self._dropout_rng = np.random.default_rng((self.rng_seed, _DROPOUT_STREAM))
        self.blocks = []
        self.dropouts = []
        for _ in range(config.n_blocks):
            self.blocks.append(ResidualBlock(w, dtype))
            self.dropouts.append(Dropout(config.dropout_rate, self._dropout_rng))
        self.gap = GlobalAvgPool()
        self.fc1 = Linear(w, config.head_hidden, dtype)
        self.head_relu = ReLU()
        self.fc2 = Linear(config.head_hidden, config.quantiles.k, dtype)
        self.out_relu = ReLU()

        init_rng = np.random.default_rng((self.rng_seed, _INIT_STREAM))
        self.stem_conv.init_he(init_rng)
        for block in self.blocks:
            block.init_he(init_rng)
        self.fc1.init_he(init_rng)
        # Zero final-layer weights plus the offset bias make an untrained
        # net output exactly count_offset (count 0) for every input, so no
        # node can start on the dead side of its output ReLU. The zero
        # weights cost nothing: last-layer rows differentiate immediately
        # because each node's loss level weights its gradient differently.
        self.fc2.bias.value = np.full(
            config.quantiles.k,
            config.count_offset / config.output_scale,
            dtype=self.dtype,
        )

        self._forward_ran = False

    # ------------------------------------------------------------------
    # forward / backward
    # ------------------------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        expected = (self.config.in_channels, PATCH_SIZE, PATCH_SIZE)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(
                f"expected batch shaped (B, {expected[0]}, {expected[1]}, "
                f"{expected[2]}), got {tuple(x.shape)}"
            )
        x = np.ascontiguousarray(x, dtype=self.dtype)
        h = self.stem_relu.forward(
            self.stem_ss.forward(self.stem_conv.forward(x, train), train), train
        )
        h = self.pool.forward(h, train)
        for block, drop in zip(self.blocks, self.dropouts):
            h = drop.forward(block.forward(h, train), train)
        g = self.gap.forward(h, train)
        g = self.head_relu.forward(self.fc1.forward(g, train), train)
        out = self.out_relu.forward(self.fc2.forward(g, train), train)
        self._forward_ran = True
        return out * self.dtype.type(self.config.output_scale)

    def backward(self, grad: np.ndarray) -> None:
        """Accumulate parameter gradients for the last recorded forward."""
        if not self._forward_ran:
            raise RuntimeError("backward called before forward")
        g = np.ascontiguousarray(grad, dtype=self.dtype) * self.dtype.type(
            self.config.output_scale
        )
        g = self.fc2.backward(self.out_relu.backward(g))
        g = self.fc1.backward(self.head_relu.backward(g))
        g = self.gap.backward(g)
        for block, drop in zip(reversed(self.blocks), reversed(self.dropouts)):
            g = block.backward(drop.backward(g))
        g = self.pool.backward(g)
        g = self.stem_conv.backward(
            self.stem_ss.backward(self.stem_relu.backward(g))
        )

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def parameters(self) -> list[tuple[str, Parameter]]:
        named: list[tuple[str, Parameter]] = []
        named.extend(("stem.conv." + n, p) for n, p in self.stem_conv.parameters())
        named.extend(("stem.ss." + n, p) for n, p in self.stem_ss.parameters())
        for i, block in enumerate(self.blocks, 1):
            named.extend((f"block{i}.{n}", p) for n, p in block.parameters())
        named.extend(("head.fc1." + n, p) for n, p in self.fc1.parameters())
        named.extend(("head.fc2." + n, p) for n, p in self.fc2.parameters())
        return named

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.grad[...] = 0

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.parameters()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.parameters())
        if set(arrays) != set(own):
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            raise ConfigError(
                f"parameter name mismatch: missing {missing}, unexpected {extra}"
            )
        for name, p in own.items():
            a = np.asarray(arrays[name], dtype=p.value.dtype)
            if a.shape != p.value.shape:
                raise ConfigError(
                    f"parameter {name}: shape {a.shape} != {p.value.shape}"
                )
            p.value = np.ascontiguousarray(a)
            p.grad = np.zeros_like(p.value)

    def reseed_dropout(self, seed) -> None:
        rng = np.random.default_rng(seed)
        self._dropout_rng = rng
        for drop in self.dropouts:
            drop.rng = rng

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------

    def set_normalization(self, mean: np.ndarray, std: np.ndarray) -> None:
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        if mean.shape != (self.config.in_channels,) or std.shape != mean.shape:
            raise ConfigError(
                f"normalization stats must have {self.config.in_channels} entries"
            )
        self.norm_mean = mean
        self.norm_std = std

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        if self.norm_mean is None:
            return raw
        from ..raster import normalize_channels

        return normalize_channels(raw, self.norm_mean, self.norm_std)

    def predict(self, raw_batch: np.ndarray) -> np.ndarray:
        """Eval-mode raw node outputs for a (B, C, 50, 50) batch, shape (B, K).

        Raw means offset-carrying: subtract node_counts to get counts.
        """
        x = self.normalize(np.asarray(raw_batch, dtype=self.dtype))
        return self.forward(x, train=False).astype(np.float64)

    def node_counts(self, outputs: np.ndarray) -> np.ndarray:
        """Convert raw node outputs to count estimates (floor at zero)."""
        return np.maximum(
            np.asarray(outputs, dtype=np.float64) - self.config.count_offset, 0.0
        )

    def predict_median(self, patch: np.ndarray) -> float:
        """Count estimate for one raw (C, 50, 50) patch from the 0.5 node."""
        patch = np.asarray(patch)
        if patch.ndim != 3:
            raise ValueError(
                f"expected one patch shaped (C, {PATCH_SIZE}, {PATCH_SIZE}), "
                f"got {tuple(patch.shape)}"
            )
        out = self.predict(patch[None])
        return float(self.node_counts(out)[0, self.median_index])
