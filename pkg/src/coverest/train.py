"""Splitting, the training loop, checkpoints, and the ablation harness.

All randomness derives from the run seed through fixed stream ids, one per
concern, so two runs with the same config produce byte-identical traces
and checkpoints:

    (seed, 0) tile split shuffle     (seed, 2) per-epoch batch shuffle
    (seed, 1) weight init            (seed, 3) dropout masks
    (seed, 4) validation carve
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, TrainingDiverged
from .ioutil import canonical_json
from .nnet import ModelConfig, Parameter, QuantileNet
from .qloss import QuantileSpec, batch_loss
from .raster import channel_stats, normalize_channels
from .synthdata import SyntheticDataset

_SPLIT_STREAM = 0
_SHUFFLE_STREAM = 2
_DROPOUT_STREAM = 3
_VAL_STREAM = 4

CHECKPOINT_FORMAT = "coverest-ckpt-v1"

TEST_FRACTION = 0.1
VAL_FRACTION = 0.1


# ----------------------------------------------------------------------
# experiment settings and splits
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSetting:
    """holistic | intra:<tag> (one region) | exclusive:<tag> (held-out region)."""

    variant: str = "holistic"
    tag: str | None = None

    def __post_init__(self):
        if self.variant not in ("holistic", "intra", "exclusive"):
            raise ConfigError(
                f"unknown setting variant {self.variant!r}; "
                f"expected holistic, intra, or exclusive"
            )
        if self.variant == "holistic" and self.tag is not None:
            raise ConfigError("holistic setting takes no region tag")
        if self.variant != "holistic" and not self.tag:
            raise ConfigError(f"{self.variant} setting requires a region tag")

    @classmethod
    def parse(cls, text: str) -> "ExperimentSetting":
        if text == "holistic":
            return cls("holistic")
        for prefix in ("intra", "exclusive"):
            if text.startswith(prefix + ":"):
                return cls(prefix, text[len(prefix) + 1 :])
        raise ConfigError(
            f"cannot parse setting {text!r}; "
            f"expected holistic, intra:<tag>, or exclusive:<tag>"
        )

    def __str__(self):
        return self.variant if self.tag is None else f"{self.variant}:{self.tag}"


@dataclass
class Splits:
    train_ids: list[str]
    test_ids: list[str]

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ConfigError(f"split leakage: {sorted(overlap)} in both sets")


def build_splits(manifest: dict, setting: ExperimentSetting, seed: int) -> Splits:
    """Deterministic tile-granularity split for the given experiment setting."""
    tiles = manifest["tiles"]
    if not tiles:
        raise ConfigError("manifest lists no tiles")
    by_tag: dict[str, list[str]] = {}
    for entry in tiles:
        by_tag.setdefault(entry["region_tag"], []).append(entry["id"])
    available = sorted(by_tag)

    def check_tag(tag):
        if tag not in by_tag:
            raise ConfigError(
                f"region tag {tag!r} not in dataset; available: {available}"
            )

    rng = np.random.default_rng((seed, _SPLIT_STREAM))
    if setting.variant == "exclusive":
        check_tag(setting.tag)
        train = [e["id"] for e in tiles if e["region_tag"] != setting.tag]
        test = by_tag[setting.tag]
    else:
        if setting.variant == "intra":
            check_tag(setting.tag)
            pool = list(by_tag[setting.tag])
        else:
            pool = [e["id"] for e in tiles]
        pool = [pool[i] for i in rng.permutation(len(pool))]
        n_test = int(round(TEST_FRACTION * len(pool)))
        test = pool[:n_test]
        train = pool[n_test:]
    if not train or not test:
        raise ConfigError(
            f"setting {setting} yields an empty split "
            f"(train {len(train)}, test {len(test)} tiles)"
        )
    return Splits(train_ids=train, test_ids=test)


def carve_validation(train_ids: list[str], seed: int) -> tuple[list[str], list[str]]:
    """Take ~10% of training tiles for the per-epoch loss trace."""
    if len(train_ids) < 2:
        return list(train_ids), []
    rng = np.random.default_rng((seed, _VAL_STREAM))
    order = [train_ids[i] for i in rng.permutation(len(train_ids))]
    n_val = max(1, int(round(VAL_FRACTION * len(order))))
    return order[n_val:], order[:n_val]


def audit_split(manifest: dict, splits: Splits, setting: ExperimentSetting) -> dict:
    """Recount split membership per region and surface any leakage.

    Independent of build_splits on purpose: it re-derives regions from
    the manifest so a bug there cannot hide. 'overlap' and
    'held_out_in_train' are empty lists whenever the split is sound.
    """
    region = {e["id"]: e["region_tag"] for e in manifest["tiles"]}

    def counts(ids):
        out: dict[str, int] = {}
        for tid in ids:
            out[region[tid]] = out.get(region[tid], 0) + 1
        return dict(sorted(out.items()))

    leaked: list[str] = []
    if setting.variant == "exclusive":
        leaked = sorted(t for t in splits.train_ids if region[t] == setting.tag)
    return {
        "setting": str(setting),
        "n_train_tiles": len(splits.train_ids),
        "n_test_tiles": len(splits.test_ids),
        "train_regions": counts(splits.train_ids),
        "test_regions": counts(splits.test_ids),
        "overlap": sorted(set(splits.train_ids) & set(splits.test_ids)),
        "held_out_in_train": leaked,
    }


# ----------------------------------------------------------------------
# config and ablations
# ----------------------------------------------------------------------

_ABLATIONS = ("none", "single-node", "drop-channel")


@dataclass
class TrainConfig:
    seed: int
    learning_rate: float = 0.002
    epochs: int = 60
    batch_size: int = 64
    optimizer: str = "adam"
    setting: ExperimentSetting = field(default_factory=ExperimentSetting)
    ablation: str = "none"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(
                f"optimizer must be adam or sgd, got {self.optimizer!r}"
            )
        if isinstance(self.setting, str):
            self.setting = ExperimentSetting.parse(self.setting)
        parse_ablation(self.ablation)  # validate early

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer,
            "setting": str(self.setting),
            "ablation": self.ablation,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {
            "seed", "learning_rate", "epochs", "batch_size",
            "optimizer", "setting", "ablation", "model",
        }
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in d:
            raise ConfigError("config is missing required key 'seed'")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


def parse_ablation(text: str) -> tuple[str, int | None]:
    """'none' | 'single-node' | 'drop-channel:<i>' -> (kind, channel index)."""
    if text == "none":
        return "none", None
    if text in ("single-node", "single_node"):
        return "single-node", None
    for prefix in ("drop-channel:", "drop_channel:"):
        if text.startswith(prefix):
            raw = text[len(prefix) :]
            try:
                idx = int(raw)
            except ValueError:
                raise ConfigError(f"bad drop-channel index {raw!r}") from None
            if idx < 0:
                raise ConfigError(f"drop-channel index must be >= 0, got {idx}")
            return "drop-channel", idx
    raise ConfigError(
        f"unknown ablation {text!r}; expected one of "
        f"none, single-node, drop-channel:<i>"
    )


def resolve_ablation(
    ablation: str, model: ModelConfig
) -> tuple[ModelConfig, int | None]:
    """Apply the ablation to a model config; returns (config, dropped channel)."""
    kind, idx = parse_ablation(ablation)
    d = model.to_dict()
    if kind == "single-node":
        d["quantiles"] = [0.5]
        return ModelConfig.from_dict(d), None
    if kind == "drop-channel":
        if idx >= model.in_channels:
            raise ConfigError(
                f"drop-channel index {idx} out of range for "
                f"{model.in_channels} input channels"
            )
        d["in_channels"] = model.in_channels - 1
        return ModelConfig.from_dict(d), idx
    return ModelConfig.from_dict(d), None


# ----------------------------------------------------------------------
# optimizers
# ----------------------------------------------------------------------


class Adam:
    def __init__(
        self,
        params: list[tuple[str, Parameter]],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for _, p in params]
        self._v = [np.zeros_like(p.value) for _, p in params]

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for (_, p), m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


class SGD:
    def __init__(self, params: list[tuple[str, Parameter]], lr: float):
        self.params = params
        self.lr = lr

    def step(self):
        for _, p in self.params:
            p.value -= self.lr * p.grad


def make_optimizer(name: str, params, lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ConfigError(f"unknown optimizer {name!r}")


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------


@dataclass
class TrainResult:
    net: QuantileNet
    trace: list[dict]
    splits: Splits
    val_ids: list[str]
    train_config: TrainConfig
    model_config: ModelConfig  # after ablation
    dropped_channel: int | None


def _eval_loss(
    net: QuantileNet, x: np.ndarray, y: np.ndarray, spec: QuantileSpec, batch: int
) -> float:
    if len(y) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(y), batch):
        xb = x[i : i + batch]
        out = net.forward(xb, train=False).astype(np.float64)
        loss, _ = batch_loss(y[i : i + batch], out, spec)
        total += loss * len(xb)
    return total / len(y)


def fit_arrays(
    net: QuantileNet,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    cfg: TrainConfig,
) -> list[dict]:
    """Run the minibatch loop on pre-normalized arrays; returns the loss trace.

    Inputs must already be channels-first float32 and normalized; the nets'
    dropout stream is reseeded here so identical configs replay exactly.
    Labels are lifted by the model's count_offset to match its raw output
    space, so trace losses are in that lifted space too.
    """
    spec = net.config.quantiles
    y_train = np.asarray(y_train, dtype=np.float64) + net.config.count_offset
    y_val = np.asarray(y_val, dtype=np.float64) + net.config.count_offset
    net.reseed_dropout((cfg.seed, _DROPOUT_STREAM))
    shuffle_rng = np.random.default_rng((cfg.seed, _SHUFFLE_STREAM))
    opt = make_optimizer(cfg.optimizer, net.parameters(), cfg.learning_rate)
    n = len(y_train)
    trace = []
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        run_loss = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            xb = x_train[idx]
            out = net.forward(xb, train=True).astype(np.float64)
            loss, grad = batch_loss(y_train[idx], out, spec)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch=epoch, batch=bi, value=loss)
            net.zero_grad()
            net.backward(grad.astype(net.dtype))
            opt.step()
            run_loss += loss * len(idx)
        trace.append(
            {
                "epoch": epoch,
                "train_loss": run_loss / n,
                "val_loss": _eval_loss(net, x_val, y_val, spec, cfg.batch_size),
            }
        )
    return trace


def train_model(
    dataset: SyntheticDataset,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
) -> TrainResult:
    """Split, normalize, and fit; returns the trained net and its trace."""
    model_cfg = model_cfg or train_cfg.model
    abl_cfg, drop_idx = resolve_ablation(train_cfg.ablation, model_cfg)

    splits = build_splits(dataset.manifest, train_cfg.setting, train_cfg.seed)
    fit_ids, val_ids = carve_validation(splits.train_ids, train_cfg.seed)

    x_tr, y_tr, _ = dataset.load_patches(fit_ids)
    x_val, y_val, _ = dataset.load_patches(val_ids) if val_ids else (
        np.zeros((0,) + x_tr.shape[1:], np.float32),
        np.zeros((0,), np.float64),
        [],
    )
    if drop_idx is not None:
        x_tr = np.delete(x_tr, drop_idx, axis=1)
        x_val = np.delete(x_val, drop_idx, axis=1)

    mean, std = channel_stats(x_tr)
    x_tr = normalize_channels(x_tr, mean, std).astype(np.float32)
    if len(y_val):
        x_val = normalize_channels(x_val, mean, std).astype(np.float32)

    net = QuantileNet(abl_cfg, seed=train_cfg.seed)
    net.set_normalization(mean, std)
    trace = fit_arrays(net, x_tr, y_tr, x_val, y_val, train_cfg)
    return TrainResult(
        net=net,
        trace=trace,
        splits=splits,
        val_ids=val_ids,
        train_config=train_cfg,
        model_config=abl_cfg,
        dropped_channel=drop_idx,
    )


def write_trace_csv(trace: list[dict], path: str | Path) -> None:
    """Loss trace as CSV; float repr keeps byte-identical reproducibility."""
    lines = ["epoch,train_loss,val_loss"]
    for row in trace:
        lines.append(f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


def save_checkpoint(net: QuantileNet, path: str | Path, meta: dict | None = None):
    """Single file: 8-byte little-endian header length, JSON header, f32 blob."""
    params = net.parameters()
    table = []
    offset = 0
    chunks = []
    for name, p in params:
        raw = np.ascontiguousarray(p.value, dtype="<f4").tobytes()
        table.append(
            {
                "name": name,
                "shape": list(p.value.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": CHECKPOINT_FORMAT,
        "model_config": net.config.to_dict(),
        "seed": net.rng_seed,
        "norm_mean": None if net.norm_mean is None else net.norm_mean.tolist(),
        "norm_std": None if net.norm_std is None else net.norm_std.tolist(),
        "params": table,
        "meta": meta or {},
    }
    header_bytes = canonical_json(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for chunk in chunks:
            f.write(chunk)


def load_checkpoint(path: str | Path) -> tuple[QuantileNet, dict]:
    """Rebuild the net from a checkpoint; returns (net, header metadata)."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataFormatError(f"checkpoint {path}: file too short for header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + header_len:
        raise DataFormatError(
            f"checkpoint {path}: header claims {header_len} bytes, "
            f"only {len(raw) - 8} present"
        )
    header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(
            f"checkpoint {path}: format {header.get('format')!r}, "
            f"expected {CHECKPOINT_FORMAT!r}"
        )
    blob = raw[8 + header_len :]
    expected = sum(entry["nbytes"] for entry in header["params"])
    if len(blob) != expected:
        raise DataFormatError(
            f"checkpoint {path}: blob truncated, expected {expected} bytes, "
            f"got {len(blob)}"
        )
    config = ModelConfig.from_dict(header["model_config"])
    net = QuantileNet(config, seed=header["seed"])
    arrays = {}
    for entry in header["params"]:
        start = entry["offset"]
        count = entry["nbytes"] // 4
        a = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = a.reshape(entry["shape"])
    net.load_param_arrays(arrays)
    if header["norm_mean"] is not None:
        net.set_normalization(
            np.asarray(header["norm_mean"]), np.asarray(header["norm_std"])
        )
    return net, header
