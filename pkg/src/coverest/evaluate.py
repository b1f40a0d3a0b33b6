"""Patch- and tile-level evaluation, plus temporal growth rates.

Patch metrics report both squared Pearson correlation and the coefficient
of determination; the two agree only for a perfectly calibrated fit, so
reports carry them under separate names. Tile coverage aggregates the raw
(possibly fractional) patch count estimates; rounding them first would
bias low-coverage tiles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, GeometryError
from .ioutil import write_json
from .nnet import QuantileNet
from .raster import PATCH_PIXELS, BinaryMask
from .synthdata import SyntheticDataset


@dataclass
class MetricsReport:
    mae: float
    pearson_r2: float
    r2_determination: float
    n_samples: int
    pearson_defined: bool = True

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "pearson_r2": self.pearson_r2,
            "r2_determination": self.r2_determination,
            "n_samples": self.n_samples,
            "pearson_defined": self.pearson_defined,
        }


def patch_metrics(predictions, labels) -> MetricsReport:
    """MAE plus both r-squared variants over per-patch count estimates."""
    pred = np.asarray(predictions, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.float64)
    if pred.shape != lab.shape or pred.ndim != 1:
        raise ConfigError(
            f"predictions {pred.shape} and labels {lab.shape} must be "
            f"equal-length 1-D arrays"
        )
    if len(pred) == 0:
        raise ConfigError("cannot compute metrics on zero samples")
    mae = float(np.mean(np.abs(pred - lab)))

    dp = pred - pred.mean()
    dl = lab - lab.mean()
    ss_pred = float(dp @ dp)
    ss_lab = float(dl @ dl)
    defined = ss_pred > 0.0 and ss_lab > 0.0
    if defined:
        r = float(dp @ dl) / math.sqrt(ss_pred * ss_lab)
        pearson_r2 = r * r
    else:
        pearson_r2 = float("nan")
    if ss_lab > 0.0:
        ss_res = float(np.sum((pred - lab) ** 2))
        r2_det = 1.0 - ss_res / ss_lab
    else:
        r2_det = float("nan")
    return MetricsReport(
        mae=mae,
        pearson_r2=pearson_r2,
        r2_determination=r2_det,
        n_samples=len(pred),
        pearson_defined=defined,
    )


def tile_coverage(patch_counts, tile_height: int, tile_width: int) -> float:
    """Percentage of tile pixels that are building: sum(y_i) / (H*W) * 100."""
    counts = np.asarray(patch_counts, dtype=np.float64)
    if tile_height <= 0 or tile_width <= 0:
        raise GeometryError(
            f"tile dimensions must be positive, got {tile_height}x{tile_width}"
        )
    if (counts < 0).any():
        raise GeometryError("patch counts must be nonnegative")
    total = float(counts.sum())
    area = tile_height * tile_width
    if total > area:
        raise GeometryError(
            f"patch counts sum to {total}, exceeding tile area {area}"
        )
    return total / area * 100.0


def tile_abs_error(pred_cov: float, true_cov: float) -> float:
    """Absolute difference of two coverage percentages, in points."""
    for name, v in (("pred_cov", pred_cov), ("true_cov", true_cov)):
        if not 0.0 <= v <= 100.0:
            raise ConfigError(f"{name} {v} outside [0, 100]")
    return abs(pred_cov - true_cov)


def coverage_from_mask(mask: BinaryMask) -> float:
    """Coverage percentage of a binary building mask."""
    return mask.count() / (mask.height * mask.width) * 100.0


def growth_rate(coverage_t1: float, coverage_t2: float) -> float | None:
    """Percent change between two epochs; None when the base is zero."""
    if coverage_t1 < 0 or coverage_t2 < 0:
        raise ConfigError("coverage percentages must be nonnegative")
    if coverage_t1 == 0:
        return None
    return (coverage_t2 - coverage_t1) / coverage_t1 * 100.0


@dataclass
class TileReport:
    tile_id: str
    n_patches: int
    patch_predictions: list[float]
    coverage_pred: float
    coverage_true: float
    abs_error: float

    def __post_init__(self):
        for name, v in (
            ("coverage_pred", self.coverage_pred),
            ("coverage_true", self.coverage_true),
        ):
            if not 0.0 <= v <= 100.0:
                raise ConfigError(f"{name} {v} outside [0, 100]")

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "n_patches": self.n_patches,
            "coverage_pred": self.coverage_pred,
            "coverage_true": self.coverage_true,
            "abs_error": self.abs_error,
        }


@dataclass
class EvalResult:
    patch_report: MetricsReport
    tile_reports: list[TileReport]
    mean_tile_abs_error: float
    quantile_crossing_frac: float
    labels: np.ndarray
    predictions: np.ndarray  # median node, clipped to the valid count range
    meta: list[dict]

    def summary_dict(self) -> dict:
        return {
            "patch": self.patch_report.to_dict(),
            "n_tiles": len(self.tile_reports),
            "mean_tile_abs_error": self.mean_tile_abs_error,
            "quantile_crossing_frac": self.quantile_crossing_frac,
        }


def evaluate_model(
    net: QuantileNet,
    dataset: SyntheticDataset,
    tile_ids: list[str],
    batch_size: int = 64,
    drop_channel: int | None = None,
) -> EvalResult:
    """Score the median-node predictions on whole tiles.

    Count estimates are clipped to [0, patch area] before any reporting:
    a count outside the physical range is trivially improvable, and the
    tile aggregation formula requires sums within the tile area. For a
    channel-drop ablation pass the dropped index so inputs match the net.
    """
    if not tile_ids:
        raise ConfigError("evaluate_model needs at least one tile id")

    labels_all = []
    preds_all = []
    meta_all = []
    tile_reports = []
    crossings = 0
    n_patches_total = 0
    for tid in tile_ids:
        x, y, meta = dataset.load_patches([tid])
        if drop_channel is not None:
            x = np.delete(x, drop_channel, axis=1)
        if net.config.in_channels != x.shape[1]:
            raise ConfigError(
                f"model expects {net.config.in_channels} channels, "
                f"got {x.shape[1]}; pass drop_channel for ablated models"
            )
        out = _predict_batched(net, x, batch_size)
        if net.config.quantiles.k >= 2:
            crossings += int((np.diff(out, axis=1) < 0).any(axis=1).sum())
        n_patches_total += len(y)
        med = np.clip(
            net.node_counts(out)[:, net.median_index], 0.0, float(PATCH_PIXELS)
        )

        tile = dataset.load_tile(tid)
        h, w = tile.mask.height, tile.mask.width
        cov_pred = tile_coverage(med, h, w)
        cov_true = tile_coverage(y, h, w)
        tile_reports.append(
            TileReport(
                tile_id=tid,
                n_patches=len(y),
                patch_predictions=[float(v) for v in med],
                coverage_pred=cov_pred,
                coverage_true=cov_true,
                abs_error=tile_abs_error(cov_pred, cov_true),
            )
        )
        labels_all.append(y)
        preds_all.append(med)
        meta_all.extend(meta)

    labels = np.concatenate(labels_all)
    preds = np.concatenate(preds_all)
    return EvalResult(
        patch_report=patch_metrics(preds, labels),
        tile_reports=tile_reports,
        mean_tile_abs_error=float(
            np.mean([t.abs_error for t in tile_reports])
        ),
        quantile_crossing_frac=crossings / n_patches_total,
        labels=labels,
        predictions=preds,
        meta=meta_all,
    )


def _predict_batched(net: QuantileNet, x: np.ndarray, batch_size: int) -> np.ndarray:
    outs = [
        net.predict(x[i : i + batch_size]) for i in range(0, len(x), batch_size)
    ]
    return np.concatenate(outs, axis=0)


def predict_counts(
    net: QuantileNet,
    x: np.ndarray,
    batch_size: int = 64,
    drop_channel: int | None = None,
) -> np.ndarray:
    """Clipped median-node count estimates for raw patches, no labels needed."""
    if drop_channel is not None:
        x = np.delete(x, drop_channel, axis=1)
    if len(x) == 0:
        return np.zeros((0,), dtype=np.float64)
    if net.config.in_channels != x.shape[1]:
        raise ConfigError(
            f"model expects {net.config.in_channels} channels, "
            f"got {x.shape[1]}; pass drop_channel for ablated models"
        )
    out = _predict_batched(net, x, batch_size)
    return np.clip(
        net.node_counts(out)[:, net.median_index], 0.0, float(PATCH_PIXELS)
    )


# ----------------------------------------------------------------------
# report files
# ----------------------------------------------------------------------


def write_patch_csv(result: EvalResult, path: str | Path) -> None:
    lines = ["tile_id,offset_row,offset_col,label,prediction"]
    for m, y, p in zip(result.meta, result.labels, result.predictions):
        r, c = m["offset"]
        lines.append(f"{m['tile_id']},{r},{c},{y!r},{p!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_tile_csv(result: EvalResult, path: str | Path) -> None:
    lines = ["tile_id,n_patches,coverage_pred,coverage_true,abs_error"]
    for t in result.tile_reports:
        lines.append(
            f"{t.tile_id},{t.n_patches},{t.coverage_pred!r},"
            f"{t.coverage_true!r},{t.abs_error!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_scatter_csv(result: EvalResult, path: str | Path) -> None:
    """Ground truth vs prediction pairs for external plotting."""
    lines = ["label,prediction"]
    for y, p in zip(result.labels, result.predictions):
        lines.append(f"{y!r},{p!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_summary_json(result: EvalResult, path: str | Path) -> None:
    write_json(path, result.summary_dict())
