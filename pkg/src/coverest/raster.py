"""Raster data model and deterministic geometry/label operations.

In-memory layout is (height, width, channels) float32, matching the
row-major channel-interleaved blob of the on-disk CRAS container.
Patch inputs handed to the model are channels-first (C, 50, 50).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, GeometryError

PATCH_SIZE = 50
PATCH_PIXELS = PATCH_SIZE * PATCH_SIZE

# Working ground-sample distance of model inputs, meters per pixel.
GSD_M = 10.0

# Input channel order expected by the model.
CHANNEL_NAMES = ("s1_mean", "red", "green", "blue", "nir")
N_CHANNELS = len(CHANNEL_NAMES)

CRAS_MAGIC = "CRAS1"


@dataclass
class Raster:
    """Multi-channel 2-D grid of float32 values with pixel-size metadata."""

    height: int
    width: int
    channels: int
    gsd: float
    data: np.ndarray  # (height, width, channels) float32
    region_tag: str = ""

    def __post_init__(self):
        if self.gsd <= 0:
            raise GeometryError(f"gsd must be positive, got {self.gsd}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        expected = (self.height, self.width, self.channels)
        if self.data.shape != expected:
            raise GeometryError(
                f"raster data shape {self.data.shape} != {expected}"
            )

    def channel(self, c: int) -> np.ndarray:
        return self.data[:, :, c]


@dataclass
class BinaryMask:
    """Per-pixel {0,1} grid; 1 marks a building pixel."""

    height: int
    width: int
    values: np.ndarray  # (height, width) uint8 in {0,1}
    gsd: float

    def __post_init__(self):
        if self.gsd <= 0:
            raise GeometryError(f"gsd must be positive, got {self.gsd}")
        self.values = np.ascontiguousarray(self.values, dtype=np.uint8)
        if self.values.shape != (self.height, self.width):
            raise GeometryError(
                f"mask shape {self.values.shape} != {(self.height, self.width)}"
            )
        bad = (self.values != 0) & (self.values != 1)
        if bad.any():
            raise DataFormatError("mask contains values other than 0 and 1")

    def count(self) -> int:
        return int(self.values.sum())


@dataclass
class Patch:
    """One 5x50x50 model input paired with its building-pixel count."""

    input: np.ndarray  # (N_CHANNELS, PATCH_SIZE, PATCH_SIZE) float32
    label: int
    tile_id: str
    offset: tuple[int, int]  # (row, col) within the parent tile
    region_tag: str = ""

    def __post_init__(self):
        self.input = np.ascontiguousarray(self.input, dtype=np.float32)
        expected = (N_CHANNELS, PATCH_SIZE, PATCH_SIZE)
        if self.input.shape != expected:
            raise GeometryError(
                f"patch input shape {self.input.shape} != {expected}"
            )
        if not 0 <= self.label <= PATCH_PIXELS:
            raise GeometryError(
                f"patch label {self.label} outside [0, {PATCH_PIXELS}]"
            )


@dataclass
class Tile:
    """A larger raster plus its exact building mask on the same pixel grid."""

    id: str
    raster: Raster
    mask: BinaryMask

    def __post_init__(self):
        if (self.raster.height, self.raster.width) != (
            self.mask.height,
            self.mask.width,
        ):
            raise GeometryError(
                f"tile {self.id}: raster {self.raster.height}x{self.raster.width} "
                f"and mask {self.mask.height}x{self.mask.width} differ"
            )

    @property
    def region_tag(self) -> str:
        return self.raster.region_tag


def downsample_and_binarize(confidence: Raster, target_gsd: float) -> BinaryMask:
    """Reduce a fine-resolution confidence raster to a coarse binary mask.

    Each target pixel is the mean of its source block, then thresholded
    strictly above zero. For nonnegative confidences this marks a pixel
    as building iff any source pixel in the block is positive.
    """
    if confidence.channels != 1:
        raise GeometryError(
            f"expected single-channel confidence raster, got {confidence.channels}"
        )
    ratio = target_gsd / confidence.gsd
    r = int(round(ratio))
    if r < 1 or abs(ratio - r) > 1e-9:
        raise GeometryError(
            f"target gsd {target_gsd} is not an integer multiple of source gsd "
            f"{confidence.gsd}"
        )
    if confidence.height % r or confidence.width % r:
        raise GeometryError(
            f"raster {confidence.height}x{confidence.width} not divisible by "
            f"downsample ratio {r}"
        )
    values = confidence.channel(0)
    if (values < 0).any():
        raise GeometryError("confidence raster contains negative values")
    h, w = confidence.height // r, confidence.width // r
    block_mean = values.reshape(h, r, w, r).mean(axis=(1, 3), dtype=np.float64)
    return BinaryMask(
        height=h,
        width=w,
        values=(block_mean > 0).astype(np.uint8),
        gsd=target_gsd,
    )


def count_building_pixels(
    mask: BinaryMask, window: tuple[int, int, int, int]
) -> int:
    """Count 1-pixels inside window = (row, col, height, width)."""
    row, col, h, w = window
    if h < 0 or w < 0:
        raise GeometryError(f"window {window} has negative extent")
    if row < 0 or col < 0 or row + h > mask.height or col + w > mask.width:
        raise GeometryError(
            f"window {window} outside mask bounds "
            f"{mask.height}x{mask.width}"
        )
    return int(mask.values[row : row + h, col : col + w].sum())


def patch_windows(height: int, width: int) -> list[tuple[int, int]]:
    """Top-left corners of non-overlapping 50x50 windows, row-major from (0,0).

    Windows that would extend past the boundary are discarded.
    """
    return [
        (r, c)
        for r in range(0, height - PATCH_SIZE + 1, PATCH_SIZE)
        for c in range(0, width - PATCH_SIZE + 1, PATCH_SIZE)
    ]


def crop_into_patches(tile: Tile) -> list[Patch]:
    """Split a tile into labeled 50x50 patches; remainders are discarded."""
    if tile.raster.channels != N_CHANNELS:
        raise GeometryError(
            f"tile {tile.id} has {tile.raster.channels} channels, "
            f"expected {N_CHANNELS}"
        )
    corners = patch_windows(tile.raster.height, tile.raster.width)
    if not corners:
        warnings.warn(
            f"tile {tile.id} ({tile.raster.height}x{tile.raster.width}) is "
            f"smaller than {PATCH_SIZE}x{PATCH_SIZE}; no patches produced",
            stacklevel=2,
        )
        return []
    patches = []
    for row, col in corners:
        window = tile.raster.data[
            row : row + PATCH_SIZE, col : col + PATCH_SIZE, :
        ]
        label = count_building_pixels(
            tile.mask, (row, col, PATCH_SIZE, PATCH_SIZE)
        )
        patches.append(
            Patch(
                input=window.transpose(2, 0, 1),
                label=label,
                tile_id=tile.id,
                offset=(row, col),
                region_tag=tile.raster.region_tag,
            )
        )
    return patches


def channel_stats(inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over a batch shaped (N, C, H, W). Population std."""
    mean = inputs.mean(axis=(0, 2, 3), dtype=np.float64)
    std = inputs.std(axis=(0, 2, 3), dtype=np.float64)
    return mean, std


def normalize_channels(
    inputs: np.ndarray, mean: np.ndarray, std: np.ndarray
) -> np.ndarray:
    """Standardize a (N, C, H, W) batch with per-channel statistics.

    A zero std (constant channel) is replaced by 1 with a warning so the
    channel passes through centered instead of dividing by zero.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64).copy()
    if inputs.ndim != 4 or inputs.shape[1] != mean.shape[0]:
        raise GeometryError(
            f"batch shape {inputs.shape} does not match {mean.shape[0]} "
            f"channel statistics"
        )
    if mean.shape != std.shape:
        raise GeometryError("mean and std lengths differ")
    zero = std == 0
    if zero.any():
        warnings.warn(
            f"constant channel(s) {np.nonzero(zero)[0].tolist()}: "
            f"std 0 replaced by 1",
            stacklevel=2,
        )
        std[zero] = 1.0
    out = (inputs - mean[None, :, None, None]) / std[None, :, None, None]
    return out.astype(inputs.dtype)


# --------------------------------------------------------------------------
# CRAS v1 container: <path> holds the JSON header, <path>.bin the raw
# little-endian float32 blob in row-major channel-interleaved order.
# --------------------------------------------------------------------------


def _blob_path(path: Path) -> Path:
    return path.with_name(path.name + ".bin")


def write_cras(raster: Raster, path: str | Path) -> None:
    path = Path(path)
    header = {
        "magic": CRAS_MAGIC,
        "height": raster.height,
        "width": raster.width,
        "channels": raster.channels,
        "gsd_m": raster.gsd,
        "dtype": "f32",
        "region_tag": raster.region_tag,
    }
    path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    blob = raster.data.astype("<f4", copy=False)
    _blob_path(path).write_bytes(blob.tobytes(order="C"))


def read_cras(path: str | Path) -> Raster:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid CRAS header: {e}") from e
    if header.get("magic") != CRAS_MAGIC:
        raise DataFormatError(
            f"{path}: bad magic {header.get('magic')!r}, expected {CRAS_MAGIC!r}"
        )
    if header.get("dtype") != "f32":
        raise DataFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    h, w, c = header["height"], header["width"], header["channels"]
    blob = _blob_path(path).read_bytes()
    expected = h * w * c * 4
    if len(blob) != expected:
        raise DataFormatError(
            f"{_blob_path(path)}: blob is {len(blob)} bytes, expected {expected}"
        )
    data = np.frombuffer(blob, dtype="<f4").reshape(h, w, c)
    return Raster(
        height=h,
        width=w,
        channels=c,
        gsd=float(header["gsd_m"]),
        data=data,
        region_tag=header.get("region_tag", ""),
    )


def mask_to_raster(mask: BinaryMask, region_tag: str = "") -> Raster:
    """Wrap a mask in the CRAS carrier (single channel, values 0.0/1.0)."""
    return Raster(
        height=mask.height,
        width=mask.width,
        channels=1,
        gsd=mask.gsd,
        data=mask.values.astype(np.float32)[:, :, None],
        region_tag=region_tag,
    )


def raster_to_mask(raster: Raster) -> BinaryMask:
    if raster.channels != 1:
        raise DataFormatError(
            f"mask container must be single-channel, got {raster.channels}"
        )
    values = raster.channel(0)
    if not np.isin(values, (0.0, 1.0)).all():
        raise DataFormatError("mask container holds values outside {0.0, 1.0}")
    return BinaryMask(
        height=raster.height,
        width=raster.width,
        values=values.astype(np.uint8),
        gsd=raster.gsd,
    )


def write_mask_cras(mask: BinaryMask, path: str | Path, region_tag: str = "") -> None:
    write_cras(mask_to_raster(mask, region_tag), path)


def read_mask_cras(path: str | Path) -> BinaryMask:
    return raster_to_mask(read_cras(path))
