"""Synthetic scene generation with exact ground-truth building masks.

A scene is a multi-channel tile plus a per-pixel building mask. Buildings
are axis-aligned rectangles with log-normal sizes, clustered around a few
centers per tile, so per-patch coverage is heavy-tailed: most patches are
nearly empty while dense urban cores push individual patches high.

Channel semantics are chosen so the input channels carry complementary
information:
  ch 0 (radar proxy)  smoothed built density, plus weaker clutter over
                      soil and vegetation; the only channel that separates
                      buildings from bare soil.
  ch 1-3 (R, G, B)    roof / soil / vegetation albedos with overlapping,
                      region-dependent distributions; weakly informative.
  ch 4 (near-IR)      high over vegetation, low over soil and buildings;
                      the channel that separates vegetation from buildings
                      and pins down the radar clutter vegetation causes.

Region tags name pseudo-countries. Each tag hashes to a style (roof
brightness, vegetation cover, building sizes, clutter levels) so held-out
regions present a genuine but survivable domain shift.

All randomness for tile i derives from the stream (seed, i), so rendering
is schedule-independent and regeneration is bitwise identical.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .ioutil import canonical_json, read_json, sha256_bytes, write_json
from .raster import (
    GSD_M,
    N_CHANNELS,
    BinaryMask,
    Raster,
    Tile,
    count_building_pixels,
    patch_windows,
    read_cras,
    read_mask_cras,
    write_cras,
    write_mask_cras,
)

MANIFEST_FORMAT = "coverest-dataset-v1"

# World-level draws (density map, location sampling) use this stream id;
# per-tile streams use the tile index, which stays far below this value.
_WORLD_STREAM = 1 << 40

DEFAULT_REGION_TAGS = (("alvena", 3.0), ("borsk", 2.0), ("cadria", 1.0))

# Per-tile coverage = density target x location factor x lognormal(ln-sd 0.9).
# The lognormal is mean-one so the density target stays the corpus mean.
_COVERAGE_LOG_SD = 0.9
_COVERAGE_CAP = 0.55
_MAX_RECTS_PER_TILE = 6000


@dataclass(frozen=True)
class RegionStyle:
    """Rendering parameters derived deterministically from a region tag."""

    soil_brightness: float
    veg_cover: float
    size_scale: float
    s1_gain: float
    soil_clutter: float
    veg_clutter: float
    field_cover: float
    rock_clutter: float


def region_style(tag: str) -> RegionStyle:
    """Hash a region tag to style parameters; same tag, same style, forever."""
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    u = np.frombuffer(digest, dtype=np.uint8).astype(np.float64) / 255.0
    return RegionStyle(
        soil_brightness=0.48 + 0.18 * u[0],
        veg_cover=0.25 + 0.30 * u[1],
        size_scale=0.80 + 0.60 * u[2],
        s1_gain=0.90 + 0.30 * u[3],
        soil_clutter=0.10 + 0.12 * u[4],
        veg_clutter=0.30 + 0.15 * u[5],
        field_cover=0.08 + 0.17 * u[6],
        rock_clutter=0.30 + 0.50 * u[7],
    )


@dataclass
class SceneConfig:
    seed: int
    n_tiles: int
    tile_size: int = 200
    building_density_target: float = 0.06
    region_tags: tuple[tuple[str, float], ...] = DEFAULT_REGION_TAGS

    def __post_init__(self):
        if self.tile_size <= 0 or self.tile_size % 50 != 0:
            raise ConfigError(
                f"tile_size must be a positive multiple of 50, got {self.tile_size}"
            )
        if not 0.0 <= self.building_density_target <= 1.0:
            raise ConfigError(
                f"building_density_target {self.building_density_target} "
                f"outside [0, 1]"
            )
        if self.n_tiles < 0:
            raise ConfigError(f"n_tiles must be >= 0, got {self.n_tiles}")
        self.region_tags = tuple((str(t), float(w)) for t, w in self.region_tags)
        if not self.region_tags:
            raise ConfigError("region_tags must not be empty")
        tags = [t for t, _ in self.region_tags]
        if len(set(tags)) != len(tags):
            raise ConfigError(f"duplicate region tags in {tags}")
        weights = np.array([w for _, w in self.region_tags])
        if (weights < 0).any() or weights.sum() <= 0:
            raise ConfigError("region tag weights must be nonnegative, sum > 0")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_tiles": self.n_tiles,
            "tile_size": self.tile_size,
            "building_density_target": self.building_density_target,
            "region_tags": [[t, w] for t, w in self.region_tags],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        unknown = set(d) - {
            "seed", "n_tiles", "tile_size", "building_density_target", "region_tags",
        }
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        if "region_tags" in d:
            d["region_tags"] = tuple((t, w) for t, w in d["region_tags"])
        return cls(**d)


@dataclass
class DensityMap:
    """Nonnegative sampling weights over candidate tile locations."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ConfigError(f"density map must be 2-D, got ndim {self.weights.ndim}")
        if (self.weights < 0).any():
            raise ConfigError("density map has negative weights")
        if not (self.weights > 0).any():
            raise ConfigError("density map has no positive weight")


@dataclass(frozen=True)
class Location:
    """One sampled spot in the world grid; index orders the draw."""

    index: int
    cell: tuple[int, int]
    weight: float


def make_world_density(seed: int, shape: tuple[int, int] = (32, 32)) -> DensityMap:
    """Heavy-tailed settlement-density proxy over a coarse world grid."""
    rng = np.random.default_rng((seed, _WORLD_STREAM))
    w = rng.lognormal(mean=0.0, sigma=1.2, size=shape)
    return DensityMap(w)


def sample_locations(density: DensityMap, n: int, seed: int) -> list[Location]:
    """Draw n cells with probability proportional to weight, deterministically."""
    if n < 1:
        raise ConfigError(f"need n >= 1 locations, got {n}")
    rng = np.random.default_rng((seed, _WORLD_STREAM, 1))
    flat = density.weights.ravel()
    p = flat / flat.sum()
    idx = rng.choice(flat.size, size=n, replace=True, p=p)
    ncols = density.weights.shape[1]
    mean_pos = flat[flat > 0].mean()
    return [
        Location(
            index=i,
            cell=(int(k) // ncols, int(k) % ncols),
            weight=float(flat[k] / mean_pos),
        )
        for i, k in enumerate(idx)
    ]


def paint_rectangles(
    height: int, width: int, rects: list[tuple[int, int, int, int]], gsd: float = GSD_M
) -> BinaryMask:
    """Rasterize (row, col, h, w) rectangles; overlaps count once."""
    values = np.zeros((height, width), dtype=np.uint8)
    for r, c, h, w in rects:
        if h <= 0 or w <= 0:
            raise ConfigError(f"rectangle {(r, c, h, w)} has nonpositive size")
        if r < 0 or c < 0 or r + h > height or c + w > width:
            raise ConfigError(
                f"rectangle {(r, c, h, w)} exceeds {height}x{width} grid"
            )
        values[r : r + h, c : c + w] = 1
    return BinaryMask(height=height, width=width, values=values, gsd=gsd)


@dataclass
class Scene:
    """A rendered tile plus the exact geometry used to build it."""

    tile: Tile
    rects: list[tuple[int, int, int, int]]
    veg_mask: np.ndarray  # (H, W) uint8, disjoint from the building mask
    field_mask: np.ndarray  # (H, W) bool, flat building-free decoy ground
    coverage_target: float


def _smooth_unit_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Smoothed white noise rescaled to [0, 1]."""
    f = gaussian_filter(rng.standard_normal((size, size)), sigma=sigma, mode="reflect")
    lo, hi = f.min(), f.max()
    if hi - lo < 1e-12:
        return np.zeros_like(f)
    return (f - lo) / (hi - lo)


def _draw_region_tag(rng: np.random.Generator, config: SceneConfig) -> str:
    weights = np.array([w for _, w in config.region_tags], dtype=np.float64)
    cum = np.cumsum(weights / weights.sum())
    u = rng.random()
    return config.region_tags[int(np.searchsorted(cum, u, side="right"))][0]


def _place_fields(
    rng: np.random.Generator, size: int, target_pixels: float
) -> tuple[np.ndarray, list[tuple[int, int, int, int]]]:
    """Flat agricultural/cleared rectangles; building-free RGB decoys."""
    mask = np.zeros((size, size), dtype=bool)
    rects: list[tuple[int, int, int, int]] = []
    covered = 0
    while covered < target_pixels and len(rects) < 80:
        h = int(rng.integers(12, 45))
        w = int(rng.integers(12, 45))
        r0 = int(rng.integers(0, size - h + 1))
        c0 = int(rng.integers(0, size - w + 1))
        window = mask[r0 : r0 + h, c0 : c0 + w]
        covered += h * w - int(window.sum())
        window[...] = True
        rects.append((r0, c0, h, w))
    return mask, rects


def _place_buildings(
    rng: np.random.Generator,
    size: int,
    target_pixels: float,
    size_scale: float,
) -> tuple[np.ndarray, list[tuple[int, int, int, int]]]:
    mask = np.zeros((size, size), dtype=np.uint8)
    rects: list[tuple[int, int, int, int]] = []
    if target_pixels < 1.0:
        return mask, rects
    n_clusters = int(rng.integers(2, 6))
    centers = rng.uniform(0, size, size=(n_clusters, 2))
    spread = 0.10 * size
    covered = 0
    while covered < target_pixels and len(rects) < _MAX_RECTS_PER_TILE:
        center = centers[int(rng.integers(n_clusters))]
        # ~15% of placements ignore clusters so sparse patches still occur
        if rng.random() < 0.15:
            pos = rng.uniform(0, size, size=2)
        else:
            pos = center + rng.normal(0.0, spread, size=2)
        h = int(np.clip(np.rint(rng.lognormal(np.log(2.4 * size_scale), 0.55)), 1, 18))
        w = int(np.clip(np.rint(rng.lognormal(np.log(2.4 * size_scale), 0.55)), 1, 18))
        r0 = int(np.clip(np.rint(pos[0]), 0, size - h))
        c0 = int(np.clip(np.rint(pos[1]), 0, size - w))
        window = mask[r0 : r0 + h, c0 : c0 + w]
        covered += h * w - int(window.sum())
        window[...] = 1
        rects.append((r0, c0, h, w))
    return mask, rects


def render_scene(
    config: SceneConfig, location: Location, tile_id: str | None = None
) -> Scene:
    """Render the tile at a sampled location; all draws come from (seed, index)."""
    rng = np.random.default_rng((config.seed, location.index))
    size = config.tile_size
    tile_id = tile_id or f"t{location.index:05d}"

    tag = _draw_region_tag(rng, config)
    style = region_style(tag)

    loc_factor = float(np.clip(location.weight, 0.3, 3.0))
    coverage = (
        config.building_density_target
        * loc_factor
        * rng.lognormal(-0.5 * _COVERAGE_LOG_SD**2, _COVERAGE_LOG_SD)
    )
    coverage = float(min(coverage, _COVERAGE_CAP))

    field_mask, field_rects = _place_fields(
        rng, size, style.field_cover * size * size
    )
    mask_values, rects = _place_buildings(
        rng, size, coverage * size * size, style.size_scale
    )
    field_mask &= mask_values == 0  # towns swallow fields
    building = mask_values.astype(np.float64)
    field = field_mask.astype(np.float64)

    # One flat per-structure gray, drawn from the same distribution for
    # roofs and fields and centered on the soil tone: in RGB a roof, a
    # field, and a patch of bare ground have identical mean color, so the
    # optical channels cannot separate buildings from bare ground. Only
    # the radar channel (strong return from structures, weak from smooth
    # fields) carries that split.
    flat_gray = np.zeros((size, size), dtype=np.float64)
    for r, c, h, w in field_rects:
        flat_gray[r : r + h, c : c + w] = rng.uniform(0.82, 1.18)
    for r, c, h, w in rects:
        flat_gray[r : r + h, c : c + w] = rng.uniform(0.82, 1.18)

    # Return strength varies per structure (roof material, orientation).
    # Weak returns sink toward the soil-clutter floor, so the radar
    # channel alone cannot count structures; the NIR dip of a roof is
    # the confirming cue for the faint ones.
    radar_gain = np.zeros((size, size), dtype=np.float64)
    for r, c, h, w in rects:
        radar_gain[r : r + h, c : c + w] = rng.uniform(0.35, 1.0)

    # vegetation occupies the greenest fraction of the remaining ground
    veg_field = _smooth_unit_field(rng, size, sigma=6.0)
    open_ground = (mask_values == 0) & ~field_mask
    if open_ground.any():
        cut = np.quantile(veg_field[open_ground], 1.0 - style.veg_cover)
        veg_mask = ((veg_field > cut) & open_ground).astype(np.uint8)
    else:
        veg_mask = np.zeros_like(mask_values)
    veg = veg_mask.astype(np.float64)
    soil = 1.0 - building - veg - field

    tex_rgb = _smooth_unit_field(rng, size, sigma=2.0)
    tex_soil = _smooth_unit_field(rng, size, sigma=4.0)
    # clump density varies at patch scale, so how much false signal a patch
    # suffers is a latent the radar channel alone cannot pin down
    tex_vegc = _smooth_unit_field(rng, size, sigma=25.0)
    lush = _smooth_unit_field(rng, size, sigma=5.0)  # dry (0) to lush (1)

    # Bright point scatterers on vegetation (tree clumps, outcrops): same
    # footprint and brightness as small buildings, so in the radar channel
    # they are indistinguishable from them; only a NIR look-up reveals the
    # pixel as canopy. Their local density is the patch-scale latent above.
    spike_map = np.zeros((size, size), dtype=np.float64)
    # clumps prefer dry brush, exactly where RGB cannot tell veg from soil
    lam = style.veg_clutter * 0.5 * tex_vegc * (1.0 - 0.7 * lush)
    spike_centers = np.argwhere((veg_mask == 1) & (rng.random((size, size)) < lam))
    for r0, c0 in spike_centers:
        h = int(rng.integers(1, 5))
        w = int(rng.integers(1, 5))
        r1 = min(r0 + h, size)
        c1 = min(c0 + w, size)
        b = style.s1_gain * rng.uniform(0.75, 1.25)
        np.maximum(spike_map[r0:r1, c0:c1], b, out=spike_map[r0:r1, c0:c1])

    # Bare-rock slabs on open ground: radar-bright like roofs and the
    # same flat gray in RGB. Each slab draws one NIR value from a band
    # that brushes the roof band, so a low-NIR slab next to a weak-return
    # roof is genuinely ambiguous; counts over such ground carry spread
    # no point estimate can remove.
    open_soil = (mask_values == 0) & ~field_mask & (veg_mask == 0)
    tex_rock = _smooth_unit_field(rng, size, sigma=20.0)
    rock_map = np.zeros((size, size), dtype=np.float64)
    rock_gray = np.zeros((size, size), dtype=np.float64)
    rock_nir = np.zeros((size, size), dtype=np.float64)
    lam_rock = style.rock_clutter * 0.012 * tex_rock
    rock_centers = np.argwhere(open_soil & (rng.random((size, size)) < lam_rock))
    for r0, c0 in rock_centers:
        h = int(rng.integers(2, 7))
        w = int(rng.integers(2, 7))
        r1 = min(r0 + h, size)
        c1 = min(c0 + w, size)
        b = style.s1_gain * rng.uniform(0.6, 1.1)
        np.maximum(rock_map[r0:r1, c0:c1], b, out=rock_map[r0:r1, c0:c1])
        rock_gray[r0:r1, c0:c1] = rng.uniform(0.82, 1.18)
        rock_nir[r0:r1, c0:c1] = rng.uniform(0.12, 0.26)
    # slabs never overwrite structures, fields, or canopy
    rock_map *= open_soil
    rock_gray *= open_soil
    rock_nir *= open_soil
    rock = (rock_map > 0).astype(np.float64)
    soil = soil - rock

    # radar: structures return directly plus a neighborhood glow
    glow = gaussian_filter(radar_gain, sigma=1.5, mode="constant")
    clutter_map = np.maximum(spike_map, rock_map)
    clutter_glow = gaussian_filter(clutter_map, sigma=1.5, mode="constant")
    s1 = (
        style.s1_gain * (0.55 * radar_gain + 0.45 * glow)
        + 0.55 * clutter_map
        + 0.45 * clutter_glow
        + 0.06 * veg
        + style.soil_clutter * soil * tex_soil
        + 0.04 * field
    )

    sb = style.soil_brightness
    soil_tex = 0.85 + 0.30 * tex_soil
    flat_tex = 0.97 + 0.06 * tex_rgb
    # canopy reads as flat as roofs at this resolution, so optical texture
    # cannot stand in for NIR when separating brush from structures
    veg_tex = flat_tex
    # dry vegetation matches soil tones (only NIR tells them apart);
    # lush is darker and greener
    veg_r = 0.44 - 0.24 * lush
    veg_g = 0.42 - 0.08 * lush
    veg_b = 0.34 - 0.20 * lush
    structure = (building + field) * flat_gray + rock * rock_gray
    red = sb * 1.05 * (structure * flat_tex + soil * soil_tex) + veg * veg_r * veg_tex
    green = sb * 0.95 * (structure * flat_tex + soil * soil_tex) + veg * veg_g * veg_tex
    blue = sb * 0.75 * (structure * flat_tex + soil * soil_tex) + veg * veg_b * veg_tex
    nir = (
        building * (0.10 + 0.08 * tex_rgb)
        + field * (0.14 + 0.08 * tex_soil)
        + soil * (0.18 + 0.12 * tex_soil)
        + rock * rock_nir
        + veg * (0.45 + 0.35 * lush)
    )

    stack = np.stack([s1, red, green, blue, nir], axis=-1)
    noise = rng.normal(0.0, 1.0, size=stack.shape)
    stack = stack + noise * np.array([0.05, 0.04, 0.04, 0.04, 0.03])

    raster = Raster(
        height=size,
        width=size,
        channels=N_CHANNELS,
        gsd=GSD_M,
        data=stack.astype(np.float32),
        region_tag=tag,
    )
    mask = BinaryMask(height=size, width=size, values=mask_values, gsd=GSD_M)
    return Scene(
        tile=Tile(id=tile_id, raster=raster, mask=mask),
        rects=rects,
        veg_mask=veg_mask,
        field_mask=field_mask,
        coverage_target=coverage,
    )


# ----------------------------------------------------------------------
# dataset on disk
# ----------------------------------------------------------------------


def _patch_records(tile: Tile) -> list[dict]:
    records = []
    for r, c in patch_windows(tile.mask.height, tile.mask.width):
        label = count_building_pixels(tile.mask, (r, c, 50, 50))
        records.append({"offset": [r, c], "label": label})
    return records


def generate_dataset(config: SceneConfig, out_dir: str | Path) -> Path:
    """Write tiles, masks, and manifest.json under out_dir; returns manifest path."""
    root = Path(out_dir)
    tiles_dir = root / "tiles"
    masks_dir = root / "masks"
    tiles_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)

    tile_entries = []
    if config.n_tiles > 0:
        density = make_world_density(config.seed)
        locations = sample_locations(density, config.n_tiles, config.seed)
        for loc in locations:
            scene = render_scene(config, loc)
            tile = scene.tile
            write_cras(tile.raster, tiles_dir / f"{tile.id}.cras")
            write_mask_cras(tile.mask, masks_dir / f"{tile.id}.cras", tile.region_tag)
            tile_entries.append(
                {
                    "id": tile.id,
                    "region_tag": tile.region_tag,
                    "n_buildings": len(scene.rects),
                    "coverage_target": scene.coverage_target,
                    "mask_count": tile.mask.count(),
                    "patches": _patch_records(tile),
                }
            )

    manifest = {
        "format": MANIFEST_FORMAT,
        "config": config.to_dict(),
        "gsd_m": GSD_M,
        "tiles": tile_entries,
    }
    manifest_path = root / "manifest.json"
    write_json(manifest_path, manifest)
    return manifest_path


def manifest_digest(manifest: dict) -> str:
    return sha256_bytes(canonical_json(manifest).encode("utf-8"))


class SyntheticDataset:
    """Reader for the on-disk layout produced by generate_dataset."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.json under {self.root}")
        self.manifest = read_json(manifest_path)
        if self.manifest.get("format") != MANIFEST_FORMAT:
            raise ConfigError(
                f"unsupported dataset format {self.manifest.get('format')!r}, "
                f"expected {MANIFEST_FORMAT!r}"
            )
        self.tile_entries = {e["id"]: e for e in self.manifest["tiles"]}

    @property
    def tile_ids(self) -> list[str]:
        return [e["id"] for e in self.manifest["tiles"]]

    def region_of(self, tile_id: str) -> str:
        return self.tile_entries[tile_id]["region_tag"]

    def load_tile(self, tile_id: str) -> Tile:
        raster = read_cras(self.root / "tiles" / f"{tile_id}.cras")
        mask = read_mask_cras(self.root / "masks" / f"{tile_id}.cras")
        return Tile(id=tile_id, raster=raster, mask=mask)

    def load_patches(
        self, tile_ids: list[str] | None = None
    ) -> tuple[np.ndarray, np.ndarray, list[dict]]:
        """Stack patches for the given tiles (default: all).

        Returns (inputs (N,C,50,50) float32, labels (N,) float64, meta);
        meta rows carry tile_id, offset, and region_tag per patch.
        """
        ids = list(tile_ids) if tile_ids is not None else self.tile_ids
        inputs, labels, meta = [], [], []
        for tid in ids:
            if tid not in self.tile_entries:
                raise ConfigError(f"tile id {tid!r} not in manifest")
            tile = self.load_tile(tid)
            data = tile.raster.data  # (H, W, C)
            for rec in self.tile_entries[tid]["patches"]:
                r, c = rec["offset"]
                patch = data[r : r + 50, c : c + 50, :].transpose(2, 0, 1)
                inputs.append(np.ascontiguousarray(patch, dtype=np.float32))
                labels.append(float(rec["label"]))
                meta.append(
                    {
                        "tile_id": tid,
                        "offset": (r, c),
                        "region_tag": self.region_of(tid),
                    }
                )
        if not inputs:
            return (
                np.zeros((0, N_CHANNELS, 50, 50), dtype=np.float32),
                np.zeros((0,), dtype=np.float64),
                [],
            )
        return np.stack(inputs), np.asarray(labels, dtype=np.float64), meta
