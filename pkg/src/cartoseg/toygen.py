"""Procedural toy corpus of aligned historical/modern map tiles.

Every tile carries vector features (forest blobs, waterways, roads, building
clusters) rasterized into per-era label maps. The modern image is exactly the
label colorization; the historical image interpolates between that clean
render and a heavily styled one (shifted palette, forest hatching, banded
gain noise, sepia cast) controlled by ``style_gap``:

    historical(g) = rint((1 - g) * clean + g * styled)

so gap 0 is bit-identical to the clean render and the L1 distance to it is
monotone in the gap. ``change_rate`` is the probability that a feature exists
in only one era (chosen uniformly); the rest appear in both, which makes the
retention fraction binomially testable. All randomness flows through
independent per-tile ``SeedSequence`` spawns, so tiles are reproducible and
order-independent, and geometry does not depend on gap or rate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from shapely.geometry import LineString, Polygon, box

from .corpus import (
    CLASS_NAMES,
    NUM_CLASSES,
    ClassId,
    Collection,
    Manifest,
    ManifestEntry,
    load_manifest,
    save_manifest,
)
from .errors import ConfigError
from .rasters import AffineGeoref, write_image, write_labels, write_world_file
from .stylizer import (
    DEFAULT_PALETTE,
    DEFAULT_STROKES_PX,
    LodSpec,
    StyleSpec,
    VectorFeature,
    colorize,
    rasterize_array,
)

DEFAULT_FEATURE_COUNTS: Mapping[str, int] = {
    "forest": 2,
    "hydrography": 1,
    "roads": 2,
    "buildings": 5,
}

# Watercourses are drawn wider than roads so the two linework classes differ
# in shape, not just ink colour, mirroring how real map keys separate them.
TOY_STROKES_PX: Mapping[ClassId, float] = {
    **DEFAULT_STROKES_PX,
    ClassId.HYDROGRAPHY: 5.0,
}

# Palette of the fully styled historical render (parchment and muted inks).
TOY_HISTORICAL_PALETTE: Mapping[int, tuple[int, int, int]] = {
    int(ClassId.BACKGROUND): (225, 213, 181),
    int(ClassId.FOREST): (96, 122, 60),
    int(ClassId.HYDROGRAPHY): (86, 112, 140),
    int(ClassId.ROADS): (122, 82, 46),
    int(ClassId.BUILDINGS): (48, 22, 20),
}

_SEPIA = np.array(
    [
        [0.393, 0.769, 0.189],
        [0.349, 0.686, 0.168],
        [0.272, 0.534, 0.131],
    ]
)
_SEPIA_STRENGTH = (0.40, 0.60)
_HATCH_PERIOD = 6
_HATCH_WIDTH = 2
_HATCH_FACTOR = (0.6, 0.9)
_BAND_HEIGHT = 8
_BAND_GAIN = (0.9, 1.1)
_INK_JITTER = np.array([45.0, 45.0, 15.0, 15.0, 10.0])  # per class
_TINT_GAIN = (0.8, 1.2)
_TINT_OFFSET = (-12.0, 12.0)


@dataclass(frozen=True)
class ToySpec:
    """Parameters of a generated corpus."""

    n_tiles: int = 200
    size_px: int = 128
    resolution_m: float = 1.0
    seed: int = 0
    style_gap: float = 0.5
    change_rate: float = 0.0
    annotated_fraction: float = 1.0
    historical_collection: Collection = Collection.CASSINI
    feature_counts: Mapping[str, int] = field(
        default_factory=lambda: dict(DEFAULT_FEATURE_COUNTS)
    )

    def __post_init__(self) -> None:
        if self.n_tiles < 1:
            raise ConfigError("n_tiles must be >= 1")
        if self.size_px < 16:
            raise ConfigError("size_px must be >= 16")
        if self.resolution_m <= 0:
            raise ConfigError("resolution_m must be > 0")
        if not (0.0 <= self.style_gap <= 1.0):
            raise ConfigError("style_gap must be in [0, 1]")
        if not (0.0 <= self.change_rate <= 1.0):
            raise ConfigError("change_rate must be in [0, 1]")
        if not (0.0 <= self.annotated_fraction <= 1.0):
            raise ConfigError("annotated_fraction must be in [0, 1]")
        if self.historical_collection == Collection.MODERN:
            raise ConfigError("historical_collection cannot be 'modern'")
        for name, count in self.feature_counts.items():
            if name not in DEFAULT_FEATURE_COUNTS:
                raise ConfigError(f"unknown feature kind {name!r}")
            if int(count) < 0:
                raise ConfigError(f"feature count {name!r} must be >= 0")

    @property
    def tile_extent_m(self) -> float:
        return self.size_px * self.resolution_m


@dataclass(frozen=True)
class ToyFeature:
    feature: VectorFeature
    in_historical: bool
    in_modern: bool


@dataclass(frozen=True)
class ToyTile:
    tile_id: str
    georef: AffineGeoref
    historical_image: np.ndarray
    modern_image: np.ndarray
    historical_labels: np.ndarray
    modern_labels: np.ndarray
    features: tuple[ToyFeature, ...]
    annotated: bool

    @property
    def centroid(self) -> tuple[float, float]:
        h, w = self.modern_labels.shape
        return self.georef.apply(w / 2.0, h / 2.0)


@dataclass(frozen=True)
class ToyCorpus:
    spec: ToySpec
    tiles: tuple[ToyTile, ...]


def _label_style(collection: Collection) -> StyleSpec:
    """Geometry-faithful rasterization: no simplification, toy strokes."""
    return StyleSpec(
        collection=collection,
        lod=LodSpec(),
        palette=dict(DEFAULT_PALETTE),
        stroke_widths_px=dict(TOY_STROKES_PX),
    )


# ---------------------------------------------------------------------------
# Feature synthesis (world coordinates)
# ---------------------------------------------------------------------------


def _star_polygon(rng: np.random.Generator, cx: float, cy: float, radius: float) -> Polygon:
    k = int(rng.integers(7, 13))
    angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=k))
    radii = radius * rng.uniform(0.55, 1.0, size=k)
    pts = [(cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(angles, radii)]
    return Polygon(pts)


def _meander_line(
    rng: np.random.Generator, x0: float, x1: float, y_lo: float, y_hi: float
) -> LineString:
    n = int(rng.integers(5, 9))
    xs = np.linspace(x0, x1, n)
    span = y_hi - y_lo
    start = rng.uniform(y_lo + 0.2 * span, y_hi - 0.2 * span)
    end = rng.uniform(y_lo + 0.2 * span, y_hi - 0.2 * span)
    ys = np.linspace(start, end, n) + rng.normal(0.0, 0.06 * span, size=n)
    ys = np.clip(ys, y_lo, y_hi)
    return LineString(list(zip(xs, ys)))


def _tile_features(
    rng: np.random.Generator,
    georef: AffineGeoref,
    size_px: int,
    res: float,
    counts: Mapping[str, int],
) -> list[VectorFeature]:
    x0, y0 = georef.apply(0.0, 0.0)
    x1, y1 = georef.apply(float(size_px), float(size_px))
    y_lo, y_hi = min(y0, y1), max(y0, y1)
    extent = size_px * res
    features: list[VectorFeature] = []
    for _ in range(int(counts.get("forest", 0))):
        cx = rng.uniform(x0 + 0.15 * extent, x1 - 0.15 * extent)
        cy = rng.uniform(y_lo + 0.15 * extent, y_hi - 0.15 * extent)
        radius = rng.uniform(0.10, 0.20) * extent
        features.append(VectorFeature(_star_polygon(rng, cx, cy, radius), ClassId.FOREST))
    for _ in range(int(counts.get("hydrography", 0))):
        features.append(
            VectorFeature(_meander_line(rng, x0, x1, y_lo, y_hi), ClassId.HYDROGRAPHY)
        )
    for _ in range(int(counts.get("roads", 0))):
        line = _meander_line(rng, x0, x1, y_lo, y_hi)
        features.append(VectorFeature(line, ClassId.ROADS, rank=int(rng.integers(1, 4))))
    n_buildings = int(counts.get("buildings", 0))
    if n_buildings:
        ccx = rng.uniform(x0 + 0.3 * extent, x1 - 0.3 * extent)
        ccy = rng.uniform(y_lo + 0.3 * extent, y_hi - 0.3 * extent)
        for _ in range(n_buildings):
            bx = ccx + rng.uniform(-0.28, 0.28) * extent
            by = ccy + rng.uniform(-0.28, 0.28) * extent
            half = rng.uniform(2.0, 4.0) * res
            features.append(
                VectorFeature(box(bx - half, by - half, bx + half, by + half), ClassId.BUILDINGS)
            )
    return features


# ---------------------------------------------------------------------------
# Styled historical rendering
# ---------------------------------------------------------------------------


def _styled_render(labels: np.ndarray, noise_rng: np.random.Generator) -> np.ndarray:
    """Fully styled float render: aged palette, hatching, bands, sepia, tint.

    The ink palette, sepia strength, and global tint are drawn per tile, so
    at full strength every tile looks like a separately printed and aged
    sheet rather than one globally recoloured corpus.
    """
    h, w = labels.shape
    lut = np.zeros((NUM_CLASSES, 3), dtype=np.float64)
    for cid, rgb in TOY_HISTORICAL_PALETTE.items():
        lut[cid] = rgb
    lut += noise_rng.uniform(-1.0, 1.0, size=lut.shape) * _INK_JITTER[:, None]
    img = lut[labels]
    rows, cols = np.indices((h, w))
    direction = -1 if noise_rng.random() < 0.5 else 1
    phase = int(noise_rng.integers(_HATCH_PERIOD))
    hatch = ((rows + direction * cols + phase) % _HATCH_PERIOD) < _HATCH_WIDTH
    forest = labels == int(ClassId.FOREST)
    img[hatch & forest] *= noise_rng.uniform(*_HATCH_FACTOR)
    n_bands = math.ceil(h / _BAND_HEIGHT)
    gains = noise_rng.uniform(*_BAND_GAIN, size=n_bands)
    img *= gains[rows // _BAND_HEIGHT][..., None]
    strength = noise_rng.uniform(*_SEPIA_STRENGTH)
    sepia = img @ _SEPIA.T
    img = (1.0 - strength) * img + strength * sepia
    img = img * noise_rng.uniform(*_TINT_GAIN, size=3)
    img += noise_rng.uniform(*_TINT_OFFSET, size=3)
    return np.clip(img, 0.0, 255.0)


def _historical_image(
    labels: np.ndarray, gap: float, noise_rng: np.random.Generator
) -> np.ndarray:
    clean = colorize(labels, DEFAULT_PALETTE).astype(np.float64)
    styled = _styled_render(labels, noise_rng)
    return np.rint((1.0 - gap) * clean + gap * styled).astype(np.uint8)


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


def _generate_tile(spec: ToySpec, index: int, child: np.random.SeedSequence) -> ToyTile:
    geom_seq, era_seq, noise_seq = child.spawn(3)
    geom_rng = np.random.default_rng(geom_seq)
    era_rng = np.random.default_rng(era_seq)
    noise_rng = np.random.default_rng(noise_seq)

    ncols = math.ceil(math.sqrt(spec.n_tiles))
    col, row = index % ncols, index // ncols
    extent = spec.tile_extent_m
    georef = AffineGeoref.north_up(col * extent, -row * extent, spec.resolution_m)

    raw = _tile_features(geom_rng, georef, spec.size_px, spec.resolution_m, spec.feature_counts)
    features = []
    for feat in raw:
        if era_rng.random() < spec.change_rate:
            in_modern = era_rng.random() < 0.5
            features.append(ToyFeature(feat, in_historical=not in_modern, in_modern=in_modern))
        else:
            features.append(ToyFeature(feat, in_historical=True, in_modern=True))

    shape = (spec.size_px, spec.size_px)
    style = _label_style(spec.historical_collection)
    hist_labels = rasterize_array(
        [tf.feature for tf in features if tf.in_historical], shape, georef, style
    )
    modern_labels = rasterize_array(
        [tf.feature for tf in features if tf.in_modern], shape, georef, style
    )
    return ToyTile(
        tile_id=f"toy{index:04d}",
        georef=georef,
        historical_image=_historical_image(hist_labels, spec.style_gap, noise_rng),
        modern_image=colorize(modern_labels, DEFAULT_PALETTE),
        historical_labels=hist_labels,
        modern_labels=modern_labels,
        features=tuple(features),
        annotated=index < math.ceil(spec.annotated_fraction * spec.n_tiles),
    )


def generate_corpus(spec: ToySpec) -> ToyCorpus:
    """Generate all tiles from independent per-tile random streams."""
    root = np.random.SeedSequence(spec.seed)
    children = root.spawn(spec.n_tiles)
    tiles = tuple(_generate_tile(spec, i, child) for i, child in enumerate(children))
    return ToyCorpus(spec=spec, tiles=tiles)


def corpus_stats(corpus: ToyCorpus) -> dict:
    """Exact pixel and feature counts per era, plus era-retention counts."""
    pixel = {era: dict.fromkeys(CLASS_NAMES, 0) for era in ("historical", "modern")}
    feats = {era: dict.fromkeys(CLASS_NAMES, 0) for era in ("historical", "modern")}
    retention = {"both": 0, "historical_only": 0, "modern_only": 0}
    for tile in corpus.tiles:
        for era, labels in (("historical", tile.historical_labels), ("modern", tile.modern_labels)):
            counts = np.bincount(labels.ravel(), minlength=NUM_CLASSES)
            for cid in range(NUM_CLASSES):
                pixel[era][CLASS_NAMES[cid]] += int(counts[cid])
        for tf in tile.features:
            name = CLASS_NAMES[int(tf.feature.class_id)]
            if tf.in_historical:
                feats["historical"][name] += 1
            if tf.in_modern:
                feats["modern"][name] += 1
            if tf.in_historical and tf.in_modern:
                retention["both"] += 1
            elif tf.in_historical:
                retention["historical_only"] += 1
            else:
                retention["modern_only"] += 1
    return {"pixels": pixel, "features": feats, "retention": retention}


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------


def write_corpus(corpus: ToyCorpus, root: Path | str) -> Manifest:
    """Write images, labels, world files, feature flags, and the manifest.

    Historical label files are only listed (and written) for annotated
    tiles; modern labels are available for every tile.
    """
    root = Path(root)
    hist = corpus.spec.historical_collection
    entries = []
    flags: dict[str, list[dict]] = {}
    for tile in corpus.tiles:
        images = {
            hist: f"images/{hist.value}/{tile.tile_id}.png",
            Collection.MODERN: f"images/modern/{tile.tile_id}.png",
        }
        labels = {Collection.MODERN: f"labels/modern/{tile.tile_id}.png"}
        if tile.annotated:
            labels[hist] = f"labels/{hist.value}/{tile.tile_id}.png"
        for coll, rel in images.items():
            path = root / rel
            write_image(path, tile.historical_image if coll == hist else tile.modern_image)
            write_world_file(path.with_suffix(".wld"), tile.georef)
        write_labels(root / labels[Collection.MODERN], tile.modern_labels)
        if tile.annotated:
            write_labels(root / labels[hist], tile.historical_labels)
        cx, cy = tile.centroid
        entries.append(
            ManifestEntry(
                tile_id=tile.tile_id,
                centroid_x_m=cx,
                centroid_y_m=cy,
                annotated=tile.annotated,
                images=images,
                labels=labels,
            )
        )
        flags[tile.tile_id] = [
            {
                "class": CLASS_NAMES[int(tf.feature.class_id)],
                "historical": tf.in_historical,
                "modern": tf.in_modern,
            }
            for tf in tile.features
        ]
    manifest = Manifest(entries=tuple(entries), root=root)
    save_manifest(manifest, root / "manifest.yaml")
    (root / "features.json").write_text(json.dumps(flags, indent=2))
    return load_manifest(root / "manifest.yaml")


def aligned_image_pairs(
    corpus: ToyCorpus, tile_ids: Sequence[str] | None = None
) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(tile_id, historical image, modern image) triples for translation."""
    wanted = None if tile_ids is None else set(tile_ids)
    return [
        (t.tile_id, t.historical_image, t.modern_image)
        for t in corpus.tiles
        if wanted is None or t.tile_id in wanted
    ]
