"""Synthetic map rendering from vector data.

Modern vector features (forest/hydrography polygons, road/stream polylines,
building footprints) are reduced to the level of detail of a target map
edition, rasterized onto a tile's pixel grid, and colorized with the
edition's palette. ``declassify`` inverts ``colorize`` exactly, so label
rasters and flat-colour renderings are interchangeable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import shapely
import shapely.wkt
import yaml
from shapely.geometry import LineString, MultiLineString, MultiPolygon, Point, Polygon
from shapely.geometry.base import BaseGeometry
from shapely.ops import unary_union

from .corpus import ClassId, Collection, LabelRaster, LabelSource, Tile
from .errors import ConfigError, PaletteError
from .rasters import AffineGeoref

Color = tuple[int, int, int]

# Flat-colour legend used for modern-style renderings and visualisation.
DEFAULT_PALETTE: dict[ClassId, Color] = {
    ClassId.BACKGROUND: (255, 255, 255),
    ClassId.FOREST: (153, 236, 83),
    ClassId.HYDROGRAPHY: (49, 193, 236),
    ClassId.ROADS: (233, 137, 74),
    ClassId.BUILDINGS: (234, 0, 41),
}

DEFAULT_STROKES_PX: dict[ClassId, float] = {
    ClassId.HYDROGRAPHY: 3.0,
    ClassId.ROADS: 3.0,
}

_POLYGON_TYPES = (Polygon, MultiPolygon)
_LINE_TYPES = (LineString, MultiLineString)


@dataclass(frozen=True)
class VectorFeature:
    """One vector feature: geometry in projected metres plus its class.

    ``rank`` orders road importance (1 = most important); None means the
    feature is never dropped by rank filtering.
    """

    geometry: BaseGeometry
    class_id: ClassId
    rank: int | None = None

    def __post_init__(self) -> None:
        g = self.geometry
        if not isinstance(g, (*_POLYGON_TYPES, *_LINE_TYPES, Point)):
            raise ValueError(f"unsupported geometry type {g.geom_type}")
        if g.is_empty:
            raise ValueError("empty geometry")
        if isinstance(g, _POLYGON_TYPES) and g.area <= 0:
            raise ValueError("degenerate polygon (zero area)")
        if isinstance(g, _LINE_TYPES) and g.length <= 0:
            raise ValueError("degenerate polyline (zero length)")
        if self.rank is not None and self.rank < 0:
            raise ValueError(f"rank must be non-negative, got {self.rank}")

    @property
    def area_m2(self) -> float:
        return float(self.geometry.area)


@dataclass(frozen=True)
class LodSpec:
    """Level-of-detail reduction applied before rasterizing.

    - polygons of forest/hydrography below ``min_polygon_area_m2`` are dropped;
    - roads with rank greater than ``max_road_rank`` are dropped (None keeps all);
    - buildings are kept individually or merged into urban blocks by
      morphological closing with ``agglomeration_radius_m`` (gaps below twice
      the radius are bridged). Closing keeps the operation idempotent.
    """

    min_polygon_area_m2: float = 0.0
    max_road_rank: int | None = None
    building_mode: str = "individual"
    agglomeration_radius_m: float = 0.0

    def __post_init__(self) -> None:
        if self.min_polygon_area_m2 < 0:
            raise ConfigError("min_polygon_area_m2 must be >= 0")
        if self.max_road_rank is not None and self.max_road_rank < 0:
            raise ConfigError("max_road_rank must be >= 0 or None")
        if self.building_mode not in ("individual", "agglomerated"):
            raise ConfigError(f"unknown building_mode {self.building_mode!r}")
        if self.agglomeration_radius_m < 0:
            raise ConfigError("agglomeration_radius_m must be >= 0")


@dataclass(frozen=True)
class StyleSpec:
    """A target edition's rendering parameters: LOD, palette, stroke widths."""

    collection: Collection
    lod: LodSpec = field(default_factory=LodSpec)
    palette: Mapping[ClassId, Color] = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    stroke_widths_px: Mapping[ClassId, float] = field(default_factory=lambda: dict(DEFAULT_STROKES_PX))

    def __post_init__(self) -> None:
        seen: dict[Color, ClassId] = {}
        for cls, color in self.palette.items():
            color = tuple(int(v) for v in color)
            if len(color) != 3 or not all(0 <= v <= 255 for v in color):
                raise PaletteError(f"invalid colour {color} for {ClassId(cls).name}")
            if color in seen:
                raise PaletteError(
                    f"palette not injective: {ClassId(cls).name} and {seen[color].name} share {color}"
                )
            seen[color] = ClassId(cls)
        for cls, width in self.stroke_widths_px.items():
            if width <= 0:
                raise ConfigError(f"stroke width for {ClassId(cls).name} must be > 0")


# Default editions, coarsest to finest level of detail.
DEFAULT_STYLE_SPECS: dict[Collection, StyleSpec] = {
    Collection.CASSINI: StyleSpec(
        collection=Collection.CASSINI,
        lod=LodSpec(
            min_polygon_area_m2=10_000.0,
            max_road_rank=2,
            building_mode="agglomerated",
            agglomeration_radius_m=20.0,
        ),
    ),
    Collection.ETATMAJOR: StyleSpec(
        collection=Collection.ETATMAJOR,
        lod=LodSpec(min_polygon_area_m2=2_500.0, max_road_rank=3),
    ),
    Collection.SCAN50: StyleSpec(
        collection=Collection.SCAN50,
        lod=LodSpec(min_polygon_area_m2=1_000.0, max_road_rank=4),
    ),
    Collection.MODERN: StyleSpec(collection=Collection.MODERN),
}


def _closing_parts(geoms: Sequence[BaseGeometry], radius: float) -> list[Polygon]:
    """Merge polygons by morphological closing and return the parts.

    The result is unioned with the originals so blocks always cover the
    input footprints despite the polygonal approximation of buffer arcs.
    """
    if radius > 0:
        closed = unary_union([g.buffer(radius, quad_segs=16) for g in geoms]).buffer(
            -radius, quad_segs=16
        )
        merged = unary_union([closed, *geoms])
    else:
        merged = unary_union(list(geoms))
    if merged.is_empty:
        return []
    if isinstance(merged, Polygon):
        return [merged]
    return [g for g in merged.geoms if isinstance(g, Polygon) and g.area > 0]


def adapt_lod(features: Iterable[VectorFeature], lod: LodSpec) -> tuple[VectorFeature, ...]:
    """Reduce features to a target level of detail (idempotent).

    Non-building polygons below the area threshold and roads above the rank
    cutoff are dropped; in agglomerated mode, building footprints are merged
    into urban blocks. Surviving features keep their input order; merged
    blocks are appended sorted by bounds.
    """
    kept: list[VectorFeature] = []
    buildings: list[VectorFeature] = []
    for f in features:
        if f.class_id is ClassId.BUILDINGS:
            if lod.building_mode == "agglomerated":
                buildings.append(f)
            else:
                kept.append(f)
            continue
        if f.class_id is ClassId.ROADS:
            if lod.max_road_rank is not None and f.rank is not None and f.rank > lod.max_road_rank:
                continue
            kept.append(f)
            continue
        if isinstance(f.geometry, _POLYGON_TYPES) and f.area_m2 < lod.min_polygon_area_m2:
            continue
        kept.append(f)
    if buildings:
        parts = _closing_parts([f.geometry for f in buildings], lod.agglomeration_radius_m)
        parts.sort(key=lambda g: g.bounds)
        kept.extend(VectorFeature(g, ClassId.BUILDINGS) for g in parts)
    return tuple(kept)


def _to_pixel_frame(geometry: BaseGeometry, georef: AffineGeoref) -> BaseGeometry:
    inv = georef.invert()

    def tr(coords: np.ndarray) -> np.ndarray:
        u, v = inv.apply(coords[:, 0], coords[:, 1])
        return np.stack([u, v], axis=1)

    return shapely.transform(geometry, tr)


def rasterize_array(
    features: Iterable[VectorFeature],
    shape_hw: tuple[int, int],
    georef: AffineGeoref,
    spec: StyleSpec,
) -> np.ndarray:
    """Rasterize features to a class-index array on the tile's pixel grid.

    A pixel takes the class of the feature covering its centre; where classes
    overlap, buildings win over roads over hydrography over forest. Polylines
    are drawn with the spec's per-class stroke width. Features outside the
    grid are clipped silently.
    """
    h, w = shape_hw
    if h < 1 or w < 1:
        raise ValueError(f"invalid raster shape {shape_hw}")
    out = np.zeros((h, w), dtype=np.uint8)
    ordered = sorted(features, key=lambda f: int(f.class_id))  # ascending precedence
    for f in ordered:
        shape = _to_pixel_frame(f.geometry, georef)
        if isinstance(shape, (_LINE_TYPES, Point)) or isinstance(f.geometry, (_LINE_TYPES, Point)):
            stroke = float(spec.stroke_widths_px.get(f.class_id, 1.0))
            shape = shape.buffer(stroke / 2.0, quad_segs=8)
        minx, miny, maxx, maxy = shape.bounds
        c0 = max(int(np.floor(minx - 0.5)), 0)
        c1 = min(int(np.ceil(maxx - 0.5)) + 1, w)
        r0 = max(int(np.floor(miny - 0.5)), 0)
        r1 = min(int(np.ceil(maxy - 0.5)) + 1, h)
        if c0 >= c1 or r0 >= r1:
            continue
        cols, rows = np.meshgrid(np.arange(c0, c1), np.arange(r0, r1))
        hit = shapely.intersects_xy(shape, cols + 0.5, rows + 0.5)
        window = out[r0:r1, c0:c1]
        window[hit] = int(f.class_id)
    return out


def rasterize(features: Iterable[VectorFeature], tile: Tile, spec: StyleSpec) -> LabelRaster:
    """Rasterize features onto a tile's grid, returning its label raster."""
    data = rasterize_array(features, tile.shape_hw, tile.georef, spec)
    return LabelRaster(tile.tile_id, data, LabelSource.MODERN_VECTOR)


def _as_palette(spec_or_palette: StyleSpec | Mapping[ClassId, Color]) -> Mapping[ClassId, Color]:
    if isinstance(spec_or_palette, StyleSpec):
        return spec_or_palette.palette
    return spec_or_palette


def colorize(
    labels: LabelRaster | np.ndarray, spec: StyleSpec | Mapping[ClassId, Color]
) -> np.ndarray:
    """Render a label raster as a flat-colour RGB image."""
    data = labels.data if isinstance(labels, LabelRaster) else np.asarray(labels)
    palette = _as_palette(spec)
    present = np.unique(data)
    missing = [int(v) for v in present if ClassId(int(v)) not in palette]
    if missing:
        raise PaletteError(f"palette lacks colours for class ids {missing}")
    lut = np.zeros((256, 3), dtype=np.uint8)
    for cls, color in palette.items():
        lut[int(cls)] = color
    return lut[data]


def declassify(
    image: np.ndarray, spec: StyleSpec | Mapping[ClassId, Color]
) -> np.ndarray:
    """Invert :func:`colorize`: map flat palette colours back to class ids."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    palette = _as_palette(spec)
    keys = (
        img[..., 0].astype(np.int32) * 65536
        + img[..., 1].astype(np.int32) * 256
        + img[..., 2].astype(np.int32)
    )
    out = np.zeros(img.shape[:2], dtype=np.uint8)
    matched = np.zeros(img.shape[:2], dtype=bool)
    for cls, (r, g, b) in palette.items():
        mask = keys == (r * 65536 + g * 256 + b)
        out[mask] = int(cls)
        matched |= mask
    if not matched.all():
        bad = img[~matched][0]
        raise PaletteError(f"image colour {tuple(int(v) for v in bad)} not in palette")
    return out


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def parse_hex(text: str) -> Color:
    t = text.strip().lstrip("#")
    if len(t) != 6:
        raise PaletteError(f"expected RRGGBB hex colour, got {text!r}")
    return tuple(int(t[i : i + 2], 16) for i in (0, 2, 4))  # type: ignore[return-value]


def format_hex(color: Color) -> str:
    return "#{:02X}{:02X}{:02X}".format(*color)


def load_features(path: Path | str) -> tuple[VectorFeature, ...]:
    """Read features from a text file of ``<class> <rank|-> <wkt>`` lines."""
    out: list[VectorFeature] = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            cls_name, rank_s, wkt = line.split(maxsplit=2)
            cls = ClassId[cls_name.upper()]
            rank = None if rank_s == "-" else int(rank_s)
            geom = shapely.wkt.loads(wkt)
            out.append(VectorFeature(geom, cls, rank))
        except (KeyError, ValueError, shapely.errors.ShapelyError) as exc:
            raise ValueError(f"{path}:{ln}: bad feature line: {exc}") from exc
    return tuple(out)


def save_features(features: Iterable[VectorFeature], path: Path | str) -> None:
    lines = [
        f"{f.class_id.name.lower()} {'-' if f.rank is None else f.rank} {f.geometry.wkt}"
        for f in features
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_style_spec(path: Path | str) -> StyleSpec:
    """Load a style spec from YAML (see :func:`save_style_spec` for the layout)."""
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping")
    try:
        collection = Collection(raw["collection"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: bad or missing collection: {exc}") from exc
    lod_raw = raw.get("lod") or {}
    unknown = set(lod_raw) - {
        "min_polygon_area_m2",
        "max_road_rank",
        "building_mode",
        "agglomeration_radius_m",
    }
    if unknown:
        raise ConfigError(f"{path}: unknown lod keys {sorted(unknown)}")
    lod = LodSpec(**lod_raw)
    palette = {
        ClassId[name.upper()]: parse_hex(hex_s) for name, hex_s in (raw.get("palette") or {}).items()
    }
    strokes = {
        ClassId[name.upper()]: float(v)
        for name, v in (raw.get("stroke_widths_px") or {}).items()
    }
    return StyleSpec(
        collection=collection,
        lod=lod,
        palette=palette or dict(DEFAULT_PALETTE),
        stroke_widths_px=strokes or dict(DEFAULT_STROKES_PX),
    )


def save_style_spec(spec: StyleSpec, path: Path | str) -> None:
    raw = {
        "collection": spec.collection.value,
        "lod": {
            "min_polygon_area_m2": spec.lod.min_polygon_area_m2,
            "max_road_rank": spec.lod.max_road_rank,
            "building_mode": spec.lod.building_mode,
            "agglomeration_radius_m": spec.lod.agglomeration_radius_m,
        },
        "palette": {ClassId(c).name.lower(): format_hex(col) for c, col in spec.palette.items()},
        "stroke_widths_px": {ClassId(c).name.lower(): w for c, w in spec.stroke_widths_px.items()},
    }
    Path(path).write_text(yaml.safe_dump(raw, sort_keys=False))
