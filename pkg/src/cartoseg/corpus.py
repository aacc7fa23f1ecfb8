"""Tile corpus model: class taxonomy, manifests, spatial folds, splits, patch tiling.

A corpus is a set of georeferenced map tiles. Each tile may carry an image
and/or a label raster per collection (map edition). A YAML manifest indexes
the corpus: one entry per tile with its id, centroid in projected metres, an
``annotated`` flag (true when manually drawn historical labels exist), and
per-collection relative paths for images and labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np
import yaml

from .errors import (
    DanglingReferenceError,
    EmptySplitError,
    InfeasibleSplitError,
    ManifestError,
)
from .rasters import AffineGeoref, read_image, read_labels, read_world_file


class ClassId(IntEnum):
    """Semantic classes; raster label values are these indices."""

    BACKGROUND = 0
    FOREST = 1
    HYDROGRAPHY = 2
    ROADS = 3
    BUILDINGS = 4


NUM_CLASSES = len(ClassId)
CLASS_NAMES = tuple(c.name.lower() for c in ClassId)
FOREGROUND_CLASSES = tuple(c for c in ClassId if c is not ClassId.BACKGROUND)


class Collection(str, Enum):
    """Map editions a tile may have imagery or labels for."""

    CASSINI = "cassini"
    ETATMAJOR = "etatmajor"
    SCAN50 = "scan50"
    MODERN = "modern"


class LabelSource(str, Enum):
    HISTORICAL_MANUAL = "historical_manual"
    MODERN_VECTOR = "modern_vector"


# Train/val tile counts of the weakly-supervised reference split; their ratio
# fixes how unannotated corpora of any size are divided.
WEAK_TRAIN_TILES = 9096
WEAK_VAL_TILES = 1386
WEAK_VAL_FRACTION = WEAK_VAL_TILES / (WEAK_TRAIN_TILES + WEAK_VAL_TILES)


@dataclass(frozen=True)
class Tile:
    """A georeferenced image tile."""

    tile_id: str
    collection: Collection
    image: np.ndarray
    georef: AffineGeoref
    resolution_m_per_px: float

    def __post_init__(self) -> None:
        img = self.image
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise ValueError(f"tile {self.tile_id}: expected (H, W, 3) uint8 image, got {img.dtype} {img.shape}")
        if img.shape[0] < 1 or img.shape[1] < 1:
            raise ValueError(f"tile {self.tile_id}: empty image")
        if not (self.resolution_m_per_px > 0):
            raise ValueError(f"tile {self.tile_id}: resolution must be positive")

    @property
    def shape_hw(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass(frozen=True)
class LabelRaster:
    """A per-pixel class-index raster aligned with a tile."""

    tile_id: str
    data: np.ndarray
    source: LabelSource

    def __post_init__(self) -> None:
        d = self.data
        if d.ndim != 2 or d.dtype != np.uint8:
            raise ValueError(f"labels {self.tile_id}: expected (H, W) uint8, got {d.dtype} {d.shape}")
        if d.size == 0:
            raise ValueError(f"labels {self.tile_id}: empty raster")
        if int(d.max(initial=0)) >= NUM_CLASSES:
            raise ValueError(f"labels {self.tile_id}: class index out of range (max {int(d.max())})")


@dataclass(frozen=True)
class ManifestEntry:
    tile_id: str
    centroid_x_m: float
    centroid_y_m: float
    annotated: bool
    images: Mapping[Collection, str] = field(default_factory=dict)
    labels: Mapping[Collection, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Manifest:
    """Index of a tile corpus; paths are relative to ``root``."""

    entries: tuple[ManifestEntry, ...]
    root: Path

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for e in self.entries:
            if e.tile_id in seen:
                raise ManifestError(f"duplicate tile id {e.tile_id!r}")
            seen.add(e.tile_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(e.tile_id for e in self.entries)

    @property
    def annotated_ids(self) -> tuple[str, ...]:
        return tuple(e.tile_id for e in self.entries if e.annotated)

    @property
    def unannotated_ids(self) -> tuple[str, ...]:
        return tuple(e.tile_id for e in self.entries if not e.annotated)

    def entry(self, tile_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.tile_id == tile_id:
                return e
        raise KeyError(f"tile id {tile_id!r} not in manifest")


def _entry_from_dict(raw: dict) -> ManifestEntry:
    try:
        tile_id = str(raw["tile_id"])
        cx = float(raw["centroid_x_m"])
        cy = float(raw["centroid_y_m"])
        annotated = bool(raw["annotated"])
    except KeyError as exc:
        raise ManifestError(f"manifest entry missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"manifest entry for {raw.get('tile_id')!r}: {exc}") from exc

    def coerce(section: str) -> dict[Collection, str]:
        out: dict[Collection, str] = {}
        for key, path in (raw.get(section) or {}).items():
            try:
                out[Collection(key)] = str(path)
            except ValueError as exc:
                raise ManifestError(f"tile {tile_id!r}: unknown collection {key!r}") from exc
        return out

    return ManifestEntry(tile_id, cx, cy, annotated, coerce("images"), coerce("labels"))


def load_manifest(path: Path | str, check_files: bool = True) -> Manifest:
    """Load a YAML manifest; optionally verify every referenced file exists."""
    path = Path(path)
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict) or not isinstance(raw.get("tiles"), list):
        raise ManifestError(f"{path}: expected a mapping with a 'tiles' list")
    entries = tuple(_entry_from_dict(t) for t in raw["tiles"])
    manifest = Manifest(entries=entries, root=path.parent)
    if check_files:
        missing = [
            str(manifest.root / rel)
            for e in manifest.entries
            for rel in (*e.images.values(), *e.labels.values())
            if not (manifest.root / rel).is_file()
        ]
        if missing:
            raise DanglingReferenceError(
                f"{len(missing)} referenced file(s) missing, first: {missing[0]}"
            )
    return manifest


def save_manifest(manifest: Manifest, path: Path | str) -> None:
    """Write a manifest back to YAML (paths stay relative to the file)."""
    tiles = []
    for e in manifest.entries:
        tiles.append(
            {
                "tile_id": e.tile_id,
                "centroid_x_m": float(e.centroid_x_m),
                "centroid_y_m": float(e.centroid_y_m),
                "annotated": bool(e.annotated),
                "images": {c.value: p for c, p in e.images.items()},
                "labels": {c.value: p for c, p in e.labels.items()},
            }
        )
    Path(path).write_text(yaml.safe_dump({"tiles": tiles}, sort_keys=False))


def _sidecar_georef(image_path: Path, resolution_m_per_px: float) -> AffineGeoref:
    wld = image_path.with_suffix(".wld")
    if wld.is_file():
        return read_world_file(wld)
    return AffineGeoref.north_up(0.0, 0.0, resolution_m_per_px)


def load_tile(
    manifest: Manifest,
    tile_id: str,
    collection: Collection,
    resolution_m_per_px: float = 1.0,
) -> Tile:
    """Load one tile image (and its world-file georef, if present)."""
    entry = manifest.entry(tile_id)
    try:
        rel = entry.images[collection]
    except KeyError:
        raise KeyError(f"tile {tile_id!r} has no {collection.value} image") from None
    img_path = manifest.root / rel
    georef = _sidecar_georef(img_path, resolution_m_per_px)
    res = abs(georef.a) if georef.a != 0 else resolution_m_per_px
    return Tile(tile_id, collection, read_image(img_path), georef, res)


def load_labels(manifest: Manifest, tile_id: str, collection: Collection) -> LabelRaster:
    """Load one tile's label raster for a collection."""
    entry = manifest.entry(tile_id)
    try:
        rel = entry.labels[collection]
    except KeyError:
        raise KeyError(f"tile {tile_id!r} has no {collection.value} labels") from None
    source = (
        LabelSource.MODERN_VECTOR if collection is Collection.MODERN else LabelSource.HISTORICAL_MANUAL
    )
    return LabelRaster(tile_id, read_labels(manifest.root / rel), source)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    """Assignment of annotated tiles to k spatially contiguous folds."""

    k: int
    assignment: Mapping[str, int]

    def __post_init__(self) -> None:
        folds = set(self.assignment.values())
        if folds != set(range(self.k)):
            raise ValueError(f"fold assignment must cover exactly folds 0..{self.k - 1}")

    def fold_ids(self, fold: int) -> tuple[str, ...]:
        if not (0 <= fold < self.k):
            raise ValueError(f"fold {fold} out of range for k={self.k}")
        return tuple(sorted(t for t, f in self.assignment.items() if f == fold))


def make_folds(manifest: Manifest, k: int, seed: int = 0) -> FoldSplit:
    """Partition the annotated tiles into k spatially distinct folds.

    Tiles are ordered by centroid x (ties broken by y, then id) and cut into
    k contiguous vertical bands of near-equal size; the first ``n mod k``
    bands take one extra tile. The layout depends only on centroids, so the
    result is identical for any ``seed``.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    annotated = [e for e in manifest.entries if e.annotated]
    if len(annotated) < k:
        raise InfeasibleSplitError(f"need at least {k} annotated tiles, have {len(annotated)}")
    annotated.sort(key=lambda e: (e.centroid_x_m, e.centroid_y_m, e.tile_id))
    n = len(annotated)
    base, extra = divmod(n, k)
    assignment: dict[str, int] = {}
    pos = 0
    for fold in range(k):
        size = base + (1 if fold < extra else 0)
        for e in annotated[pos : pos + size]:
            assignment[e.tile_id] = fold
        pos += size
    return FoldSplit(k=k, assignment=assignment)


def split_supervised(
    folds: FoldSplit, test_fold: int, seed: int = 0, val_fraction: float = 0.2
) -> tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]:
    """Split fold assignments into (train, val, test) tile ids.

    The test set is one whole fold; the remaining tiles are shuffled with
    ``seed`` and split 80/20 into train/val (val size = floor(0.2 * rest)).
    """
    test = folds.fold_ids(test_fold)
    rest = sorted(t for t, f in folds.assignment.items() if f != test_fold)
    if not rest:
        raise EmptySplitError("no tiles left outside the test fold")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(rest))
    n_val = math.floor(val_fraction * len(rest))
    val = tuple(rest[i] for i in order[:n_val])
    train = tuple(rest[i] for i in order[n_val:])
    if not train:
        raise EmptySplitError("train split is empty")
    return train, val, test


def split_weak(manifest: Manifest, seed: int = 0) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Split the unannotated tiles into (train, val) for weak supervision.

    The validation share is the reference ratio 1386/10482; the count is
    rounded half-down so the reference corpus reproduces exactly 9096/1386.
    """
    pool = sorted(manifest.unannotated_ids)
    if not pool:
        raise EmptySplitError("manifest has no unannotated tiles")
    n = len(pool)
    n_val = math.ceil(n * WEAK_VAL_FRACTION - 0.5)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    val = tuple(pool[i] for i in order[:n_val])
    train = tuple(pool[i] for i in order[n_val:])
    if not train:
        raise EmptySplitError("weak train split is empty")
    return train, val


# ---------------------------------------------------------------------------
# Patch tiling
# ---------------------------------------------------------------------------


class Patch(NamedTuple):
    """A square window cut from a (possibly padded) tile."""

    image: np.ndarray
    labels: np.ndarray | None
    offset: tuple[int, int]  # (row, col) of the top-left corner in the padded tile


def extract_patches(
    image: np.ndarray, labels: np.ndarray | None, patch_px: int
) -> list[Patch]:
    """Cut an image (and optional labels) into a full grid of square patches.

    The tile is padded on the bottom/right to the next multiple of
    ``patch_px``: the image by mirror reflection, the labels with background
    (class 0). Patches tile the padded raster exactly, row-major.
    """
    if patch_px < 1:
        raise ValueError("patch_px must be positive")
    img = np.asarray(image)
    if img.ndim not in (2, 3):
        raise ValueError(f"expected 2-D or 3-D image, got shape {img.shape}")
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("image is empty")
    pad_h = (-h) % patch_px
    pad_w = (-w) % patch_px
    pad_spec = ((0, pad_h), (0, pad_w)) + ((0, 0),) * (img.ndim - 2)
    padded = np.pad(img, pad_spec, mode="reflect")

    padded_labels = None
    if labels is not None:
        lab = np.asarray(labels)
        if lab.shape != (h, w):
            raise ValueError(f"labels shape {lab.shape} does not match image {img.shape[:2]}")
        padded_labels = np.pad(lab, ((0, pad_h), (0, pad_w)), mode="constant", constant_values=0)

    patches: list[Patch] = []
    for top in range(0, h + pad_h, patch_px):
        for left in range(0, w + pad_w, patch_px):
            win = (slice(top, top + patch_px), slice(left, left + patch_px))
            patches.append(
                Patch(
                    image=padded[win].copy(),
                    labels=None if padded_labels is None else padded_labels[win].copy(),
                    offset=(top, left),
                )
            )
    return patches


def stitch_patches(
    patches: Sequence[tuple[np.ndarray, tuple[int, int]]] | Sequence[Patch],
    out_hw: tuple[int, int],
) -> np.ndarray:
    """Reassemble patches at their offsets and crop to the original size.

    Accepts either :class:`Patch` instances (stitching their images) or
    ``(array, (row, col))`` pairs, e.g. predicted label patches.
    """
    if not patches:
        raise ValueError("no patches to stitch")
    arrays_offsets = [
        (p.image, p.offset) if isinstance(p, Patch) else (np.asarray(p[0]), tuple(p[1]))
        for p in patches
    ]
    ref = arrays_offsets[0][0]
    full_h = max(off[0] + a.shape[0] for a, off in arrays_offsets)
    full_w = max(off[1] + a.shape[1] for a, off in arrays_offsets)
    canvas = np.zeros((full_h, full_w) + ref.shape[2:], dtype=ref.dtype)
    for a, (top, left) in arrays_offsets:
        if a.shape[2:] != ref.shape[2:] or a.dtype != ref.dtype:
            raise ValueError("patches disagree in dtype or channel shape")
        canvas[top : top + a.shape[0], left : left + a.shape[1]] = a
    h, w = out_hw
    if h > full_h or w > full_w:
        raise ValueError(f"requested output {out_hw} exceeds stitched extent {(full_h, full_w)}")
    return canvas[:h, :w]
