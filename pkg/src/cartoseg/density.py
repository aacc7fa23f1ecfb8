"""Forest-density grids aggregated from per-pixel segmentations.

Each cell of a square kilometre grid accumulates two exact integer counts:
how many classified pixels fall inside it (``covered_px``) and how many of
those are forest (``forest_px``). Pixels are assigned by their world-space
centre, so every classified pixel lands in exactly one cell and totals are
conserved. The fraction map is only defined where cells received pixels;
uncovered cells render as hatched grey.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ClassId
from .errors import ConfigError
from .rasters import AffineGeoref

DENSITY_FORMAT = "cartoseg-density-v1"

_RAMP_LOW = np.array([255, 255, 255], dtype=np.float64)
_RAMP_HIGH = np.array([27, 94, 32], dtype=np.float64)
_MISSING_BASE = 210
_MISSING_HATCH = 170


@dataclass(frozen=True)
class DensityMap:
    """Integer counts on a south-west anchored grid (row 0 at origin_y)."""

    forest_px: np.ndarray
    covered_px: np.ndarray
    cell_size_km: float
    origin: tuple[float, float]
    era: str = ""

    def __post_init__(self) -> None:
        f, c = self.forest_px, self.covered_px
        if f.shape != c.shape or f.ndim != 2:
            raise ValueError(f"grid shapes differ: {f.shape} vs {c.shape}")
        if f.dtype != np.int64 or c.dtype != np.int64:
            raise ValueError("counts must be int64")
        if (f < 0).any() or (c < 0).any() or (f > c).any():
            raise ValueError("forest counts must satisfy 0 <= forest <= covered")
        if self.cell_size_km <= 0:
            raise ConfigError("cell_size_km must be > 0")

    @property
    def fraction(self) -> np.ndarray:
        """Forest fraction per cell; NaN where no pixels were observed."""
        out = np.full(self.covered_px.shape, np.nan, dtype=np.float64)
        seen = self.covered_px > 0
        out[seen] = self.forest_px[seen] / self.covered_px[seen]
        return out


def _pixel_centres(georef: AffineGeoref, shape_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape_hw
    rows, cols = np.indices((h, w), dtype=np.float64)
    px, py = cols + 0.5, rows + 0.5
    x = georef.a * px + georef.b * py + georef.c
    y = georef.d * px + georef.e * py + georef.f
    return x.ravel(), y.ravel()


def forest_density(
    predictions: Sequence[tuple[np.ndarray, AffineGeoref]],
    cell_size_km: float = 10.0,
    era: str = "",
) -> DensityMap:
    """Bin every classified pixel of every tile into the kilometre grid."""
    if cell_size_km <= 0:
        raise ConfigError("cell_size_km must be > 0")
    if not predictions:
        raise ValueError("need at least one prediction")
    size_m = cell_size_km * 1000.0

    xs, ys, forest_flags = [], [], []
    for labels, georef in predictions:
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise ValueError(f"expected (H, W) labels, got shape {labels.shape}")
        x, y = _pixel_centres(georef, labels.shape)
        xs.append(x)
        ys.append(y)
        forest_flags.append((labels == int(ClassId.FOREST)).ravel())
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    forest = np.concatenate(forest_flags)

    origin_x = np.floor(x.min() / size_m) * size_m
    origin_y = np.floor(y.min() / size_m) * size_m
    ix = np.floor((x - origin_x) / size_m).astype(np.int64)
    iy = np.floor((y - origin_y) / size_m).astype(np.int64)
    nx = int(ix.max()) + 1
    ny = int(iy.max()) + 1
    flat = iy * nx + ix
    covered = np.bincount(flat, minlength=ny * nx).astype(np.int64).reshape(ny, nx)
    forest_px = (
        np.bincount(flat[forest], minlength=ny * nx).astype(np.int64).reshape(ny, nx)
    )
    return DensityMap(
        forest_px=forest_px,
        covered_px=covered,
        cell_size_km=float(cell_size_km),
        origin=(float(origin_x), float(origin_y)),
        era=era,
    )


def save_density(path: Path | str, dmap: DensityMap) -> None:
    payload = {
        "format": DENSITY_FORMAT,
        "cell_size_km": dmap.cell_size_km,
        "origin": list(dmap.origin),
        "era": dmap.era,
        "forest_px": dmap.forest_px.tolist(),
        "covered_px": dmap.covered_px.tolist(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload))


def load_density(path: Path | str) -> DensityMap:
    raw = json.loads(Path(path).read_text())
    if raw.get("format") != DENSITY_FORMAT:
        raise ValueError(f"{path} is not a {DENSITY_FORMAT} file")
    return DensityMap(
        forest_px=np.asarray(raw["forest_px"], dtype=np.int64),
        covered_px=np.asarray(raw["covered_px"], dtype=np.int64),
        cell_size_km=float(raw["cell_size_km"]),
        origin=(float(raw["origin"][0]), float(raw["origin"][1])),
        era=str(raw.get("era", "")),
    )


def render_density(dmap: DensityMap, px_per_cell: int = 16) -> np.ndarray:
    """North-up RGB rendering: white-to-dark-green ramp, hatched gaps."""
    if px_per_cell < 1:
        raise ConfigError("px_per_cell must be >= 1")
    frac = np.flipud(dmap.fraction)
    seen = ~np.isnan(frac)
    filled = np.where(seen, frac, 0.0)[..., None]
    cells = _RAMP_LOW + filled * (_RAMP_HIGH - _RAMP_LOW)
    img = np.repeat(np.repeat(cells, px_per_cell, axis=0), px_per_cell, axis=1)
    missing = np.repeat(np.repeat(~seen, px_per_cell, axis=0), px_per_cell, axis=1)
    rows, cols = np.indices(missing.shape)
    hatch = ((rows + cols) % max(2, px_per_cell // 2)) == 0
    img[missing] = _MISSING_BASE
    img[missing & hatch] = _MISSING_HATCH
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)
