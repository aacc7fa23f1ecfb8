"""Raster IO and georeferencing.

Images are 8-bit RGB arrays (H, W, 3); label rasters are 8-bit single-channel
arrays (H, W) of class indices. Both round-trip losslessly through PNG.
Georeferencing sidecars use the 6-line world-file convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class AffineGeoref:
    """Affine map from continuous pixel coordinates to projected metres.

    ``(u, v)`` are continuous pixel coordinates with the origin at the outer
    corner of the top-left pixel, u along columns and v along rows; the centre
    of pixel ``(row, col)`` is ``(col + 0.5, row + 0.5)``. The map is

        x = a*u + b*v + c
        y = d*u + e*v + f

    For the usual north-up raster, ``a`` is the pixel width in metres and
    ``e`` is negative (y decreases with increasing row).
    """

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.a, self.b, self.c, self.d, self.e, self.f)):
            raise ValueError("georef coefficients must be finite")
        if self.det == 0.0:
            raise ValueError("georef is singular (zero determinant)")

    @property
    def det(self) -> float:
        return self.a * self.e - self.b * self.d

    @property
    def pixel_area_m2(self) -> float:
        """Area in square metres covered by one pixel."""
        return abs(self.det)

    def apply(self, u, v):
        """Map pixel coordinates to projected (x, y); accepts arrays."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return self.a * u + self.b * v + self.c, self.d * u + self.e * v + self.f

    def invert(self) -> "AffineGeoref":
        """Return the inverse map, from projected (x, y) back to pixels."""
        det = self.det
        ia, ib = self.e / det, -self.b / det
        id_, ie = -self.d / det, self.a / det
        ic = -(ia * self.c + ib * self.f)
        if_ = -(id_ * self.c + ie * self.f)
        return AffineGeoref(ia, ib, ic, id_, ie, if_)

    @classmethod
    def north_up(cls, x0: float, y0: float, resolution_m_per_px: float) -> "AffineGeoref":
        """Axis-aligned georef with top-left corner at (x0, y0)."""
        r = float(resolution_m_per_px)
        return cls(r, 0.0, float(x0), 0.0, -r, float(y0))


def write_world_file(path: Path | str, georef: AffineGeoref) -> None:
    """Write a 6-line world file (A, D, B, E, C, F; C/F at top-left pixel centre)."""
    cx, cy = georef.apply(0.5, 0.5)
    lines = [georef.a, georef.d, georef.b, georef.e, float(cx), float(cy)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{v:.10f}\n" for v in lines))


def read_world_file(path: Path | str) -> AffineGeoref:
    """Read a 6-line world file into a corner-origin :class:`AffineGeoref`."""
    raw = Path(path).read_text().split()
    if len(raw) != 6:
        raise ValueError(f"world file {path} must have exactly 6 values, got {len(raw)}")
    a, d, b, e, cx, cy = (float(v) for v in raw)
    # Shift from centre-of-first-pixel back to the pixel-corner origin.
    c = cx - 0.5 * a - 0.5 * b
    f = cy - 0.5 * d - 0.5 * e
    return AffineGeoref(a, b, c, d, e, f)


def write_image(path: Path | str, image: np.ndarray) -> None:
    """Save an (H, W, 3) uint8 array as PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {arr.dtype} {arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_image(path: Path | str) -> np.ndarray:
    """Load a PNG as an (H, W, 3) uint8 array."""
    with Image.open(Path(path)) as im:
        return np.asarray(im.convert("RGB"))


def write_labels(path: Path | str, labels: np.ndarray) -> None:
    """Save an (H, W) uint8 label raster as single-channel PNG."""
    arr = np.asarray(labels)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise ValueError(f"expected (H, W) uint8 labels, got {arr.dtype} {arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_labels(path: Path | str) -> np.ndarray:
    """Load a single-channel PNG as an (H, W) uint8 label raster."""
    with Image.open(Path(path)) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im)


def resize_image(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear-resize an RGB image to (height, width)."""
    h, w = out_hw
    with Image.fromarray(np.asarray(image), mode="RGB") as im:
        return np.asarray(im.resize((w, h), resample=Image.Resampling.BILINEAR))


def resize_labels(labels: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour-resize a label raster to (height, width)."""
    h, w = out_hw
    with Image.fromarray(np.asarray(labels), mode="L") as im:
        return np.asarray(im.resize((w, h), resample=Image.Resampling.NEAREST))
