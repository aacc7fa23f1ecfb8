"""Segmentation metrics with tolerance for small annotation misalignment.

The headline score is the dilated intersection over union (dIoU): both the
prediction P and the ground truth T are dilated by a small radius w, and

    dIoU = | (Dil(P) & T) | (P & Dil(T)) |  /  | P | T |

so boundary disagreements within w pixels do not count as errors while the
denominator stays the plain union (no credit for inflating predictions).
Reports carry integer confusion and per-class dIoU numerator/denominator
counts, so aggregating over tiles is an exact micro-average.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import scipy.ndimage as ndi

from .corpus import NUM_CLASSES, ClassId, LabelRaster
from .errors import ConfigError, EmptyAggregateError


@dataclass(frozen=True)
class MetricConfig:
    """Evaluation settings: dilation radius/shape and mean-dIoU scope."""

    dilation_radius_w: int = 3
    structuring_element: str = "square"
    exclude_background_from_mean: bool = True

    def __post_init__(self) -> None:
        if self.dilation_radius_w < 0:
            raise ConfigError("dilation_radius_w must be >= 0")
        if self.structuring_element not in ("square", "disk"):
            raise ConfigError(f"unknown structuring element {self.structuring_element!r}")


def structuring_element(w: int, kind: str = "square") -> np.ndarray:
    """(2w+1)^2 neighbourhood: Chebyshev ball ('square') or Euclidean ('disk')."""
    if w < 0:
        raise ConfigError("radius must be >= 0")
    if kind == "square":
        return np.ones((2 * w + 1, 2 * w + 1), dtype=bool)
    if kind == "disk":
        dy, dx = np.mgrid[-w : w + 1, -w : w + 1]
        return (dy * dy + dx * dx) <= w * w
    raise ConfigError(f"unknown structuring element {kind!r}")


def dilate(mask: np.ndarray, w: int, kind: str = "square") -> np.ndarray:
    """Binary dilation by radius w (w = 0 returns the mask unchanged)."""
    m = np.asarray(mask, dtype=bool)
    if w == 0:
        return m.copy()
    return ndi.binary_dilation(m, structure=structuring_element(w, kind))


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs truth {t.shape}")
    if p.ndim != 2:
        raise ValueError(f"expected 2-D rasters, got {p.ndim}-D")
    return p, t


def iou(pred_mask: np.ndarray, truth_mask: np.ndarray) -> float:
    """Plain intersection over union of two binary masks (both empty -> 1.0)."""
    p, t = _check_pair(pred_mask, truth_mask)
    p, t = p.astype(bool), t.astype(bool)
    union = int((p | t).sum())
    if union == 0:
        return 1.0
    return int((p & t).sum()) / union


def diou_counts(
    pred_mask: np.ndarray, truth_mask: np.ndarray, cfg: MetricConfig = MetricConfig()
) -> tuple[int, int]:
    """Numerator and denominator pixel counts of the dilated IoU."""
    p, t = _check_pair(pred_mask, truth_mask)
    p, t = p.astype(bool), t.astype(bool)
    w, kind = cfg.dilation_radius_w, cfg.structuring_element
    num = int(((dilate(p, w, kind) & t) | (p & dilate(t, w, kind))).sum())
    den = int((p | t).sum())
    return num, den


def diou(
    pred_mask: np.ndarray, truth_mask: np.ndarray, cfg: MetricConfig = MetricConfig()
) -> float:
    """Dilated IoU of two binary masks (both empty -> 1.0)."""
    num, den = diou_counts(pred_mask, truth_mask, cfg)
    if den == 0:
        return 1.0
    return num / den


@dataclass(frozen=True)
class MetricReport:
    """Confusion matrix plus per-class dIoU counts for one or more tiles."""

    confusion: np.ndarray  # (C, C) int64, rows = truth, cols = prediction
    diou_num: np.ndarray  # (C,) int64
    diou_den: np.ndarray  # (C,) int64
    exclude_background_from_mean: bool = True
    tile_count: int = 1

    def __post_init__(self) -> None:
        c = self.confusion
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion must be square, got {c.shape}")
        if self.diou_num.shape != (c.shape[0],) or self.diou_den.shape != (c.shape[0],):
            raise ValueError("per-class count vectors must match the confusion size")

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    @property
    def overall_accuracy(self) -> float:
        total = int(self.confusion.sum())
        if total == 0:
            raise ValueError("report has no pixels")
        return int(np.trace(self.confusion)) / total

    @property
    def per_class_diou(self) -> np.ndarray:
        """dIoU per class; classes absent from both rasters score 1.0."""
        num = self.diou_num.astype(np.float64)
        den = self.diou_den.astype(np.float64)
        return np.where(den > 0, num / np.maximum(den, 1), 1.0)

    @property
    def mean_diou(self) -> float:
        scores = self.per_class_diou
        if self.exclude_background_from_mean:
            scores = scores[1:]
        if scores.size == 0:
            raise ValueError("no classes left to average")
        return float(scores.mean())

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "diou_num": self.diou_num.tolist(),
            "diou_den": self.diou_den.tolist(),
            "exclude_background_from_mean": self.exclude_background_from_mean,
            "tile_count": self.tile_count,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MetricReport":
        return cls(
            confusion=np.asarray(raw["confusion"], dtype=np.int64),
            diou_num=np.asarray(raw["diou_num"], dtype=np.int64),
            diou_den=np.asarray(raw["diou_den"], dtype=np.int64),
            exclude_background_from_mean=bool(raw.get("exclude_background_from_mean", True)),
            tile_count=int(raw.get("tile_count", 1)),
        )


def evaluate_pair(
    pred: np.ndarray | LabelRaster,
    truth: np.ndarray | LabelRaster,
    cfg: MetricConfig = MetricConfig(),
    num_classes: int = NUM_CLASSES,
) -> MetricReport:
    """Evaluate one predicted label raster against its ground truth."""
    p = pred.data if isinstance(pred, LabelRaster) else np.asarray(pred)
    t = truth.data if isinstance(truth, LabelRaster) else np.asarray(truth)
    p, t = _check_pair(p, t)
    if int(p.max(initial=0)) >= num_classes or int(t.max(initial=0)) >= num_classes:
        raise ValueError(f"label values exceed num_classes={num_classes}")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    flat = t.astype(np.int64).ravel() * num_classes + p.astype(np.int64).ravel()
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    confusion += counts.reshape(num_classes, num_classes)
    nums = np.zeros(num_classes, dtype=np.int64)
    dens = np.zeros(num_classes, dtype=np.int64)
    for cls in range(num_classes):
        nums[cls], dens[cls] = diou_counts(p == cls, t == cls, cfg)
    return MetricReport(
        confusion=confusion,
        diou_num=nums,
        diou_den=dens,
        exclude_background_from_mean=cfg.exclude_background_from_mean,
        tile_count=1,
    )


def aggregate_reports(reports: Iterable[MetricReport]) -> MetricReport:
    """Micro-average reports by summing confusion and dIoU pixel counts."""
    reports = list(reports)
    if not reports:
        raise EmptyAggregateError("cannot aggregate zero reports")
    first = reports[0]
    for r in reports[1:]:
        if r.num_classes != first.num_classes:
            raise ValueError("reports disagree in class count")
        if r.exclude_background_from_mean != first.exclude_background_from_mean:
            raise ValueError("reports disagree in background handling")
    return MetricReport(
        confusion=sum(r.confusion for r in reports),
        diou_num=sum(r.diou_num for r in reports),
        diou_den=sum(r.diou_den for r in reports),
        exclude_background_from_mean=first.exclude_background_from_mean,
        tile_count=sum(r.tile_count for r in reports),
    )


def evaluate_tiles(
    pairs: Sequence[tuple[np.ndarray | LabelRaster, np.ndarray | LabelRaster]],
    cfg: MetricConfig = MetricConfig(),
    num_classes: int = NUM_CLASSES,
) -> MetricReport:
    """Evaluate and micro-average a batch of (prediction, truth) pairs."""
    return aggregate_reports(evaluate_pair(p, t, cfg, num_classes) for p, t in pairs)
