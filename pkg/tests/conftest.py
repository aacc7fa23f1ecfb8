"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from cartoseg.corpus import Manifest, ManifestEntry


def grid_manifest(
    n: int,
    annotated: int | None = None,
    ncols: int = 10,
    spacing: float = 1000.0,
) -> Manifest:
    """Build an in-memory manifest of n tiles laid out on a regular grid.

    Tiles are annotated for the first ``annotated`` ids (all if None).
    Centroids walk the grid column-major-ish: id i sits at column i % ncols,
    row i // ncols, so sorting by x groups columns together.
    """
    entries = []
    for i in range(n):
        col, row = i % ncols, i // ncols
        entries.append(
            ManifestEntry(
                tile_id=f"t{i:05d}",
                centroid_x_m=col * spacing,
                centroid_y_m=-row * spacing,
                annotated=(annotated is None or i < annotated),
            )
        )
    return Manifest(entries=tuple(entries), root=Path("."))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
