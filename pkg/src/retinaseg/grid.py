"""Retina-like multi-resolution grids over square image subareas.

A grid at resolution level r covers a d x d subarea with 16 + 12*(r-1)
square cells: a 4x4 base layer whose central 2x2 block is replaced by a
twice-finer 4x4 layer, recursively, r-1 times. Resolution is therefore
highest at the center of the subarea and halves toward the periphery.
Each cell carries a probability mass function (pmf) over the K classes,
describing the class composition of the pixels under it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .dataio import LabelImage
from .errors import ConfigError, DataError

BASE_CELLS = 16
RING_CELLS = 12


def cell_count(level: int) -> int:
    """Number of cells in a grid at the given resolution level."""
    return BASE_CELLS + RING_CELLS * (level - 1)


@dataclass(frozen=True)
class CellRect:
    """One square grid cell; offsets are relative to the subarea origin."""

    x: int
    y: int
    width: int
    height: int

    def contains(self, px: int, py: int) -> bool:
        return (self.x <= px < self.x + self.width
                and self.y <= py < self.y + self.height)


@dataclass(frozen=True)
class RetinaGrid:
    """Immutable cell layout for one fixation.

    Cells are ordered ring by ring from the outermost (coarsest) to the
    innermost 4x4 block, row-major within each ring. The order is fixed
    so serialized pmf vectors are comparable across runs.
    """

    level: int
    subarea_size: int
    cells: tuple[CellRect, ...]

    def __len__(self) -> int:
        return len(self.cells)

    @cached_property
    def cell_index_map(self) -> np.ndarray:
        """d x d int32 map from pixel offset to covering cell index."""
        d = self.subarea_size
        idx = np.full((d, d), -1, dtype=np.int32)
        for i, c in enumerate(self.cells):
            idx[c.y:c.y + c.height, c.x:c.x + c.width] = i
        return idx


@dataclass
class GridPmf:
    """Per-cell class pmfs for one fixation (targets or predictions).

    masked[i] is True when cell i carries no class information (every
    pixel under it was ambiguous); masked cells hold a uniform
    placeholder and are excluded from loss and entropy.
    """

    pmfs: np.ndarray    # (N, K)
    masked: np.ndarray  # (N,) bool

    @property
    def n_cells(self) -> int:
        return self.pmfs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.pmfs.shape[1]

    def validate(self, tol: float = 1e-6) -> None:
        if self.pmfs.ndim != 2 or self.masked.shape != (self.pmfs.shape[0],):
            raise DataError("pmf/mask shape mismatch")
        if np.any(self.pmfs < 0):
            raise DataError("negative pmf entry")
        sums = self.pmfs[~self.masked].sum(axis=1)
        if sums.size and np.max(np.abs(sums - 1.0)) > tol:
            raise DataError("unmasked pmf rows must sum to 1 within %g" % tol)


def build_grid(subarea_size: int, level: int) -> RetinaGrid:
    """Construct the retina grid for a d x d subarea at resolution level r.

    Rejects geometries where d is not divisible by 4*2**(r-1): the
    innermost cells would not have an integer pixel side.
    """
    d, r = subarea_size, level
    if r < 1:
        raise ConfigError(f"resolution level must be >= 1, got {r}")
    if d < 4:
        raise ConfigError(f"subarea size must be >= 4, got {d}")
    finest = 4 * 2 ** (r - 1)
    if d % finest != 0:
        raise ConfigError(
            f"subarea size {d} is not divisible by {finest}; "
            f"level {r} needs integer cell sides")

    cells: list[CellRect] = []
    for lv in range(1, r + 1):
        side = d // (4 * 2 ** (lv - 1))
        origin = (d - 4 * side) // 2
        last = lv == r
        for gy in range(4):
            for gx in range(4):
                if not last and 1 <= gx <= 2 and 1 <= gy <= 2:
                    continue  # replaced by the next, finer layer
                cells.append(CellRect(origin + gx * side, origin + gy * side,
                                      side, side))
    grid = RetinaGrid(level=r, subarea_size=d, cells=tuple(cells))
    assert len(grid.cells) == cell_count(r)
    return grid


def cell_of_pixel(grid: RetinaGrid, x: int, y: int) -> int:
    """Index of the unique cell containing pixel (x, y) of the subarea."""
    d = grid.subarea_size
    if not (0 <= x < d and 0 <= y < d):
        raise ValueError(f"pixel ({x}, {y}) outside {d}x{d} subarea")
    return int(grid.cell_index_map[y, x])


def encode_targets(labels: LabelImage, grid: RetinaGrid,
                   n_classes: int) -> GridPmf:
    """Encode a ground-truth label patch as per-cell class pmfs.

    Only non-ambiguous pixels count; a cell whose pixels are all
    ambiguous becomes masked and gets a uniform placeholder pmf.
    """
    d = grid.subarea_size
    cls = labels.classes
    amb = labels.ambiguous
    if cls.shape != (d, d):
        raise DataError(f"label patch shape {cls.shape} != grid size {d}x{d}")
    n = len(grid.cells)
    valid = ~amb
    vals = cls[valid]
    if vals.size:
        lo, hi = int(vals.min()), int(vals.max())
        if lo < 0 or hi >= n_classes:
            raise DataError(
                f"label patch contains class id {hi if hi >= n_classes else lo} "
                f"outside [0, {n_classes})")
    flat = grid.cell_index_map[valid].astype(np.int64) * n_classes + vals
    hist = np.bincount(flat, minlength=n * n_classes).reshape(n, n_classes)
    hist = hist.astype(np.float64)
    totals = hist.sum(axis=1)
    masked = totals == 0
    pmfs = hist / np.maximum(totals, 1.0)[:, None]
    pmfs[masked] = 1.0 / n_classes
    return GridPmf(pmfs=pmfs, masked=masked)


def geometry_dump(grid: RetinaGrid) -> str:
    """Plain-text geometry: one cell per line as 'index x y side'."""
    lines = [f"{i} {c.x} {c.y} {c.width}" for i, c in enumerate(grid.cells)]
    return "\n".join(lines) + "\n"
