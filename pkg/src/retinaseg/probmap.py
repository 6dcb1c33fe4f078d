"""Whole-image probability map: pmf accumulation, argmax, heat maps.

Every fixation deposits, for each pixel it covers, the pmf of the grid
cell sitting above that pixel. Overlapping deposits are averaged (equal
weight per fixation) and the final class is the per-pixel argmax, which
is identical whether or not the sums are divided by the overlap counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import Fixation, ScanParams, ScanTrace, scan_image
from .dataio import ClassPalette
from .errors import DataError
from .grid import GridPmf, RetinaGrid

UNKNOWN_CLASS = -1  # pixels never covered by an unmasked cell


@dataclass
class ProbabilityMap:
    """Accumulated pmf sums and overlap counts, double precision."""

    sums: np.ndarray    # (H, W, K) float64
    counts: np.ndarray  # (H, W) int64

    @classmethod
    def zeros(cls, height: int, width: int, classes: int) -> "ProbabilityMap":
        return cls(sums=np.zeros((height, width, classes)),
                   counts=np.zeros((height, width), dtype=np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def averaged(self) -> np.ndarray:
        """Per-pixel mean pmf; zeros where nothing was deposited."""
        denom = np.maximum(self.counts, 1)[:, :, None]
        return self.sums / denom


@dataclass
class Segmentation:
    classes: np.ndarray  # (H, W) int16, UNKNOWN_CLASS where uncovered
    heat: np.ndarray     # (H, W) int64 overlap counts
    uncovered: int = 0


def deposit(pmap: ProbabilityMap, fixation: Fixation, grid: RetinaGrid,
            prediction: GridPmf) -> None:
    """Add one fixation's cell pmfs to every pixel it covers.

    Masked cells deposit nothing (neither sums nor counts)."""
    d = grid.subarea_size
    h, w = pmap.counts.shape
    x, y = fixation.x, fixation.y
    if not (0 <= x <= w - d and 0 <= y <= h - d):
        raise DataError(f"fixation ({x},{y}) outside {w}x{h} map")
    idx = grid.cell_index_map
    pmf_img = prediction.pmfs.astype(np.float64)[idx]      # (d, d, K)
    keep = ~prediction.masked[idx]                          # (d, d)
    pmap.sums[y:y + d, x:x + d] += pmf_img * keep[:, :, None]
    pmap.counts[y:y + d, x:x + d] += keep


def finalize(pmap: ProbabilityMap) -> Segmentation:
    """Argmax segmentation; ties break toward the lowest class index.

    Pixels with no deposits (possible only through masked-cell gaps) get
    UNKNOWN_CLASS and are reported via Segmentation.uncovered."""
    covered = pmap.counts > 0
    classes = pmap.sums.argmax(axis=2).astype(np.int16)
    classes[~covered] = UNKNOWN_CLASS
    return Segmentation(classes=classes, heat=pmap.counts.copy(),
                        uncovered=int((~covered).sum()))


def render_heatmap(segmentation: Segmentation) -> np.ndarray:
    """Overlap counts proportionally rescaled to [0, 255] (max -> 255)."""
    peak = segmentation.heat.max()
    if peak == 0:
        return np.zeros(segmentation.heat.shape, dtype=np.uint8)
    scaled = np.rint(segmentation.heat * (255.0 / peak))
    return scaled.astype(np.uint8)


def segmentation_to_rgb(segmentation: Segmentation,
                        palette: ClassPalette) -> np.ndarray:
    """Color-coded class image; uncovered pixels render black."""
    table = np.concatenate([np.zeros((1, 3), dtype=np.uint8),
                            palette.color_array()])
    return table[segmentation.classes.astype(np.int32) + 1]


def scan_and_segment(image: np.ndarray, predict_fn, grid: RetinaGrid,
                     params: ScanParams, threads: int = 1,
                     ) -> tuple[Segmentation, ScanTrace, ProbabilityMap]:
    """Scan, accumulate and argmax in one pass.

    Predictions may be computed on parallel row workers; deposits happen
    on the caller thread in row order, so the accumulated map does not
    depend on the thread count."""
    trace, stream = scan_image(image, predict_fn, params, threads=threads)
    pmap = ProbabilityMap.zeros(trace.height, trace.width, params.classes)
    for fixation, pmf in stream:
        deposit(pmap, fixation, grid, pmf)
    return finalize(pmap), trace, pmap


def write_probability_map(pmap: ProbabilityMap, path: str | Path) -> None:
    """Averaged map as raw float64 bytes after a one-line text header."""
    h, w = pmap.counts.shape
    k = pmap.sums.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"retinaseg-probmap {h} {w} {k} float64\n".encode())
        fh.write(np.ascontiguousarray(pmap.averaged()).tobytes())


def read_probability_map(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if header[:1] != ["retinaseg-probmap"]:
            raise DataError(f"{path}: not a probability map dump")
        h, w, k = int(header[1]), int(header[2]), int(header[3])
        data = np.frombuffer(fh.read(), dtype=np.float64)
    if data.size != h * w * k:
        raise DataError(f"{path}: truncated probability map")
    return data.reshape(h, w, k).copy()
