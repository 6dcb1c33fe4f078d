"""Entropy-driven sequential attention scan.

The scanner rasters a d x d focus of attention across the image. Within a
row the horizontal step shrinks with the classification uncertainty of
the current subarea (mean cell entropy of the predicted pmfs), so
difficult regions are covered by many overlapping fixations; easy regions
are crossed in whole-subarea strides.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError
from .grid import GridPmf

# predictor interface: fn(image, x, y) -> GridPmf for the subarea at (x, y)
PredictFn = Callable[[np.ndarray, int, int], GridPmf]


@dataclass(frozen=True)
class ScanParams:
    """Geometry and policy parameters for one scan."""

    subarea_size: int
    classes: int = 3
    sigma: float = 0.4
    vertical_stride: int = 10
    min_step: int = 1

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if not 1 <= self.min_step <= self.subarea_size:
            raise ConfigError(f"min_step {self.min_step} outside "
                              f"[1, {self.subarea_size}]")
        if self.vertical_stride < 1:
            raise ConfigError("vertical stride must be >= 1")


@dataclass(frozen=True)
class Fixation:
    """One placement of the subarea: top-left pixel, uncertainty, step."""

    x: int
    y: int
    entropy: float
    step_taken: int
    row: int


@dataclass
class ScanTrace:
    """Ordered fixation record for one image scan."""

    height: int
    width: int
    fixations: list[Fixation]

    def __len__(self) -> int:
        return len(self.fixations)


def grid_entropy(prediction: GridPmf) -> float:
    """Mean natural-log entropy of the unmasked cell pmfs, 0*ln 0 == 0."""
    keep = ~prediction.masked
    if not keep.any():
        raise DataError("grid entropy undefined: every cell is masked")
    p = prediction.pmfs[keep].astype(np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(-terms.sum() / keep.sum()) + 0.0  # normalize -0.0


def attention_shift(entropy: float, subarea_size: int, sigma: float) -> float:
    """Raw horizontal shift in pixels before rounding and clamping."""
    return subarea_size * math.exp(-(entropy * entropy) / (2.0 * sigma * sigma))


def attention_step(entropy: float, params: ScanParams) -> int:
    """Integer step: shift rounded to nearest pixel, clamped to [min_step, d]."""
    raw = attention_shift(entropy, params.subarea_size, params.sigma)
    step = math.floor(raw + 0.5)
    return max(params.min_step, min(params.subarea_size, step))


def row_positions(extent: int, subarea_size: int, stride: int) -> list[int]:
    """Top offsets of scan rows: start at 0, advance by stride, clamp the
    last row flush with the far edge so no margin stays uncovered."""
    if extent < subarea_size:
        raise DataError(f"image extent {extent} smaller than subarea "
                        f"{subarea_size}")
    last = extent - subarea_size
    ys = list(range(0, last + 1, stride))
    if ys[-1] != last:
        ys.append(last)
    return ys


def scan_row(image: np.ndarray, predict_fn: PredictFn, params: ScanParams,
             y: int, row: int) -> tuple[list[Fixation], list[GridPmf]]:
    """Scan one row left to right; the final fixation is flush right."""
    d = params.subarea_size
    x_max = image.shape[1] - d
    fixations: list[Fixation] = []
    pmfs: list[GridPmf] = []
    x = 0
    while True:
        pmf = predict_fn(image, x, y)
        if pmf.masked.all():
            # nothing classifiable under the subarea: move on at full stride
            entropy = 0.0
        else:
            entropy = grid_entropy(pmf)
        step = attention_step(entropy, params)
        fixations.append(Fixation(x=x, y=y, entropy=entropy,
                                  step_taken=step, row=row))
        pmfs.append(pmf)
        if x == x_max:
            break
        x = min(x + step, x_max)
    return fixations, pmfs


def scan_image(image: np.ndarray, predict_fn: PredictFn, params: ScanParams,
               threads: int = 1,
               ) -> tuple[ScanTrace, list[tuple[Fixation, GridPmf]]]:
    """Scan a whole image; returns the trace and the per-fixation pmfs.

    Rows are mutually independent, so they may run on a thread pool; the
    emitted stream is always ordered by row and then x, which keeps any
    downstream accumulation deterministic regardless of thread count.
    """
    h, w = image.shape[0], image.shape[1]
    d = params.subarea_size
    if h < d or w < d:
        raise DataError(f"image {w}x{h} smaller than subarea {d}x{d}")
    ys = row_positions(h, d, params.vertical_stride)

    def run(row_y: tuple[int, int]):
        row, y = row_y
        return scan_row(image, predict_fn, params, y, row)

    jobs = list(enumerate(ys))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    fixations: list[Fixation] = []
    stream: list[tuple[Fixation, GridPmf]] = []
    for fixes, pmfs in results:
        fixations.extend(fixes)
        stream.extend(zip(fixes, pmfs))
    return ScanTrace(height=h, width=w, fixations=fixations), stream


def write_trace(trace: ScanTrace, path: str | Path,
                header: dict | None = None) -> None:
    """Line-delimited trace: 'row x y entropy step' per fixation."""
    lines = ["# retinaseg trace v1",
             f"# image {trace.width}x{trace.height}"]
    for key in sorted(header or {}):
        lines.append(f"# {key} {header[key]}")
    lines.append("# row x y entropy step")
    for f in trace.fixations:
        lines.append(f"{f.row} {f.x} {f.y} {f.entropy:.12g} {f.step_taken}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path: str | Path) -> ScanTrace:
    width = height = 0
    fixations = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# image "):
            w, h = line.split()[2].split("x")
            width, height = int(w), int(h)
        if line.startswith("#") or not line.strip():
            continue
        row, x, y, ent, step = line.split()
        fixations.append(Fixation(x=int(x), y=int(y), entropy=float(ent),
                                  step_taken=int(step), row=int(row)))
    return ScanTrace(height=height, width=width, fixations=fixations)
