"""Subarea-to-pmf predictor: model, loss, training loop and baselines.

The network maps a d x d image subarea to one pmf per grid cell (head
"grid", N*K outputs with a per-cell soft-max) or to a single class pmf
(head "center", the patch-center baseline). Training minimizes the
cross-entropy between target and predicted pmfs, summed over cells and
batch samples, with adaptive-moment (Adam) updates.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import LabelImage
from .errors import ConfigError, DataError, NumericError
from .grid import GridPmf, RetinaGrid, build_grid, cell_count
from .network import Network, build_network

PROB_CLIP = 1e-7          # floor for predicted probabilities before log
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"RSEGCKPT"
CHECKPOINT_VERSION = 1

DEFAULT_CONV_STAGES = ((16, 2), (32, 2), (64, 2))
DEFAULT_DENSE = (128,)


@dataclass(frozen=True)
class PredictorConfig:
    """Architecture plus training hyperparameters.

    conv_stages is a tuple of (width, conv_count) per stage; every stage
    ends in a 2x2 max pool. head "grid" emits N*K logits (one soft-max
    per cell), head "center" emits K logits for the patch-center class.
    """

    subarea: int = 64
    level: int = 3
    classes: int = 3
    channels: int = 3
    conv_stages: tuple[tuple[int, int], ...] = DEFAULT_CONV_STAGES
    dense: tuple[int, ...] = DEFAULT_DENSE
    head: str = "grid"
    learning_rate: float = 0.0001
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    dtype: str = "float32"
    patches_per_image: int = 100
    boundary_ratio: float = 0.5

    def __post_init__(self) -> None:
        if self.head not in ("grid", "center"):
            raise ConfigError(f"unknown head '{self.head}'")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch size must be >= 1 and epochs >= 0")
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, "
                              f"got {self.dtype}")
        if not 0.0 <= self.boundary_ratio <= 1.0:
            raise ConfigError("boundary_ratio must lie in [0, 1]")

    @property
    def n_cells(self) -> int:
        return cell_count(self.level) if self.head == "grid" else 1

    @property
    def head_dim(self) -> int:
        return self.n_cells * self.classes

    def grid(self) -> RetinaGrid:
        return build_grid(self.subarea, self.level)

    def network(self) -> Network:
        if self.head == "grid":
            self.grid()  # validates subarea/level compatibility
        return build_network(self.subarea, self.channels, self.conv_stages,
                             self.dense, self.head_dim)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "PredictorConfig":
        raw = json.loads(text)
        raw["conv_stages"] = tuple(tuple(s) for s in raw["conv_stages"])
        raw["dense"] = tuple(raw["dense"])
        return PredictorConfig(**raw)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()

    def hash(self) -> str:
        return self.digest().hex()


def parse_arch(text: str) -> tuple[tuple[tuple[int, int], ...], tuple[int, ...]]:
    """Parse an architecture descriptor like '16x2-32x2-64x2+128,64'.

    Stages are WIDTHxCOUNT separated by '-'; dense widths follow '+',
    comma separated (may be absent).
    """
    try:
        conv_part, _, dense_part = text.partition("+")
        stages = []
        for item in conv_part.split("-"):
            width, _, count = item.partition("x")
            stages.append((int(width), int(count) if count else 1))
        dense = tuple(int(v) for v in dense_part.split(",") if v) \
            if dense_part else ()
        if not stages:
            raise ValueError("no conv stages")
        return tuple(stages), dense
    except ValueError as exc:
        raise ConfigError(f"bad architecture descriptor '{text}': {exc}") from exc


def format_arch(conv_stages, dense) -> str:
    s = "-".join(f"{w}x{c}" for w, c in conv_stages)
    if dense:
        s += "+" + ",".join(str(v) for v in dense)
    return s


@dataclass
class ModelState:
    """Flat weights plus Adam moments and the update counter."""

    weights: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    diverged: bool = False


@dataclass
class TrainingSample:
    patch: np.ndarray   # (d, d, c), values in [0, 1]
    target: GridPmf


def init_state(config: PredictorConfig) -> ModelState:
    net = config.network()
    rng = np.random.default_rng(config.seed)
    w = net.init_weights(rng, config.dtype)
    return ModelState(weights=w, m=np.zeros_like(w), v=np.zeros_like(w))


# ---------------------------------------------------------------------------
# Forward / loss / gradient
# ---------------------------------------------------------------------------

def _softmax_cells(logits: np.ndarray, n_cells: int, classes: int) -> np.ndarray:
    """Per-cell soft-max over the class axis; logits (B, N*K) -> (B, N, K)."""
    z = logits.reshape(logits.shape[0], n_cells, classes)
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=2, keepdims=True)


def _check_patch_batch(config: PredictorConfig, patches: np.ndarray) -> np.ndarray:
    d, c = config.subarea, config.channels
    patches = np.asarray(patches)
    if patches.ndim == 3:
        patches = patches[None]
    if patches.shape[1:] != (d, d, c):
        raise DataError(f"patch batch shape {patches.shape} incompatible with "
                        f"({d}, {d}, {c})")
    return patches.astype(config.dtype, copy=False)


def predict_probs(state: ModelState, config: PredictorConfig,
                  patches: np.ndarray, validate: bool = False) -> np.ndarray:
    """Class probabilities for a batch of patches, shape (B, N, K)."""
    x = _check_patch_batch(config, patches)
    net = config.network()
    logits, _ = net.forward(state.weights, x, validate=validate)
    if not np.all(np.isfinite(logits)):
        if not validate:  # rerun with per-layer checks to name the culprit
            net.forward(state.weights, x, validate=True)
        raise NumericError("non-finite network output")
    return _softmax_cells(logits, config.n_cells, config.classes)


def predict(state: ModelState, config: PredictorConfig,
            patch: np.ndarray) -> GridPmf:
    """Predict the grid pmfs for a single d x d patch."""
    probs = predict_probs(state, config, patch)
    return GridPmf(pmfs=probs[0],
                   masked=np.zeros(config.n_cells, dtype=bool))


def loss(predictions: GridPmf, targets: GridPmf) -> float:
    """Cross-entropy between target and predicted pmfs over unmasked cells."""
    if predictions.pmfs.shape != targets.pmfs.shape:
        raise DataError(f"prediction grid {predictions.pmfs.shape} != "
                        f"target grid {targets.pmfs.shape}")
    y = np.clip(predictions.pmfs.astype(np.float64), PROB_CLIP, 1.0)
    keep = ~targets.masked
    return float(-(targets.pmfs[keep] * np.log(y[keep])).sum())


def _batch_arrays(config: PredictorConfig, batch: Sequence[TrainingSample]):
    if not batch:
        raise DataError("empty batch")
    x = np.stack([s.patch for s in batch]).astype(config.dtype, copy=False)
    t = np.stack([s.target.pmfs for s in batch])
    keep = ~np.stack([s.target.masked for s in batch])
    if t.shape[1:] != (config.n_cells, config.classes):
        raise DataError(f"target grid shape {t.shape[1:]} incompatible with "
                        f"head ({config.n_cells}, {config.classes})")
    return x, t, keep


def training_loss(weights: np.ndarray, config: PredictorConfig,
                  batch: Sequence[TrainingSample]) -> float:
    """Batch loss (sum over samples) at the given weights."""
    x, t, keep = _batch_arrays(config, batch)
    net = config.network()
    logits, _ = net.forward(weights, x)
    probs = _softmax_cells(logits, config.n_cells, config.classes)
    y = np.clip(probs.astype(np.float64), PROB_CLIP, 1.0)
    return float(-(t * np.log(y) * keep[:, :, None]).sum())


def _loss_and_grad(net: Network, weights: np.ndarray, config: PredictorConfig,
                   x: np.ndarray, t: np.ndarray, keep: np.ndarray):
    logits, caches = net.forward(weights, x, need_cache=True)
    probs = _softmax_cells(logits, config.n_cells, config.classes)
    y = np.clip(probs.astype(np.float64), PROB_CLIP, 1.0)
    loss_val = float(-(t * np.log(y) * keep[:, :, None]).sum())
    # fused soft-max/cross-entropy gradient (exact wherever the clip floor
    # is inactive; at saturation it is the correct stationary value y - t)
    dlogits = (probs - t) * keep[:, :, None]
    dlogits = dlogits.reshape(x.shape[0], -1).astype(weights.dtype)
    grad = net.backward(weights, caches, dlogits)
    return loss_val, grad


def loss_gradient(state: ModelState, config: PredictorConfig,
                  batch: Sequence[TrainingSample]) -> np.ndarray:
    """Gradient of the batch loss with respect to the flat weight vector."""
    x, t, keep = _batch_arrays(config, batch)
    net = config.network()
    _, grad = _loss_and_grad(net, state.weights, config, x, t, keep)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return grad


def _adam_update(state: ModelState, grad: np.ndarray, lr: float) -> None:
    state.step += 1
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad * grad
    mhat = state.m / (1.0 - ADAM_BETA1 ** state.step)
    vhat = state.v / (1.0 - ADAM_BETA2 ** state.step)
    state.weights = state.weights - (lr * mhat /
                                     (np.sqrt(vhat) + ADAM_EPS)).astype(
                                         state.weights.dtype)


def train(config: PredictorConfig, samples: Sequence[TrainingSample],
          log_path: str | Path | None = None,
          log_stream=None) -> ModelState:
    """Train from scratch on the given samples; deterministic under seed.

    Emits one 'epoch= mean_loss= wall_time=' record per epoch. On a
    non-finite loss or gradient the loop stops and returns the last
    finite state with state.diverged set.
    """
    if not samples:
        raise DataError("training set is empty")
    net = config.network()
    rng = np.random.default_rng(config.seed)
    w = net.init_weights(rng, config.dtype)
    state = ModelState(weights=w, m=np.zeros_like(w), v=np.zeros_like(w))

    x, t, keep = _batch_arrays(config, samples)
    n = len(samples)
    log_fh = open(log_path, "w") if log_path else None

    def emit(line: str) -> None:
        if log_fh:
            log_fh.write(line + "\n")
        if log_stream:
            print(line, file=log_stream)

    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                loss_val, grad = _loss_and_grad(net, state.weights, config,
                                                x[idx], t[idx], keep[idx])
                if not np.isfinite(loss_val) or not np.all(np.isfinite(grad)):
                    state.diverged = True
                    emit(f"epoch={epoch} diverged=1")
                    return state
                _adam_update(state, grad, config.learning_rate)
                total += loss_val
            emit(f"epoch={epoch} mean_loss={total / n:.6f} "
                 f"wall_time={time.perf_counter() - t0:.3f}")
    finally:
        if log_fh:
            log_fh.close()
    return state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, state: ModelState,
                    config: PredictorConfig) -> None:
    """Binary checkpoint: magic, version, config hash, config, weights."""
    cfg_json = config.to_json().encode()
    weights = np.ascontiguousarray(state.weights)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(config.digest())
        fh.write(struct.pack("<Q", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(struct.pack("<Q", weights.size))
        fh.write(weights.tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelState, PredictorConfig]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a retinaseg checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        digest = fh.read(32)
        (cfg_len,) = struct.unpack("<Q", fh.read(8))
        config = PredictorConfig.from_json(fh.read(cfg_len).decode())
        if config.digest() != digest:
            raise DataError(f"{path}: config hash mismatch")
        (n,) = struct.unpack("<Q", fh.read(8))
        weights = np.frombuffer(fh.read(), dtype=config.dtype).copy()
    if weights.size != n:
        raise DataError(f"{path}: truncated weight vector")
    net = config.network()
    if weights.size != net.n_params:
        raise DataError(f"{path}: weight count {weights.size} does not match "
                        f"architecture ({net.n_params})")
    return ModelState(weights=weights, m=np.zeros_like(weights),
                      v=np.zeros_like(weights)), config


# ---------------------------------------------------------------------------
# Predictor closures for the scanner
# ---------------------------------------------------------------------------

def model_predictor(state: ModelState, config: PredictorConfig):
    """Scanner predictor backed by the trained network."""
    if config.head != "grid":
        raise ConfigError("scanning needs a grid-head model")
    d = config.subarea
    net = config.network()
    n_cells, classes = config.n_cells, config.classes
    no_mask = np.zeros(n_cells, dtype=bool)

    def fn(image: np.ndarray, x: int, y: int) -> GridPmf:
        h, w = image.shape[0], image.shape[1]
        if not (0 <= x <= w - d and 0 <= y <= h - d):
            raise DataError(f"fixation ({x},{y}) outside {w}x{h} image")
        patch = image[y:y + d, x:x + d].astype(config.dtype, copy=False)
        logits, _ = net.forward(state.weights, patch[None])
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite network output")
        probs = _softmax_cells(logits, n_cells, classes)
        return GridPmf(pmfs=probs[0], masked=no_mask.copy())

    return fn


def oracle_predictor(labels: LabelImage, grid: RetinaGrid, n_classes: int):
    """Perfect predictor: returns the encoded ground truth at each fixation."""
    from .grid import encode_targets

    d = grid.subarea_size

    def fn(image: np.ndarray, x: int, y: int) -> GridPmf:
        return encode_targets(labels.crop(x, y, d), grid, n_classes)

    return fn


# ---------------------------------------------------------------------------
# Patch sampling
# ---------------------------------------------------------------------------

def sample_patch_positions(labels: LabelImage, grid: RetinaGrid,
                           n_classes: int, count: int,
                           rng: np.random.Generator,
                           boundary_ratio: float = 0.5,
                           max_tries: int = 64) -> list[tuple[int, int]]:
    """Uniform random patch positions, with a configurable share of draws
    rejection-sampled onto patches whose target grid has entropy > 0
    (i.e. patches that see a class boundary)."""
    from .attention import grid_entropy
    from .grid import encode_targets

    h, w = labels.shape
    d = grid.subarea_size
    if h < d or w < d:
        raise DataError(f"labels {w}x{h} smaller than subarea {d}")
    positions: list[tuple[int, int]] = []
    for _ in range(count):
        want_boundary = rng.random() < boundary_ratio
        x = int(rng.integers(0, w - d + 1))
        y = int(rng.integers(0, h - d + 1))
        if want_boundary:
            for _ in range(max_tries):
                target = encode_targets(labels.crop(x, y, d), grid, n_classes)
                if target.masked.all() or grid_entropy(target) > 0.0:
                    break
                x = int(rng.integers(0, w - d + 1))
                y = int(rng.integers(0, h - d + 1))
        positions.append((x, y))
    return positions


def make_grid_samples(image: np.ndarray, labels: LabelImage, grid: RetinaGrid,
                      n_classes: int,
                      positions: Sequence[tuple[int, int]],
                      ) -> list[TrainingSample]:
    from .grid import encode_targets

    d = grid.subarea_size
    out = []
    for x, y in positions:
        out.append(TrainingSample(
            patch=image[y:y + d, x:x + d],
            target=encode_targets(labels.crop(x, y, d), grid, n_classes)))
    return out


def make_center_samples(image: np.ndarray, labels: LabelImage, subarea: int,
                        n_classes: int,
                        positions: Sequence[tuple[int, int]],
                        rng: np.random.Generator | None = None,
                        ) -> list[TrainingSample]:
    """Baseline samples: the target is the class of the patch-center pixel.

    A position whose center pixel is ambiguous is redrawn uniformly (it
    carries no usable label)."""
    h, w = labels.shape
    d = subarea
    c = d // 2
    rng = rng or np.random.default_rng(0)
    out = []
    for x, y in positions:
        for _ in range(256):
            if not labels.ambiguous[y + c, x + c]:
                break
            x = int(rng.integers(0, w - d + 1))
            y = int(rng.integers(0, h - d + 1))
        else:
            raise DataError("could not find a non-ambiguous center pixel")
        cls = int(labels.classes[y + c, x + c])
        if cls >= n_classes:
            raise DataError(f"center class {cls} outside [0, {n_classes})")
        pmf = np.zeros((1, n_classes))
        pmf[0, cls] = 1.0
        out.append(TrainingSample(
            patch=image[y:y + d, x:x + d],
            target=GridPmf(pmfs=pmf, masked=np.zeros(1, dtype=bool))))
    return out


# ---------------------------------------------------------------------------
# Patch-center baseline inference
# ---------------------------------------------------------------------------

def baseline_classify(state: ModelState, config: PredictorConfig,
                      image: np.ndarray, stride: int = 8,
                      fill: str = "nearest", batch: int = 64) -> np.ndarray:
    """Dense per-pixel classification with the patch-center model.

    Windows slide with the given stride (last row/column flush with the
    edges). fill "nearest" assigns each pixel the class predicted at the
    nearest window center; fill "vote" lets every window vote over its
    whole footprint and takes the per-pixel majority.
    """
    from .attention import row_positions

    if config.head != "center":
        raise ConfigError("baseline inference needs a center-head model")
    if fill not in ("nearest", "vote"):
        raise ConfigError(f"unknown fill policy '{fill}'")
    d = config.subarea
    h, w = image.shape[0], image.shape[1]
    xs = row_positions(w, d, stride)
    ys = row_positions(h, d, stride)
    net = config.network()

    patches = np.empty((len(ys) * len(xs), d, d, config.channels),
                       dtype=config.dtype)
    i = 0
    for y in ys:
        for x in xs:
            patches[i] = image[y:y + d, x:x + d]
            i += 1
    classes = np.empty(len(patches), dtype=np.int32)
    for start in range(0, len(patches), batch):
        chunk = patches[start:start + batch]
        logits, _ = net.forward(state.weights, chunk)
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite network output")
        classes[start:start + len(chunk)] = logits.argmax(axis=1)
    cgrid = classes.reshape(len(ys), len(xs))

    if fill == "vote":
        votes = np.zeros((h, w, config.classes), dtype=np.int32)
        for iy, y in enumerate(ys):
            for ix, x in enumerate(xs):
                votes[y:y + d, x:x + d, cgrid[iy, ix]] += 1
        return votes.argmax(axis=2).astype(np.int16)

    centers_x = np.asarray(xs) + d // 2
    centers_y = np.asarray(ys) + d // 2
    col = np.abs(np.arange(w)[:, None] - centers_x[None, :]).argmin(axis=1)
    row = np.abs(np.arange(h)[:, None] - centers_y[None, :]).argmin(axis=1)
    return cgrid[row[:, None], col[None, :]].astype(np.int16)
