"""Color-coded label masks, dataset manifests, folds and synthetic data.

Masks are lossless RGB rasters where each class has a fixed palette color
and one extra color marks ambiguous pixels (regions the annotators could
not label). Ambiguous pixels carry no class obligation: they are excluded
from training targets and from evaluation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError

# Default palette: class colors then the ambiguous marker (pink).
DEFAULT_CLASS_NAMES = ("Good", "Bad", "Background", "Extra3", "Extra4", "Extra5")
DEFAULT_CLASS_COLORS = (
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 255, 0),
    (0, 255, 255),
    (255, 0, 255),
)
AMBIGUOUS_COLOR = (255, 105, 180)

# Base colors used by the synthetic generator for the image (not the mask).
SYNTH_BASE_COLORS = (
    (205, 92, 72),
    (88, 190, 94),
    (84, 105, 200),
    (201, 196, 84),
    (86, 194, 194),
    (187, 86, 188),
)


@dataclass(frozen=True)
class ClassPalette:
    """Ordered class names/colors plus the ambiguous marker color."""

    names: tuple[str, ...]
    colors: tuple[tuple[int, int, int], ...]
    ambiguous: tuple[int, int, int] = AMBIGUOUS_COLOR
    tolerance: int = 0  # max per-channel distance when snapping colors

    def __post_init__(self) -> None:
        if len(self.names) != len(self.colors):
            raise ConfigError("palette names/colors length mismatch")
        all_colors = list(self.colors) + [self.ambiguous]
        if len(set(all_colors)) != len(all_colors):
            raise ConfigError("palette colors must be pairwise distinct")

    @property
    def n_classes(self) -> int:
        return len(self.colors)

    def color_array(self) -> np.ndarray:
        return np.asarray(self.colors, dtype=np.uint8)


def default_palette(n_classes: int = 3, tolerance: int = 0) -> ClassPalette:
    if not 2 <= n_classes <= len(DEFAULT_CLASS_COLORS):
        raise ConfigError(f"default palette supports 2..{len(DEFAULT_CLASS_COLORS)} "
                          f"classes, got {n_classes}")
    return ClassPalette(names=DEFAULT_CLASS_NAMES[:n_classes],
                        colors=DEFAULT_CLASS_COLORS[:n_classes],
                        tolerance=tolerance)


def load_palette(path: str | Path) -> ClassPalette:
    """Palette from a JSON file: names, colors, ambiguous, tolerance."""
    with open(path) as fh:
        raw = json.load(fh)
    try:
        return ClassPalette(
            names=tuple(raw["names"]),
            colors=tuple(tuple(c) for c in raw["colors"]),
            ambiguous=tuple(raw.get("ambiguous", AMBIGUOUS_COLOR)),
            tolerance=int(raw.get("tolerance", 0)),
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed palette file {path}: {exc}") from exc


@dataclass
class LabelImage:
    """Per-pixel class ids plus an ambiguity mask."""

    classes: np.ndarray    # (H, W) int16
    ambiguous: np.ndarray  # (H, W) bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape

    def crop(self, x: int, y: int, size: int) -> "LabelImage":
        h, w = self.classes.shape
        if not (0 <= x and x + size <= w and 0 <= y and y + size <= h):
            raise DataError(f"crop ({x},{y})+{size} outside {w}x{h} labels")
        return LabelImage(self.classes[y:y + size, x:x + size],
                          self.ambiguous[y:y + size, x:x + size])


def decode_mask(mask: np.ndarray, palette: ClassPalette) -> LabelImage:
    """Decode an RGB mask into class ids and an ambiguity mask.

    Every pixel color must match a palette color (exactly, or within the
    palette's snap tolerance); anything else is a data error that reports
    the offending colors and their pixel counts.
    """
    mask = np.asarray(mask)
    if mask.ndim != 3 or mask.shape[2] != 3:
        raise DataError(f"mask must be HxWx3 RGB, got shape {mask.shape}")
    h, w, _ = mask.shape
    table = np.asarray(list(palette.colors) + [palette.ambiguous], dtype=np.int16)
    if palette.tolerance == 0:
        packed = (mask[..., 0].astype(np.int32) << 16 |
                  mask[..., 1].astype(np.int32) << 8 |
                  mask[..., 2].astype(np.int32))
        keys = (table[:, 0].astype(np.int32) << 16 |
                table[:, 1].astype(np.int32) << 8 |
                table[:, 2].astype(np.int32))
        ids = np.full((h, w), -1, dtype=np.int16)
        for i, key in enumerate(keys):
            ids[packed == key] = i
    else:
        dist = np.abs(mask[:, :, None, :].astype(np.int16) - table[None, None])
        dist = dist.max(axis=3)  # per-channel max distance to each color
        best = dist.argmin(axis=2)
        ids = np.where(dist.min(axis=2) <= palette.tolerance,
                       best.astype(np.int16), np.int16(-1))
    unknown = ids < 0
    if unknown.any():
        bad = mask[unknown].reshape(-1, 3)
        colors, counts = np.unique(bad, axis=0, return_counts=True)
        desc = ", ".join(f"{tuple(int(v) for v in c)} x{n}"
                         for c, n in zip(colors[:8], counts[:8]))
        more = "" if len(colors) <= 8 else f" (+{len(colors) - 8} more)"
        raise DataError(f"mask contains {len(colors)} unknown color(s): {desc}{more}")
    amb = ids == palette.n_classes
    classes = np.where(amb, np.int16(0), ids)
    return LabelImage(classes=classes, ambiguous=amb)


def encode_mask(labels: LabelImage, palette: ClassPalette) -> np.ndarray:
    """Inverse of decode_mask: render labels as an RGB mask."""
    cls = labels.classes
    if cls.size and (cls.min() < 0 or cls.max() >= palette.n_classes):
        raise DataError("label image contains class ids outside the palette")
    table = np.asarray(list(palette.colors) + [palette.ambiguous], dtype=np.uint8)
    idx = np.where(labels.ambiguous, palette.n_classes, cls).astype(np.int32)
    return table[idx]


def load_image(path: str | Path, channels: int = 3) -> np.ndarray:
    """Load a raster image as float64 (H, W, channels) scaled to [0, 1]."""
    if channels not in (1, 3):
        raise ConfigError(f"channels must be 1 or 3, got {channels}")
    mode = "RGB" if channels == 3 else "L"
    with Image.open(path) as im:
        arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    if channels == 1:
        arr = arr[:, :, None]
    return arr


def load_mask(path: str | Path, palette: ClassPalette) -> LabelImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return decode_mask(arr, palette)


def save_png(path: str | Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG")


# ---------------------------------------------------------------------------
# Dataset manifests and fold splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetManifest:
    """Image/mask pairs with optional k-fold assignments.

    Paths are stored relative to `root` (the manifest's directory).
    fold -1 means unassigned.
    """

    root: Path
    entries: tuple[tuple[str, str], ...]
    folds: tuple[int, ...]
    palette: ClassPalette

    def __post_init__(self) -> None:
        if len(self.entries) != len(self.folds):
            raise DataError("manifest entries/folds length mismatch")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def fold_count(self) -> int:
        return max(self.folds) + 1 if self.folds else 0

    def image_path(self, i: int) -> Path:
        return self.root / self.entries[i][0]

    def mask_path(self, i: int) -> Path:
        return self.root / self.entries[i][1]

    def test_indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.folds) if f == fold]

    def train_indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.folds) if f != fold]


def save_manifest(manifest: DatasetManifest, path: str | Path,
                  palette_ref: str = "default") -> None:
    lines = ["# retinaseg dataset manifest",
             f"@palette {palette_ref}",
             f"@classes {manifest.palette.n_classes}"]
    for (img, msk), fold in zip(manifest.entries, manifest.folds):
        lines.append(f"{img}\t{msk}\t{fold}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    palette_ref = "default"
    n_classes = 3
    entries: list[tuple[str, str]] = []
    folds: list[int] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("@palette"):
            palette_ref = line.split(None, 1)[1].strip()
            continue
        if line.startswith("@classes"):
            n_classes = int(line.split(None, 1)[1])
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) == 2:
            parts.append("-1")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 'image mask [fold]'")
        entries.append((parts[0], parts[1]))
        try:
            folds.append(int(parts[2]))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad fold '{parts[2]}'") from exc
    if palette_ref == "default":
        palette = default_palette(n_classes)
    else:
        palette = load_palette(path.parent / palette_ref)
    return DatasetManifest(root=path.parent, entries=tuple(entries),
                           folds=tuple(folds), palette=palette)


def manifest_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def make_folds(manifest: DatasetManifest, k: int, seed: int) -> DatasetManifest:
    """Deterministic shuffled partition into k near-equal folds."""
    n = len(manifest)
    if not 1 <= k <= n:
        raise ConfigError(f"fold count {k} invalid for {n} images")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    folds = np.full(n, -1, dtype=int)
    for f, chunk in enumerate(np.array_split(order, k)):
        folds[chunk] = f
    return replace(manifest, folds=tuple(int(f) for f in folds))


# ---------------------------------------------------------------------------
# Synthetic labeled images (smooth blobs, per-class color + noise + blur)
# ---------------------------------------------------------------------------

def random_labels(size: int, n_classes: int, rng: np.random.Generator,
                  blob_scale: int = 64,
                  priors: tuple[float, ...] | None = None) -> np.ndarray:
    """Random smooth-blob label map as argmax of K smoothed noise fields.

    Per-class biases are fitted so the class pixel shares approach the
    requested priors (uniform by default).
    """
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    if priors is None:
        priors = tuple(1.0 / n_classes for _ in range(n_classes))
    if len(priors) != n_classes:
        raise ConfigError("priors length must equal class count")
    p = np.asarray(priors, dtype=np.float64)
    p = p / p.sum()

    g = max(2, size // blob_scale)
    low = rng.normal(size=(n_classes, g, g))
    fields = np.stack([ndimage.zoom(low[k], size / g, order=3)
                       for k in range(n_classes)])
    fields = fields[:, :size, :size]
    std = fields.std()
    if std > 0:
        fields = fields / std

    bias = np.zeros(n_classes)
    for _ in range(40):
        labels = np.argmax(fields + bias[:, None, None], axis=0)
        shares = np.bincount(labels.ravel(), minlength=n_classes) / labels.size
        bias += 0.5 * (np.log(p) - np.log(np.maximum(shares, 1e-6)))
        bias -= bias.mean()
    return np.argmax(fields + bias[:, None, None], axis=0).astype(np.int16)


def render_image(labels: np.ndarray, rng: np.random.Generator,
                 noise_sigma: float = 40.0, blur_sigma: float = 1.5,
                 base_colors: tuple[tuple[int, int, int], ...] | None = None,
                 ) -> np.ndarray:
    """Render a label map as a noisy textured RGB image (uint8)."""
    k = int(labels.max()) + 1
    if base_colors is None:
        base_colors = SYNTH_BASE_COLORS[:k]
    base = np.asarray(base_colors, dtype=np.float64)[labels]
    base = ndimage.gaussian_filter(base, sigma=(blur_sigma, blur_sigma, 0))
    img = base + rng.normal(0.0, noise_sigma, size=base.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels whose 4-neighborhood contains another class."""
    b = np.zeros(labels.shape, dtype=bool)
    b[:-1, :] |= labels[:-1, :] != labels[1:, :]
    b[1:, :] |= labels[1:, :] != labels[:-1, :]
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    b[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    return b


def synth_generate(out_dir: str | Path, count: int, size: int,
                   n_classes: int = 3, seed: int = 0,
                   blob_scale: int = 64, noise_sigma: float = 40.0,
                   blur_sigma: float = 1.5,
                   priors: tuple[float, ...] | None = None,
                   ambiguous_border: int = 0,
                   folds: int = 0) -> Path:
    """Write a deterministic synthetic dataset and return the manifest path.

    Produces images/ and masks/ trees, a manifest, and a provenance
    sidecar recording the seed and parameters. ambiguous_border > 0 marks
    a band of that radius around class boundaries as ambiguous.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    palette = default_palette(n_classes)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(count):
        labels = random_labels(size, n_classes, rng, blob_scale, priors)
        img = render_image(labels, rng, noise_sigma, blur_sigma)
        amb = np.zeros(labels.shape, dtype=bool)
        if ambiguous_border > 0:
            band = ndimage.binary_dilation(boundary_mask(labels),
                                           iterations=ambiguous_border)
            amb = band
        mask_rgb = encode_mask(LabelImage(labels, amb), palette)
        img_rel = f"images/img_{i:03d}.png"
        msk_rel = f"masks/mask_{i:03d}.png"
        save_png(out / img_rel, img)
        save_png(out / msk_rel, mask_rgb)
        entries.append((img_rel, msk_rel))
    manifest = DatasetManifest(root=out, entries=tuple(entries),
                               folds=tuple([-1] * count), palette=palette)
    if folds > 0:
        manifest = make_folds(manifest, folds, seed)
    manifest_path = out / "manifest.txt"
    save_manifest(manifest, manifest_path)
    provenance = {
        "generator": "retinaseg.synth_generate",
        "seed": seed, "count": count, "size": size, "classes": n_classes,
        "blob_scale": blob_scale, "noise_sigma": noise_sigma,
        "blur_sigma": blur_sigma, "priors": priors,
        "ambiguous_border": ambiguous_border, "folds": folds,
    }
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2,
                                                    sort_keys=True) + "\n")
    return manifest_path
