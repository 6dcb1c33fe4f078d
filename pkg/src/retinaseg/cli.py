"""Command-line pipeline: synth, train, segment, trace, evaluate, baseline.

Exit codes: 0 success, 1 data error, 2 configuration error, 3 numeric
failure. Diagnostics go to stderr; results go to files only. Every run
writes a run.json metadata sidecar (config hash, seed, version) so
outputs are reproducible from their recorded configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .attention import ScanParams, write_trace
from .dataio import (DatasetManifest, load_image, load_manifest, load_mask,
                     load_palette, default_palette, save_png, synth_generate)
from .errors import ConfigError, DataError, NumericError, RetinaSegError
from .grid import build_grid
from .metrics import aggregate, format_records, format_table, score
from .predictor import (PredictorConfig, baseline_classify, load_checkpoint,
                        make_center_samples, make_grid_samples,
                        model_predictor, oracle_predictor, parse_arch,
                        sample_patch_positions, save_checkpoint, train)
from .probmap import (render_heatmap, scan_and_segment, segmentation_to_rgb,
                      write_probability_map)

THREADS_ENV = "RETINASEG_THREADS"


@dataclass
class RunConfig:
    """Every tunable knob; loadable from a key=value file, overridable by
    flags of the same name."""

    subarea: int = 64
    level: int = 3
    classes: int = 3
    channels: int = 3
    arch: str = "16x2-32x2-64x2+128"
    learning_rate: float = 0.0001
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    dtype: str = "float32"
    patches_per_image: int = 100
    boundary_ratio: float = 0.5
    sigma: float = 0.4
    vertical_stride: int = 10
    min_step: int = 1
    baseline_stride: int = 8
    baseline_fill: str = "nearest"
    threads: int = 0  # 0 -> RETINASEG_THREADS or 1

    def resolved_threads(self) -> int:
        if self.threads > 0:
            return self.threads
        env = os.environ.get(THREADS_ENV, "")
        return max(1, int(env)) if env.isdigit() else 1

    def predictor_config(self, head: str = "grid") -> PredictorConfig:
        stages, dense = parse_arch(self.arch)
        return PredictorConfig(
            subarea=self.subarea, level=self.level, classes=self.classes,
            channels=self.channels, conv_stages=stages, dense=dense,
            head=head, learning_rate=self.learning_rate,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
            dtype=self.dtype, patches_per_image=self.patches_per_image,
            boundary_ratio=self.boundary_ratio)

    def scan_params(self) -> ScanParams:
        return ScanParams(subarea_size=self.subarea, classes=self.classes,
                          sigma=self.sigma,
                          vertical_stride=self.vertical_stride,
                          min_step=self.min_step)

    def hash(self) -> str:
        # threads is an execution knob that must not change any result,
        # so it stays out of the reproducibility hash
        keys = {k: v for k, v in asdict(self).items() if k != "threads"}
        return hashlib.sha256(json.dumps(keys, sort_keys=True)
                              .encode()).hexdigest()


def load_config_file(path: str | Path) -> dict:
    """Parse 'key = value' lines; '#' starts a comment."""
    values: dict[str, str] = {}
    known = {f.name for f in fields(RunConfig)}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        values[key] = value
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then config file values, then explicit flags."""
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(load_config_file(args.config))
    for f in fields(RunConfig):
        flag_val = getattr(args, f.name, None)
        if flag_val is not None:
            merged[f.name] = flag_val
    kwargs = {}
    for f in fields(RunConfig):
        if f.name not in merged:
            continue
        value = merged[f.name]
        try:
            kwargs[f.name] = _coerce(value, f.default)
        except ValueError as exc:
            raise ConfigError(f"bad value for {f.name}: {value}") from exc
    return RunConfig(**kwargs)


def _coerce(value, default):
    if isinstance(value, str) and not isinstance(default, str):
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    return type(default)(value) if not isinstance(value, type(default)) \
        else value


def write_run_metadata(path: Path, command: str, cfg: RunConfig,
                       extra: dict | None = None) -> None:
    meta = {
        "package": "retinaseg",
        "version": __version__,
        "command": command,
        "config": asdict(cfg),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
    }
    meta.update(extra or {})
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, default=None, metavar=str(f.default),
                            help=f"override {f.name}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    priors = None
    if args.priors:
        priors = tuple(float(v) for v in args.priors.split(","))
    manifest = synth_generate(
        args.out, count=args.count, size=args.size, n_classes=args.classes,
        seed=args.seed, blob_scale=args.blob_scale,
        noise_sigma=args.noise_sigma, blur_sigma=args.blur_sigma,
        priors=priors, ambiguous_border=args.ambiguous_border,
        folds=args.folds)
    print(f"wrote {args.count} image/mask pairs under {args.out}",
          file=sys.stderr)
    print(manifest)
    return 0


def _gather_training_samples(cfg: RunConfig, manifest: DatasetManifest,
                             fold: int, baseline: bool):
    pconf = cfg.predictor_config("center" if baseline else "grid")
    grid = build_grid(cfg.subarea, cfg.level)
    rng = np.random.default_rng(cfg.seed)
    indices = manifest.train_indices(fold) if fold >= 0 \
        else list(range(len(manifest)))
    if not indices:
        raise DataError(f"no training images for fold {fold}")
    samples = []
    for i in indices:
        image = load_image(manifest.image_path(i), cfg.channels)
        labels = load_mask(manifest.mask_path(i), manifest.palette)
        positions = sample_patch_positions(labels, grid, cfg.classes,
                                           cfg.patches_per_image, rng,
                                           cfg.boundary_ratio)
        if baseline:
            samples.extend(make_center_samples(image, labels, cfg.subarea,
                                               cfg.classes, positions, rng))
        else:
            samples.extend(make_grid_samples(image, labels, grid,
                                             cfg.classes, positions))
    return pconf, samples


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    manifest = load_manifest(args.manifest)
    if manifest.palette.n_classes != cfg.classes:
        raise ConfigError(f"config says {cfg.classes} classes but the "
                          f"manifest palette has {manifest.palette.n_classes}")
    pconf, samples = _gather_training_samples(cfg, manifest, args.fold,
                                              args.baseline)
    print(f"training on {len(samples)} patches "
          f"({'baseline' if args.baseline else 'grid'} head)", file=sys.stderr)
    log_path = args.log or (str(args.out) + ".log")
    state = train(pconf, samples, log_path=log_path, log_stream=sys.stderr)
    if state.diverged:
        print("training diverged; checkpoint holds the last finite state",
              file=sys.stderr)
    save_checkpoint(args.out, state, pconf)
    write_run_metadata(Path(str(args.out) + ".run.json"), "train", cfg,
                       {"manifest": str(args.manifest), "fold": args.fold,
                        "baseline": args.baseline,
                        "model_config_hash": pconf.hash()})
    print(args.out)
    return 0


def _build_predictor(args, cfg: RunConfig):
    """Returns (predict_fn, grid, cfg) from a checkpoint or an oracle
    ground-truth mask."""
    if getattr(args, "oracle_mask", None):
        palette = load_palette(args.palette) if args.palette \
            else default_palette(cfg.classes)
        if palette.n_classes != cfg.classes:
            raise ConfigError(f"palette has {palette.n_classes} classes but "
                              f"config says {cfg.classes}")
        labels = load_mask(args.oracle_mask, palette)
        grid = build_grid(cfg.subarea, cfg.level)
        return oracle_predictor(labels, grid, cfg.classes), grid, cfg
    if not getattr(args, "checkpoint", None):
        raise ConfigError("need --checkpoint or --oracle-mask")
    state, pconf = load_checkpoint(args.checkpoint)
    cfg.subarea = pconf.subarea
    cfg.level = pconf.level
    cfg.classes = pconf.classes
    cfg.channels = pconf.channels
    grid = pconf.grid()
    return model_predictor(state, pconf), grid, cfg


def cmd_segment(args: argparse.Namespace, trace_only: bool = False) -> int:
    cfg = resolve_config(args)
    predict_fn, grid, cfg = _build_predictor(args, cfg)
    image = load_image(args.image, cfg.channels)
    params = cfg.scan_params()
    seg, trace, pmap = scan_and_segment(image, predict_fn, grid, params,
                                        threads=cfg.resolved_threads())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {"config_hash": cfg.hash(), "seed": cfg.seed,
              "source": Path(args.image).name}
    write_trace(trace, out / "trace.txt", header)
    if not trace_only:
        palette = load_palette(args.palette) if args.palette \
            else default_palette(cfg.classes)
        save_png(out / "segmentation.png", segmentation_to_rgb(seg, palette))
        save_png(out / "heatmap.png", render_heatmap(seg))
        if args.dump_probmap:
            write_probability_map(pmap, out / "probmap.bin")
        if seg.uncovered:
            print(f"warning: {seg.uncovered} pixels never covered by an "
                  f"unmasked cell", file=sys.stderr)
    write_run_metadata(out / "run.json", "trace" if trace_only else "segment",
                       cfg, {"image": str(args.image),
                             "fixations": len(trace)})
    print(out)
    return 0


def cmd_evaluate(args: argparse.Namespace, baseline: bool = False) -> int:
    cfg = resolve_config(args)
    manifest = load_manifest(args.manifest)
    oracle = getattr(args, "oracle", False)
    if not args.checkpoint and (baseline or not oracle):
        raise ConfigError("need --checkpoint" +
                          ("" if baseline else " or --oracle"))
    if args.fold >= 0:
        indices = manifest.test_indices(args.fold)
        if not indices:
            raise DataError(f"fold {args.fold} selects no images")
    else:
        indices = list(range(len(manifest)))

    state = pconf = None
    if args.checkpoint:
        state, pconf = load_checkpoint(args.checkpoint)
        if baseline and pconf.head != "center":
            raise ConfigError("baseline evaluation needs a center-head "
                              "checkpoint (train with --baseline)")
        if not baseline:
            cfg.subarea, cfg.classes = pconf.subarea, pconf.classes

    def predicted_classes(index, truth):
        image = load_image(manifest.image_path(index), cfg.channels)
        if baseline:
            return baseline_classify(state, pconf, image,
                                     stride=cfg.baseline_stride,
                                     fill=cfg.baseline_fill)
        if oracle:
            grid = build_grid(cfg.subarea, cfg.level)
            predict_fn = oracle_predictor(truth, grid, cfg.classes)
        else:
            grid = pconf.grid()
            predict_fn = model_predictor(state, pconf)
        seg, _, _ = scan_and_segment(image, predict_fn, grid,
                                     cfg.scan_params(),
                                     threads=cfg.resolved_threads())
        return seg.classes

    reports = []
    for i in indices:
        truth = load_mask(manifest.mask_path(i), manifest.palette)
        pred = predicted_classes(i, truth)
        reports.append(score(pred, truth, n_classes=cfg.classes,
                             notice_stream=sys.stderr))
        print(f"scored {manifest.entries[i][0]}", file=sys.stderr)
    final = aggregate(reports, notice_stream=sys.stderr)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    title = f"{'patch-center baseline' if baseline else 'retina scan'} " \
            f"d={cfg.subarea}" + ("" if baseline else f" ResLv-{cfg.level}")
    (out / "report.txt").write_text(
        format_table(final, manifest.palette.names, title))
    (out / "report.kv").write_text(format_records(final))
    write_run_metadata(out / "run.json",
                       "baseline" if baseline else "evaluate", cfg,
                       {"manifest": str(args.manifest), "fold": args.fold,
                        "images": len(indices)})
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retinaseg",
        description="retina-grid sequential-attention segmentation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blob-scale", type=int, default=64)
    p.add_argument("--noise-sigma", type=float, default=40.0)
    p.add_argument("--blur-sigma", type=float, default=1.5)
    p.add_argument("--priors", default=None,
                   help="comma-separated target class shares")
    p.add_argument("--ambiguous-border", type=int, default=0)
    p.add_argument("--folds", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a predictor on manifest folds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, default=-1,
                   help="held-out fold (-1 trains on everything)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="training log path")
    p.add_argument("--baseline", action="store_true",
                   help="train the patch-center baseline head")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, trace_only in (("segment", False), ("trace", True)):
        p = sub.add_parser(name, help="scan one image" +
                           (" (trace only)" if trace_only else ""))
        p.add_argument("--image", required=True)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--oracle-mask", default=None,
                       help="use ground truth as a perfect predictor")
        p.add_argument("--palette", default=None, help="palette JSON file")
        p.add_argument("--out-dir", required=True)
        p.add_argument("--dump-probmap", action="store_true")
        _add_config_flags(p)
        p.set_defaults(func=cmd_segment, trace_only=trace_only)

    for name, baseline in (("evaluate", False), ("baseline", True)):
        p = sub.add_parser(name, help=("score the patch-center baseline"
                                       if baseline else
                                       "score scan segmentations"))
        p.add_argument("--manifest", required=True)
        p.add_argument("--fold", type=int, default=-1)
        p.add_argument("--checkpoint", default=None)
        if not baseline:
            p.add_argument("--oracle", action="store_true",
                           help="score the ground-truth oracle predictor")
        p.add_argument("--out-dir", required=True)
        _add_config_flags(p)
        p.set_defaults(func=cmd_evaluate, baseline=baseline)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.func is cmd_segment:
            return cmd_segment(args, trace_only=args.trace_only)
        if args.func is cmd_evaluate:
            return cmd_evaluate(args, baseline=args.baseline)
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except RetinaSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
