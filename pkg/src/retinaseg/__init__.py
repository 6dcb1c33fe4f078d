"""Retina-grid sequential-attention image segmentation.

Pipeline: encode class topology of image subareas as multi-resolution
cell pmfs (grid), train a predictor on them (predictor), scan images with
an entropy-driven attention policy (attention), fuse overlapping
predictions into a probability map and argmax it (probmap), score the
result (metrics). dataio handles masks, manifests, folds and synthetic
datasets; cli drives everything end to end.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericError, RetinaSegError
from .dataio import (ClassPalette, DatasetManifest, LabelImage, decode_mask,
                     default_palette, encode_mask, load_image, load_manifest,
                     load_mask, make_folds, save_manifest, synth_generate)
from .grid import (CellRect, GridPmf, RetinaGrid, build_grid, cell_count,
                   cell_of_pixel, encode_targets, geometry_dump)
from .attention import (Fixation, ScanParams, ScanTrace, attention_shift,
                        attention_step, grid_entropy, row_positions,
                        scan_image, write_trace)
from .probmap import (ProbabilityMap, Segmentation, UNKNOWN_CLASS, deposit,
                      finalize, render_heatmap, scan_and_segment,
                      segmentation_to_rgb)
from .predictor import (ModelState, PredictorConfig, TrainingSample,
                        baseline_classify, init_state, load_checkpoint, loss,
                        loss_gradient, model_predictor, oracle_predictor,
                        predict, predict_probs, save_checkpoint, train,
                        training_loss)
from .metrics import ScoreReport, aggregate, format_records, format_table, score

__all__ = [
    "ConfigError", "DataError", "NumericError", "RetinaSegError",
    "ClassPalette", "DatasetManifest", "LabelImage", "decode_mask",
    "default_palette", "encode_mask", "load_image", "load_manifest",
    "load_mask", "make_folds", "save_manifest", "synth_generate",
    "CellRect", "GridPmf", "RetinaGrid", "build_grid", "cell_count",
    "cell_of_pixel", "encode_targets", "geometry_dump",
    "Fixation", "ScanParams", "ScanTrace", "attention_shift",
    "attention_step", "grid_entropy", "row_positions", "scan_image",
    "write_trace",
    "ProbabilityMap", "Segmentation", "UNKNOWN_CLASS", "deposit", "finalize",
    "render_heatmap", "scan_and_segment", "segmentation_to_rgb",
    "ModelState", "PredictorConfig", "TrainingSample", "baseline_classify",
    "init_state", "load_checkpoint", "loss", "loss_gradient",
    "model_predictor", "oracle_predictor", "predict", "predict_probs",
    "save_checkpoint", "train", "training_loss",
    "ScoreReport", "aggregate", "format_records", "format_table", "score",
    "__version__",
]
