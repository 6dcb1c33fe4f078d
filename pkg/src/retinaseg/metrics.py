"""Segmentation scoring: Jaccard, Dice, TPR, TNR, Accuracy.

Scores are computed per class from one-vs-rest confusion counts over the
evaluated (non-ambiguous) pixels, then macro-averaged over the classes
present in the ground truth. Fold aggregation reports the unweighted mean
and the population standard deviation of every metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import LabelImage
from .errors import DataError

PER_CLASS_METRICS = ("jaccard", "dice", "tpr", "tnr")
MACRO_METRICS = PER_CLASS_METRICS + ("accuracy",)


@dataclass
class ScoreReport:
    """Per-class and macro metric values, with across-report deviations."""

    per_class: dict[int, dict[str, float]]
    macro: dict[str, float]
    per_class_std: dict[int, dict[str, float]] = field(default_factory=dict)
    macro_std: dict[str, float] = field(default_factory=dict)
    excluded_classes: tuple[int, ...] = ()
    n_reports: int = 1

    def __post_init__(self) -> None:
        if not self.macro_std:
            self.macro_std = {k: 0.0 for k in self.macro}
        if not self.per_class_std:
            self.per_class_std = {c: {k: 0.0 for k in v}
                                  for c, v in self.per_class.items()}


def _rate(num: float, den: float) -> float:
    # vacuous rates (no positives/negatives to get wrong) score perfect
    return num / den if den > 0 else 1.0


def score(pred: np.ndarray, truth: LabelImage, n_classes: int | None = None,
          notice_stream=None) -> ScoreReport:
    """Score a predicted class map against ground truth.

    Ambiguous pixels are excluded from every count. Classes absent from
    the truth are left out of the macro average with a notice."""
    pred = np.asarray(pred)
    if pred.shape != truth.classes.shape:
        raise DataError(f"prediction shape {pred.shape} != truth shape "
                        f"{truth.classes.shape}")
    evaluated = ~truth.ambiguous
    n_eval = int(evaluated.sum())
    if n_eval == 0:
        raise DataError("no evaluated pixels: truth is entirely ambiguous")
    t = truth.classes[evaluated]
    p = pred[evaluated]

    present = [int(c) for c in np.unique(t)]
    excluded: tuple[int, ...] = ()
    if n_classes is not None:
        excluded = tuple(c for c in range(n_classes) if c not in present)
        if excluded and notice_stream:
            print(f"notice: classes {list(excluded)} absent from truth; "
                  f"excluded from the macro average", file=notice_stream)
    per_class: dict[int, dict[str, float]] = {}
    for c in present:
        tpos = t == c
        ppos = p == c
        tp = float(np.count_nonzero(tpos & ppos))
        fp = float(np.count_nonzero(~tpos & ppos))
        fn = float(np.count_nonzero(tpos & ~ppos))
        tn = float(n_eval) - tp - fp - fn
        per_class[c] = {
            "jaccard": _rate(tp, tp + fp + fn),
            "dice": _rate(2.0 * tp, 2.0 * tp + fp + fn),
            "tpr": _rate(tp, tp + fn),
            "tnr": _rate(tn, tn + fp),
        }
    macro = {m: float(np.mean([per_class[c][m] for c in present]))
             for m in PER_CLASS_METRICS}
    macro["accuracy"] = float(np.count_nonzero(t == p)) / n_eval
    return ScoreReport(per_class=per_class, macro=macro,
                       excluded_classes=excluded)


def aggregate(reports: list[ScoreReport],
              notice_stream=None) -> ScoreReport:
    """Unweighted mean and population standard deviation across reports.

    A class contributes wherever it appears; classes missing from some
    reports are averaged over the reports that contain them."""
    if not reports:
        raise DataError("nothing to aggregate")
    macro = {}
    macro_std = {}
    for m in reports[0].macro:
        vals = np.asarray([r.macro[m] for r in reports])
        macro[m] = float(vals.mean())
        macro_std[m] = float(vals.std())
    all_classes = sorted({c for r in reports for c in r.per_class})
    per_class = {}
    per_class_std = {}
    partial = []
    for c in all_classes:
        having = [r for r in reports if c in r.per_class]
        if len(having) < len(reports):
            partial.append(c)
        per_class[c] = {}
        per_class_std[c] = {}
        for m in PER_CLASS_METRICS:
            vals = np.asarray([r.per_class[c][m] for r in having])
            per_class[c][m] = float(vals.mean())
            per_class_std[c][m] = float(vals.std())
    if partial and notice_stream:
        print(f"notice: classes {partial} absent from some reports; "
              f"averaged over the reports containing them",
              file=notice_stream)
    return ScoreReport(per_class=per_class, macro=macro,
                       per_class_std=per_class_std, macro_std=macro_std,
                       n_reports=len(reports))


def format_table(report: ScoreReport, class_names=None,
                 title: str = "scores") -> str:
    """Aligned text table with 'mean +- std' cells."""
    def cell(mean, std):
        return f"{mean:.3f} +- {std:.3f}"

    header = ["class", "Jaccard", "Dice", "TPR", "TNR", "Accuracy"]
    rows = [header]
    for c in sorted(report.per_class):
        name = class_names[c] if class_names and c < len(class_names) else str(c)
        rows.append([name] + [cell(report.per_class[c][m],
                                   report.per_class_std[c][m])
                             for m in PER_CLASS_METRICS] + ["-"])
    rows.append(["macro"] + [cell(report.macro[m], report.macro_std[m])
                             for m in MACRO_METRICS])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [title, "-" * len(title)]
    for r in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    if report.excluded_classes:
        lines.append(f"excluded (absent from truth): "
                     f"{list(report.excluded_classes)}")
    lines.append(f"reports aggregated: {report.n_reports}")
    return "\n".join(lines) + "\n"


def format_records(report: ScoreReport) -> str:
    """Machine-readable 'key = value' records."""
    lines = []
    for m in MACRO_METRICS:
        lines.append(f"macro.{m} = {report.macro[m]:.6f}")
        lines.append(f"macro.{m}.std = {report.macro_std[m]:.6f}")
    for c in sorted(report.per_class):
        for m in PER_CLASS_METRICS:
            lines.append(f"class{c}.{m} = {report.per_class[c][m]:.6f}")
            lines.append(f"class{c}.{m}.std = {report.per_class_std[c][m]:.6f}")
    lines.append(f"n_reports = {report.n_reports}")
    return "\n".join(lines) + "\n"
