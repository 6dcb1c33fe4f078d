import io

import numpy as np
import pytest

from retinaseg.dataio import LabelImage
from retinaseg.errors import DataError
from retinaseg.metrics import (ScoreReport, aggregate, format_records,
                               format_table, score)


def labels_from(classes, ambiguous=None):
    classes = np.asarray(classes, dtype=np.int16)
    if ambiguous is None:
        ambiguous = np.zeros(classes.shape, dtype=bool)
    return LabelImage(classes, np.asarray(ambiguous, dtype=bool))


def test_perfect_prediction_scores_one(rng):
    truth = labels_from(rng.integers(0, 3, size=(20, 20)))
    report = score(truth.classes.copy(), truth)
    for c, vals in report.per_class.items():
        for m, v in vals.items():
            assert v == 1.0, (c, m)
    assert report.macro["accuracy"] == 1.0
    assert all(v == 1.0 for v in report.macro.values())


def test_complement_binary_scores_zero():
    truth = labels_from([[0, 0], [1, 1]])
    pred = 1 - truth.classes
    report = score(pred, truth)
    for c in (0, 1):
        assert report.per_class[c]["jaccard"] == 0.0
        assert report.per_class[c]["tpr"] == 0.0
    assert report.macro["accuracy"] == 0.0


def test_hand_computed_two_by_two():
    truth = labels_from([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    report = score(pred, truth)
    assert report.per_class[0]["jaccard"] == pytest.approx(1 / 2)
    assert report.per_class[1]["jaccard"] == pytest.approx(2 / 3)
    assert report.macro["jaccard"] == pytest.approx(7 / 12)
    assert report.macro["accuracy"] == pytest.approx(3 / 4)


def test_dice_jaccard_identity(rng):
    truth = labels_from(rng.integers(0, 4, size=(30, 30)))
    pred = rng.integers(0, 4, size=(30, 30))
    report = score(pred, truth)
    for c, vals in report.per_class.items():
        j = vals["jaccard"]
        assert abs(vals["dice"] - 2 * j / (1 + j)) <= 1e-12


def test_ambiguous_pixels_do_not_count(rng):
    classes = rng.integers(0, 3, size=(16, 16))
    amb = rng.random((16, 16)) < 0.3
    truth = labels_from(classes, amb)
    pred_a = classes.copy()
    pred_b = classes.copy()
    pred_b[amb] = (pred_b[amb] + 1) % 3  # scramble only ambiguous pixels
    ra = score(pred_a, truth)
    rb = score(pred_b, truth)
    assert ra.macro == rb.macro
    assert ra.per_class == rb.per_class


def test_relabel_symmetry(rng):
    classes = rng.integers(0, 3, size=(16, 16))
    pred = rng.integers(0, 3, size=(16, 16))
    perm = np.array([2, 0, 1])
    r1 = score(pred, labels_from(classes))
    r2 = score(perm[pred], labels_from(perm[classes]))
    assert r1.macro == pytest.approx(r2.macro)
    for c in range(3):
        assert r1.per_class[c] == pytest.approx(r2.per_class[int(perm[c])])


def test_class_absent_from_truth_excluded():
    truth = labels_from([[0, 0], [0, 0]])
    pred = np.array([[0, 1], [0, 0]])
    stream = io.StringIO()
    report = score(pred, truth, n_classes=3, notice_stream=stream)
    assert set(report.per_class) == {0}
    assert report.excluded_classes == (1, 2)
    assert "absent from truth" in stream.getvalue()
    # single class covers everything: no negatives, TNR vacuously perfect
    assert report.per_class[0]["tnr"] == 1.0


def test_score_shape_mismatch():
    with pytest.raises(DataError):
        score(np.zeros((2, 3), dtype=int), labels_from([[0, 0], [1, 1]]))


def test_score_all_ambiguous_rejected():
    truth = labels_from([[0, 0]], ambiguous=[[True, True]])
    with pytest.raises(DataError):
        score(np.zeros((1, 2), dtype=int), truth)


def test_aggregate_single_report_zero_std(rng):
    truth = labels_from(rng.integers(0, 3, size=(10, 10)))
    report = score(truth.classes.copy(), truth)
    agg = aggregate([report])
    assert agg.macro == report.macro
    assert all(v == 0.0 for v in agg.macro_std.values())
    assert agg.n_reports == 1


def test_aggregate_two_equal_reports(rng):
    truth = labels_from(rng.integers(0, 3, size=(10, 10)))
    pred = rng.integers(0, 3, size=(10, 10))
    r = score(pred, truth)
    agg = aggregate([r, r])
    assert agg.macro == pytest.approx(r.macro)
    assert all(v == 0.0 for v in agg.macro_std.values())


def test_aggregate_mean_and_population_std():
    r1 = ScoreReport(per_class={0: {"jaccard": 0.8, "dice": 0.8, "tpr": 0.8,
                                    "tnr": 0.8}},
                     macro={"jaccard": 0.8, "dice": 0.8, "tpr": 0.8,
                            "tnr": 0.8, "accuracy": 0.8})
    r2 = ScoreReport(per_class={0: {"jaccard": 0.9, "dice": 0.9, "tpr": 0.9,
                                    "tnr": 0.9}},
                     macro={"jaccard": 0.9, "dice": 0.9, "tpr": 0.9,
                            "tnr": 0.9, "accuracy": 0.9})
    agg = aggregate([r1, r2])
    assert agg.macro["jaccard"] == pytest.approx(0.85)
    assert agg.macro_std["jaccard"] == pytest.approx(0.05)
    assert agg.per_class[0]["jaccard"] == pytest.approx(0.85)
    assert agg.n_reports == 2


def test_aggregate_empty_rejected():
    with pytest.raises(DataError):
        aggregate([])


def test_format_table_and_records(rng):
    truth = labels_from(rng.integers(0, 3, size=(12, 12)))
    report = aggregate([score(truth.classes.copy(), truth)])
    table = format_table(report, ("Good", "Bad", "Background"), title="t")
    assert "Jaccard" in table and "Good" in table and "+-" in table
    records = format_records(report)
    assert "macro.jaccard = 1.000000" in records
    assert "macro.jaccard.std = 0.000000" in records
    assert "class0.dice = 1.000000" in records
