"""Metric tests: matching counts, P/R/F1 arithmetic, bench, report fixtures."""

import itertools
import time

import numpy as np
import pytest

from maskpipe.errors import ValidationError
from maskpipe.geometry import BBox, Detection
from maskpipe.metrics import (
    ClassCounts,
    ConfusionMatrix,
    match_detections,
    precision_recall_f1,
    render_csv,
    render_report,
    speed_bench,
)


def det(x1, y1, x2, y2, conf=0.9, cls=0):
    return Detection(BBox(x1, y1, x2, y2), conf, cls)


class TestMatchDetections:
    def test_perfect_predictions(self):
        truth = [(BBox(0.1, 0.1, 0.3, 0.3), 0), (BBox(0.5, 0.5, 0.8, 0.8), 1)]
        pred = [Detection(box, 0.9, cls) for box, cls in truth]
        counts = match_detections(pred, truth, 0.5)
        assert counts == {0: ClassCounts(1, 0, 0), 1: ClassCounts(1, 0, 0)}

    def test_prediction_without_truth_is_fp(self):
        counts = match_detections([det(0, 0, 0.5, 0.5)], [], 0.5)
        assert counts == {0: ClassCounts(0, 1, 0)}

    def test_double_prediction_one_truth(self):
        truth = [(BBox(0.1, 0.1, 0.5, 0.5), 0)]
        pred = [det(0.1, 0.1, 0.5, 0.5, 0.9), det(0.12, 0.1, 0.5, 0.5, 0.8)]
        counts = match_detections(pred, truth, 0.5)
        assert counts[0] == ClassCounts(1, 1, 0)

    def test_class_mismatch_is_fp_and_fn(self):
        truth = [(BBox(0.1, 0.1, 0.5, 0.5), 1)]
        counts = match_detections([det(0.1, 0.1, 0.5, 0.5, 0.9, cls=0)], truth, 0.5)
        assert counts[0] == ClassCounts(0, 1, 0)
        assert counts[1] == ClassCounts(0, 0, 1)

    def test_count_conservation(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            truth = []
            for _ in range(rng.integers(0, 6)):
                x, y = rng.uniform(0, 0.7, 2)
                truth.append((BBox(x, y, x + 0.2, y + 0.2), int(rng.integers(0, 3))))
            pred = []
            for _ in range(rng.integers(0, 6)):
                x, y = rng.uniform(0, 0.7, 2)
                pred.append(
                    det(x, y, x + 0.2, y + 0.2, float(rng.random()), int(rng.integers(0, 3)))
                )
            counts = match_detections(pred, truth, 0.3)
            for c, cc in counts.items():
                assert cc.tp + cc.fn == sum(1 for _, t in truth if t == c)
                assert cc.tp + cc.fp == sum(1 for d in pred if d.class_id == c)

    def test_agrees_with_optimal_assignment_when_unambiguous(self):
        # well-separated instances, so greedy and exhaustive matching agree
        rng = np.random.default_rng(4)
        for _ in range(50):
            n = int(rng.integers(1, 6))
            truth, pred = [], []
            for i in range(n):
                x = 0.02 + (i % 3) * 0.33
                y = 0.02 + (i // 3) * 0.45
                box = BBox(x, y, x + 0.2, y + 0.2)
                truth.append((box, 0))
                if rng.random() < 0.8:
                    jitter = rng.uniform(-0.01, 0.01)
                    pred.append(det(x + jitter, y, x + 0.2 + jitter, y + 0.2, float(rng.random())))
            counts = match_detections(pred, truth, 0.5)
            best_tp = 0
            for perm in itertools.permutations(range(len(truth)), min(len(pred), len(truth))):
                tp = 0
                for d, j in zip(pred, perm):
                    from maskpipe.geometry import iou

                    if iou(d.box, truth[j][0]) >= 0.5:
                        tp += 1
                best_tp = max(best_tp, tp)
            assert counts[0].tp == best_tp


class TestPrecisionRecallF1:
    def test_diagonal_only_is_perfect(self):
        report = precision_recall_f1({0: ClassCounts(5, 0, 0), 1: ClassCounts(3, 0, 0)})
        assert report.macro == (1.0, 1.0, 1.0, False)

    def test_hand_arithmetic(self):
        report = precision_recall_f1({0: ClassCounts(9, 1, 3)})
        row = report.per_class[0]
        assert row.precision == pytest.approx(0.9)
        assert row.recall == pytest.approx(0.75)
        assert row.f1 == pytest.approx(2 * 0.9 * 0.75 / 1.65)

    def test_empty_class_flagged_zero(self):
        report = precision_recall_f1({0: ClassCounts(0, 0, 0)})
        assert report.per_class[0] == (0.0, 0.0, 0.0, True)

    def test_f1_between_min_and_max(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            tp, fp, fn = (int(v) for v in rng.integers(0, 20, 3))
            report = precision_recall_f1({0: ClassCounts(tp, fp, fn)})
            p, r, f1, _ = report.per_class[0]
            if p > 0 and r > 0:
                assert min(p, r) - 1e-12 <= f1 <= max(p, r) + 1e-12

    def test_micro_pools_counts(self):
        report = precision_recall_f1(
            {0: ClassCounts(10, 0, 0), 1: ClassCounts(0, 5, 5)}
        )
        assert report.micro.precision == pytest.approx(10 / 15)
        assert report.micro.recall == pytest.approx(10 / 15)
        assert report.macro.precision == pytest.approx(0.5)


class TestSpeedBench:
    def test_millisecond_worker(self):
        report = speed_bench(lambda _: time.sleep(0.001), list(range(100)), repetitions=3)
        assert report.images == 100
        assert report.ms_per_100 == pytest.approx(100.0, rel=0.2)

    def test_normalization_identity(self):
        report = speed_bench(lambda _: None, list(range(10)), repetitions=1)
        assert report.ms_per_100 == pytest.approx(100.0 * report.wall_ms / 10)

    def test_zero_images_rejected(self):
        with pytest.raises(ValidationError):
            speed_bench(lambda _: None, [], repetitions=1)

    def test_worker_failure_propagates(self):
        def bad(_):
            raise RuntimeError("boom")

        with pytest.raises(RuntimeError, match="boom"):
            speed_bench(bad, [1], repetitions=1)


TABLE_ROWS = [
    ("Faster R-CNN", 0.932, 0.721, 175.2),
    ("Yolov3", 0.905, 0.706, 96.42),
    ("Yolov3 Weighted Loss", 0.919, 0.731, 95.78),
]

TABLE_TEXT = """\
Method                Precision      F1   Speed
Faster R-CNN             0.9320  0.7210  175.20
Yolov3                   0.9050  0.7060   96.42
Yolov3 Weighted Loss     0.9190  0.7310   95.78
"""

SWEEP_ROWS = [
    ("FC classifier", 0.8590),
    ("support-50", 0.8557),
    ("support-100", 0.8876),
    ("support-500", 0.8776),
    ("support-full", 0.8513),
]

SWEEP_TEXT = """\
Settings       Accuracy
FC classifier    0.8590
support-50       0.8557
support-100      0.8876
support-500      0.8776
support-full     0.8513
"""


class TestRenderReport:
    def test_detection_fixture_bit_exact(self):
        assert render_report(TABLE_ROWS, "detection") == TABLE_TEXT

    def test_sweep_fixture_bit_exact(self):
        assert render_report(SWEEP_ROWS, "episodic") == SWEEP_TEXT

    def test_empty_rows_header_only(self):
        assert render_report([], "detection") == "Method  Precision  F1  Speed\n"

    def test_csv_schema(self):
        text = render_csv(TABLE_ROWS, "detection")
        lines = text.splitlines()
        assert lines[0] == "method,precision,f1,speed_ms_per_100"
        assert lines[1] == "Faster R-CNN,0.932,0.721,175.2"

    def test_wrong_arity_rejected(self):
        with pytest.raises(ValidationError):
            render_report([("only", 1.0)], "detection")


class TestConfusionMatrix:
    def test_from_pairs_and_accuracy(self):
        cm = ConfusionMatrix.from_pairs([0, 0, 1, 2], [0, 1, 1, 2], 3)
        assert cm.counts.tolist() == [[1, 1, 0], [0, 1, 0], [0, 0, 1]]
        assert cm.accuracy() == pytest.approx(0.75)
        assert cm.per_class_accuracy() == [0.5, 1.0, 1.0]
        assert cm.row_totals() == [2, 1, 1]

    def test_csv_includes_names(self):
        cm = ConfusionMatrix.from_pairs([0, 1], [0, 1], 2, labels=("cat", "dog"))
        text = cm.to_csv()
        assert text.splitlines()[0] == "truth\\pred,cat,dog"
        assert text.splitlines()[1] == "cat,1,0"
