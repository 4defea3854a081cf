"""Evaluation metrics: IoU-based detection matching, precision/recall/F1,
confusion matrices, the per-100-images speed benchmark, and report rendering.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ValidationError
from .geometry import BBox, Detection, iou

__all__ = [
    "ClassCounts",
    "ConfusionMatrix",
    "PrfReport",
    "SpeedReport",
    "match_detections",
    "precision_recall_f1",
    "speed_bench",
    "render_report",
    "render_csv",
    "REPORT_STYLES",
]


class ClassCounts(NamedTuple):
    tp: int
    fp: int
    fn: int


@dataclass
class ConfusionMatrix:
    """C x C counts, rows = truth, columns = prediction."""

    counts: np.ndarray = field(repr=False)
    labels: tuple[str, ...] | None = None

    @classmethod
    def from_pairs(
        cls, truth: Sequence[int], pred: Sequence[int], num_classes: int,
        labels: Sequence[str] | None = None,
    ) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        for t, p in zip(truth, pred, strict=True):
            counts[t, p] += 1
        return cls(counts, tuple(labels) if labels else None)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def accuracy(self) -> float:
        total = int(self.counts.sum())
        return float(np.trace(self.counts)) / total if total else 0.0

    def per_class_accuracy(self) -> list[float]:
        totals = self.counts.sum(axis=1)
        diag = np.diag(self.counts)
        return [float(d) / t if t else 0.0 for d, t in zip(diag, totals)]

    def row_totals(self) -> list[int]:
        return [int(t) for t in self.counts.sum(axis=1)]

    def to_csv(self) -> str:
        names = self.labels or tuple(str(i) for i in range(self.num_classes))
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["truth\\pred", *names])
        for name, row in zip(names, self.counts):
            writer.writerow([name, *(int(v) for v in row)])
        return out.getvalue()


def match_detections(
    pred: Sequence[Detection],
    truth: Sequence[tuple[BBox, int]],
    iou_thresh: float,
) -> dict[int, ClassCounts]:
    """Greedy confidence-ordered matching into per-class TP/FP/FN counts.

    A prediction is a true positive when its IoU with a still-unmatched
    same-class truth reaches the threshold; each truth matches at most once.
    """
    if not (0.0 <= iou_thresh <= 1.0):
        raise ValidationError(f"iou threshold must lie in [0, 1], got {iou_thresh}")
    classes = sorted({d.class_id for d in pred} | {c for _, c in truth})
    tp = {c: 0 for c in classes}
    fp = {c: 0 for c in classes}
    matched = [False] * len(truth)
    order = sorted(
        range(len(pred)),
        key=lambda i: (-pred[i].confidence, pred[i].class_id, i),
    )
    for i in order:
        d = pred[i]
        best_j, best_iou = -1, 0.0
        for j, (tbox, tcls) in enumerate(truth):
            if matched[j] or tcls != d.class_id:
                continue
            overlap = iou(d.box, tbox)
            if overlap >= iou_thresh and overlap > best_iou:
                best_j, best_iou = j, overlap
        if best_j >= 0:
            matched[best_j] = True
            tp[d.class_id] += 1
        else:
            fp[d.class_id] += 1
    fn = {c: 0 for c in classes}
    for j, (_, tcls) in enumerate(truth):
        if not matched[j]:
            fn[tcls] += 1
    return {c: ClassCounts(tp[c], fp[c], fn[c]) for c in classes}


class PrfRow(NamedTuple):
    precision: float
    recall: float
    f1: float
    flagged: bool  # some ratio was 0/0 and reported as 0


@dataclass(frozen=True)
class PrfReport:
    per_class: dict[int, PrfRow]
    macro: PrfRow
    micro: PrfRow


def _prf(tp: int, fp: int, fn: int) -> PrfRow:
    flagged = False
    if tp + fp == 0:
        precision, flagged = 0.0, True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall, flagged = 0.0, True
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0:
        f1, flagged = 0.0, True
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return PrfRow(precision, recall, f1, flagged)


def precision_recall_f1(counts: Mapping[int, ClassCounts]) -> PrfReport:
    """Per-class and aggregate precision/recall/F1 with the 0/0 -> 0 convention."""
    per_class = {c: _prf(*counts[c]) for c in sorted(counts)}
    if per_class:
        macro = PrfRow(
            statistics.fmean(r.precision for r in per_class.values()),
            statistics.fmean(r.recall for r in per_class.values()),
            statistics.fmean(r.f1 for r in per_class.values()),
            any(r.flagged for r in per_class.values()),
        )
    else:
        macro = PrfRow(0.0, 0.0, 0.0, True)
    micro = _prf(
        sum(c.tp for c in counts.values()),
        sum(c.fp for c in counts.values()),
        sum(c.fn for c in counts.values()),
    )
    return PrfReport(per_class, macro, micro)


@dataclass(frozen=True)
class SpeedReport:
    """Wall-time figure normalized to milliseconds per 100 images."""

    images: int
    wall_ms: float

    @property
    def ms_per_100(self) -> float:
        return 100.0 * self.wall_ms / self.images


def speed_bench(
    worker: Callable, images: Sequence, repetitions: int = 3
) -> SpeedReport:
    """Median wall time over repetitions, one warmup pass excluded.

    The worker runs on the calling thread; keep the harness otherwise idle.
    """
    if not images:
        raise ValidationError("speed_bench needs at least one image")
    if repetitions < 1:
        raise ValidationError("repetitions must be >= 1")
    for img in images:  # warmup
        worker(img)
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        for img in images:
            worker(img)
        times.append((time.perf_counter() - start) * 1000.0)
    return SpeedReport(images=len(images), wall_ms=statistics.median(times))


@dataclass(frozen=True)
class ReportStyle:
    headers: tuple[str, ...]
    formats: tuple[str | None, ...]  # format spec per column, None = str()
    csv_headers: tuple[str, ...]


REPORT_STYLES = {
    "detection": ReportStyle(
        headers=("Method", "Precision", "F1", "Speed"),
        formats=(None, ".4f", ".4f", ".2f"),
        csv_headers=("method", "precision", "f1", "speed_ms_per_100"),
    ),
    "episodic": ReportStyle(
        headers=("Settings", "Accuracy"),
        formats=(None, ".4f"),
        csv_headers=("settings", "accuracy"),
    ),
}


def _cells(rows: Iterable[Sequence], style: ReportStyle) -> list[list[str]]:
    rendered = []
    for row in rows:
        if len(row) != len(style.headers):
            raise ValidationError(
                f"row has {len(row)} cells, style expects {len(style.headers)}"
            )
        rendered.append(
            [str(v) if fmt is None else format(v, fmt) for v, fmt in zip(row, style.formats)]
        )
    return rendered


def render_report(rows: Iterable[Sequence], style: str) -> str:
    """Aligned plain-text table; first column left-aligned, the rest right."""
    st = REPORT_STYLES[style]
    cells = _cells(rows, st)
    widths = [
        max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
        for i, h in enumerate(st.headers)
    ]
    def line(parts):
        first = parts[0].ljust(widths[0])
        rest = [p.rjust(w) for p, w in zip(parts[1:], widths[1:])]
        return "  ".join([first, *rest]).rstrip()
    out = [line(list(st.headers))]
    out.extend(line(r) for r in cells)
    return "\n".join(out) + "\n"


def render_csv(rows: Iterable[Sequence], style: str) -> str:
    """Machine-readable companion to render_report, raw (unformatted) values."""
    st = REPORT_STYLES[style]
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(st.csv_headers)
    for row in rows:
        if len(row) != len(st.csv_headers):
            raise ValidationError(
                f"row has {len(row)} cells, style expects {len(st.csv_headers)}"
            )
        writer.writerow(row)
    return out.getvalue()
