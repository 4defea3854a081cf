"""Detector models the pipeline can drive without a trained backbone:
a synthetic box generator and playback of pre-recorded grid-tensor files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset_voc import MASK_CATALOG
from .errors import FormatError, ValidationError
from .geometry import BBox, Detection, clip_to_unit
from .yolo_head import AnchorSet, DEFAULT_ANCHORS, decode_grid, read_grid_file

__all__ = ["SyntheticDetector", "PlaybackDetector", "build_detector"]


class SyntheticDetector:
    """Deterministic stand-in detector; counts calls to animate its boxes.

    "static" keeps one box fixed; "moving" drifts a box a fixed amount per
    invocation, which exercises tracking and extrapolation.
    """

    def __init__(self, mode: str = "static", labels=MASK_CATALOG.names, step: float = 0.01):
        if mode not in ("static", "moving"):
            raise ValidationError(f"unknown synthetic detector mode {mode!r}")
        self.mode = mode
        self.labels = tuple(labels)
        self.step = step
        self.calls = 0

    def __call__(self, frame: np.ndarray) -> list[Detection]:
        k = self.calls
        self.calls += 1
        if self.mode == "static":
            return [Detection(BBox(0.3, 0.3, 0.5, 0.55), 0.88, 0)]
        x = 0.05 + self.step * k
        box = clip_to_unit(BBox(x, 0.35, x + 0.2, 0.6))
        dets = [Detection(box, 0.9, 0)]
        if box.x2 >= 1.0:  # wandered off; keep at least one visible box
            dets = [Detection(BBox(0.05, 0.1, 0.25, 0.3), 0.75, 1)]
        return dets


class PlaybackDetector:
    """Replays grid-tensor files from a directory, one per model call.

    Files are consumed in sorted order and cycle when exhausted, so any
    stream length can be annotated from a finite recording.
    """

    def __init__(
        self,
        directory,
        anchors: AnchorSet = DEFAULT_ANCHORS,
        conf_threshold: float = 0.25,
        iou_threshold: float = 0.45,
        labels=MASK_CATALOG.names,
    ):
        self.files = sorted(Path(directory).glob("*.mgrd"))
        if not self.files:
            raise FormatError(f"no .mgrd tensor files in {directory}")
        self.anchors = anchors
        self.conf_threshold = conf_threshold
        self.iou_threshold = iou_threshold
        self.labels = tuple(labels)
        self.calls = 0

    def __call__(self, frame: np.ndarray) -> list[Detection]:
        path = self.files[self.calls % len(self.files)]
        self.calls += 1
        grid = read_grid_file(path)
        return decode_grid(grid, self.anchors, self.conf_threshold, self.iou_threshold)


def build_detector(spec: str, conf_threshold: float = 0.25, iou_threshold: float = 0.45):
    """Parse a CLI model spec: "synthetic", "synthetic:moving", "playback:DIR"."""
    kind, _, arg = spec.partition(":")
    if kind == "synthetic":
        return SyntheticDetector(arg or "static")
    if kind == "playback":
        if not arg:
            raise ValidationError('playback model spec needs a directory: "playback:DIR"')
        return PlaybackDetector(arg, conf_threshold=conf_threshold, iou_threshold=iou_threshold)
    raise ValidationError(f"unknown model spec {spec!r}; use synthetic[:MODE] or playback:DIR")
