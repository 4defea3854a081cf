"""Streaming annotation pipeline over a portable raw-RGB container.

The container (".mdvs") is magic MDVS, u32 LE version=1, u32 width, u32
height, u32 fps numerator, u32 fps denominator, u64 frame count, then raw
RGB24 frames row-major. A pluggable detector runs on every ``skip``-th
frame; intermediate frames reuse the last detections, optionally advanced
by an IoU tracker with constant-velocity extrapolation. Every frame is
annotated and written, and a JSON-lines sidecar records where each frame's
detections came from.

Stages (read, infer, track/draw, write) share nothing but the frame handed
forward, so they can be queue-connected; run sequentially here, which is
the capacity-1 degenerate case of that contract.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from ._font5x7 import GLYPH_H, render_text, text_width
from .errors import FormatError, PipelineError, ValidationError
from .geometry import BBox, Detection, clip_to_unit, iou

__all__ = [
    "FrameStream",
    "MemoryFrameStream",
    "FileFrameStream",
    "open_stream",
    "write_stream",
    "Track",
    "InstanceTracker",
    "TrackedDetection",
    "SidecarRecord",
    "run_pipeline",
    "draw_annotations",
    "pipeline_bench",
    "PipelineBenchReport",
    "sidecar_to_jsonl",
    "CLASS_COLORS",
]

VIDEO_MAGIC = b"MDVS"
VIDEO_VERSION = 1
HEADER = struct.Struct("<4sIIIIIQ")  # magic, version, w, h, fps_num, fps_den, count

# class 0 green, class 1 red, class 2 amber; extra classes cycle
CLASS_COLORS = ((0, 255, 0), (255, 0, 0), (255, 191, 0))


class FrameStream:
    """Sequence of same-sized RGB24 frames with a rational frame rate."""

    width: int
    height: int
    fps: tuple[int, int]
    frame_count: int

    def __iter__(self) -> Iterator[np.ndarray]:
        raise NotImplementedError

    def __len__(self) -> int:
        return self.frame_count


class MemoryFrameStream(FrameStream):
    def __init__(self, frames: Sequence[np.ndarray], fps: tuple[int, int] = (25, 1)):
        if not frames:
            raise ValidationError("a frame stream needs at least one frame")
        if fps[0] < 1 or fps[1] < 1:
            raise ValidationError(f"fps must be a positive rational, got {fps}")
        first = np.asarray(frames[0])
        for i, f in enumerate(frames):
            f = np.asarray(f)
            if f.shape != first.shape or f.dtype != np.uint8 or f.ndim != 3 or f.shape[2] != 3:
                raise FormatError(f"frame {i} has shape {f.shape} {f.dtype}, expected {first.shape} uint8")
        self.frames = [np.asarray(f) for f in frames]
        self.height, self.width = first.shape[:2]
        self.fps = (int(fps[0]), int(fps[1]))
        self.frame_count = len(frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.frames[i]


class FileFrameStream(FrameStream):
    """Lazy reader over an MDVS file; frames are seekable by index."""

    def __init__(self, path):
        self.path = Path(path)
        size = self.path.stat().st_size
        if size < HEADER.size:
            raise FormatError(f"{path}: truncated header at byte {size}")
        with open(self.path, "rb") as fh:
            magic, version, w, h, num, den, count = HEADER.unpack(fh.read(HEADER.size))
        if magic != VIDEO_MAGIC:
            raise FormatError(f"{path}: bad magic at byte 0, expected {VIDEO_MAGIC!r}")
        if version != VIDEO_VERSION:
            raise FormatError(f"{path}: unsupported version {version} at byte 4")
        if w < 1 or h < 1 or den < 1:
            raise FormatError(f"{path}: invalid header fields {w}x{h} fps_den={den}")
        self.width, self.height = w, h
        self.fps = (num, den)
        self.frame_count = count
        self._frame_bytes = w * h * 3
        expected = HEADER.size + count * self._frame_bytes
        if size < expected:
            raise FormatError(f"{path}: truncated at byte {size}, expected {expected}")

    def __getitem__(self, i: int) -> np.ndarray:
        if not (0 <= i < self.frame_count):
            raise IndexError(i)
        with open(self.path, "rb") as fh:
            fh.seek(HEADER.size + i * self._frame_bytes)
            raw = fh.read(self._frame_bytes)
        return np.frombuffer(raw, dtype=np.uint8).reshape(self.height, self.width, 3).copy()

    def __iter__(self):
        with open(self.path, "rb") as fh:
            fh.seek(HEADER.size)
            for _ in range(self.frame_count):
                raw = fh.read(self._frame_bytes)
                yield np.frombuffer(raw, dtype=np.uint8).reshape(self.height, self.width, 3).copy()


def open_stream(path) -> FileFrameStream:
    return FileFrameStream(path)


def write_stream(path, stream: FrameStream) -> None:
    """Write MDVS; reading it back yields bit-identical frames."""
    with open(path, "wb") as fh:
        fh.write(
            HEADER.pack(
                VIDEO_MAGIC, VIDEO_VERSION, stream.width, stream.height,
                stream.fps[0], stream.fps[1], stream.frame_count,
            )
        )
        n = 0
        for frame in stream:
            frame = np.asarray(frame, dtype=np.uint8)
            if frame.shape != (stream.height, stream.width, 3):
                raise FormatError(
                    f"frame {n} has shape {frame.shape}, stream is {stream.width}x{stream.height}"
                )
            fh.write(frame.tobytes())
            n += 1
        if n != stream.frame_count:
            raise FormatError(f"stream produced {n} frames, header said {stream.frame_count}")


@dataclass(frozen=True)
class TrackedDetection:
    detection: Detection
    track_id: int | None = None


@dataclass
class Track:
    track_id: int
    box: BBox
    class_id: int
    confidence: float
    last_seen: int
    age: int = 1  # observations so far
    velocity: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def predict(self, frame_index: int) -> BBox:
        dt = frame_index - self.last_seen
        vx1, vy1, vx2, vy2 = self.velocity
        return clip_to_unit(
            BBox(
                self.box.x1 + vx1 * dt,
                self.box.y1 + vy1 * dt,
                self.box.x2 + vx2 * dt,
                self.box.y2 + vy2 * dt,
            )
        )


class InstanceTracker:
    """Greedy IoU association with constant-velocity extrapolation.

    Fresh detections update or spawn tracks; on carried frames boxes are
    advanced by the per-frame velocity estimated from the last two
    observations. Track ids never recycle within a run.
    """

    def __init__(self, iou_threshold: float = 0.3, max_age: int = 30):
        self.iou_threshold = iou_threshold
        self.max_age = max_age
        self.tracks: list[Track] = []
        self._next_id = 0

    def step(self, detections: Sequence[Detection], frame_index: int) -> list[TrackedDetection]:
        """Associate fresh detections, update matched tracks, spawn the rest."""
        self.tracks = [
            t for t in self.tracks if frame_index - t.last_seen <= self.max_age
        ]
        candidates = []
        for ti, track in enumerate(self.tracks):
            predicted = track.predict(frame_index)
            for di, det in enumerate(detections):
                if det.class_id != track.class_id:
                    continue
                overlap = iou(predicted, det.box)
                if overlap >= self.iou_threshold:
                    candidates.append((-overlap, ti, di))
        candidates.sort()
        used_tracks: set[int] = set()
        assigned: dict[int, Track] = {}
        for neg_overlap, ti, di in candidates:
            if ti in used_tracks or di in assigned:
                continue
            track = self.tracks[ti]
            det = detections[di]
            dt = frame_index - track.last_seen
            if dt > 0:
                velocity = (
                    (det.box.x1 - track.box.x1) / dt,
                    (det.box.y1 - track.box.y1) / dt,
                    (det.box.x2 - track.box.x2) / dt,
                    (det.box.y2 - track.box.y2) / dt,
                )
            else:
                velocity = track.velocity
            track.box = det.box
            track.confidence = det.confidence
            track.last_seen = frame_index
            track.age += 1
            track.velocity = velocity
            used_tracks.add(ti)
            assigned[di] = track
        out = []
        for di, det in enumerate(detections):
            track = assigned.get(di)
            if track is None:
                track = Track(self._next_id, det.box, det.class_id, det.confidence, frame_index)
                self._next_id += 1
                self.tracks.append(track)
            out.append(TrackedDetection(det, track.track_id))
        return out

    def advance(self, frame_index: int) -> list[TrackedDetection]:
        """Predict current boxes for a frame the model did not see."""
        out = []
        for track in self.tracks:
            if frame_index - track.last_seen > self.max_age:
                continue
            box = track.predict(frame_index)
            if box.area() <= 0:
                continue
            out.append(
                TrackedDetection(Detection(box, track.confidence, track.class_id), track.track_id)
            )
        return out


def ncc_refine(
    reference: np.ndarray, frame: np.ndarray, box: BBox, search_radius: int = 4
) -> BBox:
    """Optional pixel-content refinement: shift a predicted box to the
    normalized-cross-correlation peak of its reference patch nearby.
    Off by default in the pipeline."""
    h, w = frame.shape[:2]
    x1 = int(round(box.x1 * (w - 1)))
    y1 = int(round(box.y1 * (h - 1)))
    x2 = max(x1 + 1, int(round(box.x2 * (w - 1))))
    y2 = max(y1 + 1, int(round(box.y2 * (h - 1))))
    patch = reference[y1 : y2 + 1, x1 : x2 + 1].astype(np.float64).mean(axis=2)
    if patch.size == 0:
        return box
    patch = patch - patch.mean()
    norm = np.linalg.norm(patch)
    if norm == 0:
        return box
    best, best_dx, best_dy = -2.0, 0, 0
    for dy in range(-search_radius, search_radius + 1):
        for dx in range(-search_radius, search_radius + 1):
            sy, sx = y1 + dy, x1 + dx
            if sy < 0 or sx < 0 or sy + patch.shape[0] > h or sx + patch.shape[1] > w:
                continue
            window = frame[sy : sy + patch.shape[0], sx : sx + patch.shape[1]]
            window = window.astype(np.float64).mean(axis=2)
            window = window - window.mean()
            wnorm = np.linalg.norm(window)
            if wnorm == 0:
                continue
            score = float((patch * window).sum() / (norm * wnorm))
            if score > best:
                best, best_dx, best_dy = score, dx, dy
    return clip_to_unit(
        BBox(
            box.x1 + best_dx / (w - 1),
            box.y1 + best_dy / (h - 1),
            box.x2 + best_dx / (w - 1),
            box.y2 + best_dy / (h - 1),
        )
    )


def _fill_rect(frame: np.ndarray, x1: int, y1: int, x2: int, y2: int, color) -> None:
    h, w = frame.shape[:2]
    x1, x2 = max(0, x1), min(w, x2)
    y1, y2 = max(0, y1), min(h, y2)
    if x1 < x2 and y1 < y2:
        frame[y1:y2, x1:x2] = color


def draw_annotations(
    frame: np.ndarray,
    detections: Sequence[TrackedDetection | Detection],
    labels: Sequence[str],
) -> np.ndarray:
    """Return a copy of the frame with 2-pixel boxes and label tags drawn.

    The input frame is never modified.
    """
    out = np.asarray(frame).copy()
    h, w = out.shape[:2]
    for item in detections:
        det = item.detection if isinstance(item, TrackedDetection) else item
        color = CLASS_COLORS[det.class_id % len(CLASS_COLORS)]
        x1 = int(round(det.box.x1 * (w - 1)))
        y1 = int(round(det.box.y1 * (h - 1)))
        x2 = int(round(det.box.x2 * (w - 1)))
        y2 = int(round(det.box.y2 * (h - 1)))
        _fill_rect(out, x1, y1, x2 + 1, y1 + 2, color)  # top
        _fill_rect(out, x1, y2 - 1, x2 + 1, y2 + 1, color)  # bottom
        _fill_rect(out, x1, y1, x1 + 2, y2 + 1, color)  # left
        _fill_rect(out, x2 - 1, y1, x2 + 1, y2 + 1, color)  # right

        name = labels[det.class_id] if det.class_id < len(labels) else str(det.class_id)
        text = f"{name} {det.confidence:.2f}"
        tag_h = GLYPH_H + 2
        tag_w = text_width(text) + 2
        tag_y = y1 - tag_h if y1 - tag_h >= 0 else y1
        _fill_rect(out, x1, tag_y, x1 + tag_w, tag_y + tag_h, color)
        render_text(out, x1 + 1, tag_y + 1, text, (0, 0, 0))
    return out


@dataclass(frozen=True)
class SidecarRecord:
    """Per-frame provenance: fresh model output, carried, or tracked."""

    frame: int
    source: str  # "fresh" | "carried" | "tracked"
    from_frame: int  # the fresh frame these detections derive from
    detections: tuple[TrackedDetection, ...]


def sidecar_to_jsonl(records: Sequence[SidecarRecord], labels: Sequence[str]) -> str:
    """Header line with the label-name list, then one JSON object per frame."""
    lines = [json.dumps({"labels": list(labels)})]
    for rec in records:
        dets = []
        for td in rec.detections:
            d = td.detection
            obj = {
                "x1": d.box.x1, "y1": d.box.y1, "x2": d.box.x2, "y2": d.box.y2,
                "conf": d.confidence, "class_id": d.class_id,
            }
            if td.track_id is not None:
                obj["track_id"] = td.track_id
            dets.append(obj)
        lines.append(
            json.dumps(
                {"frame": rec.frame, "source": rec.source, "from_frame": rec.from_frame,
                 "detections": dets}
            )
        )
    return "\n".join(lines) + "\n"


def _validate_model_output(dets: Sequence[Detection], num_labels: int, frame_index: int):
    for d in dets:
        if not d.box.is_valid():
            raise ValidationError(f"model emitted an invalid box on frame {frame_index}: {d.box}")
        if not (0.0 <= d.confidence <= 1.0):
            raise ValidationError(
                f"model confidence {d.confidence} outside [0, 1] on frame {frame_index}"
            )
        if not (0 <= d.class_id < num_labels):
            raise ValidationError(
                f"model class id {d.class_id} outside the {num_labels}-label catalog "
                f"on frame {frame_index}"
            )


@dataclass(frozen=True)
class PipelineResult:
    stream: MemoryFrameStream
    sidecar: tuple[SidecarRecord, ...]
    model_calls: int


def run_pipeline(
    stream: FrameStream,
    model: Callable[[np.ndarray], list[Detection]],
    skip: int = 1,
    tracker: bool = False,
    iou_threshold: float = 0.3,
    max_age: int = 30,
    labels: Sequence[str] | None = None,
    draw: bool = True,
    refine: bool = False,
) -> PipelineResult:
    """Annotate every frame, invoking the model on frames 0, skip, 2*skip, ...

    Intermediate frames reuse the previous fresh detections ("carried") or
    the tracker's constant-velocity predictions ("tracked"); ``refine``
    additionally snaps tracked boxes to the NCC peak of their last fresh
    patch. With ``draw=False`` frames pass through unannotated
    (sidecar-only runs).
    """
    if skip < 1:
        raise ValidationError(f"skip must be >= 1, got {skip}")
    label_list = tuple(labels if labels is not None else getattr(model, "labels", ()))
    if not label_list:
        raise ValidationError("the detector declares no label names")
    if stream.frame_count < 1:
        raise ValidationError("input stream has no frames")
    tracking = InstanceTracker(iou_threshold, max_age) if tracker else None
    out_frames: list[np.ndarray] = []
    records: list[SidecarRecord] = []
    current: list[TrackedDetection] = []
    last_fresh = -1
    fresh_frame: np.ndarray | None = None
    model_calls = 0
    expected_shape = (stream.height, stream.width, 3)
    for i, frame in enumerate(stream):
        frame = np.asarray(frame)
        if frame.shape != expected_shape:
            raise FormatError(
                f"frame {i} has shape {frame.shape}, stream declared {expected_shape}"
            )
        if i % skip == 0:
            try:
                fresh = model(frame)
            except Exception as exc:
                raise PipelineError(f"model failed on frame {i}: {exc}") from exc
            _validate_model_output(fresh, len(label_list), i)
            model_calls += 1
            last_fresh = i
            fresh_frame = frame if refine else None
            if tracking is not None:
                current = tracking.step(fresh, i)
            else:
                current = [TrackedDetection(d) for d in fresh]
            source = "fresh"
        elif tracking is not None:
            current = tracking.advance(i)
            if refine and fresh_frame is not None:
                current = [
                    TrackedDetection(
                        Detection(
                            ncc_refine(fresh_frame, frame, t.detection.box),
                            t.detection.confidence,
                            t.detection.class_id,
                        ),
                        t.track_id,
                    )
                    for t in current
                ]
            source = "tracked"
        else:
            source = "carried"
        out_frames.append(draw_annotations(frame, current, label_list) if draw else frame)
        records.append(SidecarRecord(i, source, last_fresh, tuple(current)))
    out = MemoryFrameStream(out_frames, stream.fps)
    return PipelineResult(out, tuple(records), model_calls)


@dataclass(frozen=True)
class PipelineBenchReport:
    """End-to-end throughput with model time split from pipeline overhead."""

    frames: int
    width: int
    height: int
    model_calls: int
    model_ms: float
    overhead_ms: float
    total_ms: float

    @property
    def fps(self) -> float:
        return 1000.0 * self.frames / self.total_ms if self.total_ms > 0 else float("inf")

    @property
    def ms_per_100_frames(self) -> float:
        return 100.0 * self.total_ms / self.frames

    def render(self) -> str:
        return (
            f"resolution {self.width}x{self.height}, {self.frames} frames, "
            f"{self.model_calls} model calls\n"
            f"model {self.model_ms:.1f} ms + overhead {self.overhead_ms:.1f} ms "
            f"of {self.total_ms:.1f} ms total\n"
            f"throughput {self.fps:.2f} frames/s "
            f"({self.ms_per_100_frames:.1f} ms per 100 frames)\n"
        )


def pipeline_bench(
    stream: FrameStream,
    model: Callable[[np.ndarray], list[Detection]],
    skip: int = 1,
    tracker: bool = False,
    labels: Sequence[str] | None = None,
) -> PipelineBenchReport:
    """Time the full pipeline, attributing each segment to model or overhead."""
    if skip < 1:
        raise ValidationError(f"skip must be >= 1, got {skip}")
    label_list = tuple(labels if labels is not None else getattr(model, "labels", ()))
    if not label_list:
        raise ValidationError("the detector declares no label names")
    tracking = InstanceTracker() if tracker else None
    model_ms = 0.0
    overhead_ms = 0.0
    model_calls = 0
    frames = 0
    current: list[TrackedDetection] = []
    start = time.perf_counter()
    it = iter(stream)
    while True:
        t0 = time.perf_counter()
        try:
            frame = next(it)
        except StopIteration:
            overhead_ms += (time.perf_counter() - t0) * 1000.0
            break
        overhead_ms += (time.perf_counter() - t0) * 1000.0

        if frames % skip == 0:
            t0 = time.perf_counter()
            try:
                fresh = model(frame)
            except Exception as exc:
                raise PipelineError(f"model failed on frame {frames}: {exc}") from exc
            model_ms += (time.perf_counter() - t0) * 1000.0
            model_calls += 1
            t0 = time.perf_counter()
            _validate_model_output(fresh, len(label_list), frames)
            if tracking is not None:
                current = tracking.step(fresh, frames)
            else:
                current = [TrackedDetection(d) for d in fresh]
            overhead_ms += (time.perf_counter() - t0) * 1000.0
        else:
            t0 = time.perf_counter()
            if tracking is not None:
                current = tracking.advance(frames)
            overhead_ms += (time.perf_counter() - t0) * 1000.0

        t0 = time.perf_counter()
        draw_annotations(frame, current, label_list)
        overhead_ms += (time.perf_counter() - t0) * 1000.0
        frames += 1
    total_ms = (time.perf_counter() - start) * 1000.0
    if frames == 0:
        raise ValidationError("pipeline_bench needs at least one frame")
    return PipelineBenchReport(
        frames, stream.width, stream.height, model_calls, model_ms, overhead_ms, total_ms
    )
