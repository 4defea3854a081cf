"""Decode raw S x S grid tensors from a detection backbone into Detection lists.

Per-cell channels are (tx, ty, tw, th, objectness logit, class logits...).
The decode transform is sigmoid offsets within the owning cell plus
exponential anchor scaling; confidence is objectness times the best class
probability under a softmax (classes are mutually exclusive here).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DecodeError, FormatError
from .geometry import BBox, Detection, clip_to_unit, nms

__all__ = [
    "GridTensor",
    "AnchorSet",
    "DEFAULT_GRID_SIZE",
    "decode_cell",
    "decode_grid",
    "read_grid_file",
    "write_grid_file",
]

# 512 px inputs with a stride-32 backbone; overridable everywhere it matters.
DEFAULT_GRID_SIZE = 16

GRID_MAGIC = b"MGRD"


@dataclass(frozen=True)
class AnchorSet:
    """Per-box-slot (width, height) priors, normalized to image dimensions."""

    sizes: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.sizes:
            raise ConfigurationError("anchor set must not be empty")
        for w, h in self.sizes:
            if not (w > 0 and h > 0):
                raise ConfigurationError(f"anchor sizes must be positive, got ({w}, {h})")

    def __len__(self) -> int:
        return len(self.sizes)

    def __getitem__(self, i: int) -> tuple[float, float]:
        return self.sizes[i]


DEFAULT_ANCHORS = AnchorSet(((0.1, 0.15), (0.3, 0.4)))


@dataclass(frozen=True)
class GridTensor:
    """Raw backbone output of shape (S, S, B, 5 + C), float array."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4 or v.shape[0] != v.shape[1] or v.shape[3] < 6:
            raise ConfigurationError(
                f"grid tensor must have shape (S, S, B, 5 + C) with C >= 1, got {v.shape}"
            )
        object.__setattr__(self, "values", v)

    @property
    def grid_size(self) -> int:
        return self.values.shape[0]

    @property
    def boxes_per_cell(self) -> int:
        return self.values.shape[2]

    @property
    def num_classes(self) -> int:
        return self.values.shape[3] - 5


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def decode_cell(
    raw: np.ndarray,
    cell: tuple[int, int],
    grid_size: int,
    anchor: tuple[float, float],
) -> Detection:
    """Decode one per-box channel slice into a clipped Detection.

    center = (cell + sigmoid(txy)) / S, size = anchor * exp(twh);
    confidence = sigmoid(objectness) * max softmax(class logits).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise DecodeError(f"non-finite values in cell {cell}")
    row, col = cell
    tx, ty, tw, th, obj = raw[:5]
    class_logits = raw[5:]
    cx = (col + _sigmoid(tx)) / grid_size
    cy = (row + _sigmoid(ty)) / grid_size
    w = anchor[0] * np.exp(tw)
    h = anchor[1] * np.exp(th)
    class_probs = _softmax(class_logits)
    class_id = int(np.argmax(class_probs))
    confidence = _sigmoid(obj) * float(class_probs[class_id])
    box = clip_to_unit(BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    return Detection(box, confidence, class_id)


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def decode_grid(
    grid: GridTensor,
    anchors: AnchorSet = DEFAULT_ANCHORS,
    conf_threshold: float = 0.25,
    iou_threshold: float = 0.45,
    class_aware: bool = True,
) -> list[Detection]:
    """Decode every cell/box slot, drop low-confidence boxes, then run NMS.

    Vectorized over the whole grid; decode_cell is the per-slot reference
    this path is tested against.
    """
    if len(anchors) != grid.boxes_per_cell:
        raise ConfigurationError(
            f"{len(anchors)} anchors for {grid.boxes_per_cell} boxes per cell"
        )
    if not (0.0 <= conf_threshold <= 1.0 and 0.0 <= iou_threshold <= 1.0):
        raise ConfigurationError("thresholds must lie in [0, 1]")
    v = grid.values
    if not np.all(np.isfinite(v)):
        row, col = np.argwhere(~np.isfinite(v).all(axis=(2, 3)))[0]
        raise DecodeError(f"non-finite values in cell ({row}, {col})")
    s = grid.grid_size
    cols = np.arange(s)[None, :, None]
    rows = np.arange(s)[:, None, None]
    cx = (cols + _sigmoid_array(v[..., 0])) / s
    cy = (rows + _sigmoid_array(v[..., 1])) / s
    anchor_wh = np.asarray(anchors.sizes)  # (B, 2)
    w = anchor_wh[:, 0] * np.exp(v[..., 2])
    h = anchor_wh[:, 1] * np.exp(v[..., 3])
    logits = v[..., 5:]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)
    class_ids = probs.argmax(axis=-1)
    confidence = _sigmoid_array(v[..., 4]) * np.max(probs, axis=-1)
    keep = np.argwhere(confidence >= conf_threshold)
    candidates = []
    for row, col, b in keep:
        box = clip_to_unit(
            BBox(
                cx[row, col, b] - w[row, col, b] / 2,
                cy[row, col, b] - h[row, col, b] / 2,
                cx[row, col, b] + w[row, col, b] / 2,
                cy[row, col, b] + h[row, col, b] / 2,
            )
        )
        candidates.append(
            Detection(box, float(confidence[row, col, b]), int(class_ids[row, col, b]))
        )
    return nms(candidates, iou_threshold, class_aware=class_aware)


def encode_box(
    box: BBox, cell: tuple[int, int], grid_size: int, anchor: tuple[float, float]
) -> tuple[float, float, float, float]:
    """Inverse of the decode transform; offsets clamped away from 0 and 1.

    The box center must lie inside ``cell`` and the box must have positive
    width and height.
    """
    eps = 1e-9
    row, col = cell
    cx, cy = box.center()
    fx = min(max(cx * grid_size - col, eps), 1.0 - eps)
    fy = min(max(cy * grid_size - row, eps), 1.0 - eps)
    tx = float(np.log(fx / (1.0 - fx)))
    ty = float(np.log(fy / (1.0 - fy)))
    tw = float(np.log(box.width / anchor[0]))
    th = float(np.log(box.height / anchor[1]))
    return tx, ty, tw, th


def write_grid_file(path, grid: GridTensor) -> None:
    """Write the raw tensor file: magic, u32 S/B/C, then f32 values row-major."""
    v = grid.values.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<III", grid.grid_size, grid.boxes_per_cell, grid.num_classes))
        fh.write(v.tobytes(order="C"))


def read_grid_file(path) -> GridTensor:
    """Read a tensor file written by :func:`write_grid_file`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != GRID_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0, expected {GRID_MAGIC!r}")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header at byte {len(data)}")
    s, b, c = struct.unpack("<III", data[4:16])
    count = s * s * b * (5 + c)
    expected = 16 + 4 * count
    if len(data) < expected:
        raise FormatError(f"{path}: truncated payload at byte {len(data)}, expected {expected}")
    values = np.frombuffer(data[16:expected], dtype="<f4").astype(np.float64)
    return GridTensor(values.reshape(s, s, b, 5 + c))
