"""Weighted composite detection loss with target assignment and gradients.

The total loss is  alpha * L_cls + beta * L_obj + (3 - alpha - beta) * L_bbox
with cross-entropy over class logits on positive slots, binary cross-entropy
on objectness over all slots, and mean squared error on the four box offset
parameters on positive slots. Each term is mean-reduced over its own support
so the weights stay scale-comparable; an empty support contributes 0.

Gradients are closed-form (softmax/sigmoid calculus); central finite
differences are provided separately as an independent check, never as the
implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InvalidAnnotationError
from .geometry import BBox
from .yolo_head import AnchorSet, GridTensor, encode_box

__all__ = [
    "LossWeights",
    "LossComponents",
    "TargetAssignment",
    "assign_targets",
    "loss_components",
    "weighted_loss",
    "weighted_loss_grad",
    "targets_to_grid",
    "finite_difference_grad",
]


@dataclass(frozen=True)
class LossWeights:
    """Class weight alpha and objectness weight beta; bbox gets 3 - alpha - beta."""

    alpha: float = 1.25
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta > 3:
            raise ConfigurationError(
                f"need alpha >= 0, beta >= 0, alpha + beta <= 3; got "
                f"alpha={self.alpha}, beta={self.beta}"
            )

    @property
    def bbox(self) -> float:
        return 3.0 - self.alpha - self.beta


@dataclass(frozen=True)
class LossComponents:
    l_cls: float
    l_obj: float
    l_bbox: float


@dataclass(frozen=True)
class TargetAssignment:
    """Per-slot training targets for an (S, S, B) grid.

    ``positive`` marks slots owning a ground truth; ``offsets`` holds their
    (tx, ty, tw, th) targets and ``class_ids`` their labels (-1 on negatives).
    """

    offsets: np.ndarray = field(repr=False)  # (S, S, B, 4)
    class_ids: np.ndarray = field(repr=False)  # (S, S, B) int, -1 = negative
    positive: np.ndarray = field(repr=False)  # (S, S, B) bool
    num_classes: int
    collisions: int = 0

    @property
    def grid_size(self) -> int:
        return self.positive.shape[0]

    @property
    def boxes_per_cell(self) -> int:
        return self.positive.shape[2]

    def num_positive(self) -> int:
        return int(self.positive.sum())


def _anchor_iou(w: float, h: float, anchor: tuple[float, float]) -> float:
    # Co-centered IoU between a truth size and an anchor prior.
    inter = min(w, anchor[0]) * min(h, anchor[1])
    union = w * h + anchor[0] * anchor[1] - inter
    return inter / union if union > 0 else 0.0


def assign_targets(
    truth: list[tuple[BBox, int]],
    grid_size: int,
    anchors: AnchorSet,
    num_classes: int = 3,
) -> TargetAssignment:
    """Assign each truth to the cell holding its center and its best anchor.

    Slot collisions keep the larger-area truth and bump the collision count.
    """
    if grid_size < 1:
        raise ConfigurationError(f"grid size must be >= 1, got {grid_size}")
    b = len(anchors)
    offsets = np.zeros((grid_size, grid_size, b, 4))
    class_ids = np.full((grid_size, grid_size, b), -1, dtype=np.int64)
    positive = np.zeros((grid_size, grid_size, b), dtype=bool)
    areas = np.zeros((grid_size, grid_size, b))
    collisions = 0
    for box, class_id in truth:
        if box.width <= 0 or box.height <= 0:
            raise InvalidAnnotationError(f"truth box has zero width or height: {box}")
        if not (0 <= class_id < num_classes):
            raise InvalidAnnotationError(f"class id {class_id} outside 0..{num_classes - 1}")
        cx, cy = box.center()
        col = min(int(cx * grid_size), grid_size - 1)
        row = min(int(cy * grid_size), grid_size - 1)
        ious = [_anchor_iou(box.width, box.height, anchors[i]) for i in range(b)]
        slot = int(np.argmax(ious))
        if positive[row, col, slot]:
            collisions += 1
            if box.area() <= areas[row, col, slot]:
                continue
        offsets[row, col, slot] = encode_box(box, (row, col), grid_size, anchors[slot])
        class_ids[row, col, slot] = class_id
        positive[row, col, slot] = True
        areas[row, col, slot] = box.area()
    return TargetAssignment(offsets, class_ids, positive, num_classes, collisions)


def _check_shapes(pred: GridTensor, targets: TargetAssignment) -> None:
    want = (targets.grid_size, targets.grid_size, targets.boxes_per_cell, 5 + targets.num_classes)
    if pred.values.shape != want:
        raise ConfigurationError(
            f"prediction shape {pred.values.shape} does not match targets {want}"
        )


def _bce_with_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # Stable form: max(z, 0) - z*y + log(1 + exp(-|z|)).
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def loss_components(pred: GridTensor, targets: TargetAssignment) -> LossComponents:
    """Mean-reduced class, objectness, and box losses for one grid."""
    _check_shapes(pred, targets)
    v = pred.values
    pos = targets.positive
    obj_target = pos.astype(np.float64)
    l_obj = float(np.mean(_bce_with_logits(v[..., 4], obj_target)))

    if targets.num_positive() == 0:
        return LossComponents(0.0, l_obj, 0.0)

    logits = v[..., 5:][pos]  # (P, C)
    labels = targets.class_ids[pos]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    l_cls = float(-log_probs[np.arange(len(labels)), labels].mean())

    diff = v[..., :4][pos] - targets.offsets[pos]
    l_bbox = float(np.mean(diff**2))
    return LossComponents(l_cls, l_obj, l_bbox)


def weighted_loss(components: LossComponents, weights: LossWeights) -> float:
    """Combine the three terms with weights (alpha, beta, 3 - alpha - beta)."""
    return (
        weights.alpha * components.l_cls
        + weights.beta * components.l_obj
        + weights.bbox * components.l_bbox
    )


def weighted_loss_grad(
    pred: GridTensor, targets: TargetAssignment, weights: LossWeights
) -> tuple[float, np.ndarray]:
    """Total loss and its analytic gradient with respect to every grid entry."""
    _check_shapes(pred, targets)
    total = weighted_loss(loss_components(pred, targets), weights)
    v = pred.values
    pos = targets.positive
    n_all = pos.size
    n_pos = targets.num_positive()
    grad = np.zeros_like(v)

    sig = 1.0 / (1.0 + np.exp(-v[..., 4]))
    grad[..., 4] = weights.beta * (sig - pos.astype(np.float64)) / n_all

    if n_pos:
        logits = v[..., 5:][pos]
        labels = targets.class_ids[pos]
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(len(labels)), labels] -= 1.0
        cls_grad = np.zeros(v[..., 5:].shape)
        cls_grad[pos] = weights.alpha * probs / n_pos
        grad[..., 5:] = cls_grad

        diff = v[..., :4][pos] - targets.offsets[pos]
        box_grad = np.zeros(v[..., :4].shape)
        box_grad[pos] = weights.bbox * 2.0 * diff / (n_pos * 4)
        grad[..., :4] = box_grad
    return total, grad


def targets_to_grid(targets: TargetAssignment, saturation: float = 20.0) -> GridTensor:
    """Build a grid that realizes the targets with saturated logits.

    The encode dual of decoding: positive slots carry their exact offsets,
    objectness logits sit at +/- saturation, and the target class logit
    leads by the saturation margin.
    """
    s, b, c = targets.grid_size, targets.boxes_per_cell, targets.num_classes
    values = np.zeros((s, s, b, 5 + c))
    values[..., 4] = -saturation
    pos = targets.positive
    values[..., :4][pos] = targets.offsets[pos]
    values[..., 4][pos] = saturation
    labels = targets.class_ids[pos]
    cls = np.zeros((int(pos.sum()), c))
    cls[np.arange(len(labels)), labels] = saturation
    block = values[..., 5:]
    block[pos] = cls
    return GridTensor(values)


def finite_difference_grad(
    pred: GridTensor,
    targets: TargetAssignment,
    weights: LossWeights,
    step: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient; the verification oracle for the analytic one."""
    base = pred.values
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        bumped = base.copy()
        bumped[idx] = base[idx] + step
        hi = weighted_loss(loss_components(GridTensor(bumped), targets), weights)
        bumped[idx] = base[idx] - step
        lo = weighted_loss(loss_components(GridTensor(bumped), targets), weights)
        grad[idx] = (hi - lo) / (2.0 * step)
    return grad


def gradient_check(
    grids: int = 100,
    grid_size: int = 2,
    boxes_per_cell: int = 1,
    num_classes: int = 3,
    seed: int = 0,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and finite-difference gradients."""
    rng = np.random.default_rng(seed)
    anchors = AnchorSet(tuple((0.2 + 0.2 * i, 0.3) for i in range(boxes_per_cell)))
    weights = LossWeights()
    worst = 0.0
    for _ in range(grids):
        truth = []
        for _ in range(rng.integers(0, 3)):
            cx, cy = rng.uniform(0.1, 0.9, size=2)
            w, h = rng.uniform(0.05, 0.2, size=2)
            box = BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            truth.append((box, int(rng.integers(0, num_classes))))
        targets = assign_targets(truth, grid_size, anchors, num_classes)
        pred = GridTensor(rng.normal(size=(grid_size, grid_size, boxes_per_cell, 5 + num_classes)))
        _, analytic = weighted_loss_grad(pred, targets, weights)
        numeric = finite_difference_grad(pred, targets, weights, step)
        scale = np.maximum(np.abs(numeric), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / scale)))
    return worst
