"""Seeded, deterministic image augmentation: affine, color, and blur transforms.

Transform order is fixed (geometry, then color, then blur) and every
parameter draw comes from a counter-based generator keyed by (seed, index),
so results do not depend on traversal order. Neutral parameters take
bit-exact shortcut paths; flip and invert are exact involutions.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field, fields

import numpy as np

from . import train_config
from .errors import ValidationError
from .geometry import BBox, clip_to_unit

__all__ = [
    "AugmentationPlan",
    "ALL_TRANSFORMS",
    "affine",
    "color",
    "gaussian_blur",
    "apply_plan",
    "plan_to_config",
    "plan_from_config",
]

ALL_TRANSFORMS = (
    "rotation",
    "translation",
    "scale",
    "flip",
    "hue",
    "brightness",
    "saturation",
    "invert",
    "blur",
)


@dataclass(frozen=True)
class AugmentationPlan:
    """Enabled transforms plus their parameter ranges and draw probabilities."""

    seed: int = 0
    enabled: frozenset = frozenset(ALL_TRANSFORMS)
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    translation: tuple[float, float] = (-0.1, 0.1)
    scale: tuple[float, float] = (0.9, 1.1)
    hue_deg: tuple[float, float] = (-18.0, 18.0)
    brightness: tuple[float, float] = (0.7, 1.5)
    saturation: tuple[float, float] = (0.7, 1.5)
    blur_sigma: tuple[float, float] = (0.0, 2.0)
    flip_p: float = 0.5
    invert_p: float = 0.1

    def __post_init__(self):
        unknown = set(self.enabled) - set(ALL_TRANSFORMS)
        if unknown:
            raise ValidationError(f"unknown transforms: {sorted(unknown)}")
        for name in ("rotation_deg", "translation", "scale", "hue_deg",
                     "brightness", "saturation", "blur_sigma"):
            lo, hi = getattr(self, name)
            if not (lo <= hi):
                raise ValidationError(f"{name} range ({lo}, {hi}) is empty")
        for name in ("flip_p", "invert_p"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValidationError(f"{name} must lie in [0, 1], got {p}")


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValidationError(f"expected (H, W, 3) uint8 image, got {img.shape} {img.dtype}")
    return img


def _bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample float pixel coordinates; points outside the frame read as black."""
    h, w = img.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    out = np.zeros(xs.shape + (3,), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            weight = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)].astype(np.float64)
            out += weight * vals * inside[..., None]
    return out


def affine(
    img: np.ndarray,
    boxes: list[BBox] | None,
    rotation_deg: float = 0.0,
    translation: tuple[float, float] = (0.0, 0.0),
    scale: float = 1.0,
    flip: bool = False,
) -> tuple[np.ndarray, list[BBox] | None]:
    """Rotate/scale about the image center, translate, optionally mirror.

    Boxes (normalized) become the axis-aligned hull of their transformed
    corners, clipped to the unit square; boxes that leave the frame are
    dropped. Neutral parameters are bit-exact identity; a pure flip is an
    exact mirror.
    """
    img = _check_image(img)
    if scale <= 0:
        raise ValidationError(f"scale must be positive, got {scale}")
    h, w = img.shape[:2]
    tx, ty = translation

    if rotation_deg == 0.0 and scale == 1.0 and tx == 0.0 and ty == 0.0:
        out = img[:, ::-1].copy() if flip else img.copy()
        if boxes is None:
            return out, None
        if flip:
            new_boxes = [BBox(1.0 - b.x2, b.y1, 1.0 - b.x1, b.y2) for b in boxes]
        else:
            new_boxes = list(boxes)
        return out, new_boxes

    theta = math.radians(rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    def forward(px: np.ndarray, py: np.ndarray):
        if flip:
            px = (w - 1) - px
        dx, dy = px - cx, py - cy
        qx = scale * (cos_t * dx - sin_t * dy) + cx + tx * w
        qy = scale * (sin_t * dx + cos_t * dy) + cy + ty * h
        return qx, qy

    # inverse map for resampling: undo translation, rotation/scale, then flip
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ux = xs - cx - tx * w
    uy = ys - cy - ty * h
    sx = (cos_t * ux + sin_t * uy) / scale + cx
    sy = (-sin_t * ux + cos_t * uy) / scale + cy
    if flip:
        sx = (w - 1) - sx
    out = np.rint(np.clip(_bilinear_sample(img, sx, sy), 0.0, 255.0)).astype(np.uint8)

    if boxes is None:
        return out, None
    new_boxes = []
    for b in boxes:
        corners_x = np.array([b.x1, b.x2, b.x1, b.x2]) * w - 0.5
        corners_y = np.array([b.y1, b.y1, b.y2, b.y2]) * h - 0.5
        qx, qy = forward(corners_x, corners_y)
        hull = BBox(
            float((qx.min() + 0.5) / w),
            float((qy.min() + 0.5) / h),
            float((qx.max() + 0.5) / w),
            float((qy.max() + 0.5) / h),
        )
        clipped = clip_to_unit(hull)
        if clipped.area() > 0:
            new_boxes.append(clipped)
    return out, new_boxes


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    span = maxc - minc
    v = maxc
    s = np.where(maxc > 0, span / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(span > 0, span, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    choices = [
        np.stack([v, t, p], axis=-1),
        np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1),
        np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1),
        np.stack([v, p, q], axis=-1),
    ]
    out = np.zeros(hsv.shape, dtype=np.float64)
    for k, choice in enumerate(choices):
        out = np.where((i == k)[..., None], choice, out)
    return out


def color(
    img: np.ndarray,
    hue_deg: float = 0.0,
    brightness: float = 1.0,
    saturation: float = 1.0,
    invert: bool = False,
) -> np.ndarray:
    """Hue rotation and saturation scale in HSV, brightness scale in RGB,
    then optional per-channel intensity negation."""
    img = _check_image(img)
    if brightness <= 0 or saturation <= 0:
        raise ValidationError("brightness and saturation must be positive")
    out = img
    if hue_deg != 0.0 or saturation != 1.0:
        hsv = _rgb_to_hsv(out.astype(np.float64) / 255.0)
        hsv[..., 0] = (hsv[..., 0] + hue_deg / 360.0) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * saturation, 0.0, 1.0)
        out = np.rint(np.clip(_hsv_to_rgb(hsv) * 255.0, 0.0, 255.0)).astype(np.uint8)
    if brightness != 1.0:
        out = np.rint(np.clip(out.astype(np.float64) * brightness, 0.0, 255.0)).astype(np.uint8)
    if invert:
        out = (255 - out.astype(np.int16)).astype(np.uint8)
    if out is img:
        out = img.copy()
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3 sigma), reflect padding."""
    img = _check_image(img)
    if sigma < 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    acc = img.astype(np.float64)
    for axis in (0, 1):
        if acc.shape[axis] == 1:
            continue
        pad = [(0, 0)] * 3
        pad[axis] = (radius, radius)
        padded = np.pad(acc, pad, mode="reflect")
        acc = np.zeros_like(acc)
        for k, weight in enumerate(kernel):
            sl = [slice(None)] * 3
            sl[axis] = slice(k, k + img.shape[axis])
            acc += weight * padded[tuple(sl)]
    return np.rint(np.clip(acc, 0.0, 255.0)).astype(np.uint8)


def _draw_params(plan: AugmentationPlan, index: int) -> dict:
    digest = hashlib.sha256(f"{plan.seed}:{index}".encode("ascii")).digest()
    rng = random.Random(int.from_bytes(digest[:8], "little"))
    on = plan.enabled.__contains__
    return {
        "rotation_deg": rng.uniform(*plan.rotation_deg) if on("rotation") else 0.0,
        "translation": (
            (rng.uniform(*plan.translation), rng.uniform(*plan.translation))
            if on("translation")
            else (0.0, 0.0)
        ),
        "scale": rng.uniform(*plan.scale) if on("scale") else 1.0,
        "flip": rng.random() < plan.flip_p if on("flip") else False,
        "hue_deg": rng.uniform(*plan.hue_deg) if on("hue") else 0.0,
        "brightness": rng.uniform(*plan.brightness) if on("brightness") else 1.0,
        "saturation": rng.uniform(*plan.saturation) if on("saturation") else 1.0,
        "invert": rng.random() < plan.invert_p if on("invert") else False,
        "sigma": rng.uniform(*plan.blur_sigma) if on("blur") else 0.0,
    }


def apply_plan(
    img: np.ndarray,
    plan: AugmentationPlan,
    index: int,
    boxes: list[BBox] | None = None,
) -> tuple[np.ndarray, list[BBox] | None]:
    """Draw parameters for (seed, index) and apply affine, color, then blur."""
    p = _draw_params(plan, index)
    img, boxes = affine(
        img, boxes, p["rotation_deg"], p["translation"], p["scale"], p["flip"]
    )
    img = color(img, p["hue_deg"], p["brightness"], p["saturation"], p["invert"])
    img = gaussian_blur(img, p["sigma"])
    return img, boxes


def plan_to_config(plan: AugmentationPlan) -> str:
    """Serialize a plan as key=value lines (same grammar as training configs)."""
    lines = [
        f"seed={plan.seed}",
        "enabled=" + ",".join(t for t in ALL_TRANSFORMS if t in plan.enabled),
    ]
    for f in fields(plan):
        if f.name in ("seed", "enabled"):
            continue
        value = getattr(plan, f.name)
        if isinstance(value, tuple):
            lines.append(f"{f.name}={value[0]!r},{value[1]!r}")
        else:
            lines.append(f"{f.name}={value!r}")
    return "\n".join(lines) + "\n"


def plan_from_config(text: str) -> AugmentationPlan:
    """Parse the serialization produced by plan_to_config."""
    kwargs: dict = {}
    pairs, _ = train_config.parse_key_values(text)
    tuple_fields = {
        "rotation_deg", "translation", "scale", "hue_deg",
        "brightness", "saturation", "blur_sigma",
    }
    for key, value, lineno in pairs:
        try:
            if key == "seed":
                kwargs["seed"] = int(value)
            elif key == "enabled":
                kwargs["enabled"] = frozenset(v for v in value.split(",") if v)
            elif key in tuple_fields:
                lo, hi = value.split(",")
                kwargs[key] = (float(lo), float(hi))
            elif key in ("flip_p", "invert_p"):
                kwargs[key] = float(value)
            else:
                raise ValidationError(f"line {lineno}: unknown plan key {key!r}")
        except (ValueError, TypeError):
            raise ValidationError(f"line {lineno}: bad value {value!r} for {key!r}") from None
    return AugmentationPlan(**kwargs)
