"""PASCAL VOC annotation tooling, slice-dataset construction, undersampling,
and the seeded 4:1 train/validation split.

Pixel boxes are 1-based inclusive corners, matching VOC files: a crop covers
image rows ymin-1 .. ymax-1 and columns xmin-1 .. xmax-1.
"""

from __future__ import annotations

import logging
import random
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, TypeVar

import numpy as np

from .errors import FormatError, InvalidAnnotationError

__all__ = [
    "LabelCatalog",
    "MASK_CATALOG",
    "VocObject",
    "VocAnnotation",
    "SliceSample",
    "parse_voc",
    "serialize_voc",
    "build_slices",
    "undersample",
    "split_4to1",
    "write_slice_dataset",
    "read_slice_dataset",
    "read_ppm",
    "write_ppm",
    "load_image",
    "save_image",
]

log = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True)
class LabelCatalog:
    """Ordered class names with human-readable display names."""

    names: tuple[str, ...]
    display_names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise InvalidAnnotationError(f"duplicate class names in {self.names}")
        if len(self.display_names) != len(self.names):
            raise InvalidAnnotationError("display names must match names one to one")

    def __len__(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise InvalidAnnotationError(
                f"unknown class name {name!r}, expected one of {list(self.names)}"
            ) from None


MASK_CATALOG = LabelCatalog(
    names=("with_mask", "without_mask", "mask_weared_incorrect"),
    display_names=("With mask", "Without mask", "Mask worn incorrectly"),
)


@dataclass(frozen=True)
class VocObject:
    name: str
    xmin: int
    ymin: int
    xmax: int
    ymax: int


@dataclass(frozen=True)
class VocAnnotation:
    filename: str
    width: int
    height: int
    objects: tuple[VocObject, ...]

    def validate(self, catalog: LabelCatalog = MASK_CATALOG) -> "VocAnnotation":
        if self.width < 1 or self.height < 1:
            raise InvalidAnnotationError(
                f"{self.filename}: image size {self.width}x{self.height} invalid"
            )
        for obj in self.objects:
            if not (1 <= obj.xmin < obj.xmax <= self.width):
                raise InvalidAnnotationError(
                    f"{self.filename}: invalid box x range "
                    f"[{obj.xmin}, {obj.xmax}] for width {self.width}"
                )
            if not (1 <= obj.ymin < obj.ymax <= self.height):
                raise InvalidAnnotationError(
                    f"{self.filename}: invalid box y range "
                    f"[{obj.ymin}, {obj.ymax}] for height {self.height}"
                )
            catalog.id_of(obj.name)
        return self


@dataclass(frozen=True, eq=False)
class SliceSample:
    """One annotated object cropped out of its source image."""

    image_id: str
    crop_box: tuple[int, int, int, int]  # xmin, ymin, xmax, ymax, 1-based inclusive
    class_id: int
    pixels: np.ndarray = field(repr=False)


def _int_text(node: ET.Element, tag: str, context: str) -> int:
    child = node.find(tag)
    if child is None or child.text is None:
        raise InvalidAnnotationError(f"{context}: missing <{tag}>")
    try:
        return int(float(child.text.strip()))
    except ValueError:
        raise InvalidAnnotationError(f"{context}: bad <{tag}> value {child.text!r}") from None


def parse_voc(xml_text: str, catalog: LabelCatalog = MASK_CATALOG) -> VocAnnotation:
    """Parse one VOC annotation document."""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise FormatError(f"malformed annotation XML at line {line}, column {col}") from exc
    filename_node = root.find("filename")
    filename = (filename_node.text or "").strip() if filename_node is not None else ""
    size = root.find("size")
    if size is None:
        raise InvalidAnnotationError(f"{filename or '<annotation>'}: missing <size>")
    width = _int_text(size, "width", filename)
    height = _int_text(size, "height", filename)
    objects = []
    for obj in root.iter("object"):
        name_node = obj.find("name")
        name = (name_node.text or "").strip() if name_node is not None else ""
        box = obj.find("bndbox")
        if box is None:
            raise InvalidAnnotationError(f"{filename}: object {name!r} missing <bndbox>")
        objects.append(
            VocObject(
                name,
                _int_text(box, "xmin", filename),
                _int_text(box, "ymin", filename),
                _int_text(box, "xmax", filename),
                _int_text(box, "ymax", filename),
            )
        )
    return VocAnnotation(filename, width, height, tuple(objects)).validate(catalog)


def serialize_voc(annotation: VocAnnotation, catalog: LabelCatalog = MASK_CATALOG) -> str:
    """Render an annotation back to VOC XML; inverse of parse_voc."""
    annotation.validate(catalog)
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = annotation.filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(annotation.width)
    ET.SubElement(size, "height").text = str(annotation.height)
    ET.SubElement(size, "depth").text = "3"
    for obj in annotation.objects:
        node = ET.SubElement(root, "object")
        ET.SubElement(node, "name").text = obj.name
        box = ET.SubElement(node, "bndbox")
        ET.SubElement(box, "xmin").text = str(obj.xmin)
        ET.SubElement(box, "ymin").text = str(obj.ymin)
        ET.SubElement(box, "xmax").text = str(obj.xmax)
        ET.SubElement(box, "ymax").text = str(obj.ymax)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def build_slices(
    annotations: Sequence[VocAnnotation],
    images: Mapping[str, np.ndarray] | str | Path,
    catalog: LabelCatalog = MASK_CATALOG,
) -> tuple[list[SliceSample], list[int]]:
    """Cut one SliceSample per annotated object; also return the class histogram.

    ``images`` maps filenames to (H, W, 3) arrays, or names a directory the
    filenames are loaded from.
    """
    slices: list[SliceSample] = []
    histogram = [0] * len(catalog)
    for ann in annotations:
        ann.validate(catalog)
        if isinstance(images, (str, Path)):
            path = Path(images) / ann.filename
            if not path.exists():
                raise FormatError(f"missing image file: {path}")
            img = load_image(path)
        else:
            if ann.filename not in images:
                raise FormatError(f"missing image: {ann.filename}")
            img = np.asarray(images[ann.filename])
        h, w = img.shape[:2]
        for obj in ann.objects:
            if obj.xmax > w or obj.ymax > h:
                raise InvalidAnnotationError(
                    f"{ann.filename}: box {obj} exceeds actual image size {w}x{h}"
                )
            pixels = img[obj.ymin - 1 : obj.ymax, obj.xmin - 1 : obj.xmax].copy()
            class_id = catalog.id_of(obj.name)
            slices.append(
                SliceSample(ann.filename, (obj.xmin, obj.ymin, obj.xmax, obj.ymax), class_id, pixels)
            )
            histogram[class_id] += 1
    return slices, histogram


def undersample(samples: Sequence[SliceSample], cap: int, seed: int = 0) -> list[SliceSample]:
    """Cap every class at ``cap`` samples, chosen uniformly without replacement."""
    if cap < 1:
        raise InvalidAnnotationError(f"cap must be >= 1, got {cap}")
    rng = random.Random(seed)
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.class_id, []).append(i)
    keep: set[int] = set()
    for class_id in sorted(by_class):
        indices = by_class[class_id]
        if len(indices) <= cap:
            keep.update(indices)
        else:
            keep.update(rng.sample(indices, cap))
    return [s for i, s in enumerate(samples) if i in keep]


def split_4to1(items: Sequence[T], seed: int = 0) -> tuple[list[T], list[T]]:
    """Seeded shuffle into (train, validation) with validation = round(n/5)."""
    n = len(items)
    n_val = (2 * n + 5) // 10  # round(n / 5); n/5 never lands on .5 exactly
    if n_val == 0:
        log.warning("split of %d items leaves the validation set empty", n)
    order = list(range(n))
    random.Random(seed).shuffle(order)
    val_idx = set(order[:n_val])
    train = [items[i] for i in order[n_val:]]
    val = [items[i] for i in order[:n_val]]
    return train, val


# --- slice dataset on disk: manifest + one crop file per sample ---


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM writer expects (H, W, 3) uint8, got {img.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (P6) file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise FormatError(f"{path}: bad PPM header field at byte {start}") from None
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported PPM maxval {maxval}")
    need = w * h * 3
    raw = data[pos : pos + need]
    if len(raw) < need:
        raise FormatError(f"{path}: truncated PPM payload at byte {len(data)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def save_image(path, image: np.ndarray) -> None:
    """Write PPM natively; anything else goes through Pillow."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, image)
        return
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def write_slice_dataset(out_dir, slices: Sequence[SliceSample], image_format: str = "ppm") -> Path:
    """Write crops plus a manifest: image id, class id, box, crop path per line."""
    if image_format not in ("ppm", "png"):
        raise FormatError(f"unsupported crop format {image_format!r}")
    out = Path(out_dir)
    (out / "crops").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(slices):
        rel = f"crops/{i:06d}.{image_format}"
        save_image(out / rel, s.pixels)
        xmin, ymin, xmax, ymax = s.crop_box
        lines.append(f"{s.image_id}\t{s.class_id}\t{xmin}\t{ymin}\t{xmax}\t{ymax}\t{rel}")
    manifest = out / "slices.tsv"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest


def read_slice_dataset(in_dir) -> list[SliceSample]:
    root = Path(in_dir)
    manifest = root / "slices.tsv"
    if not manifest.exists():
        raise FormatError(f"missing slice manifest: {manifest}")
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise FormatError(f"{manifest}:{lineno}: expected 7 tab-separated fields")
        image_id, class_id, xmin, ymin, xmax, ymax, rel = parts
        samples.append(
            SliceSample(
                image_id,
                (int(xmin), int(ymin), int(xmax), int(ymax)),
                int(class_id),
                load_image(root / rel),
            )
        )
    return samples
