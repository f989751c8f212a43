"""Annotation data model, COCO-style serialization, and box geometry.

Boxes are stored corner-form (x_min, y_min, x_max, y_max) in continuous
pixel coordinates. The COCO ``[x, y, width, height]`` convention is used
only on disk and converted at the serialization boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class CorpusFormatError(ValueError):
    """Raised when an annotation document violates the on-disk schema."""


class LabelSpaceRegistryError(KeyError):
    """Raised when an annotation references an unregistered label space."""


def round9(x: float) -> float:
    """Quantize to 9 significant digits, the canonical on-disk precision.

    Values produced by generators/models are quantized at creation so that
    a save/load round trip is value-identical.
    """
    if x == 0.0:
        return 0.0
    return float(format(float(x), ".9g"))


def _fmt9(x: float) -> str:
    if x == 0.0:
        return "0"
    return format(float(x), ".9g")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with x_min < x_max, y_min < y_max, all finite."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(v == v and abs(v) != float("inf") for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def clipped(self, width: float, height: float) -> "Box":
        """Clip to [0, width] x [0, height]; raises if that degenerates it."""
        return Box(
            max(0.0, min(self.x_min, width)),
            max(0.0, min(self.y_min, height)),
            max(0.0, min(self.x_max, width)),
            max(0.0, min(self.y_max, height)),
        )

    def quantized(self) -> "Box":
        return Box(round9(self.x_min), round9(self.y_min), round9(self.x_max), round9(self.y_max))

    def union_with(self, other: "Box") -> "Box":
        """Tight axis-aligned union of two boxes."""
        return Box(
            min(self.x_min, other.x_min),
            min(self.y_min, other.y_min),
            max(self.x_max, other.x_max),
            max(self.y_max, other.y_max),
        )


GT = "gt"
PSEUDO = "pseudo"


@dataclass(frozen=True)
class Origin:
    """Provenance of a detection: ground truth or a pseudo-label source."""

    kind: str
    detector: str | None = None

    def __post_init__(self):
        if self.kind not in (GT, PSEUDO):
            raise ValueError(f"unknown origin kind {self.kind!r}")
        if self.kind == GT and self.detector is not None:
            raise ValueError("ground-truth origin carries no detector id")

    @classmethod
    def ground_truth(cls) -> "Origin":
        return cls(GT)

    @classmethod
    def pseudo(cls, detector: str) -> "Origin":
        return cls(PSEUDO, detector)

    @property
    def is_gt(self) -> bool:
        return self.kind == GT


@dataclass(frozen=True)
class Detection:
    """A box with a class reference and confidence inside one label space."""

    box: Box
    class_id: int
    score: float
    origin: Origin

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.origin.is_gt and self.score != 1.0:
            raise ValueError("ground-truth detections must have score 1.0")
        if self.class_id < 0:
            raise ValueError(f"negative class_id {self.class_id}")


@dataclass
class ImageRecord:
    """One image's annotations, grouped per label-space key."""

    image_id: str
    dataset_id: str
    size: tuple[int, int]  # (width, height) in pixels
    annotations: dict[str, list[Detection]] = field(default_factory=dict)

    def with_annotations(self, space_id: str, dets: list[Detection]) -> "ImageRecord":
        new = dict(self.annotations)
        new[space_id] = list(dets)
        return ImageRecord(self.image_id, self.dataset_id, self.size, new)


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy class-wise non-maximum suppression.

    Candidates are visited in descending score order; ties broken by lower
    class_id, then lower x_min, so the kept set is deterministic. A box is
    suppressed when it overlaps an already-kept box of the same class with
    IoU strictly above the threshold.
    """
    order = sorted(
        range(len(dets)),
        key=lambda i: (-dets[i].score, dets[i].class_id, dets[i].box.x_min),
    )
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def filter_by_score(dets: Sequence[Detection], tau: float) -> list[Detection]:
    """Keep detections with score >= tau, preserving input order."""
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"tau {tau} outside [0, 1]")
    return [d for d in dets if d.score >= tau]


# --- COCO-style corpus IO ---------------------------------------------------
#
# On-disk document: {"images": [...], "annotations": [...], "categories": [...]}
# with extension fields `label_space` and `origin` on each annotation, and a
# `label_spaces` block describing every registered space in full so the file
# is self-contained. Boxes are serialized [x, y, w, h].


def _canonical_json(obj) -> str:
    """Serialize with sorted keys and 9-significant-digit floats."""

    def enc(o, out: list[str]):
        if isinstance(o, dict):
            out.append("{")
            for i, k in enumerate(sorted(o.keys())):
                if i:
                    out.append(", ")
                out.append(json.dumps(k))
                out.append(": ")
                enc(o[k], out)
            out.append("}")
        elif isinstance(o, (list, tuple)):
            out.append("[")
            for i, v in enumerate(o):
                if i:
                    out.append(", ")
                enc(v, out)
            out.append("]")
        elif isinstance(o, bool) or o is None:
            out.append(json.dumps(o))
        elif isinstance(o, float):
            out.append(_fmt9(o))
        elif isinstance(o, int):
            out.append(str(o))
        elif isinstance(o, str):
            out.append(json.dumps(o))
        else:
            raise TypeError(f"unserializable value {o!r}")

    parts: list[str] = []
    enc(obj, parts)
    return "".join(parts)


def write_canonical_json(obj, path: str | Path) -> None:
    Path(path).write_text(_canonical_json(obj) + "\n", encoding="utf-8")


def save_corpus(records: Iterable[ImageRecord], spaces: Mapping[str, Sequence[str]], path: str | Path) -> None:
    """Write records as a canonical COCO-style document.

    `spaces` maps space_id -> ordered class names for every label space that
    may appear in the records. Keys and floats are emitted canonically for
    bit-stable golden files.
    """
    spaces = {k: list(v) for k, v in spaces.items()}
    cat_ids: dict[tuple[str, int], int] = {}
    categories = []
    next_id = 1
    for space_id in sorted(spaces):
        for local_id, name in enumerate(spaces[space_id]):
            cat_ids[(space_id, local_id)] = next_id
            categories.append(
                {"id": next_id, "name": name, "label_space": space_id, "local_id": local_id}
            )
            next_id += 1

    images = []
    annotations = []
    ann_id = 1
    for rec in records:
        images.append(
            {
                "id": rec.image_id,
                "dataset_id": rec.dataset_id,
                "width": int(rec.size[0]),
                "height": int(rec.size[1]),
            }
        )
        for space_id in sorted(rec.annotations):
            if space_id not in spaces:
                raise LabelSpaceRegistryError(
                    f"image {rec.image_id!r} references unregistered label space {space_id!r}"
                )
            for det in rec.annotations[space_id]:
                if det.class_id >= len(spaces[space_id]):
                    raise LabelSpaceRegistryError(
                        f"image {rec.image_id!r}: class_id {det.class_id} outside "
                        f"label space {space_id!r} of size {len(spaces[space_id])}"
                    )
                origin = {"kind": det.origin.kind}
                if det.origin.detector is not None:
                    origin["detector"] = det.origin.detector
                annotations.append(
                    {
                        "id": ann_id,
                        "image_id": rec.image_id,
                        "category_id": cat_ids[(space_id, det.class_id)],
                        "bbox": [
                            det.box.x_min,
                            det.box.y_min,
                            det.box.width,
                            det.box.height,
                        ],
                        "score": det.score,
                        "label_space": space_id,
                        "origin": origin,
                    }
                )
                ann_id += 1

    doc = {"images": images, "annotations": annotations, "categories": categories}
    write_canonical_json(doc, path)


def _require(mapping: Mapping, key: str, where: str):
    if key not in mapping:
        raise CorpusFormatError(f"{where}: missing field {key!r}")
    return mapping[key]


def load_corpus(
    path: str | Path, spaces: Mapping[str, Sequence[str]] | None = None
) -> tuple[list[ImageRecord], dict[str, list[str]]]:
    """Load a corpus document; returns (records, label spaces found in file).

    If `spaces` is given, every space in the file must match it exactly.
    Malformed documents raise CorpusFormatError naming the offending record.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"{path}: not valid JSON ({e})") from e

    file_spaces: dict[str, list[str]] = {}
    cat_lookup: dict[int, tuple[str, int]] = {}
    for i, cat in enumerate(_require(doc, "categories", str(path))):
        space_id = _require(cat, "label_space", f"category index {i}")
        local_id = _require(cat, "local_id", f"category index {i}")
        name = _require(cat, "name", f"category index {i}")
        file_spaces.setdefault(space_id, [])
        names = file_spaces[space_id]
        if local_id != len(names):
            raise CorpusFormatError(
                f"category index {i}: local_id {local_id} out of order in space {space_id!r}"
            )
        names.append(name)
        cat_lookup[_require(cat, "id", f"category index {i}")] = (space_id, local_id)

    if spaces is not None:
        for space_id, names in file_spaces.items():
            if space_id not in spaces:
                raise LabelSpaceRegistryError(f"file declares unregistered label space {space_id!r}")
            if list(spaces[space_id]) != names:
                raise LabelSpaceRegistryError(
                    f"label space {space_id!r} in file disagrees with the registry"
                )

    records: dict[str, ImageRecord] = {}
    for i, img in enumerate(_require(doc, "images", str(path))):
        image_id = _require(img, "id", f"image index {i}")
        rec = ImageRecord(
            image_id=image_id,
            dataset_id=_require(img, "dataset_id", f"image index {i}"),
            size=(_require(img, "width", f"image index {i}"), _require(img, "height", f"image index {i}")),
        )
        if image_id in records:
            raise CorpusFormatError(f"duplicate image id {image_id!r}")
        records[image_id] = rec

    for i, ann in enumerate(_require(doc, "annotations", str(path))):
        image_id = _require(ann, "image_id", f"annotation index {i}")
        if image_id not in records:
            raise CorpusFormatError(f"annotation index {i}: unknown image_id {image_id!r}")
        where = f"annotation index {i} (image {image_id!r})"
        bbox = _require(ann, "bbox", where)
        if not (isinstance(bbox, list) and len(bbox) == 4):
            raise CorpusFormatError(f"{where}: bbox must be [x, y, w, h]")
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            raise CorpusFormatError(f"{where}: zero-area or inverted box {bbox}")
        cat_id = _require(ann, "category_id", where)
        if cat_id not in cat_lookup:
            raise CorpusFormatError(f"{where}: unknown category_id {cat_id}")
        space_id, local_id = cat_lookup[cat_id]
        if ann.get("label_space", space_id) != space_id:
            raise CorpusFormatError(f"{where}: label_space disagrees with category")
        origin_doc = _require(ann, "origin", where)
        kind = _require(origin_doc, "kind", where)
        try:
            origin = Origin(kind, origin_doc.get("detector"))
            det = Detection(
                box=Box(x, y, x + w, y + h),
                class_id=local_id,
                score=float(_require(ann, "score", where)),
                origin=origin,
            )
        except ValueError as e:
            raise CorpusFormatError(f"{where}: {e}") from e
        rec = records[image_id]
        width, height = rec.size
        b = det.box
        if b.x_min < 0 or b.y_min < 0 or b.x_max > width or b.y_max > height:
            raise CorpusFormatError(f"{where}: box extends outside the {width}x{height} image")
        rec.annotations.setdefault(space_id, []).append(det)

    return list(records.values()), file_spaces


def requantize(det: Detection) -> Detection:
    """Return the detection with box and score at canonical precision."""
    return replace(det, box=det.box.quantized(), score=round9(det.score))
