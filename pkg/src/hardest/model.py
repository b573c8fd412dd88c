"""Core data model and COCO-format ingestion.

Boxes are stored as xyxy with real coordinates. COCO ``[x, y, w, h]`` boxes
are converted only when reading or writing files.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

SCORE_MODES = ("softmax", "one_vs_all")
DISCARD = None  # remap target meaning "drop the class"


class IngestError(ValueError):
    """Raised for malformed annotation, detection or remap inputs."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"negative box extent: {self}")

    @classmethod
    def from_xywh(cls, bbox: Sequence[float]) -> "BoundingBox":
        x, y, w, h = (float(v) for v in bbox)
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min]

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def intersection(self, other: "BoundingBox") -> float:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def clip(self, width: float, height: float) -> "BoundingBox":
        x0 = min(max(self.x_min, 0.0), width)
        y0 = min(max(self.y_min, 0.0), height)
        x1 = min(max(self.x_max, 0.0), width)
        y1 = min(max(self.y_max, 0.0), height)
        return BoundingBox(x0, y0, x1, y1)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float
    class_scores: tuple[float, ...] | None = None
    logits: tuple[float, ...] | None = None
    index: int = 0  # position in the source results file; tie-breaker for ordering

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruthBox:
    box: BoundingBox
    class_id: int
    is_crowd: bool = False
    annotation_id: Any = None


@dataclass(frozen=True)
class ImageRecord:
    image_id: Any
    width: float
    height: float
    detections: tuple[Detection, ...] = ()
    # None means "no annotations available", which differs from an empty tuple.
    ground_truths: tuple[GroundTruthBox, ...] | None = None
    file_name: str | None = None

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image {self.image_id!r} has non-positive size {self.width}x{self.height}")

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def has_ground_truth(self) -> bool:
        return self.ground_truths is not None


def _image_sort_key(image_id):
    return (isinstance(image_id, str), image_id)


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of image records plus the class table."""

    images: tuple[ImageRecord, ...]
    categories: Mapping[int, str] = field(default_factory=dict)
    score_mode: str = "one_vs_all"

    def __post_init__(self):
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}, got {self.score_mode!r}")
        seen = set()
        for rec in self.images:
            if rec.image_id in seen:
                raise IngestError(f"duplicate image id {rec.image_id!r}")
            seen.add(rec.image_id)

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    @property
    def image_ids(self) -> list:
        return [rec.image_id for rec in self.images]

    def get(self, image_id) -> ImageRecord:
        for rec in self.images:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)

    def sorted(self) -> "Dataset":
        ordered = tuple(sorted(self.images, key=lambda r: _image_sort_key(r.image_id)))
        return replace(self, images=ordered)

    def class_ids_by_name(self) -> dict[str, int]:
        return {name: cid for cid, name in self.categories.items()}

    @property
    def has_ground_truth(self) -> bool:
        return bool(self.images) and all(rec.has_ground_truth for rec in self.images)


def order_pool(detections: Iterable[Detection]) -> tuple[Detection, ...]:
    """Sort by descending score, then ascending input index."""
    return tuple(sorted(detections, key=lambda d: (-d.score, d.index)))


def filter_positive(pool: Sequence[Detection], eta: float) -> list[Detection]:
    """Keep detections with score strictly above ``eta``, order preserved."""
    return [d for d in pool if d.score > eta]


# ---------------------------------------------------------------------------
# ingestion


def _read_json(path) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: invalid JSON ({exc})") from exc


def _parse_box(bbox, what: str) -> BoundingBox:
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        raise IngestError(f"{what}: bbox must be [x, y, w, h], got {bbox!r}")
    vals = [float(v) for v in bbox]
    if not all(math.isfinite(v) for v in vals):
        raise IngestError(f"{what}: non-finite bbox {bbox!r}")
    if vals[2] < 0 or vals[3] < 0:
        raise IngestError(f"{what}: negative width/height in bbox {bbox!r}")
    return BoundingBox.from_xywh(vals)


def parse_annotations(data: Mapping[str, Any], score_mode: str = "one_vs_all") -> Dataset:
    """Build a dataset from an in-memory COCO annotation dict.

    When the ``annotations`` key is absent the records carry no ground truth
    (image metadata only); an empty list yields empty ground truth.
    """
    images = data.get("images")
    if images is None:
        raise IngestError("annotation file has no 'images' list")
    categories = {int(c["id"]): str(c["name"]) for c in data.get("categories", [])}

    meta = {}
    for img in images:
        if "id" not in img:
            raise IngestError(f"image entry without id: {img!r}")
        iid = img["id"]
        if iid in meta:
            raise IngestError(f"duplicate image id {iid!r}")
        meta[iid] = img

    has_gt = "annotations" in data
    gts: dict[Any, list[GroundTruthBox]] = {iid: [] for iid in meta}
    for ann in data.get("annotations") or []:
        ann_id = ann.get("id")
        iid = ann.get("image_id")
        if iid not in meta:
            raise IngestError(f"annotation {ann_id!r} references missing image id {iid!r}")
        box = _parse_box(ann.get("bbox"), f"annotation {ann_id!r}")
        cid = int(ann["category_id"])
        if categories and cid not in categories:
            raise IngestError(f"annotation {ann_id!r} has unknown category id {cid}")
        gts[iid].append(GroundTruthBox(box, cid, bool(ann.get("iscrowd", 0)), ann_id))

    records = []
    for iid, img in meta.items():
        try:
            rec = ImageRecord(
                image_id=iid,
                width=float(img["width"]),
                height=float(img["height"]),
                ground_truths=tuple(gts[iid]) if has_gt else None,
                file_name=img.get("file_name"),
            )
        except (KeyError, ValueError) as exc:
            raise IngestError(f"image {iid!r}: {exc}") from exc
        records.append(rec)
    return Dataset(tuple(records), categories, score_mode)


def load_annotations(path, score_mode: str = "one_vs_all") -> Dataset:
    return parse_annotations(_read_json(path), score_mode)


def _vector(entry, key, what):
    vals = entry.get(key)
    if vals is None:
        return None
    try:
        vec = tuple(float(v) for v in vals)
    except (TypeError, ValueError) as exc:
        raise IngestError(f"{what}: '{key}' must be a list of numbers") from exc
    return vec


def parse_detections(
    results: Sequence[Mapping[str, Any]],
    floor: float = 0.05,
    score_mode: str | None = None,
) -> dict[Any, tuple[Detection, ...]]:
    """Group COCO result entries by image, dropping scores below ``floor``."""
    pools: dict[Any, list[Detection]] = {}
    for idx, entry in enumerate(results):
        what = f"detection #{idx}"
        score = float(entry["score"])
        if not 0.0 <= score <= 1.0:
            raise IngestError(f"{what}: score {score} outside [0, 1]")
        box = _parse_box(entry.get("bbox"), what)
        class_scores = _vector(entry, "class_scores", what)
        if class_scores is not None:
            if any(not 0.0 <= p <= 1.0 for p in class_scores):
                raise IngestError(f"{what}: class_scores entries must lie in [0, 1]")
            if score_mode == "softmax" and abs(math.fsum(class_scores) - 1.0) > 1e-6:
                raise IngestError(f"{what}: softmax class_scores sum to {math.fsum(class_scores)}, not 1")
        logits = _vector(entry, "logits", what)
        if score < floor:
            continue
        det = Detection(box, int(entry["category_id"]), score, class_scores, logits, idx)
        pools.setdefault(entry["image_id"], []).append(det)
    return {iid: order_pool(dets) for iid, dets in pools.items()}


def load_detections(path, floor: float = 0.05, score_mode: str | None = None) -> dict[Any, tuple[Detection, ...]]:
    data = _read_json(path)
    if not isinstance(data, list):
        raise IngestError(f"{path}: results file must be a JSON list")
    return parse_detections(data, floor, score_mode)


def attach_detections(
    dataset: Dataset,
    pools: Mapping[Any, Sequence[Detection]],
    strict: bool = True,
) -> Dataset:
    """Attach detection pools to image records; images without results get an empty pool."""
    known = {rec.image_id for rec in dataset.images}
    unknown = [iid for iid in pools if iid not in known]
    if unknown:
        msg = f"detections reference unknown image ids: {sorted(unknown, key=_image_sort_key)[:10]}"
        if strict:
            raise IngestError(msg)
        logger.warning("%s (skipped)", msg)
    records = tuple(replace(rec, detections=tuple(pools.get(rec.image_id, ()))) for rec in dataset.images)
    return replace(dataset, images=records)


def clip_boxes(dataset: Dataset) -> Dataset:
    """Clip every detection and ground-truth box to its image frame."""
    records = []
    for rec in dataset.images:
        dets = tuple(replace(d, box=d.box.clip(rec.width, rec.height)) for d in rec.detections)
        gts = rec.ground_truths
        if gts is not None:
            gts = tuple(replace(g, box=g.box.clip(rec.width, rec.height)) for g in gts)
        records.append(replace(rec, detections=dets, ground_truths=gts))
    return replace(dataset, images=tuple(records))


def load_dataset(
    annotations,
    detections=None,
    *,
    floor: float = 0.05,
    score_mode: str = "one_vs_all",
    strict: bool = True,
    clip: bool = False,
    remap: Mapping[str, str | None] | None = None,
) -> Dataset:
    dataset = load_annotations(annotations, score_mode)
    if detections is not None:
        dataset = attach_detections(dataset, load_detections(detections, floor, score_mode), strict)
    if remap is not None:
        dataset = apply_class_remap(dataset, remap)
    if clip:
        dataset = clip_boxes(dataset)
    return dataset


# ---------------------------------------------------------------------------
# serialization


def dump_annotations(dataset: Dataset) -> dict[str, Any]:
    """Inverse of :func:`parse_annotations`."""
    images, annotations = [], []
    next_ann = 1
    for rec in dataset.images:
        img = {"id": rec.image_id, "width": rec.width, "height": rec.height}
        if rec.file_name is not None:
            img["file_name"] = rec.file_name
        images.append(img)
        for gt in rec.ground_truths or ():
            ann_id = gt.annotation_id if gt.annotation_id is not None else next_ann
            next_ann += 1
            x, y, w, h = gt.box.to_xywh()
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": rec.image_id,
                    "category_id": gt.class_id,
                    "bbox": [x, y, w, h],
                    "area": w * h,
                    "iscrowd": int(gt.is_crowd),
                }
            )
    out: dict[str, Any] = {
        "images": images,
        "categories": [{"id": cid, "name": name} for cid, name in sorted(dataset.categories.items())],
    }
    if dataset.has_ground_truth or not dataset.images:
        out["annotations"] = annotations
    return out


def dump_detections(dataset: Dataset) -> list[dict[str, Any]]:
    entries = []
    for rec in dataset.images:
        for det in rec.detections:
            entry = {
                "image_id": rec.image_id,
                "category_id": det.class_id,
                "bbox": det.box.to_xywh(),
                "score": det.score,
            }
            if det.class_scores is not None:
                entry["class_scores"] = list(det.class_scores)
            if det.logits is not None:
                entry["logits"] = list(det.logits)
            entries.append(entry)
    return entries


# ---------------------------------------------------------------------------
# class remapping


def load_remap(path) -> dict[str, str | None]:
    data = _read_json(path)
    if not isinstance(data, dict):
        raise IngestError(f"{path}: remap file must be a JSON object")
    for src, dst in data.items():
        if dst is not None and not isinstance(dst, str):
            raise IngestError(f"{path}: remap target for {src!r} must be a string or null")
    return data


def apply_class_remap(dataset: Dataset, remap: Mapping[str, str | None]) -> Dataset:
    """Relabel detections and ground truths by class name.

    Classes mapped to ``None`` are removed from both sides. A target name that
    already exists in the source table keeps its id, so an identity remap
    leaves the dataset unchanged; new names get fresh ids in order of first
    appearance.
    """
    source_names = dataset.categories
    used = set()
    for rec in dataset.images:
        used.update(d.class_id for d in rec.detections)
        used.update(g.class_id for g in rec.ground_truths or ())
    for cid in sorted(used):
        name = source_names.get(cid)
        if name is None:
            raise IngestError(f"class id {cid} has no name in the category table")
        if name not in remap:
            raise IngestError(f"class {name!r} is not covered by the remap")

    src_ids = dataset.class_ids_by_name()
    targets = []
    for dst in remap.values():
        if dst is not None and dst not in targets:
            targets.append(dst)
    new_ids = {t: src_ids[t] for t in targets if t in src_ids}
    next_id = max(new_ids.values(), default=0) + 1
    for t in targets:
        if t not in new_ids:
            new_ids[t] = next_id
            next_id += 1

    id_map: dict[int, int | None] = {}
    for cid, name in source_names.items():
        if name in remap:
            dst = remap[name]
            id_map[cid] = None if dst is None else new_ids[dst]

    records = []
    for rec in dataset.images:
        dets = tuple(
            replace(d, class_id=id_map[d.class_id]) for d in rec.detections if id_map[d.class_id] is not None
        )
        gts = rec.ground_truths
        if gts is not None:
            gts = tuple(replace(g, class_id=id_map[g.class_id]) for g in gts if id_map[g.class_id] is not None)
        records.append(replace(rec, detections=dets, ground_truths=gts))
    categories = {cid: name for name, cid in sorted(new_ids.items(), key=lambda kv: kv[1])}
    return replace(dataset, images=tuple(records), categories=categories)


# nuImages (MMDet schema) to a two-class driving schema. Names are listed in
# both the underscore form used by MMDet and the spaced display form.
NUIMAGES_TWO_CLASS_REMAP: dict[str, str | None] = {
    "car": "Vehicle",
    "truck": "Vehicle",
    "trailer": "Vehicle",
    "bus": "Vehicle",
    "construction_vehicle": "Vehicle",
    "construction vehicle": "Vehicle",
    "bicycle": "Vehicle",
    "motorcycle": "Vehicle",
    "pedestrian": "Pedestrian",
    "traffic_cone": None,
    "traffic cone": None,
    "barrier": None,
}
