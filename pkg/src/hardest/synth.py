"""Synthetic detector outputs for tests and desk-scale experiments.

``make_calibrated_dataset`` simulates a perfectly calibrated detector: each
detection is a real object with probability equal to its score. Correct
detections get a ground-truth box close to them, incorrect ones get none,
and a few objects are missed outright.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .model import (
    BoundingBox,
    Dataset,
    Detection,
    GroundTruthBox,
    ImageRecord,
    dump_annotations,
    dump_detections,
    order_pool,
)

DEFAULT_CLASSES = ("pedestrian", "vehicle", "cyclist")


def _box_xywh(rng, width, height, cx, cy, scale):
    aspect = math.exp(rng.normal(0.0, 0.35))
    w = min(width, scale * aspect)
    h = min(height, scale / aspect)
    x = float(np.clip(cx - w / 2, 0, width - w))
    y = float(np.clip(cy - h / 2, 0, height - h))
    return [round(x, 2), round(y, 2), round(w, 2), round(h, 2)]


def _jitter(rng, xywh, width, height, amount=0.05):
    x, y, w, h = xywh
    dx, dy = rng.normal(0, amount * w), rng.normal(0, amount * h)
    sw, sh = math.exp(rng.normal(0, amount)), math.exp(rng.normal(0, amount))
    nw, nh = min(width, w * sw), min(height, h * sh)
    nx = float(np.clip(x + dx, 0, width - nw))
    ny = float(np.clip(y + dy, 0, height - nh))
    return [round(nx, 2), round(ny, 2), round(nw, 2), round(nh, 2)]


def _class_vectors(rng, class_id, score, num_classes):
    # background at index 0, class k at index k
    rest = rng.dirichlet(np.ones(num_classes)) * (1.0 - score)
    probs = np.empty(num_classes + 1)
    others = [k for k in range(num_classes + 1) if k != class_id]
    probs[others] = rest
    probs[class_id] = score
    probs = np.clip(probs, 1e-9, None)
    probs /= probs.sum()
    return tuple(float(p) for p in probs), tuple(float(v) for v in np.log(probs))


def make_calibrated_image(
    rng: np.random.Generator,
    image_id,
    num_classes: int = 3,
    width: float = 640.0,
    height: float = 480.0,
    mean_candidates: float | None = None,
    miss_rate: float = 0.05,
    score_floor: float = 0.05,
) -> ImageRecord:
    if mean_candidates is None:
        mean_candidates = float(rng.gamma(2.0, 3.0))
    n_cand = int(rng.poisson(mean_candidates))
    # per-image difficulty: how confident the detector tends to be
    a, b = float(rng.uniform(0.5, 3.0)), float(rng.uniform(0.5, 2.0))
    n_clusters = max(1, int(rng.integers(1, 4)))
    centres = [(rng.uniform(0, width), rng.uniform(0, height)) for _ in range(n_clusters)]
    base_scale = math.exp(rng.uniform(math.log(0.03), math.log(0.4))) * min(width, height)

    dets, gts = [], []
    for idx in range(n_cand):
        cx, cy = centres[int(rng.integers(n_clusters))]
        cx += rng.normal(0, base_scale)
        cy += rng.normal(0, base_scale)
        scale = base_scale * math.exp(rng.normal(0, 0.6))
        xywh = _box_xywh(rng, width, height, cx, cy, scale)
        score = round(float(score_floor + (1.0 - score_floor) * rng.beta(a, b)), 6)
        cls = int(rng.integers(1, num_classes + 1))
        class_scores, logits = _class_vectors(rng, cls, score, num_classes)
        dets.append(Detection(BoundingBox.from_xywh(xywh), cls, score, class_scores, logits, idx))
        if rng.random() < score:
            gts.append(GroundTruthBox(BoundingBox.from_xywh(_jitter(rng, xywh, width, height)), cls, False))
    n_missed = int(rng.binomial(len(gts) + 2, miss_rate)) if gts else int(rng.random() < miss_rate)
    for _ in range(n_missed):
        cx, cy = centres[int(rng.integers(n_clusters))]
        xywh = _box_xywh(rng, width, height, cx + rng.normal(0, base_scale), cy + rng.normal(0, base_scale), base_scale)
        gts.append(GroundTruthBox(BoundingBox.from_xywh(xywh), int(rng.integers(1, num_classes + 1)), False))
    gts = [GroundTruthBox(g.box, g.class_id, g.is_crowd, k + 1) for k, g in enumerate(gts)]
    return ImageRecord(image_id, width, height, order_pool(dets), tuple(gts))


def make_calibrated_dataset(
    num_images: int,
    seed: int = 0,
    classes=DEFAULT_CLASSES,
    score_mode: str = "one_vs_all",
) -> Dataset:
    rng = np.random.default_rng(seed)
    images = []
    for i in range(num_images):
        rec = make_calibrated_image(rng, i + 1, num_classes=len(classes))
        images.append(rec)
    # globally unique annotation ids
    next_id = 1
    renumbered = []
    for rec in images:
        gts = []
        for g in rec.ground_truths:
            gts.append(GroundTruthBox(g.box, g.class_id, g.is_crowd, next_id))
            next_id += 1
        renumbered.append(ImageRecord(rec.image_id, rec.width, rec.height, rec.detections, tuple(gts)))
    categories = {k + 1: name for k, name in enumerate(classes)}
    return Dataset(tuple(renumbered), categories, score_mode)


def random_pool_image(
    rng: np.random.Generator,
    image_id,
    num_detections: int,
    num_classes: int = 2,
    width: float = 100.0,
    height: float = 80.0,
    score_choices=None,
) -> ImageRecord:
    """Small cluttered scene with ``num_detections`` pooled boxes and random scores."""
    dets = []
    for idx in range(num_detections):
        w = float(rng.uniform(5, 40))
        h = float(rng.uniform(5, 40))
        x = float(rng.uniform(0, width - w))
        y = float(rng.uniform(0, height - h))
        if score_choices is None:
            score = float(rng.uniform(0.0, 1.0))
        else:
            score = float(rng.choice(score_choices))
        dets.append(Detection(BoundingBox(x, y, x + w, y + h), int(rng.integers(1, num_classes + 1)), score, index=idx))
    return ImageRecord(image_id, width, height, order_pool(dets), None)


def write_coco(dataset: Dataset, out_dir, prefix: str = "synth") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ann_path = out / f"{prefix}_annotations.json"
    det_path = out / f"{prefix}_detections.json"
    ann_path.write_text(json.dumps(dump_annotations(dataset), indent=1) + "\n", encoding="utf-8")
    det_path.write_text(json.dumps(dump_detections(dataset)) + "\n", encoding="utf-8")
    return ann_path, det_path
