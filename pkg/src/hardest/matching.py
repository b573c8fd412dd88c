"""Class-exact, IoU-thresholded association of detections with ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import BoundingBox, Detection, GroundTruthBox

MATCHERS = ("hungarian", "greedy")
CROWD_POLICIES = ("ignore", "strict")
ERROR_KINDS = ("fp", "fn", "false")


class TPPair(NamedTuple):
    det: int
    gt: int
    iou: float


class ErrorElement(NamedTuple):
    box: BoundingBox
    class_id: int


@dataclass(frozen=True)
class Matching:
    """Result of associating ``detections`` with ``ground_truths``.

    Indices refer to positions in the two input sequences, which the matching
    keeps so error sets can be materialised later. ``ignored_det`` holds
    detections absorbed by crowd regions under the ``ignore`` crowd policy.
    """

    detections: tuple[Detection, ...]
    ground_truths: tuple[GroundTruthBox, ...]
    tp_pairs: tuple[TPPair, ...]
    fp_indices: tuple[int, ...]
    fn_indices: tuple[int, ...]
    ignored_gt: tuple[int, ...] = ()
    ignored_det: tuple[int, ...] = ()

    @property
    def total_iou(self) -> float:
        return math.fsum(p.iou for p in self.tp_pairs)

    def tp_boxes(self) -> list[BoundingBox]:
        return [self.detections[p.det].box for p in self.tp_pairs]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = a.intersection(b)
    if inter <= 0.0:
        return 0.0
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(boxes_a: Sequence[BoundingBox], boxes_b: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for b in boxes_a], dtype=float)
    b = np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for b in boxes_b], dtype=float)
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((w > 0) & (h > 0), w * h, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def _hungarian(ious: np.ndarray, tau: float) -> list[tuple[int, int]]:
    # Infeasible pairs get zero weight; any zero-weight pair in the optimal
    # full assignment is dropped, which leaves an optimal feasible matching.
    weights = np.where(ious >= tau, ious, 0.0)
    if not weights.any():
        return []
    rows, cols = linear_sum_assignment(weights, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if ious[r, c] >= tau]


def _greedy(ious: np.ndarray, tau: float) -> list[tuple[int, int]]:
    # rows arrive in descending-score order
    taken = np.zeros(ious.shape[1], dtype=bool)
    pairs = []
    for r in range(ious.shape[0]):
        best, best_iou = -1, -1.0
        for c in range(ious.shape[1]):
            if not taken[c] and ious[r, c] >= tau and ious[r, c] > best_iou:
                best, best_iou = c, ious[r, c]
        if best >= 0:
            taken[best] = True
            pairs.append((r, best))
    return pairs


def match(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthBox],
    tau: float = 0.5,
    algorithm: Literal["hungarian", "greedy"] = "hungarian",
    crowd_policy: Literal["ignore", "strict"] = "ignore",
) -> Matching:
    """Match detections to ground truth, independently for every class.

    ``hungarian`` maximises the total IoU over same-class pairs with
    ``iou >= tau``. ``greedy`` visits detections by descending score and
    takes the best still-free ground truth, as pycocotools does.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {tau}")
    if algorithm not in MATCHERS:
        raise ValueError(f"unknown matcher {algorithm!r}")
    if crowd_policy not in CROWD_POLICIES:
        raise ValueError(f"unknown crowd policy {crowd_policy!r}")
    detections = tuple(detections)
    ground_truths = tuple(ground_truths)

    ignore_crowd = crowd_policy == "ignore"
    crowd = [j for j, g in enumerate(ground_truths) if ignore_crowd and g.is_crowd]
    crowd_set = set(crowd)

    tp: list[TPPair] = []
    matched_det: set[int] = set()
    matched_gt: set[int] = set()
    classes = sorted({d.class_id for d in detections} & {g.class_id for g in ground_truths})
    for cls in classes:
        det_idx = sorted(
            (i for i, d in enumerate(detections) if d.class_id == cls),
            key=lambda i: (-detections[i].score, detections[i].index, i),
        )
        gt_idx = [j for j, g in enumerate(ground_truths) if g.class_id == cls and j not in crowd_set]
        if not det_idx or not gt_idx:
            continue
        ious = iou_matrix([detections[i].box for i in det_idx], [ground_truths[j].box for j in gt_idx])
        solver = _hungarian if algorithm == "hungarian" else _greedy
        for r, c in solver(ious, tau):
            i, j = det_idx[r], gt_idx[c]
            tp.append(TPPair(i, j, float(ious[r, c])))
            matched_det.add(i)
            matched_gt.add(j)
    tp.sort()

    ignored_det = []
    if crowd:
        for i, d in enumerate(detections):
            if i in matched_det:
                continue
            if any(ground_truths[j].class_id == d.class_id and iou(d.box, ground_truths[j].box) >= tau for j in crowd):
                ignored_det.append(i)
    ignored_det_set = set(ignored_det)

    fp = tuple(i for i in range(len(detections)) if i not in matched_det and i not in ignored_det_set)
    fn = tuple(j for j in range(len(ground_truths)) if j not in matched_gt and j not in crowd_set)
    return Matching(detections, ground_truths, tuple(tp), fp, fn, tuple(crowd), tuple(ignored_det))


def error_set(matching: Matching, kind: str) -> list[ErrorElement]:
    """Boxes of the fp, fn or false (fp then fn) error set."""
    if kind not in ERROR_KINDS:
        raise ValueError(f"unknown error set {kind!r}")
    out: list[ErrorElement] = []
    if kind in ("fp", "false"):
        out.extend(ErrorElement(matching.detections[i].box, matching.detections[i].class_id) for i in matching.fp_indices)
    if kind in ("fn", "false"):
        out.extend(
            ErrorElement(matching.ground_truths[j].box, matching.ground_truths[j].class_id) for j in matching.fn_indices
        )
    return out
