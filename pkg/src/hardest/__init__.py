"""Annotation-free, query-based hard-image mining for object detectors."""

from .estimators import (
    SamplerConfig,
    dempster_shafer,
    entropy,
    estimate_dataset,
    exact_expected_hardness,
    ground_truth_hardness,
    sample_pseudo_gt,
    score_sampling,
)
from .matching import Matching, error_set, iou, match
from .metrics import auroc, cumulative_hardness_curve, mauroc, ndcg, spearman
from .model import (
    BoundingBox,
    Dataset,
    Detection,
    GroundTruthBox,
    ImageRecord,
    apply_class_remap,
    filter_positive,
    load_annotations,
    load_dataset,
    load_detections,
)
from .query import eval_query, format_query, parse_query

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "Dataset",
    "Detection",
    "GroundTruthBox",
    "ImageRecord",
    "Matching",
    "SamplerConfig",
    "apply_class_remap",
    "auroc",
    "cumulative_hardness_curve",
    "dempster_shafer",
    "entropy",
    "error_set",
    "estimate_dataset",
    "eval_query",
    "exact_expected_hardness",
    "filter_positive",
    "format_query",
    "ground_truth_hardness",
    "iou",
    "load_annotations",
    "load_dataset",
    "load_detections",
    "match",
    "mauroc",
    "ndcg",
    "parse_query",
    "sample_pseudo_gt",
    "score_sampling",
    "spearman",
]
