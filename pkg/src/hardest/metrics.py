"""Evaluation of estimated hardness against ground-truth hardness, plus detector diagnostics."""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .estimators import SamplerConfig, estimate_dataset, rows_by_query
from .matching import match
from .model import Dataset, _image_sort_key, filter_positive
from .query import Expr

logger = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.05, 0.10, 0.25, 0.50)


class UndefinedMetricWarning(UserWarning):
    pass


def _check_keys(a: Mapping, b: Mapping):
    if a.keys() != b.keys():
        diff = sorted(set(a) ^ set(b), key=_image_sort_key)
        raise ValueError(f"estimate and truth image sets differ: {diff[:20]}")


def _descending_ids(scores: Mapping) -> list:
    # ties broken by image id so every ordering is reproducible
    return sorted(scores, key=lambda k: (-scores[k], _image_sort_key(k)))


# ---------------------------------------------------------------------------
# ranking


@dataclass(frozen=True)
class RankingResult:
    order: tuple
    dcg: float
    dcg_gt: float
    ndcg: float


def _tie_averaged_gains(order: Sequence, estimates: Mapping, truths: Mapping) -> list[float]:
    gains = []
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and estimates[order[j]] == estimates[order[i]]:
            j += 1
        group_mean = math.fsum(truths[k] for k in order[i:j]) / (j - i)
        gains.extend([group_mean] * (j - i))
        i = j
    return gains


def dcg(estimates: Mapping, truths: Mapping) -> float:
    """Discounted cumulative gain with gains averaged over equal estimates."""
    order = _descending_ids(estimates)
    gains = _tie_averaged_gains(order, estimates, truths)
    return math.fsum(g / math.log2(rank + 2) for rank, g in enumerate(gains))


def ndcg(estimates: Mapping, truths: Mapping) -> RankingResult:
    _check_keys(estimates, truths)
    order = tuple(_descending_ids(estimates))
    value = dcg(estimates, truths)
    ideal = dcg(truths, truths)
    # nothing to find when every image has zero hardness
    score = value / ideal if ideal > 0 else 1.0
    return RankingResult(order, value, ideal, score)


# ---------------------------------------------------------------------------
# classification


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC with ties counted as one half; NaN when a class is empty."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUROC undefined: labels contain a single class", UndefinedMetricWarning, stacklevel=2)
        return math.nan
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class ClassificationResult:
    ratio: float
    t_hard: float
    n_hard: int
    n_easy: int
    auroc: float  # NaN when undefined


@dataclass(frozen=True)
class MAurocResult:
    per_ratio: tuple[ClassificationResult, ...]
    mauroc: float


def hard_labels(truths: Mapping, ratio: float) -> tuple[float, dict]:
    """Label the top ``ceil(ratio * D)`` images by ground-truth hardness as hard.

    The threshold is the next value down the sorted list and only images
    strictly above it are hard, so ties at the threshold shrink the hard set.
    """
    values = sorted(truths.values(), reverse=True)
    k = math.ceil(ratio * len(values) - 1e-9)
    t_hard = values[k] if k < len(values) else -math.inf
    return t_hard, {key: int(v > t_hard) for key, v in truths.items()}


def mauroc(estimates: Mapping, truths: Mapping, ratios: Sequence[float] = DEFAULT_RATIOS) -> MAurocResult:
    _check_keys(estimates, truths)
    keys = sorted(truths, key=_image_sort_key)
    results = []
    for r in ratios:
        t_hard, labels = hard_labels(truths, r)
        y = [labels[k] for k in keys]
        n_hard = sum(y)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UndefinedMetricWarning)
            value = auroc([estimates[k] for k in keys], y)
        if math.isnan(value):
            warnings.warn(f"AUROC undefined at hard ratio {r}; excluded from the mean", UndefinedMetricWarning, stacklevel=2)
        results.append(ClassificationResult(r, t_hard, n_hard, len(y) - n_hard, value))
    defined = [c.auroc for c in results if not math.isnan(c.auroc)]
    mean = math.fsum(defined) / len(defined) if defined else math.nan
    return MAurocResult(tuple(results), mean)


# ---------------------------------------------------------------------------
# budget curves and correlation


@dataclass(frozen=True)
class CurvePoint:
    budget: int
    cumulative: float
    diagonal: float


def cumulative_hardness_curve(estimates: Mapping, truths: Mapping) -> list[CurvePoint]:
    """Cumulative ground-truth hardness of the top-k images by estimate, k = 0..D.

    ``diagonal`` is the expected curve of a uniformly random ranking.
    """
    _check_keys(estimates, truths)
    order = _descending_ids(estimates)
    total = math.fsum(truths.values())
    d = len(order)
    points = [CurvePoint(0, 0.0, 0.0)]
    running: list[float] = []
    for k, key in enumerate(order, 1):
        running.append(truths[key])
        points.append(CurvePoint(k, math.fsum(running), total * k / d))
    return points


def _as_vector(a, keys=None) -> np.ndarray:
    if isinstance(a, Mapping):
        return np.array([a[k] for k in keys], dtype=float)
    return np.asarray(a, dtype=float)


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties; NaN if either side is constant."""
    keys = None
    if isinstance(a, Mapping) or isinstance(b, Mapping):
        _check_keys(a, b)
        keys = sorted(a, key=_image_sort_key)
    x, y = _as_vector(a, keys), _as_vector(b, keys)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("spearman needs two equally long vectors with at least 2 entries")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx * rx).sum()) * float((ry * ry).sum()))
    if denom == 0:
        return math.nan
    return float((rx * ry).sum() / denom)


def spearman_matrix(scores: Mapping[str, Mapping]) -> tuple[list[str], np.ndarray]:
    names = list(scores)
    mat = np.empty((len(names), len(names)))
    for i, a in enumerate(names):
        mat[i, i] = 1.0
        for j in range(i + 1, len(names)):
            mat[i, j] = mat[j, i] = spearman(scores[a], scores[names[j]])
    return names, mat


# ---------------------------------------------------------------------------
# sensitivity to the number of samples


@dataclass(frozen=True)
class SensitivityRow:
    num_samples: int
    ndcg_mean: float
    ndcg_std: float
    mauroc_mean: float
    mauroc_std: float
    qhat_std: float  # cross-seed stddev of the estimate, averaged over images


def sweep_seed(seed: int, num_samples: int, rep: int) -> int:
    digest = hashlib.sha256(f"{seed}:N{num_samples}:rep{rep}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sensitivity_sweep(
    dataset: Dataset,
    query: Expr,
    config: SamplerConfig,
    sample_counts: Sequence[int],
    num_seeds: int = 5,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    jobs: int = 1,
) -> list[SensitivityRow]:
    """Re-run score sampling at each sample count with fresh seeds and summarise."""
    if not sample_counts:
        raise ValueError("sample_counts must be non-empty")
    queries = {"q": query}
    truths = None
    if dataset.has_ground_truth:
        gt_rows = estimate_dataset(dataset, queries, "gt", config, jobs=jobs)
        truths = {r.image_id: r.estimate for r in gt_rows}

    out = []
    for n in sample_counts:
        runs = []
        for rep in range(num_seeds):
            cfg = replace(config, num_samples=int(n), seed=sweep_seed(config.seed, int(n), rep))
            rows = rows_by_query(estimate_dataset(dataset, queries, "ss", cfg, jobs=jobs))["q"]
            runs.append({r.image_id: r.estimate for r in rows})
        ids = sorted(runs[0], key=_image_sort_key)
        table = np.array([[run[i] for i in ids] for run in runs])
        qhat_std = float(table.std(axis=0, ddof=1).mean()) if num_seeds > 1 else 0.0
        nd = ma = [math.nan]
        if truths is not None:
            nd = [ndcg(run, truths).ndcg for run in runs]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UndefinedMetricWarning)
                ma = [mauroc(run, truths, ratios).mauroc for run in runs]
        out.append(
            SensitivityRow(
                int(n),
                float(np.mean(nd)),
                float(np.std(nd)),
                float(np.mean(ma)),
                float(np.std(ma)),
                qhat_std,
            )
        )
    return out


# ---------------------------------------------------------------------------
# histograms


@dataclass(frozen=True)
class HistogramRow:
    bin_lo: float
    bin_hi: float
    count: int
    tp: int | None = None
    precision: float | None = None  # NaN for empty bins


def _bin_index(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # right edge of the last bin is inclusive
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def _edges(bins, lo: float, hi: float) -> np.ndarray:
    if np.ndim(bins) == 0:
        return np.linspace(lo, hi, int(bins) + 1)
    edges = np.asarray(bins, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be a strictly increasing sequence")
    return edges


def confidence_histogram(dataset: Dataset, config: SamplerConfig, bins=10) -> list[HistogramRow]:
    """Precision of positive detections per score bin, matching against real ground truth."""
    if not dataset.has_ground_truth:
        raise ValueError("confidence histogram needs ground-truth annotations")
    edges = _edges(bins, 0.0, 1.0)
    scores, correct = [], []
    for rec in dataset.images:
        positive = filter_positive(rec.detections, config.eta)
        m = match(positive, rec.ground_truths, config.tau, config.matcher, config.crowd_policy)
        tp = {p.det for p in m.tp_pairs}
        for i in (*tp, *m.fp_indices):
            scores.append(positive[i].score)
            correct.append(i in tp)
    scores_arr = np.asarray(scores, dtype=float)
    correct_arr = np.asarray(correct, dtype=bool)
    idx = _bin_index(scores_arr, edges) if len(scores_arr) else np.array([], dtype=int)
    rows = []
    for b in range(len(edges) - 1):
        in_bin = idx == b
        count = int(in_bin.sum())
        tp = int(correct_arr[in_bin].sum())
        rows.append(HistogramRow(float(edges[b]), float(edges[b + 1]), count, tp, tp / count if count else math.nan))
    return rows


def variance_histogram(dataset: Dataset, bins=10) -> list[HistogramRow]:
    """Histogram of the Bernoulli variances ``s (1 - s)`` of all pooled detections over [0, 0.25]."""
    edges = _edges(bins, 0.0, 0.25)
    var = np.array([d.score * (1.0 - d.score) for rec in dataset.images for d in rec.detections], dtype=float)
    counts = np.bincount(_bin_index(var, edges), minlength=len(edges) - 1) if len(var) else np.zeros(len(edges) - 1, int)
    return [HistogramRow(float(edges[b]), float(edges[b + 1]), int(counts[b])) for b in range(len(edges) - 1)]


_MAX_UNIT_BINS = 200


@dataclass(frozen=True)
class HardnessHistogram:
    rows: tuple[HistogramRow, ...]
    zero_count: int
    total: int
    mean: float


def hardness_histogram(values, bins=10) -> HardnessHistogram:
    """Histogram of hardness values, with the mass at exactly zero reported on its own.

    Integer-valued inputs up to ``_MAX_UNIT_BINS`` get unit-width bins centred
    on the integers unless explicit edges are given.
    """
    if isinstance(values, Mapping):
        values = list(values.values())
    arr = np.asarray(values, dtype=float)
    zero = int((arr == 0).sum())
    if len(arr) == 0:
        return HardnessHistogram((), 0, 0, math.nan)
    top = float(arr.max())
    integer = np.all(arr == np.round(arr)) and arr.min() >= 0 and top <= _MAX_UNIT_BINS
    if np.ndim(bins) == 0 and integer:
        edges = np.arange(-0.5, top + 1.0, 1.0)
    else:
        edges = _edges(bins, min(0.0, float(arr.min())), top if top > 0 else 1.0)
    counts = np.bincount(_bin_index(arr, edges), minlength=len(edges) - 1)
    rows = tuple(HistogramRow(float(edges[b]), float(edges[b + 1]), int(counts[b])) for b in range(len(edges) - 1))
    return HardnessHistogram(rows, zero, len(arr), float(arr.mean()))
