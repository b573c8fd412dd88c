"""Per-image hardness estimators.

Score sampling treats each pooled detection score as the probability that the
box is a real object, draws pseudo ground truths from those independent
Bernoulli variables, and averages the query over the draws. Entropy and
Dempster-Shafer are the query-agnostic uncertainty baselines.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .matching import MATCHERS, match
from .model import Dataset, Detection, GroundTruthBox, ImageRecord, filter_positive
from .query import Expr, QueryContext, bind_query, format_query

METHODS = ("ss", "entropy", "ds", "gt")
_DS_CLAMP = 1e-12


class ConfigurationError(ValueError):
    pass


class EnumerationInfeasible(ValueError):
    pass


class MissingGroundTruth(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    num_samples: int = 10
    eta: float = 0.05
    seed: int = 0
    tau: float = 0.5
    matcher: str = "hungarian"
    crowd_policy: str = "ignore"

    def __post_init__(self):
        if self.num_samples < 1:
            raise ConfigurationError(f"num_samples must be >= 1, got {self.num_samples}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must lie in [0, 1], got {self.eta}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError(f"tau must lie in (0, 1], got {self.tau}")
        if self.matcher not in MATCHERS:
            raise ConfigurationError(f"unknown matcher {self.matcher!r}")


@dataclass(frozen=True)
class HardnessRow:
    image_id: object
    method: str
    query_name: str
    query_text: str
    estimate: float
    std_error: float
    gt_hardness: float | None
    num_samples: int
    eta: float
    tau: float
    seed: int

    def as_dict(self) -> dict:
        return asdict(self)


def image_seed(seed: int, image_id) -> int:
    """64-bit stream seed for one image, independent of iteration order."""
    digest = hashlib.sha256(f"{int(seed)}:{type(image_id).__name__}:{image_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def image_rng(seed: int, image_id) -> np.random.Generator:
    return np.random.default_rng(image_seed(seed, image_id))


def _as_gt(det: Detection) -> GroundTruthBox:
    return GroundTruthBox(det.box, det.class_id, False)


def sample_pseudo_gt(pool: Sequence[Detection], rng: np.random.Generator) -> list[GroundTruthBox]:
    """Keep each detection independently with probability equal to its score."""
    if not pool:
        return []
    scores = np.array([d.score for d in pool])
    keep = rng.random(len(pool)) < scores
    return [_as_gt(d) for d, k in zip(pool, keep) if k]


def _query_values(image: ImageRecord, positive, pseudo_gt, queries, config: SamplerConfig) -> list[float]:
    matching = match(positive, pseudo_gt, config.tau, config.matcher, config.crowd_policy)
    ctx = QueryContext(image, matching)
    return [ctx.evaluate(q) for q in queries]


def score_sampling_many(
    image: ImageRecord,
    queries: Sequence[Expr],
    config: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> list[tuple[float, float]]:
    """Score-sampling estimates ``(mean, standard error)`` for several queries.

    All queries share the same pseudo ground-truth draws. The query value only
    depends on which boxes were kept, so each distinct keep pattern is matched
    and evaluated once and reused for every draw that repeats it.
    """
    if rng is None:
        rng = image_rng(config.seed, image.image_id)
    pool = image.detections
    positive = filter_positive(pool, config.eta)
    n = config.num_samples
    scores = np.array([d.score for d in pool], dtype=float)
    keep = rng.random((n, len(pool))) < scores

    if len(pool) == 0:
        values = np.array([_query_values(image, positive, [], queries, config)])
        per_sample = np.repeat(values, n, axis=0)
    else:
        patterns, inverse = np.unique(keep, axis=0, return_inverse=True)
        values = np.empty((len(patterns), len(queries)))
        for u, pattern in enumerate(patterns):
            pseudo = [_as_gt(d) for d, k in zip(pool, pattern) if k]
            values[u] = _query_values(image, positive, pseudo, queries, config)
        per_sample = values[np.asarray(inverse).reshape(-1)]

    means = per_sample.mean(axis=0)
    if n > 1:
        se = per_sample.std(axis=0, ddof=1) / math.sqrt(n)
    else:
        se = np.zeros(len(queries))
    return [(float(m), float(s)) for m, s in zip(means, se)]


def score_sampling(
    image: ImageRecord,
    query: Expr,
    config: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    return score_sampling_many(image, [query], config, rng)[0]


def exact_expected_hardness_many(
    image: ImageRecord,
    queries: Sequence[Expr],
    config: SamplerConfig,
    limit: int = 15,
) -> list[float]:
    """Expected query values by enumerating all ``2**m`` keep patterns of the pool."""
    pool = image.detections
    if len(pool) > limit:
        raise EnumerationInfeasible(
            f"image {image.image_id!r}: pool of {len(pool)} detections exceeds enumeration limit {limit}"
        )
    positive = filter_positive(pool, config.eta)
    terms: list[list[float]] = [[] for _ in queries]
    for pattern in itertools.product((False, True), repeat=len(pool)):
        weight = 1.0
        for det, kept in zip(pool, pattern):
            weight *= det.score if kept else 1.0 - det.score
        if weight == 0.0:
            continue
        pseudo = [_as_gt(d) for d, k in zip(pool, pattern) if k]
        for acc, val in zip(terms, _query_values(image, positive, pseudo, queries, config)):
            acc.append(weight * val)
    return [math.fsum(acc) for acc in terms]


def exact_expected_hardness(image: ImageRecord, query: Expr, config: SamplerConfig, limit: int = 15) -> float:
    return exact_expected_hardness_many(image, [query], config, limit)[0]


def ground_truth_hardness_many(image: ImageRecord, queries: Sequence[Expr], config: SamplerConfig) -> list[float]:
    if image.ground_truths is None:
        raise MissingGroundTruth(f"image {image.image_id!r} has no ground-truth annotations")
    positive = filter_positive(image.detections, config.eta)
    return _query_values(image, positive, list(image.ground_truths), queries, config)


def ground_truth_hardness(image: ImageRecord, query: Expr, config: SamplerConfig) -> float:
    return ground_truth_hardness_many(image, [query], config)[0]


# ---------------------------------------------------------------------------
# uncertainty baselines


def _softmax(logits: Sequence[float]) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = np.exp(z - z.max())
    return z / z.sum()


def _plogp(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def entropy(detections: Sequence[Detection], mode: str = "one_vs_all") -> float:
    """Summed per-box entropy (natural log).

    ``softmax`` uses each box's class distribution (``class_scores``, or the
    softmax of ``logits``). ``one_vs_all`` treats the detection score as a
    two-outcome distribution.
    """
    total = []
    for det in detections:
        if mode == "softmax":
            if det.class_scores is not None:
                p = np.asarray(det.class_scores, dtype=float)
            elif det.logits is not None:
                p = _softmax(det.logits)
            else:
                raise ConfigurationError("softmax entropy needs class_scores or logits on every detection")
        elif mode == "one_vs_all":
            p = np.array([det.score, 1.0 - det.score])
        else:
            raise ConfigurationError(f"unknown score mode {mode!r}")
        total.append(_plogp(p))
    return math.fsum(total)


def dempster_shafer(detections: Sequence[Detection], mode: str = "one_vs_all") -> float:
    """Summed evidential uncertainty ``K / (K + sum_k exp(logit_k))`` per box.

    In ``one_vs_all`` mode each box contributes two outcomes with evidence
    ``(s / (1 - s), 1)``, i.e. logits ``(ln s - ln(1 - s), 0)``.
    """
    total = []
    for det in detections:
        if mode == "softmax":
            if det.logits is None:
                raise ConfigurationError("softmax Dempster-Shafer needs logits on every detection")
            logits = np.asarray(det.logits, dtype=float)
            k = len(logits)
            with np.errstate(over="ignore"):
                evidence = float(np.exp(logits).sum())
        elif mode == "one_vs_all":
            s = min(max(det.score, _DS_CLAMP), 1.0 - _DS_CLAMP)
            k = 2
            evidence = s / (1.0 - s) + 1.0
        else:
            raise ConfigurationError(f"unknown score mode {mode!r}")
        total.append(k / (k + evidence))
    return math.fsum(total)


# ---------------------------------------------------------------------------
# dataset-level driver


def _estimate_image(task) -> list[HardnessRow]:
    image = task[0]
    try:
        return _estimate_image_rows(*task)
    except ConfigurationError as exc:
        raise ConfigurationError(f"image {image.image_id!r}: {exc}") from exc


def _estimate_image_rows(image, names, texts, exprs, method, config, score_mode, with_gt) -> list[HardnessRow]:
    positive = filter_positive(image.detections, config.eta)
    if method == "ss":
        results = score_sampling_many(image, exprs, config)
    elif method == "entropy":
        value = entropy(positive, score_mode)
        results = [(value, 0.0)] * len(exprs)
    elif method == "ds":
        value = dempster_shafer(positive, score_mode)
        results = [(value, 0.0)] * len(exprs)
    elif method == "gt":
        results = [(v, 0.0) for v in ground_truth_hardness_many(image, exprs, config)]
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    gt_values: list[float | None] = [None] * len(exprs)
    if with_gt:
        gt_values = ground_truth_hardness_many(image, exprs, config)
    return [
        HardnessRow(
            image.image_id, method, name, text, est, se, gt, config.num_samples, config.eta, config.tau, config.seed
        )
        for name, text, (est, se), gt in zip(names, texts, results, gt_values)
    ]


def estimate_dataset(
    dataset: Dataset,
    queries: Mapping[str, Expr],
    method: str,
    config: SamplerConfig,
    *,
    with_gt: bool = False,
    jobs: int = 1,
) -> list[HardnessRow]:
    """Estimate every query on every image.

    Rows are ordered by query (in the given order) and then by image id. Each
    image draws from its own seeded stream, so the output does not depend on
    ``jobs``.
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; expected one of {METHODS}")
    if (method == "gt" or with_gt) and not dataset.has_ground_truth:
        raise MissingGroundTruth(f"method {method!r} with ground truth requires annotations")
    names = list(queries)
    exprs = [bind_query(queries[n], dataset.categories) for n in names]
    texts = [format_query(e) for e in exprs]
    ordered = dataset.sorted().images
    tasks = [(img, names, texts, exprs, method, config, dataset.score_mode, with_gt) for img in ordered]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_image = list(pool.map(_estimate_image, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        per_image = [_estimate_image(t) for t in tasks]
    rows = []
    for q_idx in range(len(names)):
        rows.extend(img_rows[q_idx] for img_rows in per_image)
    return rows


def rows_by_query(rows: Sequence[HardnessRow]) -> dict[str, list[HardnessRow]]:
    out: dict[str, list[HardnessRow]] = {}
    for row in rows:
        out.setdefault(row.query_name, []).append(row)
    return out
