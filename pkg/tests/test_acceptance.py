"""Acceptance gate: one test per criterion, each logging a PASS/FAIL line.

Seeds here are fixed up front and must not be re-picked to turn a result
green. See the terminal summary section "acceptance criteria".
"""

import csv
import filecmp
import functools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import binomtest, norm

from hardest.cli import main
from hardest.estimators import (
    SamplerConfig,
    dempster_shafer,
    entropy,
    estimate_dataset,
    exact_expected_hardness_many,
    ground_truth_hardness_many,
    rows_by_query,
    score_sampling_many,
)
from hardest.matching import ErrorElement, match
from hardest.metrics import auroc, cumulative_hardness_curve, ndcg, sensitivity_sweep, spearman
from hardest.model import BoundingBox, Dataset, ImageRecord
from hardest.query import DEFAULT_QUERIES, eval_occaware, eval_pixeladj, parse_query
from hardest.synth import make_calibrated_dataset, random_pool_image

from .conftest import det, gt, image
from .oracles import brute_force_best, pairwise_auroc, random_instance

DATA = Path(__file__).parent / "data"
QUERIES = {name: parse_query(text) for name, text in DEFAULT_QUERIES.items()}


@functools.lru_cache(maxsize=1)
def _oracle_comparison():
    rng = np.random.default_rng(0)
    cfg = SamplerConfig(num_samples=20_000, seed=0)
    exprs = list(QUERIES.values())
    start = time.perf_counter()
    cells = []
    for i in range(200):
        img = random_pool_image(rng, i, int(rng.integers(1, 13)))
        exact = exact_expected_hardness_many(img, exprs, cfg)
        for name, (est, se), ex in zip(QUERIES, score_sampling_many(img, exprs, cfg), exact):
            cells.append((i, name, est, ex, se))
    return cells, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_1_enumeration_oracle(acceptance_log):
    cells, elapsed = _oracle_comparison()
    failures = [c for c in cells if abs(c[2] - c[3]) > max(3 * c[4], 1e-9)]
    ok = not failures and elapsed < 300
    detail = f"{len(cells) - len(failures)}/{len(cells)} image-query checks within max(3 SE, 1e-9), {elapsed:.1f}s"
    if failures:
        worst = max(failures, key=lambda c: abs(c[2] - c[3]) / c[4] if c[4] else math.inf)
        detail += f"; worst miss image {worst[0]} {worst[1]} |z|={abs(worst[2] - worst[3]) / worst[4]:.2f}"
    acceptance_log(1, ok, detail)
    assert elapsed < 300
    assert not failures, detail


@pytest.mark.slow
def test_criterion_1_supplementary_multiple_testing(acceptance_log):
    # Same draws as criterion 1. A per-cell 3 SE band misses ~0.27% of the time
    # even for an exact estimator, so over 1800 cells a few misses are expected.
    cells, _ = _oracle_comparison()
    n = len(cells)
    misses = sum(abs(est - ex) > max(3 * se, 1e-9) for _, _, est, ex, se in cells)
    p_two_sided = 2 * norm.sf(3)
    p_count = binomtest(misses, n, p_two_sided, alternative="greater").pvalue
    z_max = max((abs(est - ex) / se for _, _, est, ex, se in cells if se > 0), default=0.0)
    bonferroni = norm.isf(0.05 / (2 * n))
    exact_zero_se = all(abs(est - ex) <= 1e-9 for _, _, est, ex, se in cells if se == 0)
    ok = p_count >= 0.05 and z_max <= bonferroni and exact_zero_se
    acceptance_log(
        "1 (supplementary)",
        ok,
        f"{misses} misses vs {n * p_two_sided:.1f} expected by chance (binomial p={p_count:.2f}); "
        f"max |z|={z_max:.2f} (Bonferroni bound {bonferroni:.2f}); zero-SE cells exact={exact_zero_se}",
    )
    assert ok


def test_criterion_2_matching_oracle(acceptance_log):
    rng = np.random.default_rng(0)
    instances = [random_instance(rng, jitter_share=0.6) for _ in range(1000)]
    start = time.perf_counter()
    results = [(match(d, g, 0.5, "hungarian"), match(d, g, 0.5, "greedy")) for d, g in instances]
    elapsed = time.perf_counter() - start
    exact = sum(h.total_iou == brute_force_best(d, g, 0.5) for (h, _), (d, g) in zip(results, instances))
    dominated = sum(gr.total_iou <= h.total_iou for h, gr in results)
    strict = sum(gr.total_iou < h.total_iou for h, gr in results)
    ok = exact == dominated == 1000 and elapsed < 60
    acceptance_log(
        2,
        ok,
        f"hungarian == exhaustive on {exact}/1000, greedy <= hungarian on {dominated}/1000 "
        f"({strict} strictly worse), {elapsed:.2f}s",
    )
    assert ok


@pytest.mark.slow
def test_criterion_3_monte_carlo_rate(acceptance_log):
    rng = np.random.default_rng(0)
    images = tuple(random_pool_image(rng, i, int(rng.integers(3, 9))) for i in range(20))
    ds = Dataset(images, {1: "a", 2: "b"})
    counts = [1, 2, 5, 10, 20, 50, 100]
    rows = sensitivity_sweep(ds, QUERIES["total_false"], SamplerConfig(seed=0), counts, num_seeds=50)
    slope = float(np.polyfit(np.log(counts), np.log([r.qhat_std for r in rows]), 1)[0])
    ok = abs(slope + 0.5) <= 0.1
    acceptance_log(3, ok, f"log-log slope of cross-seed stddev vs N = {slope:.4f} (50 seeds, 20 images)")
    assert ok


def test_criterion_4_degenerate_identity(acceptance_log):
    rng = np.random.default_rng(0)
    exprs = list(QUERIES.values())
    mismatches, checks = 0, 0
    for i in range(100):
        img = random_pool_image(rng, i, int(rng.integers(0, 13)), score_choices=[0.0, 1.0])
        b = lambda d: (d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max)
        truths = tuple(gt(*b(d), cls=d.class_id) for d in img.detections if d.score == 1.0)
        with_gt = ImageRecord(i, img.width, img.height, img.detections, truths)
        expected = ground_truth_hardness_many(with_gt, exprs, SamplerConfig())
        for n in (1, 2, 10, 100):
            got = score_sampling_many(img, exprs, SamplerConfig(num_samples=n, seed=i))
            for (est, se), ex in zip(got, expected):
                checks += 1
                mismatches += not (est == ex and se == 0.0)
    ok = mismatches == 0
    acceptance_log(4, ok, f"{checks - mismatches}/{checks} (image, N, query) cells equal GT hardness with SE 0")
    assert ok


def test_criterion_5_metric_references(acceptance_log):
    rng = np.random.default_rng(0)
    truths = {i: float(v) for i, v in enumerate(rng.permutation(50) * 0.37)}
    identity = ndcg(truths, truths).ndcg == 1.0

    tie_exact = True
    for _ in range(200):
        n = int(rng.integers(2, 30))
        est = {i: float(rng.integers(0, 4)) for i in range(n)}
        q = {i: float(rng.exponential()) for i in range(n)}
        permuted = dict(q)
        for v in set(est.values()):
            group = [k for k in est if est[k] == v]
            permuted.update(zip(group, rng.permutation([q[k] for k in group])))
        tie_exact &= ndcg(est, q).ndcg == ndcg(est, permuted).ndcg

    auroc_ok, tested = True, 0
    while tested < 500:
        n = int(rng.integers(2, 51))
        scores = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.5 else rng.random(n)
        labels = rng.integers(0, 2, n)
        if labels.all() or not labels.any():
            continue
        tested += 1
        auroc_ok &= abs(auroc(scores, labels) - pairwise_auroc(scores, labels)) <= 1e-12

    rho = spearman([1, 2, 3, 4], [1, 3, 2, 4])
    rho_ok = abs(rho - 0.8) <= 1e-12
    ok = identity and tie_exact and auroc_ok and rho_ok
    acceptance_log(
        5,
        ok,
        f"ndcg identity={identity}, tie-permutation bit-exact={tie_exact}, "
        f"auroc==pairwise on {tested} instances={auroc_ok}, spearman={rho!r}",
    )
    assert ok


def test_criterion_6_formula_units(acceptance_log):
    one_hot = entropy([det(0, 0, 1, 1, score=1.0, class_scores=(0.0, 1.0))], "softmax")
    half = entropy([det(0, 0, 1, 1, score=0.5, class_scores=(0.5, 0.5))], "softmax")
    ds = dempster_shafer([det(0, 0, 1, 1, logits=(0.0, 0.0))], "softmax")
    pix = eval_pixeladj([ErrorElement(BoundingBox(0, 0, 640, 480), 1)], image(width=640, height=480))
    occ = eval_occaware([ErrorElement(BoundingBox(10, 10, 20, 20), 1)], [BoundingBox(0, 0, 50, 50)])
    checks = {
        "entropy one-hot": one_hot == 0.0,
        "entropy [0.5,0.5]": abs(half - math.log(2)) <= 1e-12,
        "DS zero logits": ds == 0.5,
        "pixeladj full image": pix == 1.0,
        "occaware inside tp": occ == 1.0,
    }
    ok = all(checks.values())
    acceptance_log(6, ok, ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()))
    assert ok


@pytest.mark.slow
def test_criterion_7_calibrated_separation(acceptance_log):
    names = ["pixeladj_fp", "occaware_fp"]
    queries = {n: QUERIES[n] for n in names}
    wins = {(q, b): 0 for q in names for b in ("entropy", "ds")}
    means = {(q, m): [] for q in names for m in ("ss", "entropy", "ds")}
    start = time.perf_counter()
    seeds = range(20)
    for seed in seeds:
        ds = make_calibrated_dataset(500, seed=seed)
        cfg = SamplerConfig(seed=seed)
        scores = {}
        for method in ("ss", "entropy", "ds"):
            rows = estimate_dataset(ds, queries, method, cfg, with_gt=True)
            for q, qrows in rows_by_query(rows).items():
                est = {r.image_id: r.estimate for r in qrows}
                truth = {r.image_id: r.gt_hardness for r in qrows}
                scores[q, method] = ndcg(est, truth).ndcg
                means[q, method].append(scores[q, method])
        for q, b in wins:
            wins[q, b] += scores[q, "ss"] > scores[q, b]
    elapsed = time.perf_counter() - start
    pvals = {k: binomtest(v, len(seeds), 0.5, alternative="greater").pvalue for k, v in wins.items()}
    ok = all(p < 0.05 for p in pvals.values()) and elapsed < 600
    parts = [
        f"{q} ss>{b} {wins[q, b]}/20 (p={pvals[q, b]:.2g})"
        for q, b in wins
    ]
    avg = ", ".join(f"{q}/{m}={np.mean(v):.3f}" for (q, m), v in means.items())
    acceptance_log(7, ok, "; ".join(parts) + f"; mean nDCG {avg}; {elapsed:.0f}s")
    assert ok


def test_criterion_8_cumulative_curve(acceptance_log):
    ds = make_calibrated_dataset(200, seed=0)
    rows = estimate_dataset(ds, {"q": QUERIES["total_fp"]}, "gt", SamplerConfig())
    truth = {r.image_id: r.estimate for r in rows}
    total = math.fsum(truth.values())
    oracle = cumulative_hardness_curve(truth, truth)
    rng = np.random.default_rng(0)
    dominated = 0
    for _ in range(100):
        random_est = dict(zip(truth, rng.permutation(len(truth)).astype(float)))
        curve = cumulative_hardness_curve(random_est, truth)
        dominated += all(a.cumulative >= b.cumulative for a, b in zip(oracle, curve))
    endpoint = abs(oracle[-1].cumulative - total) <= 1e-9
    diagonal = [p.diagonal for p in oracle] == [total * k / len(truth) for k in range(len(truth) + 1)]
    ok = dominated == 100 and endpoint and diagonal
    acceptance_log(
        8, ok, f"GT curve dominates {dominated}/100 random orderings, endpoint ok={endpoint}, diagonal emitted={diagonal}"
    )
    assert ok


def _run_golden(cmd, out, jobs):
    argv = [cmd, "--annotations", "tiny_annotations.json", "--detections", "tiny_detections.json",
            "--seed", "7", "--jobs", str(jobs), "-o", str(out)]
    assert main(argv) == 0


def test_criterion_9_golden_files(acceptance_log, tmp_path, monkeypatch):
    monkeypatch.chdir(DATA)
    mismatched = []
    compared = 0
    for cmd in ("rank", "evaluate", "match"):
        golden = DATA / "golden" / cmd
        outputs = []
        for label, jobs in (("a", 1), ("b", 1), ("c", 2)):
            out = tmp_path / f"{cmd}_{label}"
            _run_golden(cmd, out, jobs)
            outputs.append(out)
        names = sorted(p.name for p in golden.iterdir())
        for out in outputs:
            if sorted(p.name for p in out.iterdir()) != names:
                mismatched.append(f"{out.name}: file set differs")
                continue
            _, diff, errors = filecmp.cmpfiles(golden, out, names, shallow=False)
            compared += len(names)
            mismatched.extend(f"{out.name}/{n}" for n in diff + errors)
    ok = not mismatched
    acceptance_log(9, ok, f"{compared - len(mismatched)}/{compared} outputs byte-identical to golden (runs x2, jobs 1 and 2)")
    assert ok, mismatched[:10]


def test_criterion_10_integration(acceptance_log, tmp_path):
    ann = os.environ.get("HARDEST_INTEGRATION_ANNOTATIONS")
    dets = os.environ.get("HARDEST_INTEGRATION_DETECTIONS")
    if not (ann and dets):
        acceptance_log(10, None, "optional; set HARDEST_INTEGRATION_ANNOTATIONS and HARDEST_INTEGRATION_DETECTIONS")
        pytest.skip("integration dumps not supplied")
    expected = json.loads(os.environ.get("HARDEST_INTEGRATION_EXPECTED", '{"total_fp": {"ss": 0.88}}'))
    argv = ["evaluate", "--annotations", ann, "--detections", dets, "-o", str(tmp_path)]
    matcher = os.environ.get("HARDEST_INTEGRATION_MATCHER")
    if matcher:
        argv += ["--matcher", matcher]
    for name in expected:
        argv += ["--query", f"{name}={DEFAULT_QUERIES.get(name, name)}"]
    assert main(argv) == 0
    with open(tmp_path / "evaluate_ndcg.csv", newline="") as fh:
        grid = {r["query"]: r for r in csv.DictReader(fh)}
    deltas = {(q, m): float(grid[q][m]) - v for q, per in expected.items() for m, v in per.items()}
    ok = all(abs(d) <= 0.02 for d in deltas.values())
    acceptance_log(10, ok, ", ".join(f"{q}/{m} delta {d:+.3f}" for (q, m), d in deltas.items()))
    assert ok
