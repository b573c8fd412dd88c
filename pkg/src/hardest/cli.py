"""Command-line entry point: ``hardest <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings

from . import metrics
from .estimators import (
    METHODS,
    ConfigurationError,
    EnumerationInfeasible,
    MissingGroundTruth,
    SamplerConfig,
    estimate_dataset,
    rows_by_query,
)
from .matching import CROWD_POLICIES, MATCHERS, match
from .model import (
    SCORE_MODES,
    IngestError,
    Dataset,
    _image_sort_key,
    apply_class_remap,
    attach_detections,
    clip_boxes,
    filter_positive,
    load_annotations,
    load_detections,
    load_remap,
)
from .query import DEFAULT_QUERIES, QueryBindError, QuerySyntaxError, bind_query, load_query_file, parse_query, query_slug
from .report import OutputBatch

logger = logging.getLogger("hardest")

USER_ERRORS = (
    IngestError,
    ConfigurationError,
    EnumerationInfeasible,
    MissingGroundTruth,
    QueryBindError,
    QuerySyntaxError,
    OSError,
    ValueError,
    KeyError,
)


class UsageError(Exception):
    pass


def _default_seed() -> int:
    env = os.environ.get("HARDEST_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"HARDEST_SEED must be an integer, got {env!r}") from None


def _ratios(text: str) -> list[float]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        value = float(part.rstrip("%")) / (100.0 if part.endswith("%") else 1.0)
        if not 0.0 < value < 1.0:
            raise argparse.ArgumentTypeError(f"hard ratio {part!r} must lie strictly between 0 and 1")
        out.append(value)
    if not out:
        raise argparse.ArgumentTypeError("no hard ratios given")
    return out


def _int_list(text: str) -> list[int]:
    try:
        values = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values) or values != sorted(values):
        raise argparse.ArgumentTypeError("sample counts must be positive and ascending")
    return values


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, *, detections_required=True, queries=True, method=None):
    g = p.add_argument_group("inputs")
    g.add_argument("--detections", required=detections_required, help="COCO results JSON")
    g.add_argument("--annotations", help="COCO annotation JSON (ground truth)")
    g.add_argument("--images", help="COCO-style JSON with only images/categories, for runs without annotations")
    g.add_argument("--remap", help="class remap JSON {source: target|null}")
    if queries:
        g.add_argument("--query", action="append", default=[], help="query expression, optionally 'name=expr'; repeatable")
        g.add_argument("--query-file", help="file of 'name = expr' lines")
    e = p.add_argument_group("estimation")
    if method is not None:
        e.add_argument("--method", choices=METHODS, default=method)
    e.add_argument("--samples", type=int, default=10, help="Monte Carlo samples N (default 10)")
    e.add_argument("--eta", type=float, default=0.05, help="positive-detection threshold (default 0.05)")
    e.add_argument("--floor", type=float, default=0.05, help="pool floor applied at ingest (default 0.05)")
    e.add_argument("--iou-threshold", type=float, default=0.5, dest="tau")
    e.add_argument("--matcher", choices=MATCHERS, default="hungarian")
    e.add_argument("--seed", type=int, default=None, help="RNG seed (falls back to $HARDEST_SEED, then 0)")
    e.add_argument("--score-mode", choices=SCORE_MODES, default="one_vs_all")
    e.add_argument("--crowd-policy", choices=CROWD_POLICIES, default="ignore")
    e.add_argument("--clip-boxes", action="store_true", help="clip boxes to the image frame")
    e.add_argument("--lenient", action="store_true", help="skip detections of unknown images instead of failing")
    e.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--output-dir", "-o", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hardest", description="Query-based hard-image mining for object detectors.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("rank", help="rank images by estimated hardness")
    _add_common(p, method="ss")
    p.add_argument("--bins", type=int, default=10, help="hardness histogram bins")

    p = sub.add_parser("classify", help="hard-vs-easy AUROC per hard ratio (needs annotations)")
    _add_common(p, method="ss")
    p.add_argument("--hard-ratios", type=_ratios, default=list(metrics.DEFAULT_RATIOS))

    p = sub.add_parser("evaluate", help="nDCG / mAUROC grid of ss, entropy and ds (needs annotations)")
    _add_common(p)
    p.add_argument("--hard-ratios", type=_ratios, default=list(metrics.DEFAULT_RATIOS))

    p = sub.add_parser("correlate", help="Spearman correlation between queries")
    _add_common(p, method="ss")

    p = sub.add_parser("sensitivity", help="metrics as a function of the number of samples")
    _add_common(p)
    p.add_argument("--sample-counts", type=_int_list, default=[1, 2, 5, 10, 20, 50, 100])
    p.add_argument("--num-seeds", type=int, default=5)
    p.add_argument("--hard-ratios", type=_ratios, default=list(metrics.DEFAULT_RATIOS))

    p = sub.add_parser("diagnostics", help="confidence and score-variance histograms")
    _add_common(p, queries=False)
    p.add_argument("--bins", type=int, default=10)

    p = sub.add_parser("match", help="dump tp/fp/fn associations against ground truth")
    _add_common(p, queries=False)

    p = sub.add_parser("synth", help="write a synthetic calibrated dataset")
    p.add_argument("--num-images", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--score-mode", choices=SCORE_MODES, default="one_vs_all")
    p.add_argument("--prefix", default="synth")
    p.add_argument("--output-dir", "-o", required=True)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _echo(args) -> dict:
    skip = {"jobs", "output_dir", "verbose", "func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _sampler(args) -> SamplerConfig:
    return SamplerConfig(
        num_samples=args.samples,
        eta=args.eta,
        seed=args.seed,
        tau=args.tau,
        matcher=args.matcher,
        crowd_policy=args.crowd_policy,
    )


def _load(args, need_gt: bool) -> Dataset:
    if args.annotations:
        dataset = load_annotations(args.annotations, args.score_mode)
    elif args.images:
        if need_gt:
            raise UsageError(f"'{args.command}' needs --annotations")
        dataset = load_annotations(args.images, args.score_mode)
    else:
        raise UsageError("--annotations or --images is required (image sizes are needed for area-based queries)")
    if need_gt and not dataset.has_ground_truth:
        raise UsageError(f"{args.annotations}: file has no 'annotations' list, but '{args.command}' needs ground truth")
    if args.detections:
        pools = load_detections(args.detections, args.floor, args.score_mode)
        dataset = attach_detections(dataset, pools, strict=not args.lenient)
    if args.remap:
        dataset = apply_class_remap(dataset, load_remap(args.remap))
    if args.clip_boxes:
        dataset = clip_boxes(dataset)
    return dataset.sorted()


def _queries(args, dataset: Dataset) -> dict:
    named: dict[str, str] = {}
    if args.query_file:
        named.update(load_query_file(args.query_file))
    for text in args.query:
        name, _, expr = text.partition("=")
        if _ and name.strip().isidentifier() and not expr.startswith("="):
            name, text = name.strip(), expr
        else:
            name = query_slug(parse_query(text))
        if name in named:
            raise UsageError(f"duplicate query name {name!r}")
        named[name] = text
    if not named:
        named = dict(DEFAULT_QUERIES)
    return {name: bind_query(parse_query(text), dataset.categories) for name, text in named.items()}


def _estimates(rows) -> dict:
    return {r.image_id: r.estimate for r in rows}


def _truths(rows) -> dict:
    return {r.image_id: r.gt_hardness for r in rows}


# ---------------------------------------------------------------------------
# commands


def cmd_rank(args) -> OutputBatch:
    dataset = _load(args, need_gt=args.method == "gt")
    queries = _queries(args, dataset)
    config = _sampler(args)
    with_gt = dataset.has_ground_truth
    rows = estimate_dataset(dataset, queries, args.method, config, with_gt=with_gt, jobs=args.jobs)
    batch = OutputBatch(args.output_dir, _echo(args))
    batch.add_table(
        "report",
        ["image_id", "method", "query_name", "query_text", "estimate", "std_error", "gt_hardness", "N", "eta", "tau", "seed"],
        [
            [r.image_id, r.method, r.query_name, r.query_text, r.estimate, r.std_error, r.gt_hardness,
             r.num_samples, r.eta, r.tau, r.seed]
            for r in rows
        ],
    )
    summary = {}
    for name, qrows in rows_by_query(rows).items():
        est = _estimates(qrows)
        gt = _truths(qrows) if with_gt else None
        order = sorted(est, key=lambda k: (-est[k], _image_sort_key(k)))
        batch.add_table(
            f"rank_{name}",
            ["rank", "image_id", "estimate", "gt"],
            [[i + 1, k, est[k], gt[k] if gt else None] for i, k in enumerate(order)],
        )
        q_summary = {"query": qrows[0].query_text}
        hist = metrics.hardness_histogram(est, args.bins)
        batch.add_table(
            f"hist_estimate_{name}",
            ["bin_lo", "bin_hi", "count"],
            [[h.bin_lo, h.bin_hi, h.count] for h in hist.rows],
            {"zero_count": hist.zero_count, "total": hist.total, "mean": hist.mean},
        )
        if gt:
            result = metrics.ndcg(est, gt)
            q_summary.update(ndcg=result.ndcg, dcg=result.dcg, dcg_gt=result.dcg_gt)
            ghist = metrics.hardness_histogram(gt, args.bins)
            batch.add_table(
                f"hist_gt_{name}",
                ["bin_lo", "bin_hi", "count"],
                [[h.bin_lo, h.bin_hi, h.count] for h in ghist.rows],
                {"zero_count": ghist.zero_count, "total": ghist.total, "mean": ghist.mean},
            )
            curve = metrics.cumulative_hardness_curve(est, gt)
            batch.add_table(
                f"curve_{name}",
                ["budget", "cumulative", "diagonal"],
                [[c.budget, c.cumulative, c.diagonal] for c in curve],
            )
        summary[name] = q_summary
    batch.add_json("summary.json", {"command": "rank", "config": _echo(args), "queries": summary})
    return batch


def _classification_rows(name, method, est, gt, ratios):
    res = metrics.mauroc(est, gt, ratios)
    rows = [[name, method, c.ratio, c.t_hard, c.n_hard, c.n_easy, c.auroc] for c in res.per_ratio]
    rows.append([name, method, "mean", None, None, None, res.mauroc])
    return res, rows


def cmd_classify(args) -> OutputBatch:
    dataset = _load(args, need_gt=True)
    queries = _queries(args, dataset)
    rows = estimate_dataset(dataset, queries, args.method, _sampler(args), with_gt=True, jobs=args.jobs)
    table, summary = [], {}
    for name, qrows in rows_by_query(rows).items():
        res, qtable = _classification_rows(name, args.method, _estimates(qrows), _truths(qrows), args.hard_ratios)
        table.extend(qtable)
        summary[name] = res.mauroc
    batch = OutputBatch(args.output_dir, _echo(args))
    batch.add_table(
        "classify", ["query", "method", "ratio", "t_hard", "n_hard", "n_easy", "auroc"], table, {"mauroc": summary}
    )
    return batch


def cmd_evaluate(args) -> OutputBatch:
    dataset = _load(args, need_gt=True)
    queries = _queries(args, dataset)
    config = _sampler(args)
    methods = ("entropy", "ds", "ss")
    ndcg_grid: dict[str, dict[str, float]] = {q: {} for q in queries}
    auroc_grid: dict[str, dict[str, float]] = {q: {} for q in queries}
    for method in methods:
        rows = estimate_dataset(dataset, queries, method, config, with_gt=True, jobs=args.jobs)
        for name, qrows in rows_by_query(rows).items():
            est, gt = _estimates(qrows), _truths(qrows)
            ndcg_grid[name][method] = metrics.ndcg(est, gt).ndcg
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", metrics.UndefinedMetricWarning)
                auroc_grid[name][method] = metrics.mauroc(est, gt, args.hard_ratios).mauroc
    batch = OutputBatch(args.output_dir, _echo(args))
    header = ["query", *methods]
    batch.add_table("evaluate_ndcg", header, [[n, *(ndcg_grid[n][m] for m in methods)] for n in queries])
    batch.add_table("evaluate_mauroc", header, [[n, *(auroc_grid[n][m] for m in methods)] for n in queries])
    return batch


def cmd_correlate(args) -> OutputBatch:
    dataset = _load(args, need_gt=args.method == "gt")
    queries = _queries(args, dataset)
    rows = estimate_dataset(dataset, queries, args.method, _sampler(args), jobs=args.jobs)
    scores = {name: _estimates(qrows) for name, qrows in rows_by_query(rows).items()}
    names, mat = metrics.spearman_matrix(scores)
    batch = OutputBatch(args.output_dir, _echo(args))
    batch.add_table("correlation", ["query", *names], [[n, *(float(v) for v in mat[i])] for i, n in enumerate(names)])
    return batch


def cmd_sensitivity(args) -> OutputBatch:
    dataset = _load(args, need_gt=False)
    queries = _queries(args, dataset)
    config = _sampler(args)
    table = []
    for name, expr in queries.items():
        for r in metrics.sensitivity_sweep(
            dataset, expr, config, args.sample_counts, args.num_seeds, args.hard_ratios, jobs=args.jobs
        ):
            table.append([name, r.num_samples, r.ndcg_mean, r.ndcg_std, r.mauroc_mean, r.mauroc_std, r.qhat_std])
    batch = OutputBatch(args.output_dir, _echo(args))
    batch.add_table(
        "sensitivity", ["query", "N", "ndcg_mean", "ndcg_std", "mauroc_mean", "mauroc_std", "qhat_std"], table
    )
    return batch


def cmd_diagnostics(args) -> OutputBatch:
    dataset = _load(args, need_gt=False)
    config = _sampler(args)
    batch = OutputBatch(args.output_dir, _echo(args))
    var = metrics.variance_histogram(dataset, args.bins)
    batch.add_table("variance_histogram", ["bin_lo", "bin_hi", "count"], [[h.bin_lo, h.bin_hi, h.count] for h in var])
    if dataset.has_ground_truth:
        conf = metrics.confidence_histogram(dataset, config, args.bins)
        batch.add_table(
            "confidence_histogram",
            ["bin_lo", "bin_hi", "count", "tp", "precision"],
            [[h.bin_lo, h.bin_hi, h.count, h.tp, h.precision] for h in conf],
        )
    return batch


def cmd_match(args) -> OutputBatch:
    dataset = _load(args, need_gt=True)
    config = _sampler(args)
    names = dataset.categories
    table = []
    for rec in dataset.images:
        positive = filter_positive(rec.detections, config.eta)
        m = match(positive, rec.ground_truths, config.tau, config.matcher, config.crowd_policy)
        events = [(p.det, p.gt, "tp", p.iou, positive[p.det].class_id) for p in m.tp_pairs]
        events += [(i, None, "fp", None, positive[i].class_id) for i in m.fp_indices]
        events += [(i, None, "ignored", None, positive[i].class_id) for i in m.ignored_det]
        events += [(None, j, "fn", None, rec.ground_truths[j].class_id) for j in m.fn_indices]
        for det, gt, kind, iou_val, cls in events:
            table.append([rec.image_id, kind, det, gt, iou_val, names.get(cls, cls)])
    batch = OutputBatch(args.output_dir, _echo(args))
    batch.add_table("match", ["image_id", "kind", "det_index", "gt_index", "iou", "class"], table)
    return batch


def cmd_synth(args) -> None:
    from .synth import make_calibrated_dataset, write_coco

    dataset = make_calibrated_dataset(args.num_images, args.seed, score_mode=args.score_mode)
    ann, det = write_coco(dataset, args.output_dir, args.prefix)
    print(ann)
    print(det)


COMMANDS = {
    "rank": cmd_rank,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
    "correlate": cmd_correlate,
    "sensitivity": cmd_sensitivity,
    "diagnostics": cmd_diagnostics,
    "match": cmd_match,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.seed is None:
            args.seed = _default_seed()
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        batch = COMMANDS[args.command](args)
        if batch is not None:
            for path in batch.commit():
                logger.info("wrote %s", path)
    except UsageError as exc:
        print(f"hardest {args.command}: {exc}", file=sys.stderr)
        return 2
    except USER_ERRORS as exc:
        print(f"hardest {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
