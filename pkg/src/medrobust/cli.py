"""Command-line entry point: ``medrobust <subcommand> ...``.

Exit codes: 0 success, 1 invalid input (manifest, arguments), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import aggregate, pipeline
from .manifest import ManifestError, load_manifest, validate_manifest

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class InvalidInput(Exception):
    pass


def _levels(text: str) -> tuple:
    try:
        levels = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from None
    if not levels or any(l not in aggregate.LEVELS for l in levels):
        raise argparse.ArgumentTypeError(f"levels must be in 1..5, got {text!r}")
    return levels


def _id_list(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _run_args(p):
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", default="calibration_cache.json")
    p.add_argument("--levels", type=_levels, default=aggregate.LEVELS)
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--perturbations", type=_id_list, default=None,
                   help="comma-separated perturbation ids (default: all applicable)")
    p.add_argument("--max-iterations", type=int, default=30)
    p.add_argument("--dataset-level-calibration", action="store_true",
                   help="calibrate a 32-sample subset and apply the median t to all samples")
    p.add_argument("--max-samples", type=int, default=None,
                   help="seeded uniform subset of this many samples (default: all)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medrobust", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-manifest", help="check that a manifest and its files are usable")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("calibrate", help="fill the calibration cache for a dataset")
    _run_args(p)

    p = sub.add_parser("perturb", help="write perturbed images, ground truth and a ledger")
    _run_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--no-co-transform", action="store_true",
                   help="do not transform masks and boxes under geometric perturbations")

    p = sub.add_parser("score", help="score a predictions JSONL file against ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--task", required=True, choices=list(aggregate.PRIMARY_METRIC))
    p.add_argument("--model", default="model")
    p.add_argument("--strategy", default="default")
    p.add_argument("--dataset", default=None)
    p.add_argument("--ledger", default=None, help="perturbation ledger for convergence flags")
    p.add_argument("--threshold", type=float, default=0.5, help="box IoU threshold")
    p.add_argument("--out", required=True, help="records CSV to write")

    p = sub.add_parser("report", help="aggregate metric records into drop tables and rankings")
    p.add_argument("--records", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default=None, help="metric name (default: each task's primary)")
    p.add_argument("--top-k", type=int, default=15)
    p.add_argument("--include-unconverged", action=argparse.BooleanOptionalAction, default=True)
    return parser


def _manifest(path):
    try:
        m = load_manifest(path)
    except ManifestError as exc:
        raise InvalidInput(str(exc)) from None
    problems = validate_manifest(m)
    return m, problems


def _config(args) -> pipeline.RunConfig:
    if args.workers < 1:
        raise InvalidInput("--workers must be >= 1")
    if args.max_samples is not None and args.max_samples < 1:
        raise InvalidInput("--max-samples must be >= 1")
    return pipeline.RunConfig(
        master_seed=args.seed, levels=args.levels, perturbations=args.perturbations,
        workers=args.workers, cache_path=args.cache, output_root=getattr(args, "out", "out"),
        dataset_level=args.dataset_level_calibration,
        co_transform=not getattr(args, "no_co_transform", False),
        max_iterations=args.max_iterations, max_samples=args.max_samples,
    )


def _dispatch(args) -> int:
    if args.command == "validate-manifest":
        m, problems = _manifest(args.manifest)
        for p in problems:
            print(p, file=sys.stderr)
        if problems:
            return EXIT_INVALID
        print(f"{m.dataset_id}: {len(m)} samples, modality {m.modality.value}: ok")
        return EXIT_OK

    if args.command in ("calibrate", "perturb"):
        m, problems = _manifest(args.manifest)
        if problems:
            raise InvalidInput("; ".join(problems))
        config = _config(args)
        try:
            pipeline.applicable(m, config)
        except ValueError as exc:
            raise InvalidInput(str(exc)) from None
        if args.command == "calibrate":
            _, summary = pipeline.cmd_calibrate(m, config)
            print(summary)
        else:
            res = pipeline.cmd_perturb(m, config)
            print(f"{res['rows']} perturbed images; ledger {res['ledger']}")
        return EXIT_OK

    if args.command == "score":
        for path in (args.predictions, args.ground_truth):
            if not os.path.exists(path):
                raise InvalidInput(f"file not found: {path}")
        records = pipeline.cmd_score(args.predictions, args.ground_truth, args.task,
                                     model=args.model, strategy=args.strategy, dataset=args.dataset,
                                     ledger_path=args.ledger, threshold=args.threshold)
        parent = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(parent, exist_ok=True)
        aggregate.write_records(records, args.out)
        print(f"{len(records)} metric records -> {args.out}")
        return EXIT_OK

    records = []
    for path in args.records:
        if not os.path.exists(path):
            raise InvalidInput(f"file not found: {path}")
        records.extend(aggregate.read_records(path))
    report = pipeline.cmd_report(records, args.out, include_unconverged=args.include_unconverged,
                                 metric_name=args.metric, top_k=args.top_k)
    for n in report.notices:
        print(f"note: {n}", file=sys.stderr)
    if report.top_k_summary:
        print(f"top-{len(report.ranked_perturbations)}: {report.top_k_summary}")
    print(f"report written to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
