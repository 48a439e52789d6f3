"""Command-line entry point: ``difac <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import DifacError
from .harness import (SWEEP_KEYS, ExperimentConfig, find_manifests, parse_value, read_texts,
                      report, run, set_path, sweep)

# flag -> config key path
FLAG_KEYS = {
    "dataset": "dataset",
    "data_dir": "data_dir",
    "method": "method",
    "k": "k",
    "diff_method": "diff_method",
    "perturb_frac": "perturb_frac",
    "aux": "aux",
    "aux_texts": "aux_texts",
    "mask_ratio": "mask_ratio",
    "out": "out",
    "per_class": "split.per_class",
    "tau0": "loop.tau0",
    "iters": "loop.iters",
    "lambda_acc": "loop.lambda_acc",
    "lambda_pseudo": "loop.lambda_pseudo",
    "rank": "loop.rank",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "hidden": "train.hidden",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--dataset")
    p.add_argument("--data-dir")
    p.add_argument("--method", choices=["gcn", "self_train", "intersection", "difac"])
    p.add_argument("--k", type=int)
    p.add_argument("--diff-method", choices=["marker", "reverse", "exchange"])
    p.add_argument("--perturb-frac", type=float)
    p.add_argument("--aux", help="none | file:PATH | stub:ACC | remote")
    p.add_argument("--aux-texts", help="JSON-lines {node_id, text} for remote descriptions")
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--out")
    p.add_argument("--per-class", type=int)
    p.add_argument("--tau0", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--lambda-acc", type=float)
    p.add_argument("--lambda-pseudo", type=float)
    p.add_argument("--rank", choices=["min", "max", "mean"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--seed", type=int, action="append", dest="seeds",
                   help="repeatable; defaults to seeds 0-4")
    p.add_argument("--jobs", type=int, default=1, help="seeds run in parallel processes")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key path, e.g. loop.jaccard_stop=0.95")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    doc = ExperimentConfig.load(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            set_path(doc, key, value)
    if args.seeds:
        doc["seeds"] = args.seeds
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise DifacError(f"--set expects KEY=VALUE, got {item!r}")
        set_path(doc, key, parse_value(value))
    return ExperimentConfig.from_dict(doc)


def cmd_train(args) -> int:
    config = config_from_args(args)
    manifest = run(config, args.jobs)
    print(report([manifest]))
    print(f"manifest: {Path(config.out) / manifest.config_digest / 'manifest.json'}")
    return 1 if manifest.failures else 0


def cmd_sweep(args) -> int:
    base = config_from_args(args)
    values = [parse_value(v) for v in args.values.split(",")]
    methods = args.methods.split(",") if args.methods else None
    text = sweep(args.kind, base, values, methods, path=args.csv, jobs=args.jobs)
    if not args.csv:
        print(text, end="")
    return 0


def cmd_theory(args) -> int:
    from .theory import JuryParams, exclusion_gain, grid_csv, risk_delta_demo

    text = grid_csv(args.step, args.mc_trials, args.seed)
    if args.csv:
        Path(args.csv).write_text(text)
    rows = text.strip().splitlines()[1:]
    gains = [float(r.split(",")[5]) for r in rows]
    print(f"grid points: {len(gains)}  min gain: {min(gains):.4f}  "
          f"gain(0.7, 0.8, 0.5) = {exclusion_gain(JuryParams(0.7, 0.8, 0.5)):.4f}")
    res = risk_delta_demo(seed=args.seed)
    print(f"risk change, correct pseudo-label: {res.mean_correct:+.4f} "
          f"(mean |.| {res.mean_abs_correct:.4f})")
    print(f"risk change, wrong pseudo-label:   {res.mean_wrong:+.4f}")
    return 0


def cmd_conceit(args) -> int:
    base = config_from_args(args)
    for method in args.methods.split(","):
        doc = base.to_dict()
        doc["method"] = method
        manifest = run(ExperimentConfig.from_dict(doc), args.jobs)
        for rec in manifest.load_records():
            value = "n/a" if rec.conceit is None else f"{rec.conceit:.4f}"
            print(f"{method:<14} seed {rec.seed}: conceit {value}  test acc {rec.test_acc:.4f}")
    return 0


def cmd_fetch_aux(args) -> int:
    from .auxiliary import ProviderConfig, export_vectors, fetch_descriptions
    from .graph import load_named_dataset

    graph = load_named_dataset(args.data_dir, args.dataset)
    overrides = {"cache_path": args.cache} if args.cache else {}
    if args.endpoint:
        overrides["endpoint"] = args.endpoint
    table = fetch_descriptions(ProviderConfig.from_env(**overrides), graph, read_texts(args.texts))
    export_vectors(table, args.output)
    print(f"wrote {len(table.node_ids)} vectors to {args.output} "
          f"({table.requests} provider requests)")
    return 0


def cmd_report(args) -> int:
    manifests = find_manifests(args.out)
    if not manifests:
        print(f"no runs under {args.out}", file=sys.stderr)
        return 1
    print(report(manifests))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="difac", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one method over the configured seeds")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="vary one setting and collect a tidy CSV")
    _add_config_flags(p)
    p.add_argument("--kind", required=True, choices=sorted(SWEEP_KEYS))
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--methods", help="comma separated; defaults to --method")
    p.add_argument("--csv", help="output path (stdout if omitted)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("theory", help="posterior grid and risk-change demonstration")
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--mc-trials", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("conceit", help="compare conceit across methods")
    _add_config_flags(p)
    p.add_argument("--methods", default="intersection,difac")
    p.set_defaults(func=cmd_conceit)

    p = sub.add_parser("fetch-aux", help="fetch description vectors from a provider")
    p.add_argument("--dataset", required=True)
    p.add_argument("--data-dir", default="data")
    p.add_argument("--texts", required=True, help="JSON-lines {node_id, text}")
    p.add_argument("--output", required=True)
    p.add_argument("--endpoint")
    p.add_argument("--cache")
    p.set_defaults(func=cmd_fetch_aux)

    p = sub.add_parser("report", help="summarize every run under an output directory")
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DifacError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
