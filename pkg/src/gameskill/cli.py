"""``gameskill`` command line: synth, preprocess, split, train, eval, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiments import VARIANTS, ExperimentConfig, collect_report, evaluate_run, load_dataset, run_experiment
from .manifest import load_manifest
from .splitter import SplitMode, make_split, verify_split
from .synthgen import generate_corpus

logger = logging.getLogger("gameskill")


def _config_options(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument("--config", required=required, help="INI file with [synth], [train], ... sections")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    parser.add_argument("--seed", type=int, help="set every seed in the config")


def _split_mode(text: str) -> SplitMode:
    key = text.strip().upper().replace("-", "_")
    if not key.endswith("_BASED"):
        key += "_BASED"
    try:
        return SplitMode(key)
    except ValueError:
        raise argparse.ArgumentTypeError(f"split mode must be 'video' or 'user', got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gameskill", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="write the default configuration")
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _config_options(p)
    p.add_argument("--out", required=True, help="corpus directory")

    p = sub.add_parser("preprocess", help="fill the preprocessing cache")
    _config_options(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", help="cache directory (default: <corpus>/cache)")

    p = sub.add_parser("split", help="write a train/val/test assignment")
    _config_options(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", type=_split_mode, required=True, help="video or user")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", aliases=["experiment"], help="run one variant end to end")
    _config_options(p, required=False)
    p.add_argument("--list-variants", action="store_true", help="print the variant names and exit")
    p.add_argument("--manifest")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--split-mode", type=_split_mode, default=SplitMode.USER_BASED)
    p.add_argument("--runs", default="runs", help="root for run directories")
    p.add_argument("--cache")
    p.add_argument("--force", action="store_true", help="retrain even if the run directory is complete")

    p = sub.add_parser("eval", help="re-score a finished run from its checkpoint")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache")
    p.add_argument("--subset", default="TEST", choices=["TRAIN", "VAL", "TEST"])
    p.add_argument("--checkpoint", default="best", choices=["best", "last"])

    p = sub.add_parser("report", help="merge run directories into one comparison table")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def resolve_config(args, parser) -> ExperimentConfig:
    if args.config is None:
        parser.error("--config is required")
    try:
        config = ExperimentConfig.load(args.config).with_overrides(args.overrides)
        return config.with_seed(args.seed) if args.seed is not None else config
    except (FileNotFoundError, ValueError, TypeError) as exc:
        parser.error(str(exc))


def _cache_dir(args, manifest_path) -> Path:
    return Path(args.cache) if args.cache else Path(manifest_path).parent / "cache"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "config":
        ExperimentConfig().save(args.out)
        return 0

    if args.command == "report":
        table = collect_report(args.runs, args.out)
        for row in table:
            print(f"{row['Model']:<32} {row['Precision']} {row['Recall']} {row['F1']}")
        return 0

    if args.command == "eval":
        report = evaluate_run(args.run, load_manifest(args.manifest), _cache_dir(args, args.manifest), args.subset,
                              args.checkpoint)
        print(json.dumps(report.to_json(), indent=1))
        return 0

    if args.command in ("train", "experiment") and args.list_variants:
        for name, variant in VARIANTS.items():
            print(f"{name}\t{variant.label}")
        return 0

    config = resolve_config(args, parser)

    if args.command == "synth":
        corpus = generate_corpus(config.synth, args.out)
        print(corpus.manifest_path)
        return 0

    manifest = load_manifest(args.manifest)
    if args.command == "preprocess":
        load_dataset(manifest, config, _cache_dir(args, args.manifest))
        print(f"cached {len(manifest)} samples")
        return 0

    if args.command == "split":
        split = make_split(manifest, args.mode, config.split.ratios, config.split.seed)
        split.save(args.out)
        check = verify_split(split, manifest)
        print(json.dumps(check.as_dict(), indent=1))
        if not check.passed:
            logger.warning("split misses the stratification tolerance (max deviation %.3f)", check.max_deviation)
        return 0

    # train / experiment
    if args.manifest is None or args.variant is None:
        parser.error("train needs --manifest and --variant")
    result = run_experiment(args.variant, args.split_mode, manifest, config, args.runs,
                            cache_dir=_cache_dir(args, args.manifest), force=args.force)
    test = result.metrics["test"]
    print(f"{result.run_dir}\tP={test['weighted_precision']:.3f} R={test['weighted_recall']:.3f} "
          f"F1={test['weighted_f1']:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
