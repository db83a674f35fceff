"""Command-line entry point: gen-data, train, eval, infer, compare."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .data import Organ, Domain, generate_dataset, load_dataset, save_dataset, stratified_kfold
from .harness import compare_regimes, eval_run, infer_run, train_run
from .inference import ThresholdTable


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="INI config file")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--out-dir", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ftuseg",
        description="Synthetic-tile segmentation experiments with switched auxiliary losses.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset to disk")
    _add_common(p)

    p = sub.add_parser("train", help="train one run and write metrics + checkpoint")
    _add_common(p)
    p.add_argument("--regime", type=str, default=None,
                   help="normal | single[:stage] | switched[:from:to[:fraction]]")
    p.add_argument("--fold", type=int, default=None, help="validation fold index")
    p.add_argument("--epochs", type=int, default=None, help="total epochs override")
    p.add_argument("--block-type", type=str, default=None, choices=["attention", "conv"])

    p = sub.add_parser("eval", help="evaluate a checkpoint with TTA and thresholds")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data-dir", type=Path, default=None,
                   help="dataset directory (defaults to regenerating the config's val fold)")
    p.add_argument("--fold", type=int, default=None)

    p = sub.add_parser("infer", help="predict masks and write an RLE submission CSV")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data-dir", type=Path, default=None)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--write-masks", action="store_true", help="also dump predicted PGM masks")

    p = sub.add_parser("compare", help="train all regimes on shared data and tabulate")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--block-types", type=str, default="attention",
                   help="comma-separated subset of: attention,conv")

    return parser


def _threshold_table(config: RunConfig) -> ThresholdTable:
    overrides = {
        (Organ(o), Domain(d)): v for (o, d), v in config.threshold_overrides.items()
    }
    return ThresholdTable.default().with_overrides(overrides)


def _eval_samples_for(config: RunConfig, data_dir: Path | None):
    if data_dir is not None:
        return load_dataset(data_dir)
    samples = generate_dataset(config.samples_per_organ, config.image_size, config.seed)
    folds = stratified_kfold(samples, config.k_folds, config.seed)
    val_ids = set(folds[config.fold])
    return [s for s in samples if s.sid in val_ids]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            config = load_config(args.config, seed=args.seed)
            samples = generate_dataset(
                config.samples_per_organ, config.image_size, config.seed
            )
            manifest = save_dataset(args.out_dir, samples)
            print(f"wrote {len(samples)} samples, manifest at {manifest}")
        elif args.command == "train":
            config = load_config(
                args.config, seed=args.seed, regime=args.regime, fold=args.fold,
                total_epochs=args.epochs, block_type=args.block_type,
            )
            log = train_run(config, args.out_dir)
            best = max(r.val_dice_mean_per_image for r in log.rows)
            print(f"best val dice {best:.4f}; artifacts in {args.out_dir}")
        elif args.command == "eval":
            config = load_config(args.config, seed=args.seed, fold=args.fold)
            samples = _eval_samples_for(config, args.data_dir)
            groups, _ = eval_run(
                args.checkpoint, samples, _threshold_table(config), args.out_dir
            )
            for g in groups:
                print(f"{g.organ.value:22s} {g.domain.value:12s} n={g.count:3d} dice={g.mean_dice:.4f}")
        elif args.command == "infer":
            config = load_config(args.config, seed=args.seed, fold=args.fold)
            samples = _eval_samples_for(config, args.data_dir)
            rows = infer_run(
                args.checkpoint, samples, _threshold_table(config),
                args.out_dir, write_masks=args.write_masks,
            )
            print(f"wrote predictions for {len(rows)} samples to {args.out_dir}")
        elif args.command == "compare":
            config = load_config(
                args.config, seed=args.seed, total_epochs=args.epochs, fold=args.fold
            )
            block_types = tuple(t for t in args.block_types.split(",") if t)
            summary = compare_regimes(config, args.out_dir, block_types=block_types)
            for row in summary:
                print(
                    f"{row.block_type:9s} {row.regime:18s} "
                    f"best dice {row.best_val_dice:.4f} @ epoch {row.best_epoch}"
                )
    except (ValueError, FileNotFoundError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
