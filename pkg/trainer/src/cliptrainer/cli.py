"""Command-line entry: train on a dataset manifest and export the bundle."""

from __future__ import annotations

import argparse
import sys

from cliptrainer.spec import TrainSpec
from cliptrainer.train import AccuracyGateError, train_and_export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cliptrainer", description=__doc__)
    parser.add_argument("--manifest", required=True, help="dataset manifest.jsonl")
    parser.add_argument("--out", required=True, help="output directory for model.nnwf and fixtures.json")
    parser.add_argument("--filters", type=int, default=4)
    parser.add_argument("--kernel", type=int, default=3)
    parser.add_argument("--feature-dim", type=int, default=16)
    parser.add_argument("--hidden", type=int, default=16)
    parser.add_argument("--epochs", type=int, default=40)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--min-accuracy", type=float, default=0.90)
    parser.add_argument("--fixtures", type=int, default=12)
    args = parser.parse_args(argv)
    spec = TrainSpec(
        conv_filters=args.filters,
        kernel=args.kernel,
        feature_dim=args.feature_dim,
        hidden=args.hidden,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        min_accuracy=args.min_accuracy,
        fixture_count=args.fixtures,
    )
    try:
        result = train_and_export(spec, args.manifest, args.out)
    except AccuracyGateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"accuracy {result['accuracy']:.3f}; wrote {result['weights']} and {result['fixtures']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
