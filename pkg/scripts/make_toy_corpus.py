#!/usr/bin/env python3
"""Write the synthetic PNG corpora used by the desk-scale pipeline."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from evc.data import write_toy_corpus  # noqa: E402


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser()
    parser.add_argument("--train-dir", default="data/toy/train")
    parser.add_argument("--eval-dir", default="data/toy/eval")
    parser.add_argument("--train-count", type=int, default=48)
    parser.add_argument("--eval-count", type=int, default=4)
    parser.add_argument("--size", type=int, default=96, help="Side length of the training images")
    parser.add_argument("--seed", type=int, default=0)
    return parser.parse_args()


def main() -> int:
    args = parse_args()
    train = write_toy_corpus(Path(args.train_dir), args.train_count, size=args.size, seed=args.seed)
    # odd-sized eval images exercise the padding path
    evals = write_toy_corpus(Path(args.eval_dir), args.eval_count, size=args.size + 13, seed=args.seed + 1)
    print(f"Wrote {len(train)} images to {args.train_dir} and {len(evals)} to {args.eval_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
