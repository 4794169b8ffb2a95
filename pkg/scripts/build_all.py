#!/usr/bin/env python3
"""Desk-scale pipeline: toy corpus -> train teacher -> distil -> eval -> scalable encoders -> plots."""

from __future__ import annotations

import subprocess
import sys


STEPS = [
    [sys.executable, "scripts/make_toy_corpus.py"],
    [sys.executable, "scripts/evc.py", "--verbose", "train", "--config", "config/train.yaml"],
    [sys.executable, "scripts/evc.py", "--verbose", "prune", "--config", "config/mask_decay.yaml", "--sweep"],
    [sys.executable, "scripts/evc.py", "eval", "--config", "config/eval.yaml"],
    [sys.executable, "scripts/evc.py", "--verbose", "rrl", "--config", "config/scalable.yaml"],
    [sys.executable, "scripts/plot_rd_curves.py", "outputs/eval/rd_curves.csv"],
]


def main() -> int:
    for cmd in STEPS:
        print("Running:", " ".join(cmd))
        result = subprocess.run(cmd)
        if result.returncode != 0:
            return result.returncode
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
