"""CSV output for training histories, sweeps, ensemble and evaluation reports."""

from __future__ import annotations

from pathlib import Path

import pandas as pd


def write_frame(path: Path, frame: pd.DataFrame) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
