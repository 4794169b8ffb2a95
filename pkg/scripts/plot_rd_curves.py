#!/usr/bin/env python3
"""Plot RD curves and decay sweeps using Plotly."""

from __future__ import annotations

import argparse
from pathlib import Path

try:
    import pandas as pd
    import plotly.express as px
except Exception as exc:  # pragma: no cover - environment dependent
    raise SystemExit("Missing dependency: plotly/pandas. Install with: pip install plotly pandas") from exc


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser()
    parser.add_argument("curves", nargs="*", default=["outputs/eval/rd_curves.csv"], help="Curve CSVs (label,bpp,psnr)")
    parser.add_argument("--sweep", default="outputs/distill/decay_sweep.csv", help="Decay-rate sweep CSV, if present")
    parser.add_argument("--out-dir", default="plots")
    return parser.parse_args()


def main() -> int:
    args = parse_args()
    frames = []
    for name in args.curves:
        path = Path(name)
        if not path.exists():
            raise SystemExit(f"Missing {path}. Run the eval step first.")
        frames.append(pd.read_csv(path, dtype={"label": str, "bpp": float, "psnr": float}))

    df = pd.concat(frames, ignore_index=True).sort_values(["label", "bpp"])
    fig = px.line(df, x="bpp", y="psnr", color="label", markers=True, title="Rate-distortion")
    fig.update_layout(xaxis_title="bits per pixel", yaxis_title="PSNR (dB)", legend_title_text="model")
    fig.update_traces(hovertemplate="bpp=%{x:.4f}<br>psnr=%{y:.2f} dB")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(exist_ok=True)
    fig.write_html(out_dir / "rd_curves.html")
    written = [out_dir / "rd_curves.html"]

    sweep_path = Path(args.sweep)
    if sweep_path.exists():
        sweep = pd.read_csv(sweep_path, dtype={"kind": str, "eta": str, "epoch": int, "structure_progress": float})
        sweep["run"] = sweep["kind"] + " eta=" + sweep["eta"]
        prog = px.line(sweep, x="epoch", y="structure_progress", color="run", title="Structure progress during decay")
        prog.update_layout(yaxis_tickformat=".0%", legend_title_text="loss / rate")
        prog.write_html(out_dir / "decay_sweep.html")
        written.append(out_dir / "decay_sweep.html")

    print("Wrote " + ", ".join(str(p) for p in written))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
