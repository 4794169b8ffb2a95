"""Quality and rate metrics: padding, PSNR, BPP, BD-rate, and the corpus evaluation report."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
import pandas as pd

from evc.entropy import Bitstream
from evc.errors import MetricUndefinedError, ShapeError, ValidationError
from evc.imageio import read_image, to_batch, to_pixels
from evc.model import Model, compress, decode_symbols, synthesize
from evc.tables import write_frame

logger = logging.getLogger(__name__)

PAD_MULTIPLE = 64
PSNR_CAP = 100.0
CURVE_FIELDS = ["label", "bpp", "psnr"]
REPORT_FIELDS = ["config", "bd_baseline", "bd_ours", "bd_teacher", "relative_improvement_pct"]


def padded_size(size: int, multiple: int = PAD_MULTIPLE) -> int:
    return max(1, -(-size // multiple)) * multiple


def pad64(image: np.ndarray, multiple: int = PAD_MULTIPLE) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Zero-pad a [N, C, H, W] image on the right and bottom; returns it with the original (width, height)."""
    if image.ndim != 4:
        raise ShapeError(f"pad64 expects [N, C, H, W], got {image.shape}")
    h, w = image.shape[2:]
    ph, pw = padded_size(h, multiple), padded_size(w, multiple)
    if (ph, pw) == (h, w):
        return image, (w, h)
    out = np.zeros(image.shape[:2] + (ph, pw), dtype=image.dtype)
    out[:, :, :h, :w] = image
    return out, (w, h)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """PSNR in dB of two images on the ``peak`` scale, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def bpp(stream: Bitstream | bytes | int, width: int | None = None, height: int | None = None) -> float:
    """8 * bytes / (width * height), over the pre-padding size carried by the header."""
    if isinstance(stream, Bitstream):
        if (width is not None and width != stream.width) or (height is not None and height != stream.height):
            raise ValidationError(f"{width}x{height} disagrees with header size {stream.width}x{stream.height}")
        width, height, nbytes = stream.width, stream.height, stream.num_bytes
    else:
        nbytes = len(stream) if isinstance(stream, (bytes, bytearray)) else int(stream)
    if not width or not height:
        raise ValidationError("bpp needs a positive width and height")
    return 8.0 * nbytes / (width * height)


@dataclass
class RDCurve:
    label: str
    bpp: List[float]
    psnr: List[float]

    def __post_init__(self) -> None:
        if len(self.bpp) != len(self.psnr):
            raise ValidationError(f"{self.label}: {len(self.bpp)} rates but {len(self.psnr)} PSNR values")
        order = np.argsort(self.bpp, kind="stable")
        self.bpp = [float(self.bpp[i]) for i in order]
        self.psnr = [float(self.psnr[i]) for i in order]
        if any(b <= 0 for b in self.bpp):
            raise ValidationError(f"{self.label}: rates must be positive")
        if any(b2 <= b1 for b1, b2 in zip(self.bpp, self.bpp[1:])):
            raise ValidationError(f"{self.label}: rates must be strictly increasing")
        if not all(math.isfinite(p) for p in self.psnr):
            raise ValidationError(f"{self.label}: PSNR values must be finite")

    def rows(self) -> List[Dict[str, float | str]]:
        return [{"label": self.label, "bpp": b, "psnr": p} for b, p in zip(self.bpp, self.psnr)]


def read_curves(path: Path) -> Dict[str, RDCurve]:
    frame = pd.read_csv(path, dtype={"label": str, "bpp": float, "psnr": float})
    if frame.empty:
        raise ValidationError(f"Empty curve file: {path}")
    return {
        str(label): RDCurve(str(label), group["bpp"].tolist(), group["psnr"].tolist())
        for label, group in frame.groupby("label", sort=False)
    }


def write_curves(path: Path, curves: Sequence[RDCurve]) -> None:
    rows = [row for curve in curves for row in curve.rows()]
    write_frame(path, pd.DataFrame(rows, columns=CURVE_FIELDS))


def bd_rate(test: RDCurve, anchor: RDCurve) -> float:
    """Average rate difference (percent) of ``test`` against ``anchor`` at equal PSNR.

    Cubic fits of log-rate against PSNR are integrated over the PSNR range
    both curves cover; negative values mean ``test`` needs fewer bits.
    """
    for curve in (test, anchor):
        if len(curve.bpp) < 4:
            raise MetricUndefinedError(f"{curve.label}: BD-rate needs at least 4 points, got {len(curve.bpp)}")
    lo = max(min(test.psnr), min(anchor.psnr))
    hi = min(max(test.psnr), max(anchor.psnr))
    if not hi > lo:
        raise MetricUndefinedError(f"PSNR ranges of {test.label} and {anchor.label} do not overlap")
    fit_test = np.polyfit(test.psnr, np.log(test.bpp), 3)
    fit_anchor = np.polyfit(anchor.psnr, np.log(anchor.bpp), 3)
    int_test = np.polyint(fit_test)
    int_anchor = np.polyint(fit_anchor)
    area_test = np.polyval(int_test, hi) - np.polyval(int_test, lo)
    area_anchor = np.polyval(int_anchor, hi) - np.polyval(int_anchor, lo)
    avg_diff = (area_test - area_anchor) / (hi - lo)
    return float((math.exp(avg_diff) - 1.0) * 100.0)


def relative_improvement(baseline: float, ours: float, teacher: float) -> float:
    """Share (percent) of the baseline-to-teacher gap that ``ours`` closes."""
    if baseline == teacher:
        raise MetricUndefinedError("baseline and teacher scores are equal; the gap is empty")
    return (baseline - ours) / (baseline - teacher) * 100.0


@dataclass
class EvalReport:
    rows: List[Dict] = field(default_factory=list)

    @property
    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def aggregate(self) -> pd.DataFrame:
        """Corpus means per (label, rate_index)."""
        if not self.rows:
            raise ValidationError("evaluation report is empty")
        cols = ["bpp", "psnr", "encode_s", "entropy_decode_s", "decode_net_s"]
        return self.frame.groupby(["label", "rate_index"], as_index=False)[cols].mean()

    def curve(self, label: str) -> RDCurve:
        agg = self.aggregate()
        sel = agg[agg["label"] == label]
        if sel.empty:
            raise ValidationError(f"no rows for {label!r}")
        return RDCurve(label, sel["bpp"].tolist(), sel["psnr"].tolist())

    def curves(self) -> List[RDCurve]:
        return [self.curve(label) for label in dict.fromkeys(r["label"] for r in self.rows)]

    def write(self, path: Path) -> None:
        write_frame(path, self.frame)

    def to_markdown(self) -> str:
        return self.aggregate().to_markdown(index=False, floatfmt=".4f")


def reconstruct(bs: Bitstream, model: Model) -> Tuple[np.ndarray, float, float]:
    """Decoded [1, 3, h, w] image plus entropy-decode and decoder-net seconds."""
    t0 = time.perf_counter()
    symbols = decode_symbols(bs, model)
    t1 = time.perf_counter()
    x_hat = synthesize(symbols, bs, model)
    return x_hat, t1 - t0, time.perf_counter() - t1


def evaluate_image(model: Model, pixels: np.ndarray, rate_index: int) -> Dict[str, float]:
    """Compress and decode one uint8 [H, W, 3] image; rate and quality on the original size."""
    x, (w, h) = pad64(to_batch(pixels, model.dtype), model.spatial_multiple)
    t0 = time.perf_counter()
    bs = compress(x, model, rate_index, size=(w, h))
    encode_s = time.perf_counter() - t0
    x_hat, entropy_s, decode_s = reconstruct(bs, model)
    return {
        "rate_index": rate_index,
        "width": w,
        "height": h,
        "bytes": bs.num_bytes,
        "bpp": bpp(bs, w, h),
        "psnr": psnr(pixels, to_pixels(x_hat)),
        "encode_s": encode_s,
        "entropy_decode_s": entropy_s,
        "decode_net_s": decode_s,
    }


def evaluate_corpus(
    models: Mapping[str, Model],
    paths: Sequence[Path],
    rate_indices: Sequence[int] | None = None,
) -> EvalReport:
    if not paths:
        raise ValidationError("evaluation corpus is empty")
    report = EvalReport()
    images = [(p.name, read_image(p)) for p in paths]
    for label, model in models.items():
        for rate_index in rate_indices if rate_indices is not None else range(model.quant.num_rates):
            for name, pixels in images:
                row = {"label": label, "image": name}
                row.update(evaluate_image(model, pixels, rate_index))
                report.rows.append(row)
            logger.info("event=eval_rate_done label=%s rate_index=%d images=%d", label, rate_index, len(images))
    return report
