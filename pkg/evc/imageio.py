"""8-bit RGB image files (PNG and binary PPM) as [1, 3, H, W] float arrays in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from evc.errors import ShapeError, ValidationError

SUFFIXES = (".png", ".ppm")


def read_image(path: Path) -> np.ndarray:
    """Load an image as uint8 [H, W, 3]."""
    if not path.exists():
        raise FileNotFoundError(f"Missing image: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise ValidationError(f"Not a readable image: {path}") from exc


def write_image(path: Path, pixels: np.ndarray) -> None:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"expected [H, W, 3] pixels, got {pixels.shape}")
    suffix = path.suffix.lower()
    if suffix not in SUFFIXES:
        raise ValidationError(f"unsupported image suffix {suffix!r}; use one of {SUFFIXES}")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PNG" if suffix == ".png" else "PPM")


def to_batch(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 [H, W, 3] -> float [1, 3, H, W] in [0, 1]."""
    return (pixels.astype(np.float64) / 255.0).transpose(2, 0, 1)[None].astype(dtype)


def to_pixels(batch: np.ndarray) -> np.ndarray:
    """float [1, 3, H, W] in [0, 1] -> uint8 [H, W, 3], rounding to the nearest level."""
    if batch.ndim != 4 or batch.shape[:2] != (1, 3):
        raise ShapeError(f"expected [1, 3, H, W], got {batch.shape}")
    return np.rint(np.clip(batch[0], 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"Missing image directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in SUFFIXES)
