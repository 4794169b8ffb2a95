"""Training crops from an image directory, and the procedural toy corpus."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np
from scipy.ndimage import gaussian_filter

from evc.errors import ValidationError
from evc.imageio import list_images, read_image, to_batch, write_image

logger = logging.getLogger(__name__)

TOY_KINDS = ("gradient", "stripes", "checker", "blobs")


@dataclass
class DatasetSpec:
    directory: Path
    crop: int = 64
    flip: bool = True
    seed: int = 0
    holdout: int = 0

    def __post_init__(self) -> None:
        if self.crop < 1:
            raise ValidationError(f"crop must be positive, got {self.crop}")
        if self.holdout < 0:
            raise ValidationError(f"holdout must be non-negative, got {self.holdout}")


class Dataset:
    """Images held in memory as float [3, H, W]; batches are random crops."""

    def __init__(self, images: List[np.ndarray], crop: int, flip: bool = True, dtype=np.float32) -> None:
        usable = [img for img in images if img.shape[1] >= crop and img.shape[2] >= crop]
        if len(usable) < len(images):
            logger.warning("event=images_skipped count=%d reason=smaller_than_crop crop=%d", len(images) - len(usable), crop)
        if not usable:
            raise ValidationError(f"dataset is empty: no image is at least {crop}x{crop}")
        self.images = [img.astype(dtype) for img in usable]
        self.crop = crop
        self.flip = flip

    @classmethod
    def from_spec(cls, spec: DatasetSpec, dtype=np.float32) -> "Dataset":
        train, _ = load_split(spec, dtype)
        return train

    def __len__(self) -> int:
        return len(self.images)

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        out = np.empty((batch_size, 3, self.crop, self.crop), dtype=self.images[0].dtype)
        for i in range(batch_size):
            img = self.images[int(rng.integers(len(self.images)))]
            top = int(rng.integers(img.shape[1] - self.crop + 1))
            left = int(rng.integers(img.shape[2] - self.crop + 1))
            patch = img[:, top : top + self.crop, left : left + self.crop]
            if self.flip and rng.random() < 0.5:
                patch = patch[:, :, ::-1]
            out[i] = patch
        return out

    def center_crops(self) -> np.ndarray:
        """One deterministic centre crop per image, for held-out losses."""
        crops = []
        for img in self.images:
            top = (img.shape[1] - self.crop) // 2
            left = (img.shape[2] - self.crop) // 2
            crops.append(img[:, top : top + self.crop, left : left + self.crop])
        return np.stack(crops)


def load_split(spec: DatasetSpec, dtype=np.float32) -> tuple[Dataset, Dataset | None]:
    """Train set and (if ``holdout`` > 0) a held-out set, split by a seeded shuffle."""
    paths = list_images(spec.directory)
    if not paths:
        raise ValidationError(f"dataset is empty: no PNG/PPM files in {spec.directory}")
    order = np.random.default_rng(spec.seed).permutation(len(paths))
    images = [to_batch(read_image(paths[i]), dtype)[0] for i in order]
    if spec.holdout >= len(images):
        raise ValidationError(f"holdout {spec.holdout} leaves no training images out of {len(images)}")
    held = images[: spec.holdout]
    train = Dataset(images[spec.holdout :], spec.crop, spec.flip, dtype)
    return train, (Dataset(held, spec.crop, False, dtype) if held else None)


def toy_image(rng: np.random.Generator, size: int, kind: str) -> np.ndarray:
    """One procedural RGB texture as uint8 [size, size, 3]."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    colors = rng.uniform(0.0, 1.0, (2, 3))
    if kind == "gradient":
        angle = rng.uniform(0.0, 2.0 * np.pi)
        t = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 2.0
    elif kind == "stripes":
        freq = rng.uniform(2.0, 8.0)
        angle = rng.uniform(0.0, np.pi)
        t = 0.5 + 0.5 * np.sin(2.0 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    elif kind == "checker":
        cells = int(rng.integers(2, 9))
        t = ((np.floor(xx * cells) + np.floor(yy * cells)) % 2).astype(np.float64)
    elif kind == "blobs":
        t = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8.0, mode="wrap")
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    else:
        raise ValidationError(f"unknown toy texture {kind!r}; use one of {TOY_KINDS}")
    rgb = colors[0] * (1.0 - t[..., None]) + colors[1] * t[..., None]
    rgb = rgb + rng.normal(0.0, 0.01, rgb.shape)
    return np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_toy_corpus(directory: Path, count: int, size: int = 64, seed: int = 0) -> List[Path]:
    """Write ``count`` PNG textures cycling through the toy kinds; same seed, same files."""
    if count < 1 or size < 1:
        raise ValidationError(f"count and size must be positive, got {count}, {size}")
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        kind = TOY_KINDS[i % len(TOY_KINDS)]
        path = directory / f"toy_{i:04d}_{kind}.png"
        write_image(path, toy_image(rng, size, kind))
        paths.append(path)
    logger.info("event=toy_corpus_written dir=%s count=%d size=%d seed=%d", directory, count, size, seed)
    return paths
