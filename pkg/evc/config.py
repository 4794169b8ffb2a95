"""YAML configuration files mapped onto dataclasses.

Required keys raise KeyError when missing; everything else falls back to
the dataclass defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from evc.data import DatasetSpec
from evc.errors import ValidationError
from evc.mask_decay import DecayConfig
from evc.model import ChannelScheme, Model, build_model, scheme_from_name

DISTILL_CODES = {"L": "large", "M": "medium", "S": "small"}


@dataclass
class ModelConfig:
    enc_scheme: str = "large"
    dec_scheme: str = "large"
    width_divisor: int = 1
    latent_channels: int = 192
    hyper_channels: int = 128
    num_rates: int = 4
    num_stages: int = 4
    seed: int = 0
    dtype: str = "float32"

    def scheme(self, name: str) -> ChannelScheme:
        return scheme_from_name(name, self.width_divisor)

    def build(self, enc: ChannelScheme | None = None, dec: ChannelScheme | None = None, seed: int | None = None) -> Model:
        return build_model(
            enc or self.scheme(self.enc_scheme),
            dec or self.scheme(self.dec_scheme),
            latent_channels=self.latent_channels,
            hyper_channels=self.hyper_channels,
            num_rates=self.num_rates,
            num_stages=self.num_stages,
            seed=self.seed if seed is None else seed,
            dtype=np.dtype(self.dtype),
        )


@dataclass
class TrainConfig:
    lambdas: List[float] = field(default_factory=lambda: [0.0025, 0.005, 0.01, 0.02])
    rate_indices: Optional[List[int]] = None
    epochs_decay: int = 0
    epochs_finetune: int = 30
    iterations_per_epoch: int = 8
    batch_size: int = 4
    lr: float = 2e-4
    milestones: List[int] = field(default_factory=list)
    lr_factor: float = 0.5
    weight_decay: float = 0.0
    seed: int = 0
    distortion_scale: float = 255.0**2
    divergence_factor: float = 10.0
    divergence_patience: int = 3
    context: str = "ste"

    def __post_init__(self) -> None:
        if not self.lambdas:
            raise ValidationError("lambdas must not be empty")
        if any(lam < 0 for lam in self.lambdas):
            raise ValidationError(f"lambdas must be non-negative, got {self.lambdas}")
        if self.rate_indices is None:
            self.rate_indices = list(range(len(self.lambdas)))
        if len(self.rate_indices) != len(self.lambdas):
            raise ValidationError(f"{len(self.lambdas)} lambdas but {len(self.rate_indices)} rate indices")
        if self.epochs_decay < 0 or self.epochs_finetune < 0 or self.epochs_total < 1:
            raise ValidationError(f"bad epoch split decay={self.epochs_decay} finetune={self.epochs_finetune}")
        if self.iterations_per_epoch < 1 or self.batch_size < 1:
            raise ValidationError("iterations_per_epoch and batch_size must be positive")
        if not self.lr > 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")

    @property
    def epochs_total(self) -> int:
        return self.epochs_decay + self.epochs_finetune

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_factor ** sum(1 for m in self.milestones if epoch >= m)


@dataclass
class TrainJob:
    model: ModelConfig
    dataset: DatasetSpec
    train: TrainConfig
    checkpoint: Path
    metrics: Path


@dataclass
class DistillJob:
    teacher: Path
    model: ModelConfig
    dataset: DatasetSpec
    train: TrainConfig
    decay: DecayConfig
    configs: List[str]
    sweep_etas: List[float]
    sweep_kinds: List[str]
    overlap_seeds: List[int]
    avoid_blocks: int
    output_dir: Path


@dataclass
class ScalableJob:
    teacher: Path
    model: ModelConfig
    dataset: DatasetSpec
    train: TrainConfig
    decay: DecayConfig
    bank_size: int
    student_scheme: str
    decoder_scheme: str
    regimes: List[str]
    temperature: float
    eval_corpus: Path
    output_dir: Path


@dataclass
class EvalJob:
    corpus: Path
    models: Dict[str, Path]
    output_dir: Path
    anchor_curve: Optional[Path] = None
    rate_indices: Optional[List[int]] = None


def _read(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise FileNotFoundError(f"Missing config file: {path}")
    with path.open("r", encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: expected a mapping at the top level")
    return raw


def parse_range(value: Any) -> List[float]:
    """Sweep values from a list or a ``{min, max, step}`` mapping (max included)."""
    if isinstance(value, list):
        values = np.asarray(value, dtype=float)
    elif isinstance(value, dict):
        lo, hi, step = (float(value[key]) for key in ("min", "max", "step"))
        if step <= 0 or hi < lo:
            raise ValidationError(f"range needs step > 0 and max >= min, got {value}")
        values = lo + step * np.arange(int(np.floor((hi - lo) / step + 1e-9)) + 1)
    else:
        raise ValidationError("range must be a list or a {min,max,step} dict")
    if np.any(values <= 0) or not np.all(np.isfinite(values)):
        raise ValidationError(f"sweep values must be positive and finite, got {values.tolist()}")
    return np.round(values, 10).tolist()


def parse_distill_code(code: str, divisor: int = 1) -> Tuple[ChannelScheme, ChannelScheme]:
    """``SL`` -> (small encoder, large decoder)."""
    if len(code) != 2 or any(c not in DISTILL_CODES for c in code.upper()):
        raise ValidationError(f"distill config must be two of {sorted(DISTILL_CODES)}, got {code!r}")
    enc, dec = (scheme_from_name(DISTILL_CODES[c], divisor) for c in code.upper())
    return enc, dec


def model_config(raw: Dict[str, Any]) -> ModelConfig:
    return ModelConfig(**raw)


def dataset_spec(raw: Dict[str, Any]) -> DatasetSpec:
    return DatasetSpec(
        directory=Path(raw["directory"]),
        crop=int(raw.get("crop", 64)),
        flip=bool(raw.get("flip", True)),
        seed=int(raw.get("seed", 0)),
        holdout=int(raw.get("holdout", 0)),
    )


def train_config(raw: Dict[str, Any]) -> TrainConfig:
    return TrainConfig(**raw)


def decay_config(raw: Dict[str, Any]) -> DecayConfig:
    return DecayConfig(**raw)


def load_train_config(path: Path) -> TrainJob:
    raw = _read(path)
    output = raw.get("output", {})
    return TrainJob(
        model=model_config(raw.get("model", {})),
        dataset=dataset_spec(raw["dataset"]),
        train=train_config(raw.get("train", {})),
        checkpoint=Path(output["checkpoint"]),
        metrics=Path(output["metrics"]),
    )


def load_distill_config(path: Path) -> DistillJob:
    raw = _read(path)
    sweep = raw.get("sweep", {})
    return DistillJob(
        teacher=Path(raw["teacher"]),
        model=model_config(raw.get("model", {})),
        dataset=dataset_spec(raw["dataset"]),
        train=train_config(raw.get("train", {})),
        decay=decay_config(raw.get("decay", {})),
        configs=list(raw.get("configs", ["SS"])),
        sweep_etas=parse_range(sweep.get("etas", [])),
        sweep_kinds=list(sweep.get("kinds", ["ours"])),
        overlap_seeds=[int(s) for s in raw.get("overlap", {}).get("seeds", [0, 1])],
        avoid_blocks=int(raw.get("overlap", {}).get("avoid_blocks", 1)),
        output_dir=Path(raw["output"]["dir"]),
    )


def load_scalable_config(path: Path) -> ScalableJob:
    raw = _read(path)
    return ScalableJob(
        teacher=Path(raw["teacher"]),
        model=model_config(raw.get("model", {})),
        dataset=dataset_spec(raw["dataset"]),
        train=train_config(raw.get("train", {})),
        decay=decay_config(raw.get("decay", {})),
        bank_size=int(raw.get("bank_size", 4)),
        student_scheme=raw.get("student_scheme", "small"),
        decoder_scheme=raw.get("decoder_scheme", "large"),
        regimes=list(raw.get("regimes", ["ours", "one_by_one", "separate", "end_to_end"])),
        temperature=float(raw.get("rrl_temperature", 1.0)),
        eval_corpus=Path(raw["eval_corpus"]),
        output_dir=Path(raw["output"]["dir"]),
    )


def load_eval_config(path: Path) -> EvalJob:
    raw = _read(path)
    anchor = raw.get("anchor_curve")
    return EvalJob(
        corpus=Path(raw["corpus"]),
        models={label: Path(p) for label, p in raw["models"].items()},
        output_dir=Path(raw["output"]["dir"]),
        anchor_curve=Path(anchor) if anchor else None,
        rate_indices=raw.get("rate_indices"),
    )
