"""Shared fixtures: tiny seeded codecs, synthetic crops and a codec trained on a toy corpus."""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from evc.config import ModelConfig, TrainConfig  # noqa: E402
from evc.data import Dataset, DatasetSpec, load_split, write_toy_corpus  # noqa: E402
from evc.model import ChannelScheme, build_model  # noqa: E402
from evc.training import train  # noqa: E402

TINY_TEACHER = ChannelScheme(4, 4, 4, 4)
TINY_STUDENT = ChannelScheme(2, 3, 4, 4)


def tiny_model(enc=TINY_TEACHER, dec=TINY_TEACHER, stages=2, dtype=np.float64, seed=0):
    return build_model(enc, dec, latent_channels=4, hyper_channels=3, num_rates=2, num_stages=stages, seed=seed, dtype=dtype)


def tiny_model_config(dtype: str = "float64") -> ModelConfig:
    return ModelConfig(latent_channels=4, hyper_channels=3, num_rates=2, num_stages=2, dtype=dtype)


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(lambdas=[0.01, 0.02], epochs_finetune=2, iterations_per_epoch=2, batch_size=2, lr=1e-3, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture
def image(rng):
    return rng.uniform(0.0, 1.0, (1, 3, 32, 32))


@pytest.fixture
def dataset():
    gen = np.random.default_rng(7)
    images = [gen.uniform(0.0, 1.0, (3, 24, 24)) for _ in range(4)]
    return Dataset(images, crop=16, flip=True, dtype=np.float64)


DESK_LAMBDAS = [0.0025, 0.005, 0.01, 0.02]


def desk_model_config() -> ModelConfig:
    return ModelConfig(latent_channels=4, hyper_channels=3, num_rates=4, num_stages=2, dtype="float64")


def desk_train_config(**overrides) -> TrainConfig:
    base = dict(lambdas=list(DESK_LAMBDAS), epochs_finetune=40, iterations_per_epoch=8, batch_size=4, lr=2e-3, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class ToyCorpus:
    train: Dataset
    holdout: np.ndarray
    eval_paths: List[Path]


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    write_toy_corpus(root / "train", 24, size=32, seed=0)
    eval_paths = write_toy_corpus(root / "eval", 16, size=32, seed=1)
    train_set, _ = load_split(DatasetSpec(root / "train", crop=16), np.float64)
    eval_set, _ = load_split(DatasetSpec(root / "eval", crop=16, flip=False), np.float64)
    return ToyCorpus(train_set, eval_set.center_crops(), eval_paths)


@pytest.fixture(scope="session")
def trained_teacher(toy_corpus):
    """Four-rate tiny codec trained on the toy corpus; tests must not modify it."""
    model = desk_model_config().build(TINY_TEACHER, TINY_TEACHER)
    result = train(model, desk_train_config(), toy_corpus.train)
    assert result.status == "ok"
    return model
