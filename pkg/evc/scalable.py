"""One decoder, several encoders.

A bank holds small encoders that all feed the same frozen decoder and
entropy model. Encoders are added one at a time (each trained while the
rest stay fixed, optionally starting from a mask-decayed copy of the large
encoder), trained independently, or trained jointly with the shared
modules. At encode time every candidate encoder compresses the image and
the stream with the best rate-distortion score is sent; the decoder never
needs to know which encoder produced it.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from evc.checkpoint import load_bank, save_bank
from evc.config import TrainConfig
from evc.data import Dataset
from evc.entropy import Bitstream
from evc.errors import SequencingError, ShapeError, ValidationError
from evc.imageio import read_image, to_batch, to_pixels
from evc.mask_decay import DecayConfig, force_freeze, insert_masks, merge_masks
from evc.metrics import RDCurve, bpp, pad64, psnr, reconstruct
from evc.model import ChannelScheme, Encoder, Model, build_encoder, compress
from evc.optim import AdamW
from evc.tables import write_frame
from evc.tensor import Tape, Tensor
from evc.training import rd_loss, train

logger = logging.getLogger(__name__)

REGIMES = ("ours", "one_by_one", "separate", "end_to_end")


def parameter_hash(params: Sequence[Tuple[str, Tensor]]) -> str:
    digest = hashlib.sha256()
    for name, p in params:
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


@dataclass(eq=False)
class EncoderBank:
    """Shared modules (``model`` minus its encoder) plus the ordered encoders."""

    model: Model
    encoders: List[Encoder] = field(default_factory=list)
    provenance: List[Dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.encoders)

    def model_for(self, index: int) -> Model:
        if not 0 <= index < len(self.encoders):
            raise ValidationError(f"encoder index {index} outside [0, {len(self.encoders)})")
        return self.model.with_encoder(self.encoders[index])

    def shared_hash(self) -> str:
        return parameter_hash(self.model.shared_parameters())

    def encoder_hashes(self) -> List[str]:
        return [parameter_hash(enc.named_parameters()) for enc in self.encoders]

    def add(self, encoder: Encoder, **tag) -> None:
        shape = _latent_shape(self.model, encoder)
        if self.encoders and shape != _latent_shape(self.model, self.encoders[0]):
            raise ShapeError(f"encoder emits latents {shape}, bank expects {_latent_shape(self.model, self.encoders[0])}")
        self.encoders.append(encoder)
        self.provenance.append(dict(tag))

    def save(self, path: Path) -> None:
        save_bank(path, self.model, self.encoders, self.provenance)

    @classmethod
    def load(cls, path: Path) -> "EncoderBank":
        model, encoders, provenance = load_bank(path)
        return cls(model, encoders, provenance)


def _latent_shape(model: Model, encoder: Encoder) -> Tuple[int, ...]:
    blank = np.zeros((1, 3, model.spatial_multiple, model.spatial_multiple), dtype=model.dtype)
    return encoder.forward(Tensor(blank)).shape


def _check_unchanged(label: str, before: str, after: str) -> None:
    if before != after:
        raise SequencingError(f"{label} changed while they were supposed to be frozen")


SampleWeights = Callable[[np.ndarray, float, int], np.ndarray]


def residual_weights(bank: EncoderBank, cfg: TrainConfig, temperature: float, seed: int = 0) -> SampleWeights | None:
    """Per-sample weights favouring crops the existing encoders code worst.

    Weights are exp(best previous RD loss / temperature), rescaled to mean 1;
    an empty bank or a non-positive temperature means uniform weights.
    """
    if not bank.encoders or temperature <= 0:
        return None
    models = [bank.model_for(i) for i in range(len(bank))]

    def weights(x: np.ndarray, lam: float, rate_index: int) -> np.ndarray:
        best = None
        for model in models:
            losses = rd_loss(x, model, lam, rate_index, np.random.default_rng(seed), cfg.distortion_scale, cfg.context).per_sample
            best = losses if best is None else np.minimum(best, losses)
        w = np.exp((best - best.max()) / temperature)
        return w / w.mean()

    return weights


def _masked_teacher_encoder(
    bank: EncoderBank,
    large_encoder: Encoder,
    student_scheme: ChannelScheme,
    cfg: TrainConfig,
    dataset: Dataset,
    decay_cfg: DecayConfig,
    weights: SampleWeights | None,
) -> Encoder:
    work = copy.deepcopy(bank.model).with_encoder(copy.deepcopy(large_encoder))
    masked = insert_masks(work, student_scheme, work.dec_scheme)
    if cfg.epochs_decay:
        decay_only = dataclasses.replace(cfg, epochs_finetune=0)
        train(masked, decay_only, dataset, decay_cfg, trainable=work.encoder.named_parameters(), sample_weights=weights)
    else:
        for mask in masked.masks.values():
            force_freeze(mask, 0)
    return merge_masks(masked).encoder


def train_rrl_step(
    bank: EncoderBank,
    init: str,
    cfg: TrainConfig,
    dataset: Dataset,
    student_scheme: ChannelScheme,
    large_encoder: Encoder | None = None,
    decay_cfg: DecayConfig | None = None,
    temperature: float = 1.0,
    seed: int | None = None,
) -> EncoderBank:
    """Train one more encoder against the frozen shared modules and append it.

    ``init="masked"`` decays a fresh copy of ``large_encoder`` down to
    ``student_scheme`` for ``cfg.epochs_decay`` epochs before finetuning;
    ``init="scratch"`` starts from random weights. Previously added encoders
    and the shared modules are checked to be untouched afterwards.
    """
    if init not in ("masked", "scratch"):
        raise ValidationError(f"init must be 'masked' or 'scratch', got {init!r}")
    seed = cfg.seed + len(bank) if seed is None else seed
    shared_before, encoders_before = bank.shared_hash(), bank.encoder_hashes()
    weights = residual_weights(bank, cfg, temperature, seed)

    if init == "masked":
        if large_encoder is None:
            raise SequencingError("masked initialisation needs the large encoder")
        encoder = _masked_teacher_encoder(bank, large_encoder, student_scheme, cfg, dataset, decay_cfg or DecayConfig(), weights)
    else:
        encoder = build_encoder(
            student_scheme, bank.model.latent_channels, bank.model.num_stages, seed=seed, dtype=bank.model.dtype
        )
    epochs = cfg.epochs_total if init == "scratch" else cfg.epochs_finetune
    if epochs:
        finetune = dataclasses.replace(cfg, epochs_decay=0, epochs_finetune=epochs, seed=seed)
        train(bank.model.with_encoder(encoder), finetune, dataset, trainable=encoder.named_parameters(), sample_weights=weights)

    _check_unchanged("shared modules", shared_before, bank.shared_hash())
    _check_unchanged("earlier encoders", "".join(encoders_before), "".join(bank.encoder_hashes()))
    bank.add(encoder, regime="rrl", init=init, index=len(bank), seed=seed)
    logger.info("event=rrl_step_done index=%d init=%s scheme=%s", len(bank) - 1, init, student_scheme.widths)
    return bank


def train_separate(
    model: Model,
    bank_size: int,
    student_scheme: ChannelScheme,
    cfg: TrainConfig,
    dataset: Dataset,
) -> EncoderBank:
    """Independently trained encoders against the frozen shared modules.

    Encoder ``i`` uses seed ``cfg.seed + i``, the seed a scratch RRL step gives
    the ``i``-th encoder of a bank, so the two regimes differ only in their
    sample weights.
    """
    if bank_size < 1:
        raise ValidationError(f"bank_size must be positive, got {bank_size}")
    bank = EncoderBank(model)
    shared_before = bank.shared_hash()
    plain = dataclasses.replace(cfg, epochs_decay=0, epochs_finetune=cfg.epochs_total)
    for i in range(bank_size):
        seed = cfg.seed + i
        encoder = build_encoder(student_scheme, model.latent_channels, model.num_stages, seed=seed, dtype=model.dtype)
        train(model.with_encoder(encoder), dataclasses.replace(plain, seed=seed), dataset, trainable=encoder.named_parameters())
        bank.add(encoder, regime="separate", index=i, seed=seed)
    _check_unchanged("shared modules", shared_before, bank.shared_hash())
    return bank


def train_end_to_end(
    model: Model,
    bank_size: int,
    student_scheme: ChannelScheme,
    cfg: TrainConfig,
    dataset: Dataset,
) -> EncoderBank:
    """All encoders and a copy of the shared modules trained together.

    Every iteration sums the RD losses of all encoders on the same batch;
    each encoder only sees gradients from its own path.
    """
    if bank_size < 1:
        raise ValidationError(f"bank_size must be positive, got {bank_size}")
    shared = copy.deepcopy(model)
    encoders = [
        build_encoder(student_scheme, model.latent_channels, model.num_stages, seed=cfg.seed + 1000 * (i + 1), dtype=model.dtype)
        for i in range(bank_size)
    ]
    params = shared.shared_parameters()
    for i, enc in enumerate(encoders):
        params += enc.named_parameters(f"encoder{i}")
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs_total):
        opt.lr = cfg.lr_at(epoch)
        losses = []
        for _ in range(cfg.iterations_per_epoch):
            k = int(rng.integers(len(cfg.lambdas)))
            x = dataset.sample_batch(rng, cfg.batch_size)
            opt.zero_grad()
            with Tape() as tape:
                total = None
                for enc in encoders:
                    res = rd_loss(x, shared.with_encoder(enc), cfg.lambdas[k], cfg.rate_indices[k], rng, cfg.distortion_scale, cfg.context)
                    total = res.loss if total is None else total + res.loss
            tape.backward(total)
            opt.step()
            losses.append(float(total.data) / bank_size)
        logger.info("event=epoch_done regime=end_to_end epoch=%d loss=%.6f", epoch, float(np.mean(losses)))
    bank = EncoderBank(shared)
    for i, enc in enumerate(encoders):
        bank.add(enc, regime="end_to_end", index=i, seed=cfg.seed + 1000 * (i + 1))
    return bank


@dataclass
class EnsembleChoice:
    winner: int
    table: List[Dict[str, float]]


def _candidates(
    image: np.ndarray, bank: EncoderBank, k: int, rate_index: int
) -> List[Tuple[Bitstream, np.ndarray]]:
    if not 1 <= k <= len(bank):
        raise ValidationError(f"k={k} outside [1, {len(bank)}]")
    x, size = pad64(image, bank.model.spatial_multiple)
    out = []
    for i in range(k):
        model = bank.model_for(i)
        bs = compress(x, model, rate_index, size=size)
        x_hat, _, _ = reconstruct(bs, model)
        out.append((bs, x_hat))
    return out


def _choose(
    image: np.ndarray, candidates: List[Tuple[Bitstream, np.ndarray]], lam: float, distortion_scale: float
) -> EnsembleChoice:
    table = []
    pixels = to_pixels(image)
    for i, (bs, x_hat) in enumerate(candidates):
        mse = float(np.mean((x_hat.astype(np.float64) - image.astype(np.float64)) ** 2))
        rate = bpp(bs)
        table.append({"encoder": i, "bpp": rate, "psnr": psnr(pixels, to_pixels(x_hat)), "score": rate + lam * distortion_scale * mse})
    scores = np.array([row["score"] for row in table])
    return EnsembleChoice(winner=int(np.argmin(scores)), table=table)


def ensemble_encode(
    image: np.ndarray,
    bank: EncoderBank,
    k: int,
    rate_index: int,
    lam: float,
    distortion_scale: float = 255.0**2,
) -> Tuple[Bitstream, EnsembleChoice]:
    """Compress ``image`` ([1, 3, h, w] in [0, 1]) with the first ``k`` encoders and keep the best score.

    Ties go to the lowest index. With ``k > 1`` the winner's index is
    written into the header.
    """
    candidates = _candidates(image, bank, k, rate_index)
    choice = _choose(image, candidates, lam, distortion_scale)
    bs = candidates[choice.winner][0]
    if k > 1:
        bs = dataclasses.replace(bs, encoder_id=choice.winner)
    return bs, choice


ENSEMBLE_FIELDS = ["image", "rate_index", "k", "winner"]


def ensemble_report(
    bank: EncoderBank,
    paths: Sequence[Path],
    rate_indices: Sequence[int],
    lambdas: Sequence[float],
    distortion_scale: float = 255.0**2,
) -> pd.DataFrame:
    """One row per (image, rate, k): the winner and its scores, plus every encoder's bpp/psnr/score."""
    rows = []
    for path in paths:
        image = to_batch(read_image(path))
        for rate_index, lam in zip(rate_indices, lambdas):
            candidates = _candidates(image.astype(bank.model.dtype), bank, len(bank), rate_index)
            for k in range(1, len(bank) + 1):
                choice = _choose(image, candidates[:k], lam, distortion_scale)
                best = choice.table[choice.winner]
                row = {"image": path.name, "rate_index": rate_index, "k": k, "winner": choice.winner}
                row.update({"bpp": best["bpp"], "psnr": best["psnr"], "score": best["score"]})
                for entry in choice.table:
                    i = entry["encoder"]
                    row.update({f"bpp_{i}": entry["bpp"], f"psnr_{i}": entry["psnr"], f"score_{i}": entry["score"]})
                rows.append(row)
    return pd.DataFrame(rows)


def write_ensemble_report(path: Path, frame: pd.DataFrame) -> None:
    write_frame(path, frame)


def ensemble_curves(frame: pd.DataFrame, label: str = "") -> List[RDCurve]:
    """Corpus-mean RD curve for each ensemble size k."""
    curves = []
    for k, part in frame.groupby("k"):
        agg = part.groupby("rate_index")[["bpp", "psnr"]].mean()
        curves.append(RDCurve(f"{label}k={k}", agg["bpp"].tolist(), agg["psnr"].tolist()))
    return curves


def mean_scores(frame: pd.DataFrame) -> Dict[int, float]:
    """Average winning RD score per k over all images and rates."""
    return {int(k): float(v) for k, v in frame.groupby("k")["score"].mean().items()}
