"""Rate-distortion training: the loss, the two-phase schedule, distillation and baselines."""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from evc.config import ModelConfig, TrainConfig
from evc.data import Dataset
from evc.errors import NonFiniteError, ValidationError
from evc.mask_decay import (
    DecayConfig,
    MaskedModel,
    apply_task_gradient,
    build_avoid_sets,
    channel_overlap_table,
    check_sparse_enough,
    decay_step,
    force_freeze,
    insert_masks,
    merge_masks,
    record_chosen_channels,
)
from evc.metrics import relative_improvement
from evc.model import ChannelScheme, Model, forward_train
from evc.optim import AdamW
from evc.tables import write_frame
from evc.tensor import Tape, Tensor, mean, square, sum_per_sample

logger = logging.getLogger(__name__)

METRIC_FIELDS = ["epoch", "phase", "lr", "loss", "bpp", "mse", "alive_fraction", "structure_progress", "status"]

__all__ = [
    "METRIC_FIELDS",
    "RDLoss",
    "TrainConfig",
    "TrainResult",
    "DistillResult",
    "rd_loss",
    "evaluate_rd",
    "train",
    "train_from_scratch",
    "distill_pipeline",
    "decay_rate_sweep",
    "overlap_study",
]


@dataclass
class RDLoss:
    loss: Tensor
    per_sample: np.ndarray
    bpp: float
    mse: float


def rd_loss(
    x: np.ndarray | Tensor,
    model: Model,
    lam: float,
    rate_index: int,
    rng: np.random.Generator,
    distortion_scale: float = 255.0**2,
    context: str = "ste",
    weights: np.ndarray | None = None,
) -> RDLoss:
    """Batch mean of bpp + lam * distortion_scale * mse, with mse on the [0, 1] scale.

    ``weights`` (one per sample) rescale the per-sample losses in the mean.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.dtype))
    n, c, h, w = x.shape
    out = forward_train(model, x, rate_index, rng, context=context)
    rate = (out.bits_y + out.bits_z) * (1.0 / (h * w))
    mse = sum_per_sample(square(out.x_hat - x)) * (1.0 / (c * h * w))
    per_sample = rate + mse * (lam * distortion_scale) if lam else rate
    loss = mean(per_sample if weights is None else per_sample * Tensor(np.asarray(weights, dtype=per_sample.dtype)))
    return RDLoss(
        loss=loss,
        per_sample=per_sample.data.astype(np.float64),
        bpp=float(rate.data.mean()),
        mse=float(mse.data.mean()),
    )


def evaluate_rd(model: Model, crops: np.ndarray, cfg: TrainConfig, seed: int = 0) -> Dict[float, float]:
    """Mean RD loss per lambda on fixed crops with a fixed noise draw."""
    out = {}
    for lam, rate_index in zip(cfg.lambdas, cfg.rate_indices):
        rng = np.random.default_rng(seed)
        res = rd_loss(crops, model, lam, rate_index, rng, cfg.distortion_scale, cfg.context)
        out[lam] = float(res.loss.data)
    return out


@dataclass
class TrainResult:
    model: Model
    history: List[Dict] = field(default_factory=list)
    status: str = "ok"

    @property
    def final_loss(self) -> float:
        return float(self.history[-1]["loss"]) if self.history else float("nan")


def _alive_stats(masked: MaskedModel | None, threshold: float) -> Tuple[float, float]:
    if masked is None or not masked.masks:
        return 1.0, 1.0
    total = removable = alive = removed = 0
    for mask in masked.masks.values():
        live = mask.live_count(threshold)
        total += mask.size
        alive += live
        removable += mask.size - mask.target
        removed += min(mask.size - live, mask.size - mask.target)
    progress = removed / removable if removable else 1.0
    return alive / total, progress


def _update_masks(masked: MaskedModel, decay_cfg: DecayConfig, decaying: bool, lr: float) -> None:
    for mask in masked.masks.values():
        grad = mask.m.grad if mask.m.grad is not None else np.zeros(mask.size, dtype=mask.m.dtype)
        if mask.frozen:
            apply_task_gradient(mask, grad, lr, decay_cfg.clamp_at_zero)
        elif decaying:
            decay_step(mask, decay_cfg, grad, lr)


def _freeze_all(masked: MaskedModel, iteration: int) -> None:
    for mask in masked.masks.values():
        force_freeze(mask, iteration)
    logger.info("event=decay_phase_end iteration=%d frozen=%d", iteration, len(masked.masks))


def train(
    target: Model | MaskedModel,
    cfg: TrainConfig,
    dataset: Dataset,
    decay_cfg: DecayConfig | None = None,
    metrics_path: Path | None = None,
    trainable: Sequence[Tuple[str, Tensor]] | None = None,
    sample_weights: Callable[[np.ndarray, float, int], np.ndarray] | None = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Variable-rate training; a masked model is decayed for ``epochs_decay`` epochs first.

    Each iteration draws one (lambda, rate index) pair. For a masked model
    the masks are updated before the optimiser step: unfrozen masks take a
    decay step, frozen ones only the task gradient. ``trainable`` restricts
    the optimiser to a subset of parameters (the rest stay fixed);
    ``sample_weights(batch, lam, rate_index)`` reweights the samples of a batch.
    ``start_epoch`` offsets the learning-rate schedule and the recorded epoch
    numbers for a run that continues an earlier one.
    """
    masked = target if isinstance(target, MaskedModel) else None
    model = masked.model if masked is not None else target
    decay_cfg = decay_cfg or DecayConfig()
    params = list(trainable) if trainable is not None else model.named_parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model=model)
    iteration = 0
    initial_loss: Optional[float] = None
    over = 0

    for epoch in range(cfg.epochs_total):
        decaying = masked is not None and epoch < cfg.epochs_decay
        if masked is not None and epoch == cfg.epochs_decay and cfg.epochs_decay > 0:
            _freeze_all(masked, iteration)
        opt.lr = cfg.lr_at(start_epoch + epoch)
        losses, rates, dists = [], [], []
        status = "ok"
        for _ in range(cfg.iterations_per_epoch):
            k = int(rng.integers(len(cfg.lambdas)))
            x = dataset.sample_batch(rng, cfg.batch_size)
            model.zero_grad()
            if masked is not None:
                for p in masked.mask_parameters():
                    p.zero_grad()
            w = sample_weights(x, cfg.lambdas[k], cfg.rate_indices[k]) if sample_weights is not None else None
            with Tape() as tape:
                res = rd_loss(x, model, cfg.lambdas[k], cfg.rate_indices[k], rng, cfg.distortion_scale, cfg.context, w)
            try:
                tape.backward(res.loss)
            except NonFiniteError as exc:
                logger.error("event=nonfinite_loss epoch=%d iteration=%d lam=%s detail=%s", epoch, iteration, cfg.lambdas[k], exc)
                status = "aborted"
                break
            if masked is not None:
                _update_masks(masked, decay_cfg, decaying, opt.lr)
            opt.step()
            if decaying:
                for mask in masked.masks.values():
                    check_sparse_enough(mask, decay_cfg, iteration)
            losses.append(float(res.loss.data))
            rates.append(res.bpp)
            dists.append(res.mse)
            iteration += 1

        alive, progress = _alive_stats(masked, decay_cfg.zero_threshold)
        row = {
            "epoch": start_epoch + epoch,
            "phase": "decay" if decaying else "finetune",
            "lr": opt.lr,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "bpp": float(np.mean(rates)) if rates else float("nan"),
            "mse": float(np.mean(dists)) if dists else float("nan"),
            "alive_fraction": alive,
            "structure_progress": progress,
            "status": status,
        }
        result.history.append(row)
        logger.info("event=epoch_done epoch=%d phase=%s loss=%.6f bpp=%.4f status=%s", epoch, row["phase"], row["loss"], row["bpp"], status)
        if status == "aborted":
            result.status = "aborted"
            break

        if losses:
            if initial_loss is None:
                initial_loss = row["loss"]
            over = over + 1 if row["loss"] > cfg.divergence_factor * abs(initial_loss) else 0
            if over >= cfg.divergence_patience:
                logger.error("event=diverged epoch=%d loss=%.6f initial=%.6f", epoch, row["loss"], initial_loss)
                result.status = "diverged"
                break

    if masked is not None and not masked.all_frozen():
        _freeze_all(masked, iteration)
    if metrics_path is not None:
        write_frame(metrics_path, pd.DataFrame(result.history, columns=METRIC_FIELDS))
    return result


def train_from_scratch(
    model_cfg: ModelConfig,
    enc: ChannelScheme,
    dec: ChannelScheme,
    cfg: TrainConfig,
    dataset: Dataset,
    seed: int | None = None,
    metrics_path: Path | None = None,
) -> TrainResult:
    """Baseline: a freshly initialised model of the given widths, trained for ``epochs_total`` epochs."""
    model = model_cfg.build(enc, dec, seed=seed)
    plain = dataclasses.replace(cfg, epochs_decay=0, epochs_finetune=cfg.epochs_total)
    return train(model, plain, dataset, metrics_path=metrics_path)


@dataclass
class DistillResult:
    student: Model
    baseline: Optional[Model]
    decay: TrainResult
    finetune: TrainResult
    baseline_run: Optional[TrainResult]
    masked: MaskedModel
    report: Dict[str, float] = field(default_factory=dict)


def distill_pipeline(
    teacher: Model,
    student_scheme: ChannelScheme,
    which: str,
    cfg: TrainConfig,
    dataset: Dataset,
    decay_cfg: DecayConfig,
    model_cfg: ModelConfig | None = None,
    holdout: np.ndarray | None = None,
    decoder_scheme: ChannelScheme | None = None,
    output_dir: Path | None = None,
) -> DistillResult:
    """Masks -> decay phase -> merge -> finetune, plus (with ``model_cfg``) a from-scratch baseline.

    ``which`` selects the side that shrinks: ``encoder``, ``decoder`` or
    ``both``; ``decoder_scheme`` overrides the decoder target when both
    sides shrink to different widths.
    """
    if which not in ("encoder", "decoder", "both"):
        raise ValidationError(f"which must be encoder, decoder or both, got {which!r}")
    enc_target = student_scheme if which in ("encoder", "both") else teacher.enc_scheme
    dec_target = (decoder_scheme or student_scheme) if which in ("decoder", "both") else teacher.dec_scheme

    work = copy.deepcopy(teacher)
    masked = insert_masks(work, enc_target, dec_target)
    decay_only = dataclasses.replace(cfg, epochs_finetune=0) if cfg.epochs_decay else None
    metrics = (lambda name: output_dir / name) if output_dir is not None else (lambda name: None)

    if decay_only is not None:
        decay_run = train(masked, decay_only, dataset, decay_cfg, metrics_path=metrics("decay_metrics.csv"))
    else:
        for mask in masked.masks.values():
            force_freeze(mask, 0)
        decay_run = TrainResult(model=work)
    student = merge_masks(masked)
    finetune_cfg = dataclasses.replace(cfg, epochs_decay=0, seed=cfg.seed + 1)
    finetune_run = train(
        student, finetune_cfg, dataset, metrics_path=metrics("finetune_metrics.csv"), start_epoch=cfg.epochs_decay
    )

    baseline_run = None
    if model_cfg is not None:
        baseline_run = train_from_scratch(
            model_cfg, enc_target, dec_target, cfg, dataset, seed=cfg.seed + 2, metrics_path=metrics("baseline_metrics.csv")
        )

    result = DistillResult(
        student=student,
        baseline=baseline_run.model if baseline_run else None,
        decay=decay_run,
        finetune=finetune_run,
        baseline_run=baseline_run,
        masked=masked,
    )
    if holdout is not None:
        result.report["teacher"] = float(np.mean(list(evaluate_rd(teacher, holdout, cfg).values())))
        result.report["ours"] = float(np.mean(list(evaluate_rd(student, holdout, cfg).values())))
        if baseline_run is not None:
            result.report["baseline"] = float(np.mean(list(evaluate_rd(baseline_run.model, holdout, cfg).values())))
            if result.report["baseline"] != result.report["teacher"]:
                result.report["relative_improvement_pct"] = relative_improvement(
                    result.report["baseline"], result.report["ours"], result.report["teacher"]
                )
    logger.info("event=distill_done which=%s enc=%s dec=%s report=%s", which, enc_target.widths, dec_target.widths, result.report)
    return result


def decay_rate_sweep(
    teacher: Model,
    student_scheme: ChannelScheme,
    etas: Sequence[float],
    kinds: Sequence[str],
    cfg: TrainConfig,
    dataset: Dataset,
    decay_cfg: DecayConfig,
    holdout: np.ndarray | None = None,
) -> pd.DataFrame:
    """Structure progress per decay epoch for each (loss kind, eta), and the final RD loss.

    Each run decays a fresh copy of ``teacher`` toward ``student_scheme`` on
    both sides, merges, and finetunes with the same schedule.
    """
    rows = []
    for kind in kinds:
        for eta in etas:
            run_cfg = dataclasses.replace(decay_cfg, eta=float(eta), loss_kind=kind, eta_avoid=None)
            work = copy.deepcopy(teacher)
            masked = insert_masks(work, student_scheme)
            decay_only = dataclasses.replace(cfg, epochs_finetune=0)
            run = train(masked, decay_only, dataset, run_cfg)
            natural = sum(1 for m in masked.masks.values() if m.freeze_iteration is not None and m.freeze_iteration < _decay_iterations(cfg))
            student = merge_masks(masked)
            finetune = train(student, dataclasses.replace(cfg, epochs_decay=0, seed=cfg.seed + 1), dataset)
            final = (
                float(np.mean(list(evaluate_rd(student, holdout, cfg).values()))) if holdout is not None else finetune.final_loss
            )
            for row in run.history:
                rows.append(
                    {
                        "kind": kind,
                        "eta": float(eta),
                        "epoch": row["epoch"],
                        "structure_progress": row["structure_progress"],
                        "naturally_frozen": natural,
                        "masks": len(masked.masks),
                        "final_rd_loss": final,
                    }
                )
            logger.info("event=sweep_point kind=%s eta=%g natural=%d/%d final=%.6f", kind, eta, natural, len(masked.masks), final)
    return pd.DataFrame(rows)


def _decay_iterations(cfg: TrainConfig) -> int:
    """Iteration count at the end of the decay phase."""
    return cfg.epochs_decay * cfg.iterations_per_epoch


def overlap_study(
    teacher: Model,
    student_scheme: ChannelScheme,
    cfg: TrainConfig,
    dataset: Dataset,
    decay_cfg: DecayConfig,
    seeds: Sequence[int],
    avoid_blocks: int = 0,
) -> pd.DataFrame:
    """Chosen-channel overlap across decay runs that differ only in seed.

    With ``avoid_blocks`` > 0 a further run decays the channels chosen by
    any earlier run (in the first ``avoid_blocks`` stages) at the elevated
    avoid rate, and the table also reports how its choice meets those sets.
    """
    if not seeds:
        raise ValidationError("overlap_study needs at least one seed")
    if cfg.epochs_decay < 1:
        raise ValidationError("overlap_study needs at least one decay epoch")
    decay_only = dataclasses.replace(cfg, epochs_finetune=0)
    runs = []
    masked = None
    for seed in seeds:
        masked = insert_masks(copy.deepcopy(teacher), student_scheme)
        train(masked, dataclasses.replace(decay_only, seed=int(seed)), dataset, decay_cfg)
        runs.append(record_chosen_channels(masked))
    amd = None
    if avoid_blocks:
        union = {name: set().union(*(set(run[name]) for run in runs)) for name in runs[0]}
        masked = insert_masks(copy.deepcopy(teacher), student_scheme)
        masked.set_avoid_sets(build_avoid_sets(union, masked, avoid_blocks))
        train(masked, dataclasses.replace(decay_only, seed=int(max(seeds)) + 1), dataset, decay_cfg)
        amd = record_chosen_channels(masked)
    return channel_overlap_table(runs, masked, amd)
