"""Mask decay: channel masks, their sparsity-driven decay, freezing and merging.

A large model gets per-channel masks at the sites that decide its widths.
Each training iteration first decays every unfrozen mask (a decoupled step
along the sparsity-loss gradient, plus the task gradient), then lets the
optimiser update the remaining weights. Once a mask has no more live
channels than its target it is frozen; after every mask is frozen the
masks are folded into the neighbouring convolutions, leaving a plain model
of the student widths with the same outputs.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from evc.errors import SequencingError, StructuralError, ValidationError
from evc.layers import DepthConvBlock, ResidualBlock, ResUpBlock
from evc.model import ChannelScheme, Decoder, Encoder, Model
from evc.tensor import ConvParams, Tensor, parameter

logger = logging.getLogger(__name__)

LOSS_KINDS = ("ours", "l1", "l2")


@dataclass
class DecayConfig:
    eta: float = 2e-4
    loss_kind: str = "ours"
    eta_avoid: Optional[float] = None
    zero_threshold: float = 1e-3
    clamp_at_zero: bool = True

    def __post_init__(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ValidationError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not self.eta > 0:
            raise ValidationError(f"eta must be positive, got {self.eta}")
        if self.eta_avoid is None:
            self.eta_avoid = 10.0 * self.eta
        if self.eta_avoid < self.eta:
            raise ValidationError(f"eta_avoid ({self.eta_avoid}) must be >= eta ({self.eta})")
        if not self.zero_threshold > 0:
            raise ValidationError(f"zero_threshold must be positive, got {self.zero_threshold}")


@dataclass(eq=False)
class MaskLayer:
    """Per-channel scale ``m`` with a target width; ``keep`` is set when frozen."""

    name: str
    m: Tensor
    target: int
    group: Optional[str] = None
    avoid_set: frozenset = frozenset()
    frozen: bool = False
    keep: Optional[np.ndarray] = None
    freeze_iteration: Optional[int] = None
    sites: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0 <= self.target <= self.size:
            raise ValidationError(f"{self.name}: target {self.target} outside [0, {self.size}]")

    @classmethod
    def ones(cls, name: str, size: int, target: int, dtype=np.float32, group: str | None = None) -> "MaskLayer":
        return cls(name=name, m=parameter(np.ones(size, dtype=dtype), name=f"mask.{name}"), target=target, group=group)

    @property
    def size(self) -> int:
        return self.m.shape[0]

    @property
    def values(self) -> np.ndarray:
        return self.m.data

    def live_count(self, threshold: float) -> int:
        return int((np.abs(self.m.data) > threshold).sum())


def sparsity_loss(x, kind: str = "ours"):
    """Penalty whose gradient drives a mask toward zero (vectorised over arrays)."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "ours":
        if np.any(x < 0):
            logger.warning("event=sparsity_clamp kind=ours negatives=%d", int((x < 0).sum()))
            x = np.clip(x, 0.0, None)
        out = np.where(x <= 1.0, -0.5 * x * x + x, 0.5 * x * x - x + 1.0)
    elif kind == "l1":
        out = np.abs(x)
    elif kind == "l2":
        out = 0.5 * x * x
    else:
        raise ValidationError(f"unknown sparsity loss {kind!r}")
    return out if out.ndim else float(out)


def sparsity_grad(x, kind: str = "ours"):
    x = np.asarray(x, dtype=np.float64)
    if kind == "ours":
        out = np.abs(np.clip(x, 0.0, None) - 1.0)
    elif kind == "l1":
        out = np.sign(x)
    elif kind == "l2":
        out = x.copy()
    else:
        raise ValidationError(f"unknown sparsity loss {kind!r}")
    return out if out.ndim else float(out)


def _eta_vector(mask: MaskLayer, cfg: DecayConfig) -> np.ndarray:
    eta = np.full(mask.size, cfg.eta, dtype=np.float64)
    if mask.avoid_set:
        eta[sorted(mask.avoid_set)] = cfg.eta_avoid
    return eta


def decay_step(
    mask: MaskLayer,
    cfg: DecayConfig,
    task_grad: np.ndarray | None = None,
    lr: float = 0.0,
) -> MaskLayer:
    """One decoupled decay update: m <- m - eta * grad_sparse(m) - lr * task_grad."""
    if mask.frozen:
        logger.info("event=decay_noop mask=%s reason=frozen", mask.name)
        return mask
    m = mask.m.data.astype(np.float64)
    new = m - _eta_vector(mask, cfg) * sparsity_grad(m, cfg.loss_kind)
    if task_grad is not None:
        new = new - lr * np.asarray(task_grad, dtype=np.float64)
    if cfg.clamp_at_zero:
        new = np.clip(new, 0.0, None)
    mask.m.data = new.astype(mask.m.dtype)
    return mask


def apply_task_gradient(mask: MaskLayer, task_grad: np.ndarray, lr: float, clamp_at_zero: bool = True) -> MaskLayer:
    """Task-loss step on a frozen mask's surviving entries; dropped entries stay zero."""
    if not mask.frozen or mask.keep is None:
        raise SequencingError(f"{mask.name}: task-only updates apply to frozen masks")
    m = mask.m.data.copy()
    m[mask.keep] -= lr * np.asarray(task_grad)[mask.keep]
    if clamp_at_zero:
        m[mask.keep] = np.clip(m[mask.keep], 0.0, None)
    mask.m.data = m
    return mask


def select_survivors(values: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` largest |values|, ties to the lowest index, sorted."""
    order = np.argsort(-np.abs(values), kind="stable")
    return np.sort(order[:count])


def _freeze(mask: MaskLayer, iteration: Optional[int]) -> None:
    keep = select_survivors(mask.m.data, mask.target)
    frozen = np.zeros_like(mask.m.data)
    frozen[keep] = mask.m.data[keep]
    mask.m.data = frozen
    mask.keep = keep
    mask.frozen = True
    mask.freeze_iteration = iteration


def check_sparse_enough(mask: MaskLayer, cfg: DecayConfig, iteration: int | None = None) -> bool:
    """Freeze ``mask`` once its live channels fit the target; returns whether it is frozen."""
    if mask.frozen:
        return True
    live = mask.live_count(cfg.zero_threshold)
    if live > mask.target:
        return False
    _freeze(mask, iteration)
    logger.info(
        "event=mask_frozen mask=%s live=%d target=%d size=%d iteration=%s",
        mask.name,
        live,
        mask.target,
        mask.size,
        iteration,
    )
    return True


def force_freeze(mask: MaskLayer, iteration: int | None = None) -> None:
    if mask.frozen:
        return
    _freeze(mask, iteration)
    logger.warning("event=mask_force_frozen mask=%s target=%d size=%d iteration=%s", mask.name, mask.target, mask.size, iteration)


@dataclass(eq=False)
class MaskedModel:
    model: Model
    masks: Dict[str, MaskLayer]
    enc_target: ChannelScheme
    dec_target: ChannelScheme

    def mask_list(self) -> List[MaskLayer]:
        return list(self.masks.values())

    def mask_parameters(self) -> List[Tensor]:
        return [mask.m for mask in self.masks.values()]

    def all_frozen(self) -> bool:
        return all(mask.frozen for mask in self.masks.values())

    def set_avoid_sets(self, avoid: Mapping[str, Iterable[int]]) -> None:
        for name, channels in avoid.items():
            if name not in self.masks:
                raise ValidationError(f"no mask named {name!r}")
            self.masks[name].avoid_set = frozenset(int(c) for c in channels)


def _scheme_target(teacher: ChannelScheme, student: ChannelScheme, stages: int) -> bool:
    if not student.fits_within(teacher):
        raise ValidationError(f"student scheme {student.widths} is wider than teacher {teacher.widths}")
    return student.widths[:stages] != teacher.widths[:stages]


def _register(masks: Dict[str, MaskLayer], mask: MaskLayer, site: str) -> MaskLayer:
    mask.sites.append(site)
    masks.setdefault(mask.name, mask)
    return mask


def _insert_encoder(enc: Encoder, student: ChannelScheme, masks: Dict[str, MaskLayer], dtype) -> None:
    for k, (res, dc) in enumerate(enc.stages, start=1):
        c = student.widths[k - 1]
        base = f"encoder.s{k}"
        group = MaskLayer.ones(base, res.conv2.c_out, c, dtype, group=base)
        res.inner_mask = _register(masks, MaskLayer.ones(f"{base}.res.inner", res.conv1.c_out, c, dtype), f"{base}.res.inner")
        res.out_mask = _register(masks, group, f"{base}.res.out")
        dc.inner_mask = _register(masks, MaskLayer.ones(f"{base}.dc.inner", dc.conv1.c_out, c, dtype), f"{base}.dc.inner")
        dc.ffn_mask = _register(masks, MaskLayer.ones(f"{base}.dc.ffn", dc.conv3.c_out, 4 * c, dtype), f"{base}.dc.ffn")
        dc.out_mask = _register(masks, group, f"{base}.dc.out")


def _insert_decoder(dec: Decoder, student: ChannelScheme, masks: Dict[str, MaskLayer], dtype) -> None:
    n = len(dec.stages)
    widths = student.widths[:n]
    top = f"decoder.s{n}"
    group = MaskLayer.ones(top, dec.proj.c_out, widths[n - 1], dtype, group=top)
    dec.proj_mask = _register(masks, group, f"{top}.proj.out")
    for i, (dc, up) in enumerate(dec.stages):
        k = n - i
        c = widths[k - 1]
        c_out = widths[k - 2] if k > 1 else widths[0]
        base = f"decoder.s{k}"
        dc.inner_mask = _register(masks, MaskLayer.ones(f"{base}.dc.inner", dc.conv1.c_out, c, dtype), f"{base}.dc.inner")
        dc.ffn_mask = _register(masks, MaskLayer.ones(f"{base}.dc.ffn", dc.conv3.c_out, 4 * c, dtype), f"{base}.dc.ffn")
        dc.out_mask = _register(masks, group, f"{base}.dc.out")
        up.inner_mask = _register(masks, MaskLayer.ones(f"{base}.up.inner", up.conv2.c_in, c_out, dtype), f"{base}.up.inner")
        nxt = f"decoder.s{k - 1}"
        group = MaskLayer.ones(nxt, up.conv2.c_out, c_out, dtype, group=nxt)
        up.out_mask = _register(masks, group, f"{base}.up.out")


def insert_masks(
    model: Model,
    student_scheme: ChannelScheme,
    decoder_scheme: ChannelScheme | None = None,
) -> MaskedModel:
    """Attach all-ones masks whose targets are the student widths.

    ``decoder_scheme`` defaults to ``student_scheme``; a side whose target
    equals its current widths gets no masks.
    """
    decoder_scheme = decoder_scheme or student_scheme
    masks: Dict[str, MaskLayer] = {}
    dtype = model.dtype
    if _scheme_target(model.enc_scheme, student_scheme, model.num_stages):
        _insert_encoder(model.encoder, student_scheme, masks, dtype)
    if _scheme_target(model.dec_scheme, decoder_scheme, model.num_stages):
        _insert_decoder(model.decoder, decoder_scheme, masks, dtype)
    enc_target = ChannelScheme(*(student_scheme.widths[: model.num_stages] + model.enc_scheme.widths[model.num_stages :]))
    dec_target = ChannelScheme(*(decoder_scheme.widths[: model.num_stages] + model.dec_scheme.widths[model.num_stages :]))
    logger.info("event=masks_inserted count=%d enc_target=%s dec_target=%s", len(masks), enc_target.widths, dec_target.widths)
    return MaskedModel(model=model, masks=masks, enc_target=enc_target, dec_target=dec_target)


def _mask_info(mask: Optional[MaskLayer], size: int) -> Tuple[np.ndarray, np.ndarray]:
    if mask is None:
        return np.arange(size), np.ones(size)
    if mask.keep is None:
        raise SequencingError(f"{mask.name}: mask is not frozen")
    vals = mask.m.data[mask.keep].astype(np.float64)
    if np.any(vals < 0):
        raise StructuralError(f"{mask.name}: negative mask values cannot be folded through leaky ReLU")
    return mask.keep, vals


def _conv(weight: np.ndarray, bias: np.ndarray, like: ConvParams, groups: int = 1) -> ConvParams:
    dtype = like.weight.dtype
    return ConvParams(
        parameter(np.ascontiguousarray(weight, dtype=dtype)),
        parameter(np.ascontiguousarray(bias, dtype=dtype)),
        stride=like.stride,
        padding=like.padding,
        groups=groups,
    )


def _rows(values: np.ndarray) -> np.ndarray:
    return values[:, None, None, None]


def _cols(values: np.ndarray) -> np.ndarray:
    return values[None, :, None, None]


def _expand4(keep: np.ndarray) -> np.ndarray:
    return (4 * keep[:, None] + np.arange(4)[None, :]).reshape(-1)


def _merge_residual(res: ResidualBlock, in_keep: np.ndarray) -> Tuple[ResidualBlock, np.ndarray]:
    k1, m1 = _mask_info(res.inner_mask, res.conv1.c_out)
    kg, mg = _mask_info(res.out_mask, res.conv2.c_out)
    w1, b1 = res.conv1.weight.data, res.conv1.bias.data
    w2, b2 = res.conv2.weight.data, res.conv2.bias.data
    w3, b3 = res.conv3.weight.data, res.conv3.bias.data
    conv1 = _conv(w1[k1][:, in_keep], b1[k1], res.conv1)
    conv2 = _conv(w2[kg][:, k1] * _cols(m1) * _rows(mg), b2[kg] * mg, res.conv2)
    conv3 = _conv(w3[kg][:, in_keep] * _rows(mg), b3[kg] * mg, res.conv3)
    return ResidualBlock(conv1, conv2, conv3, res.slope), kg


def _merge_depthconv(dc: DepthConvBlock, in_keep: np.ndarray) -> DepthConvBlock:
    kg, mg = _mask_info(dc.out_mask, dc.conv2.c_out)
    if not np.array_equal(kg, in_keep):
        raise StructuralError("depth-conv block output group differs from its input channels")
    k1, m1 = _mask_info(dc.inner_mask, dc.conv1.c_out)
    k3, m3 = _mask_info(dc.ffn_mask, dc.conv3.c_out)
    dead1 = np.setdiff1d(np.arange(dc.conv1.c_out), k1)

    w1, b1 = dc.conv1.weight.data, dc.conv1.bias.data
    wd, bd = dc.depthwise.weight.data, dc.depthwise.bias.data
    w2, b2 = dc.conv2.weight.data, dc.conv2.bias.data
    w3, b3 = dc.conv3.weight.data, dc.conv3.bias.data
    w4, b4 = dc.conv4.weight.data, dc.conv4.bias.data

    # a dropped depthwise channel still emits its bias; push it into conv2
    b2 = b2.astype(np.float64) + w2[:, dead1, 0, 0].astype(np.float64) @ bd[dead1].astype(np.float64)
    conv1 = _conv(w1[k1][:, kg], b1[k1], dc.conv1)
    depthwise = _conv(wd[k1] * _rows(m1), bd[k1], dc.depthwise, groups=len(k1))
    conv2 = _conv(w2[kg][:, k1] * _rows(mg), b2[kg] * mg, dc.conv2)
    conv3 = _conv(w3[k3][:, kg], b3[k3], dc.conv3)
    conv4 = _conv(w4[kg][:, k3] * _cols(m3) * _rows(mg), b4[kg] * mg, dc.conv4)
    return DepthConvBlock(conv1, depthwise, conv2, conv3, conv4, dc.slope)


def _merge_resup(up: ResUpBlock, in_keep: np.ndarray) -> Tuple[ResUpBlock, np.ndarray]:
    k1, m1 = _mask_info(up.inner_mask, up.conv2.c_in)
    kg, mg = _mask_info(up.out_mask, up.conv2.c_out)
    w1, b1 = up.conv1.weight.data, up.conv1.bias.data
    w2, b2 = up.conv2.weight.data, up.conv2.bias.data
    w3, b3 = up.conv3.weight.data, up.conv3.bias.data
    idx1, idx3 = _expand4(k1), _expand4(kg)
    mg4 = np.repeat(mg, 4)
    conv1 = _conv(w1[idx1][:, in_keep], b1[idx1], up.conv1)
    conv2 = _conv(w2[kg][:, k1] * _cols(m1) * _rows(mg), b2[kg] * mg, up.conv2)
    conv3 = _conv(w3[idx3][:, in_keep] * _rows(mg4), b3[idx3] * mg4, up.conv3)
    return ResUpBlock(conv1, conv2, conv3, up.slope), kg


def _merge_encoder(enc: Encoder, target: ChannelScheme) -> Encoder:
    keep = np.arange(3)
    stages = []
    for res, dc in enc.stages:
        res_m, keep = _merge_residual(res, keep)
        stages.append((res_m, _merge_depthconv(dc, keep)))
    proj = _conv(enc.proj.weight.data[:, keep], enc.proj.bias.data, enc.proj)
    return Encoder(stages, proj, target)


def _merge_decoder(dec: Decoder, target: ChannelScheme) -> Decoder:
    keep, mg = _mask_info(dec.proj_mask, dec.proj.c_out)
    proj = _conv(dec.proj.weight.data[keep] * _rows(mg), dec.proj.bias.data[keep] * mg, dec.proj)
    stages = []
    for dc, up in dec.stages:
        dc_m = _merge_depthconv(dc, keep)
        up_m, keep = _merge_resup(up, keep)
        stages.append((dc_m, up_m))
    out = _conv(dec.out.weight.data[:, keep], dec.out.bias.data, dec.out)
    return Decoder(proj, stages, out, target)


def merge_masks(mm: MaskedModel) -> Model:
    """Fold every frozen mask into its neighbouring convolutions.

    Zero-position channels are deleted from the producing and consuming
    convolutions; surviving mask values scale either the producing filters
    (group masks) or the consuming input channels (inner masks). The
    returned model has no masks and the student widths.
    """
    for mask in mm.masks.values():
        if not mask.frozen:
            raise SequencingError(f"cannot merge: mask {mask.name} is not frozen")
        if mask.target == 0:
            raise StructuralError(f"cannot merge: mask {mask.name} keeps no channels")
    model = mm.model
    encoder = _merge_encoder(model.encoder, mm.enc_target)
    decoder = _merge_decoder(model.decoder, mm.dec_target)
    # the shared modules are copied so the student owns its parameters
    shared = copy.deepcopy((model.hyper_encoder, model.hyper_decoder, model.fusion, model.quant, model.prior))
    student = Model(
        encoder,
        decoder,
        *shared,
        latent_channels=model.latent_channels,
        hyper_channels=model.hyper_channels,
        num_stages=model.num_stages,
        table_half_width=model.table_half_width,
    )
    _check_widths(student, mm)
    logger.info("event=masks_merged enc=%s dec=%s", mm.enc_target.widths, mm.dec_target.widths)
    return student


def _check_widths(student: Model, mm: MaskedModel) -> None:
    for k, (res, dc) in enumerate(student.encoder.stages):
        expected = mm.enc_target.widths[k]
        if res.conv2.c_out != expected or dc.conv3.c_out != 4 * expected:
            raise StructuralError(f"merged encoder stage {k + 1} has width {res.conv2.c_out}, expected {expected}")
    n = len(student.decoder.stages)
    for i, (dc, _) in enumerate(student.decoder.stages):
        expected = mm.dec_target.widths[n - 1 - i]
        if dc.conv2.c_out != expected:
            raise StructuralError(f"merged decoder stage {n - i} has width {dc.conv2.c_out}, expected {expected}")


def record_chosen_channels(mm: MaskedModel) -> Dict[str, List[int]]:
    """Surviving channel indices per mask."""
    out = {}
    for name, mask in mm.masks.items():
        if not mask.frozen or mask.keep is None:
            raise SequencingError(f"mask {name} is not frozen; no channel set yet")
        out[name] = [int(i) for i in mask.keep]
    return out


def prune_report(mm: MaskedModel) -> List[Dict]:
    rows = []
    for name, mask in mm.masks.items():
        rows.append(
            {
                "mask": name,
                "sites": list(mask.sites),
                "n2": mask.size,
                "ns": mask.target,
                "frozen": mask.frozen,
                "freeze_iteration": mask.freeze_iteration,
                "survivors": [int(i) for i in mask.keep] if mask.keep is not None else [],
                "avoid_set": sorted(int(i) for i in mask.avoid_set),
            }
        )
    return rows


def write_prune_report(path: Path, mm: MaskedModel) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        yaml.safe_dump({"masks": prune_report(mm)}, f, sort_keys=False)


def read_prune_report(path: Path) -> Dict[str, List[int]]:
    with path.open("r", encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    return {row["mask"]: list(row["survivors"]) for row in raw["masks"]}


def channel_overlap_table(
    runs: Sequence[Mapping[str, Sequence[int]]],
    mm: MaskedModel,
    amd_run: Mapping[str, Sequence[int]] | None = None,
) -> pd.DataFrame:
    """Per-mask intersection/union sizes of chosen channels across runs.

    With ``amd_run`` (a run trained with avoid sets on ``mm``), also report
    the intersection and union of its channels with each avoid set.
    """
    if not runs:
        raise ValidationError("channel_overlap_table needs at least one run")
    rows = []
    for name, mask in mm.masks.items():
        sets = [set(run[name]) for run in runs]
        row = {
            "mask": name,
            "n2": mask.size,
            "ns": mask.target,
            "intersection": len(set.intersection(*sets)),
            "union": len(set.union(*sets)),
        }
        if amd_run is not None:
            chosen = set(amd_run[name])
            row["avoid_size"] = len(mask.avoid_set)
            row["amd_intersection"] = len(chosen & mask.avoid_set)
            row["amd_union"] = len(chosen | mask.avoid_set)
        rows.append(row)
    return pd.DataFrame(rows)


def mask_stage(name: str) -> str:
    """Stage a mask belongs to, e.g. ``encoder.s1`` for ``encoder.s1.dc.ffn``."""
    return ".".join(name.split(".")[:2])


def build_avoid_sets(
    union_sets: Mapping[str, Iterable[int]],
    mm: MaskedModel,
    num_blocks: int,
) -> Dict[str, List[int]]:
    """Avoid sets for the masks of the first ``num_blocks`` stages (encoder first)."""
    stages: List[str] = []
    for name in mm.masks:
        stage = mask_stage(name)
        if stage not in stages:
            stages.append(stage)
    chosen = set(stages[:num_blocks])
    return {name: sorted(int(i) for i in union_sets[name]) for name in mm.masks if mask_stage(name) in chosen and name in union_sets}
