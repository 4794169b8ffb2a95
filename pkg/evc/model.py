"""The codec network: transforms, hyperprior, checkerboard prior and variable-rate steps."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from evc.entropy import (
    Bitstream,
    FactorizedPrior,
    GaussianParams,
    factorized_decode,
    factorized_rate_and_code,
    gaussian_bits,
    gaussian_table_set,
)
from evc.errors import DecodeError, SequencingError, ShapeError, ValidationError
from evc.layers import (
    NEGATIVE_SLOPE,
    ConvStack,
    DepthConvBlock,
    ResidualBlock,
    ResUpBlock,
    conv_macs,
    conv_parameters,
    init_conv,
)
from evc.tensor import (
    ConvParams,
    Tensor,
    channel_scale,
    clamp,
    concat_channels,
    conv2d,
    exp,
    parameter,
    round_ste,
    scale_by,
    slice_channels,
    sum_per_sample,
    take,
)

logger = logging.getLogger(__name__)

SCALE_MIN = 1e-4
SCALE_MAX = 1e4
GAUSSIAN_HALF_WIDTH = 32


@dataclass(frozen=True)
class ChannelScheme:
    c1: int
    c2: int
    c3: int
    c4: int

    def __post_init__(self) -> None:
        if min(self.widths) < 1:
            raise ValidationError(f"channel widths must be positive, got {self.widths}")

    @property
    def widths(self) -> Tuple[int, int, int, int]:
        return (self.c1, self.c2, self.c3, self.c4)

    def scaled(self, divisor: int) -> "ChannelScheme":
        """Shrink every width by ``divisor`` (floor, at least 1)."""
        if divisor < 1:
            raise ValidationError(f"divisor must be >= 1, got {divisor}")
        return ChannelScheme(*(max(1, c // divisor) for c in self.widths))

    def fits_within(self, other: "ChannelScheme") -> bool:
        return all(a <= b for a, b in zip(self.widths, other.widths))


SMALL = ChannelScheme(64, 64, 128, 192)
MEDIUM = ChannelScheme(128, 128, 192, 192)
LARGE = ChannelScheme(192, 192, 192, 192)
PRESETS = {"small": SMALL, "medium": MEDIUM, "large": LARGE}


def scheme_from_name(name: str, divisor: int = 1) -> ChannelScheme:
    try:
        return PRESETS[name.lower()].scaled(divisor)
    except KeyError as exc:
        raise ValidationError(f"unknown channel scheme {name!r}; expected one of {sorted(PRESETS)}") from exc


class QuantSteps:
    """Learnable global (per rate point) and per-channel quantisation steps, stored as logs."""

    def __init__(self, log_global: Tensor, log_channel: Tensor) -> None:
        if log_global.ndim != 1 or log_channel.ndim != 1:
            raise ShapeError("quantisation steps are vectors")
        self.log_global = log_global
        self.log_channel = log_channel

    @classmethod
    def build(cls, num_rates: int, channels: int, q_range: Tuple[float, float], dtype: Any) -> "QuantSteps":
        if num_rates < 1 or channels < 1:
            raise ValidationError(f"need at least one rate and channel, got {num_rates}, {channels}")
        hi, lo = q_range
        if not (hi > 0 and lo > 0):
            raise ValidationError(f"quantisation steps must be positive, got {q_range}")
        log_global = np.log(np.geomspace(hi, lo, num_rates)) if num_rates > 1 else np.array([math.log(hi)])
        return cls(
            parameter(log_global.astype(dtype), name="quant.log_global"),
            parameter(np.zeros(channels, dtype=dtype), name="quant.log_channel"),
        )

    @property
    def num_rates(self) -> int:
        return self.log_global.shape[0]

    def _check(self, rate_index: int) -> None:
        if not 0 <= rate_index < self.num_rates:
            raise ValidationError(f"rate_index {rate_index} outside [0, {self.num_rates})")

    def log_step(self, rate_index: int) -> Tensor:
        self._check(rate_index)
        ones = Tensor(np.ones(self.log_channel.shape, dtype=self.log_channel.dtype))
        return self.log_channel + scale_by(ones, take(self.log_global, rate_index))

    def step_array(self, rate_index: int) -> np.ndarray:
        self._check(rate_index)
        step = np.exp(self.log_global.data[rate_index] + self.log_channel.data)
        if not np.all(step > 0) or not np.all(np.isfinite(step)):
            raise ValidationError(f"non-positive quantisation step at rate {rate_index}")
        return step

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [("quant.log_global", self.log_global), ("quant.log_channel", self.log_channel)]


class Encoder:
    def __init__(
        self, stages: List[Tuple[ResidualBlock, DepthConvBlock]], proj: ConvParams, scheme: ChannelScheme
    ) -> None:
        self.stages = stages
        self.proj = proj
        self.scheme = scheme

    @classmethod
    def build(
        cls,
        rng: np.random.Generator,
        scheme: ChannelScheme,
        latent_channels: int,
        num_stages: int = 4,
        dtype: Any = np.float32,
        slope: float = NEGATIVE_SLOPE,
    ) -> "Encoder":
        widths = scheme.widths[:num_stages]
        stages = []
        c_prev = 3
        for c in widths:
            stages.append((ResidualBlock.build(rng, c_prev, c, 2, dtype, slope), DepthConvBlock.build(rng, c, dtype, slope)))
            c_prev = c
        return cls(stages, init_conv(rng, c_prev, latent_channels, 3, dtype=dtype), scheme)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"encoder expects [N, 3, H, W], got {x.shape}")
        for res, dc in self.stages:
            x = dc.forward(res.forward(x))
        return conv2d(x, self.proj)

    def named_convs(self, prefix: str = "encoder") -> List[Tuple[str, ConvParams]]:
        out = []
        for k, (res, dc) in enumerate(self.stages, start=1):
            out += res.named_convs(f"{prefix}.s{k}.res") + dc.named_convs(f"{prefix}.s{k}.dc")
        out.append((f"{prefix}.proj", self.proj))
        return out

    def named_parameters(self, prefix: str = "encoder") -> List[Tuple[str, Tensor]]:
        return conv_parameters(self.named_convs(prefix))

    def macs(self, h: int, w: int) -> Tuple[int, int, int]:
        total = 0
        for res, dc in self.stages:
            m, h, w = res.macs(h, w)
            total += m + dc.macs(h, w)[0]
        m, h, w = conv_macs(self.proj, h, w)
        return total + m, h, w


class Decoder:
    """Mirror of :class:`Encoder`; ``stages`` run from the deepest width up."""

    def __init__(
        self,
        proj: ConvParams,
        stages: List[Tuple[DepthConvBlock, ResUpBlock]],
        out: ConvParams,
        scheme: ChannelScheme,
    ) -> None:
        self.proj = proj
        self.stages = stages
        self.out = out
        self.scheme = scheme
        self.proj_mask = None

    @classmethod
    def build(
        cls,
        rng: np.random.Generator,
        scheme: ChannelScheme,
        latent_channels: int,
        num_stages: int = 4,
        dtype: Any = np.float32,
        slope: float = NEGATIVE_SLOPE,
    ) -> "Decoder":
        widths = scheme.widths[:num_stages]
        proj = init_conv(rng, latent_channels, widths[-1], 3, dtype=dtype)
        stages = []
        for k in range(num_stages - 1, -1, -1):
            c_out = widths[k - 1] if k > 0 else widths[0]
            stages.append((DepthConvBlock.build(rng, widths[k], dtype, slope), ResUpBlock.build(rng, widths[k], c_out, dtype, slope)))
        return cls(proj, stages, init_conv(rng, widths[0], 3, 3, dtype=dtype), scheme)

    def forward(self, y: Tensor) -> Tensor:
        x = conv2d(y, self.proj)
        if self.proj_mask is not None:
            x = channel_scale(x, self.proj_mask.m)
        for dc, up in self.stages:
            x = up.forward(dc.forward(x))
        return conv2d(x, self.out)

    def stage_names(self, prefix: str = "decoder") -> List[str]:
        n = len(self.stages)
        return [f"{prefix}.s{n - i}" for i in range(n)]

    def named_convs(self, prefix: str = "decoder") -> List[Tuple[str, ConvParams]]:
        out = [(f"{prefix}.proj", self.proj)]
        for name, (dc, up) in zip(self.stage_names(prefix), self.stages):
            out += dc.named_convs(f"{name}.dc") + up.named_convs(f"{name}.up")
        out.append((f"{prefix}.out", self.out))
        return out

    def named_parameters(self, prefix: str = "decoder") -> List[Tuple[str, Tensor]]:
        return conv_parameters(self.named_convs(prefix))

    def macs(self, h: int, w: int) -> Tuple[int, int, int]:
        total, h, w = conv_macs(self.proj, h, w)
        for dc, up in self.stages:
            total += dc.macs(h, w)[0]
            m, h, w = up.macs(h, w)
            total += m
        m, h, w = conv_macs(self.out, h, w)
        return total + m, h, w


def build_hyper_encoder(rng: np.random.Generator, latent: int, hyper: int, dtype: Any, slope: float) -> ConvStack:
    convs = [
        init_conv(rng, latent, hyper, 3, dtype=dtype),
        init_conv(rng, hyper, hyper, 3, stride=2, dtype=dtype),
        init_conv(rng, hyper, hyper, 3, stride=2, dtype=dtype),
    ]
    return ConvStack(convs, [False, False, False], slope)


def build_hyper_decoder(rng: np.random.Generator, latent: int, hyper: int, dtype: Any, slope: float) -> ConvStack:
    convs = [
        init_conv(rng, hyper, hyper, 3, dtype=dtype),
        init_conv(rng, hyper, 4 * hyper, 3, dtype=dtype),
        init_conv(rng, hyper, 4 * hyper, 3, dtype=dtype),
        init_conv(rng, hyper, 2 * latent, 3, dtype=dtype),
    ]
    return ConvStack(convs, [False, True, True, False], slope)


def build_fusion(rng: np.random.Generator, latent: int, dtype: Any, slope: float) -> ConvStack:
    convs = [init_conv(rng, 3 * latent, 2 * latent, 1, dtype=dtype), init_conv(rng, 2 * latent, 2 * latent, 1, dtype=dtype)]
    return ConvStack(convs, [False, False], slope)


@dataclass(eq=False)
class Model:
    encoder: Encoder
    decoder: Decoder
    hyper_encoder: ConvStack
    hyper_decoder: ConvStack
    fusion: ConvStack
    quant: QuantSteps
    prior: FactorizedPrior
    latent_channels: int
    hyper_channels: int
    num_stages: int = 4
    table_half_width: int = GAUSSIAN_HALF_WIDTH

    @property
    def enc_scheme(self) -> ChannelScheme:
        return self.encoder.scheme

    @property
    def dec_scheme(self) -> ChannelScheme:
        return self.decoder.scheme

    @property
    def latent_stride(self) -> int:
        return 2**self.num_stages

    @property
    def spatial_multiple(self) -> int:
        return 2 ** (self.num_stages + 2)

    @property
    def dtype(self) -> np.dtype:
        return self.encoder.proj.weight.dtype

    def shared_parameters(self) -> List[Tuple[str, Tensor]]:
        out = self.decoder.named_parameters()
        out += conv_parameters(self.hyper_encoder.named_convs("hyper_encoder"))
        out += conv_parameters(self.hyper_decoder.named_convs("hyper_decoder"))
        out += conv_parameters(self.fusion.named_convs("fusion"))
        out += self.quant.named_parameters()
        out += self.prior.named_parameters()
        return out

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return self.encoder.named_parameters() + self.shared_parameters()

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def with_encoder(self, encoder: Encoder) -> "Model":
        return dataclasses.replace(self, encoder=encoder)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def build_encoder(
    scheme: ChannelScheme,
    latent_channels: int = 192,
    num_stages: int = 4,
    seed: int = 0,
    dtype: Any = np.float32,
    negative_slope: float = NEGATIVE_SLOPE,
) -> Encoder:
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    return Encoder.build(rng, scheme, latent_channels, num_stages, dtype, negative_slope)


def build_model(
    enc_scheme: ChannelScheme,
    dec_scheme: ChannelScheme,
    latent_channels: int = 192,
    hyper_channels: int = 128,
    num_rates: int = 4,
    num_stages: int = 4,
    seed: int = 0,
    dtype: Any = np.float32,
    negative_slope: float = NEGATIVE_SLOPE,
    q_range: Tuple[float, float] = (1.0, 0.25),
    table_half_width: int = GAUSSIAN_HALF_WIDTH,
) -> Model:
    if latent_channels < 1 or hyper_channels < 1:
        raise ValidationError(f"latent/hyper channels must be positive, got {latent_channels}, {hyper_channels}")
    if not 1 <= num_stages <= 4:
        raise ValidationError(f"num_stages must be in 1..4, got {num_stages}")
    # Each submodule draws from its own stream so that, e.g., the encoder of
    # a given seed does not depend on the decoder scheme.
    enc_ss, dec_ss, hyper_ss, fusion_ss, prior_ss = np.random.SeedSequence(seed).spawn(5)
    hyper_rng = np.random.default_rng(hyper_ss)
    model = Model(
        encoder=Encoder.build(np.random.default_rng(enc_ss), enc_scheme, latent_channels, num_stages, dtype, negative_slope),
        decoder=Decoder.build(np.random.default_rng(dec_ss), dec_scheme, latent_channels, num_stages, dtype, negative_slope),
        hyper_encoder=build_hyper_encoder(hyper_rng, latent_channels, hyper_channels, dtype, negative_slope),
        hyper_decoder=build_hyper_decoder(hyper_rng, latent_channels, hyper_channels, dtype, negative_slope),
        fusion=build_fusion(np.random.default_rng(fusion_ss), latent_channels, dtype, negative_slope),
        quant=QuantSteps.build(num_rates, latent_channels, q_range, dtype),
        prior=FactorizedPrior(hyper_channels, rng=np.random.default_rng(prior_ss), dtype=dtype),
        latent_channels=latent_channels,
        hyper_channels=hyper_channels,
        num_stages=num_stages,
        table_half_width=table_half_width,
    )
    logger.debug(
        "built model enc=%s dec=%s latent=%d hyper=%d stages=%d",
        enc_scheme.widths,
        dec_scheme.widths,
        latent_channels,
        hyper_channels,
        num_stages,
    )
    return model


def _uniform_noise(rng: np.random.Generator, shape: Tuple[int, ...], dtype: Any) -> Tensor:
    return Tensor(rng.uniform(-0.5, 0.5, shape).astype(dtype))


def quantize(
    y: Tensor,
    q: QuantSteps,
    rate_index: int,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tuple[Optional[np.ndarray], Tensor]:
    """Quantise latents with step ``q_global[rate_index] * q_ch``.

    ``eval`` returns integer symbols and their reconstruction; ``train``
    returns no symbols and the additive-noise relaxation.
    """
    if y.ndim != 4 or y.shape[1] != q.log_channel.shape[0]:
        raise ShapeError(f"latent shape {y.shape} does not match {q.log_channel.shape[0]} step channels")
    if mode == "eval":
        step = q.step_array(rate_index)[None, :, None, None]
        symbols = np.rint(y.data / step).astype(np.int64)
        return symbols, Tensor((symbols * step).astype(y.dtype))
    if mode == "train":
        rng = rng or np.random.default_rng()
        s = exp(q.log_step(rate_index))
        return None, y + channel_scale(_uniform_noise(rng, y.shape, y.dtype), s)
    raise ValidationError(f"unknown quantisation mode {mode!r}")


def anchor_mask(h: int, w: int) -> np.ndarray:
    """Checkerboard anchors: positions with (row + col) even."""
    return (np.add.outer(np.arange(h), np.arange(w)) % 2) == 0


def spatial_split(y: Tensor | np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Anchor and non-anchor values, each packed as [N, C, K] in row-major order."""
    arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    anchors = anchor_mask(arr.shape[2], arr.shape[3])
    return arr[:, :, anchors], arr[:, :, ~anchors]


def spatial_merge(y1: np.ndarray, y2: np.ndarray, height: int, width: int) -> np.ndarray:
    anchors = anchor_mask(height, width)
    n, c = y1.shape[:2]
    if y1.shape[2] != anchors.sum() or y2.shape[2] != anchors.size - anchors.sum() or y2.shape[:2] != (n, c):
        raise ShapeError(f"cannot merge {y1.shape} and {y2.shape} into {height}x{width}")
    out = np.empty((n, c, height, width), dtype=np.result_type(y1, y2))
    out[:, :, anchors] = y1
    out[:, :, ~anchors] = y2
    return out


def _gaussian_from(p: Tensor, latent: int) -> GaussianParams:
    mean = slice_channels(p, 0, latent)
    raw = slice_channels(p, latent, 2 * latent)
    scale = exp(clamp(raw, math.log(SCALE_MIN), math.log(SCALE_MAX)))
    return GaussianParams(mean, scale)


def entropy_params(
    z_hat: Tensor | None,
    model: Model,
    y1_hat: Tensor | None = None,
    stage: int = 1,
    hyper: Tensor | None = None,
) -> GaussianParams:
    """Gaussian parameters for the anchors (stage 1) or non-anchors (stage 2).

    ``y1_hat`` is the full-size latent holding reconstructed anchors and zeros
    elsewhere. ``hyper`` may carry an already computed hyper-decoder output.
    """
    if hyper is None:
        if z_hat is None:
            raise SequencingError("entropy_params needs z_hat or a precomputed hyper output")
        hyper = model.hyper_decoder.forward(z_hat)
    if stage == 1:
        return _gaussian_from(hyper, model.latent_channels)
    if stage != 2:
        raise ValidationError(f"stage must be 1 or 2, got {stage}")
    if y1_hat is None:
        raise SequencingError("stage-2 entropy parameters need the reconstructed anchors")
    if y1_hat.shape[1] != model.latent_channels or y1_hat.shape[2:] != hyper.shape[2:]:
        raise ShapeError(f"anchors {y1_hat.shape} do not align with hyper output {hyper.shape}")
    return _gaussian_from(model.fusion.forward(concat_channels([hyper, y1_hat])), model.latent_channels)


@dataclass
class ForwardOutputs:
    x_hat: Tensor
    bits_y: Tensor
    bits_z: Tensor
    y: Tensor
    y_tilde: Tensor


def forward_train(
    model: Model,
    x: Tensor,
    rate_index: int,
    rng: np.random.Generator,
    context: str = "ste",
) -> ForwardOutputs:
    """Noisy-relaxation forward pass returning per-sample bit estimates.

    ``context`` picks what the non-anchor prior sees at anchor positions:
    ``ste`` rounds to the step lattice with a straight-through gradient,
    ``noise`` reuses the noisy latent.
    """
    if context not in ("ste", "noise"):
        raise ValidationError(f"context must be 'ste' or 'noise', got {context!r}")
    y = model.encoder.forward(x)
    _, y_tilde = quantize(y, model.quant, rate_index, mode="train", rng=rng)
    log_s = model.quant.log_step(rate_index)
    s = exp(log_s)

    z = model.hyper_encoder.forward(y)
    z_tilde = z + _uniform_noise(rng, z.shape, z.dtype)
    bits_z = sum_per_sample(model.prior.bits(z_tilde))

    hyper = model.hyper_decoder.forward(z_tilde)
    if hyper.shape[2:] != y.shape[2:]:
        raise ShapeError(f"hyper output {hyper.shape} does not align with latent {y.shape}; pad inputs to multiples of {model.spatial_multiple}")
    anchors = np.broadcast_to(anchor_mask(*y.shape[2:]), y.shape).astype(y.dtype)
    if context == "ste":
        y_ctx = channel_scale(round_ste(channel_scale(y, exp(-log_s))), s)
    else:
        y_ctx = y_tilde
    y1_hat = y_ctx * Tensor(anchors)

    p1 = entropy_params(None, model, hyper=hyper)
    p2 = entropy_params(None, model, y1_hat=y1_hat, stage=2, hyper=hyper)
    half = channel_scale(Tensor(np.full(y.shape, 0.5, dtype=y.dtype)), s)
    bits1 = gaussian_bits(y_tilde, p1.mean, p1.scale, half) * Tensor(anchors)
    bits2 = gaussian_bits(y_tilde, p2.mean, p2.scale, half) * Tensor(1.0 - anchors)
    bits_y = sum_per_sample(bits1 + bits2)

    x_hat = model.decoder.forward(y_tilde)
    return ForwardOutputs(x_hat=x_hat, bits_y=bits_y, bits_z=bits_z, y=y, y_tilde=y_tilde)


def _tables_at(params: GaussianParams, step: np.ndarray, where: np.ndarray, half_width: int):
    means = (params.mean.data / step[None, :, None, None])[:, :, where]
    scales = (params.scale.data / step[None, :, None, None])[:, :, where]
    return gaussian_table_set(means.reshape(-1), scales.reshape(-1), half_width)


def _check_rate(model: Model, rate_index: int) -> None:
    if not 0 <= rate_index < model.quant.num_rates:
        raise ValidationError(f"rate_index {rate_index} outside [0, {model.quant.num_rates})")


def compress(
    image: Tensor | np.ndarray,
    model: Model,
    rate_index: int,
    size: Tuple[int, int] | None = None,
) -> Bitstream:
    """Encode a padded [1, 3, H, W] image; ``size`` is the (width, height) before padding."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=model.dtype))
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise ShapeError(f"compress expects one [1, 3, H, W] image, got {x.shape}")
    _check_rate(model, rate_index)
    h, w = x.shape[2:]
    mult = model.spatial_multiple
    if h % mult or w % mult:
        raise ValidationError(f"image {w}x{h} is not padded to multiples of {mult}")
    width, height = size or (w, h)

    y = model.encoder.forward(x)
    symbols, y_hat = quantize(y, model.quant, rate_index, mode="eval")
    step = model.quant.step_array(rate_index)

    z = model.hyper_encoder.forward(y)
    z_stream, z_symbols = factorized_rate_and_code(z, model.prior, mode="encode")
    hyper = model.hyper_decoder.forward(Tensor(z_symbols.astype(model.dtype)))

    anchors = anchor_mask(*y.shape[2:])
    p1 = entropy_params(None, model, hyper=hyper)
    y1_stream = _tables_at(p1, step, anchors, model.table_half_width).encode(symbols[:, :, anchors].reshape(-1))

    y1_hat = Tensor((y_hat.data * anchors).astype(model.dtype))
    p2 = entropy_params(None, model, y1_hat=y1_hat, stage=2, hyper=hyper)
    y2_stream = _tables_at(p2, step, ~anchors, model.table_half_width).encode(symbols[:, :, ~anchors].reshape(-1))
    return Bitstream(rate_index, width, height, z_stream, y1_stream, y2_stream)


def latent_shapes(model: Model, width: int, height: int) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    mult = model.spatial_multiple
    hp, wp = -(-height // mult) * mult, -(-width // mult) * mult
    y_hw = (hp // model.latent_stride, wp // model.latent_stride)
    return y_hw, (y_hw[0] // 4, y_hw[1] // 4)


def decode_symbols(bs: Bitstream, model: Model) -> np.ndarray:
    """Integer latent symbols carried by ``bs``, shape [1, C, H/stride, W/stride]."""
    _check_rate(model, bs.rate_index)
    (yh, yw), (zh, zw) = latent_shapes(model, bs.width, bs.height)
    step = model.quant.step_array(bs.rate_index)
    z_symbols = factorized_decode(bs.z_stream, model.prior, (1, model.hyper_channels, zh, zw))
    hyper = model.hyper_decoder.forward(Tensor(z_symbols.astype(model.dtype)))

    anchors = anchor_mask(yh, yw)
    c = model.latent_channels
    p1 = entropy_params(None, model, hyper=hyper)
    y1 = _tables_at(p1, step, anchors, model.table_half_width).decode(bs.y1_stream).reshape(1, c, -1)
    zeros = np.zeros((1, c, anchors.size - anchors.sum()), dtype=np.int64)
    y1_full = spatial_merge(y1, zeros, yh, yw) * step[None, :, None, None]
    p2 = entropy_params(None, model, y1_hat=Tensor(y1_full.astype(model.dtype)), stage=2, hyper=hyper)
    y2 = _tables_at(p2, step, ~anchors, model.table_half_width).decode(bs.y2_stream).reshape(1, c, -1)
    return spatial_merge(y1, y2, yh, yw)


def decompress(bs: Bitstream | bytes, model: Model) -> np.ndarray:
    """Reconstruct the image carried by ``bs``, cropped to its pre-padding size, in [0, 1]."""
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bytes(bs))
    try:
        symbols = decode_symbols(bs, model)
    except (ShapeError, ValidationError) as exc:
        raise DecodeError(f"stream does not match the model: {exc}") from exc
    return synthesize(symbols, bs, model)


def synthesize(symbols: np.ndarray, bs: Bitstream, model: Model) -> np.ndarray:
    """Decoder pass over dequantised symbols, cropped to the size recorded in ``bs``."""
    step = model.quant.step_array(bs.rate_index)
    y_hat = Tensor((symbols * step[None, :, None, None]).astype(model.dtype))
    x_hat = model.decoder.forward(y_hat).data
    return np.clip(x_hat[:, :, : bs.height, : bs.width], 0.0, 1.0)


def count_params(model: Model) -> Dict[str, int]:
    enc = sum(p.data.size for _, p in model.encoder.named_parameters())
    dec = sum(p.data.size for _, p in model.decoder.named_parameters())
    shared = sum(p.data.size for _, p in model.shared_parameters())
    return {"encoder": enc, "decoder": dec, "others": shared - dec, "total": enc + shared}


def count_macs(model: Model, height: int, width: int) -> Dict[str, int]:
    """Multiply-accumulates per submodule for one image of the given size."""
    enc, yh, yw = model.encoder.macs(height, width)
    dec, _, _ = model.decoder.macs(yh, yw)
    hyper_enc, zh, zw = model.hyper_encoder.macs(yh, yw)
    hyper_dec, _, _ = model.hyper_decoder.macs(zh, zw)
    fusion, _, _ = model.fusion.macs(yh, yw)
    others = hyper_enc + hyper_dec + fusion
    return {"encoder": enc, "decoder": dec, "others": others, "total": enc + dec + others}
