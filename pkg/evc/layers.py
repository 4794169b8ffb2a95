"""Building blocks of the analysis/synthesis transforms.

Blocks own their convolutions as :class:`~evc.tensor.ConvParams` and carry
optional mask slots. A slot holding ``None`` is the identity; pruning fills
the slots with mask layers (see :mod:`evc.mask_decay`), and a mask object
placed in several slots is the same object, so its values are shared.
"""

from __future__ import annotations

import math
from typing import Any, List, Optional, Tuple

import numpy as np

from evc.errors import ShapeError
from evc.tensor import (
    ConvParams,
    Tensor,
    channel_scale,
    conv2d,
    leaky_relu,
    parameter,
    subpixel_upsample,
)

NEGATIVE_SLOPE = 0.01

NamedConvs = List[Tuple[str, ConvParams]]


def init_conv(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    kernel: int,
    stride: int = 1,
    groups: int = 1,
    dtype: Any = np.float32,
) -> ConvParams:
    fan_in = (c_in // groups) * kernel * kernel
    bound = 1.0 / math.sqrt(fan_in)
    weight = rng.uniform(-bound, bound, (c_out, c_in // groups, kernel, kernel)).astype(dtype)
    bias = rng.uniform(-bound, bound, (c_out,)).astype(dtype)
    return ConvParams(parameter(weight), parameter(bias), stride=stride, padding=kernel // 2, groups=groups)


def conv_output_size(size: int, p: ConvParams) -> int:
    return (size + 2 * p.padding - p.kernel) // p.stride + 1


def conv_macs(p: ConvParams, h: int, w: int) -> Tuple[int, int, int]:
    """Multiply-accumulates of one conv on an h x w input, plus its output extents."""
    ho, wo = conv_output_size(h, p), conv_output_size(w, p)
    per_pixel = p.c_out * (p.c_in // p.groups) * p.kernel * p.kernel
    return per_pixel * ho * wo, ho, wo


def apply_mask(x: Tensor, mask: Optional[Any]) -> Tensor:
    return x if mask is None else channel_scale(x, mask.m)


class ResidualBlock:
    """Conv#1 3x3 (strided) -> mask -> leaky -> Conv#2 3x3, plus a 1x1 Conv#3 shortcut."""

    def __init__(self, conv1: ConvParams, conv2: ConvParams, conv3: ConvParams, slope: float = NEGATIVE_SLOPE) -> None:
        self.conv1, self.conv2, self.conv3 = conv1, conv2, conv3
        self.slope = slope
        self.inner_mask = None
        self.out_mask = None

    @classmethod
    def build(cls, rng: np.random.Generator, c_in: int, c_out: int, stride: int, dtype: Any, slope: float) -> "ResidualBlock":
        return cls(
            init_conv(rng, c_in, c_out, 3, stride=stride, dtype=dtype),
            init_conv(rng, c_out, c_out, 3, dtype=dtype),
            init_conv(rng, c_in, c_out, 1, stride=stride, dtype=dtype),
            slope,
        )

    def forward(self, x: Tensor) -> Tensor:
        h = apply_mask(conv2d(x, self.conv1), self.inner_mask)
        h = conv2d(leaky_relu(h, self.slope), self.conv2)
        return apply_mask(h + conv2d(x, self.conv3), self.out_mask)

    def named_convs(self, prefix: str) -> NamedConvs:
        return [(f"{prefix}.conv1", self.conv1), (f"{prefix}.conv2", self.conv2), (f"{prefix}.conv3", self.conv3)]

    def macs(self, h: int, w: int) -> Tuple[int, int, int]:
        m1, ho, wo = conv_macs(self.conv1, h, w)
        m2, _, _ = conv_macs(self.conv2, ho, wo)
        m3, _, _ = conv_macs(self.conv3, h, w)
        return m1 + m2 + m3, ho, wo


class DepthConvBlock:
    """Depthwise branch and a x4 feed-forward branch, each added onto its input.

    The output mask scales each branch before its identity addition, so
    the skip path is never scaled.
    """

    def __init__(
        self,
        conv1: ConvParams,
        depthwise: ConvParams,
        conv2: ConvParams,
        conv3: ConvParams,
        conv4: ConvParams,
        slope: float = NEGATIVE_SLOPE,
    ) -> None:
        self.conv1, self.depthwise, self.conv2 = conv1, depthwise, conv2
        self.conv3, self.conv4 = conv3, conv4
        self.slope = slope
        self.inner_mask = None
        self.ffn_mask = None
        self.out_mask = None

    @classmethod
    def build(
        cls,
        rng: np.random.Generator,
        channels: int,
        dtype: Any,
        slope: float,
        inner: int | None = None,
        ffn: int | None = None,
    ) -> "DepthConvBlock":
        inner = inner or channels
        ffn = ffn or 4 * channels
        return cls(
            init_conv(rng, channels, inner, 1, dtype=dtype),
            init_conv(rng, inner, inner, 3, groups=inner, dtype=dtype),
            init_conv(rng, inner, channels, 1, dtype=dtype),
            init_conv(rng, channels, ffn, 1, dtype=dtype),
            init_conv(rng, ffn, channels, 1, dtype=dtype),
            slope,
        )

    def forward(self, x: Tensor) -> Tensor:
        h = leaky_relu(conv2d(x, self.conv1), self.slope)
        h = conv2d(conv2d(apply_mask(h, self.inner_mask), self.depthwise), self.conv2)
        x = x + apply_mask(h, self.out_mask)
        f = apply_mask(leaky_relu(conv2d(x, self.conv3), self.slope), self.ffn_mask)
        return x + apply_mask(conv2d(f, self.conv4), self.out_mask)

    def named_convs(self, prefix: str) -> NamedConvs:
        return [
            (f"{prefix}.conv1", self.conv1),
            (f"{prefix}.depthwise", self.depthwise),
            (f"{prefix}.conv2", self.conv2),
            (f"{prefix}.conv3", self.conv3),
            (f"{prefix}.conv4", self.conv4),
        ]

    def macs(self, h: int, w: int) -> Tuple[int, int, int]:
        total = sum(conv_macs(p, h, w)[0] for _, p in self.named_convs(""))
        return total, h, w


class ResUpBlock:
    """Sub-pixel x2 residual block mirroring :class:`ResidualBlock` on the synthesis side."""

    def __init__(self, conv1: ConvParams, conv2: ConvParams, conv3: ConvParams, slope: float = NEGATIVE_SLOPE) -> None:
        self.conv1, self.conv2, self.conv3 = conv1, conv2, conv3
        self.slope = slope
        self.inner_mask = None
        self.out_mask = None

    @classmethod
    def build(cls, rng: np.random.Generator, c_in: int, c_out: int, dtype: Any, slope: float) -> "ResUpBlock":
        return cls(
            init_conv(rng, c_in, 4 * c_out, 3, dtype=dtype),
            init_conv(rng, c_out, c_out, 3, dtype=dtype),
            init_conv(rng, c_in, 4 * c_out, 1, dtype=dtype),
            slope,
        )

    def forward(self, x: Tensor) -> Tensor:
        h = apply_mask(subpixel_upsample(conv2d(x, self.conv1), 2), self.inner_mask)
        h = conv2d(leaky_relu(h, self.slope), self.conv2)
        return apply_mask(h + subpixel_upsample(conv2d(x, self.conv3), 2), self.out_mask)

    def named_convs(self, prefix: str) -> NamedConvs:
        return [(f"{prefix}.conv1", self.conv1), (f"{prefix}.conv2", self.conv2), (f"{prefix}.conv3", self.conv3)]

    def macs(self, h: int, w: int) -> Tuple[int, int, int]:
        m1, _, _ = conv_macs(self.conv1, h, w)
        m3, _, _ = conv_macs(self.conv3, h, w)
        m2, _, _ = conv_macs(self.conv2, 2 * h, 2 * w)
        return m1 + m2 + m3, 2 * h, 2 * w


class ConvStack:
    """Plain conv chain with leaky ReLU between layers and optional x2 sub-pixel steps."""

    def __init__(self, convs: List[ConvParams], upsample: List[bool], slope: float = NEGATIVE_SLOPE) -> None:
        if len(convs) != len(upsample):
            raise ShapeError(f"{len(convs)} convs but {len(upsample)} upsample flags")
        self.convs = convs
        self.upsample = upsample
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        last = len(self.convs) - 1
        for i, (p, up) in enumerate(zip(self.convs, self.upsample)):
            x = conv2d(x, p)
            if up:
                x = subpixel_upsample(x, 2)
            if i < last:
                x = leaky_relu(x, self.slope)
        return x

    def named_convs(self, prefix: str) -> NamedConvs:
        return [(f"{prefix}.conv{i}", p) for i, p in enumerate(self.convs)]

    def macs(self, h: int, w: int) -> Tuple[int, int, int]:
        total = 0
        for p, up in zip(self.convs, self.upsample):
            m, h, w = conv_macs(p, h, w)
            total += m
            if up:
                h, w = 2 * h, 2 * w
        return total, h, w


def conv_parameters(named: NamedConvs) -> List[Tuple[str, Tensor]]:
    out: List[Tuple[str, Tensor]] = []
    for name, p in named:
        out.append((f"{name}.weight", p.weight))
        out.append((f"{name}.bias", p.bias))
    return out
