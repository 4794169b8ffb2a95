"""Range coder and the discretised probability models for y and z.

The coder is integer-only (LZMA-style carry propagation, 32-bit range,
16-bit probability resolution), so identical tables and symbols give
identical bytes on every host. Tables are built from float model outputs
and then integerised with a floor of one count per symbol.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, ndtr

from evc.errors import DecodeError, ShapeError, ValidationError
from evc.tensor import Function, Tensor, parameter, tsum

logger = logging.getLogger(__name__)

PROB_BITS = 16
TOTAL = 1 << PROB_BITS
TOP = 1 << 24
MASK32 = 0xFFFFFFFF
LIKELIHOOD_FLOOR = 1e-9
BYPASS_CHUNKS = 2

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LN2 = math.log(2.0)


class RangeEncoder:
    """Carry-propagating range encoder over a fixed 2^16 total frequency."""

    def __init__(self) -> None:
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._finished = False

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, start: int, size: int) -> None:
        if size <= 0 or start < 0 or start + size > TOTAL:
            raise ValidationError(f"invalid coding interval start={start} size={size}")
        r = self.range >> PROB_BITS
        self.low += r * start
        self.range = r * size
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bypass(self, value: int) -> None:
        """Write a non-negative 32-bit value as two uniform 16-bit chunks."""
        if not 0 <= value <= MASK32:
            raise ValidationError(f"bypass value {value} does not fit in 32 bits")
        self.encode(value >> 16, 1)
        self.encode(value & 0xFFFF, 1)

    def finish(self) -> bytes:
        if not self._finished:
            for _ in range(5):
                self._shift_low()
            self._finished = True
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes) -> None:
        self.data = bytes(data)
        self.pos = 0
        self.range = MASK32
        self.code = 0
        self._r = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._next_byte()) & MASK32

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise DecodeError("range decoder read past end of stream", offset=self.pos)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_freq(self) -> int:
        self._r = self.range >> PROB_BITS
        count = self.code // self._r
        if count >= TOTAL:
            raise DecodeError(f"decoded frequency {count} outside table total {TOTAL}", offset=self.pos)
        return count

    def consume(self, start: int, size: int) -> None:
        self.code -= self._r * start
        self.range = self._r * size
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next_byte()) & MASK32
            self.range <<= 8

    def decode_bypass(self) -> int:
        value = 0
        for _ in range(BYPASS_CHUNKS):
            chunk = self.decode_freq()
            self.consume(chunk, 1)
            value = (value << 16) | chunk
        return value


def zigzag(value: int) -> int:
    if not -(1 << 31) <= value < (1 << 31):
        raise ValidationError(f"symbol {value} outside the 32-bit escape range")
    return value << 1 if value >= 0 else (-value << 1) - 1


def unzigzag(value: int) -> int:
    return value >> 1 if value % 2 == 0 else -((value + 1) >> 1)


def integerize(probs: np.ndarray, total: int = TOTAL) -> np.ndarray:
    """Turn rows of probabilities into integer counts summing to ``total``.

    Every symbol gets at least one count; the rest is shared out by largest
    remainder with ties going to the lowest index.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    rows, n = probs.shape
    if n > total:
        raise ValidationError(f"alphabet of {n} symbols does not fit in total {total}")
    probs = np.clip(probs, 0.0, None)
    norm = probs.sum(axis=1, keepdims=True)
    probs = np.where(norm > 0, probs / np.where(norm > 0, norm, 1.0), 1.0 / n)
    spare = total - n
    scaled = probs * spare
    base = np.floor(scaled).astype(np.int64)
    remainder = np.clip(spare - base.sum(axis=1), 0, n)
    order = np.argsort(-(scaled - base), axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(n), (rows, n)), axis=1)
    counts = 1 + base + (rank < remainder[:, None])
    return counts


@dataclass
class DiscreteCDF:
    """Integer frequency table over [s_min, s_max], optionally with an escape slot."""

    s_min: int
    s_max: int
    counts: np.ndarray
    escape: bool = True
    cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.s_min > self.s_max:
            raise ValidationError(f"empty alphabet: s_min={self.s_min} > s_max={self.s_max}")
        expected = self.s_max - self.s_min + 1 + int(self.escape)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (expected,):
            raise ShapeError(f"expected {expected} counts, got {self.counts.shape}")
        if self.counts.min() < 1 or int(self.counts.sum()) != TOTAL:
            raise ValidationError(f"counts must be >= 1 and sum to {TOTAL}, got sum {int(self.counts.sum())}")
        self.cdf = np.concatenate([[0], np.cumsum(self.counts)])

    @classmethod
    def from_probabilities(cls, probs: Sequence[float], s_min: int = 0, escape: bool = True) -> "DiscreteCDF":
        probs = np.asarray(probs, dtype=np.float64)
        n_sym = probs.shape[0] - int(escape)
        return cls(s_min=s_min, s_max=s_min + n_sym - 1, counts=integerize(probs)[0], escape=escape)

    @property
    def escape_index(self) -> int:
        return self.s_max - self.s_min + 1

    def probability(self, symbol: int) -> float:
        if self.s_min <= symbol <= self.s_max:
            return int(self.counts[symbol - self.s_min]) / TOTAL
        if not self.escape:
            return 0.0
        return int(self.counts[self.escape_index]) / TOTAL


def encode_symbol(enc: RangeEncoder, cdf: DiscreteCDF, symbol: int) -> None:
    if cdf.s_min <= symbol <= cdf.s_max:
        idx = symbol - cdf.s_min
        enc.encode(int(cdf.cdf[idx]), int(cdf.counts[idx]))
        return
    if not cdf.escape:
        raise ValidationError(f"symbol {symbol} outside [{cdf.s_min}, {cdf.s_max}] and table has no escape")
    idx = cdf.escape_index
    enc.encode(int(cdf.cdf[idx]), int(cdf.counts[idx]))
    enc.encode_bypass(zigzag(symbol))


def decode_symbol(dec: RangeDecoder, cdf: DiscreteCDF) -> int:
    count = dec.decode_freq()
    idx = int(np.searchsorted(cdf.cdf, count, side="right")) - 1
    dec.consume(int(cdf.cdf[idx]), int(cdf.counts[idx]))
    if cdf.escape and idx == cdf.escape_index:
        return unzigzag(dec.decode_bypass())
    return cdf.s_min + idx


class TableSet:
    """Many escape-capable tables sharing one alphabet width, one row per symbol.

    Row ``i`` covers ``[offsets[i], offsets[i] + width - 1]``; column ``width``
    is the escape slot.
    """

    def __init__(self, offsets: np.ndarray, counts: np.ndarray) -> None:
        if counts.ndim != 2 or counts.shape[0] != offsets.shape[0]:
            raise ShapeError(f"table set: {counts.shape} counts for {offsets.shape} offsets")
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.counts = counts
        self.width = counts.shape[1] - 1
        self.cum = np.concatenate([np.zeros((counts.shape[0], 1), dtype=np.int64), np.cumsum(counts, axis=1)], axis=1)

    def __len__(self) -> int:
        return self.offsets.shape[0]

    def row(self, i: int) -> DiscreteCDF:
        lo = int(self.offsets[i])
        return DiscreteCDF(s_min=lo, s_max=lo + self.width - 1, counts=self.counts[i], escape=True)

    def encode(self, symbols: np.ndarray) -> bytes:
        symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
        if symbols.shape[0] != len(self):
            raise ShapeError(f"{symbols.shape[0]} symbols for {len(self)} tables")
        enc = RangeEncoder()
        rel = (symbols - self.offsets).tolist()
        cum = self.cum.tolist()
        counts = self.counts.tolist()
        width = self.width
        for i, idx in enumerate(rel):
            if 0 <= idx < width:
                enc.encode(cum[i][idx], counts[i][idx])
            else:
                enc.encode(cum[i][width], counts[i][width])
                enc.encode_bypass(zigzag(int(symbols[i])))
        return enc.finish()

    def decode(self, data: bytes) -> np.ndarray:
        dec = RangeDecoder(data)
        out = np.empty(len(self), dtype=np.int64)
        width = self.width
        offsets = self.offsets.tolist()
        for i in range(len(self)):
            row = self.cum[i]
            count = dec.decode_freq()
            idx = int(np.searchsorted(row, count, side="right")) - 1
            dec.consume(int(row[idx]), int(row[idx + 1] - row[idx]))
            if idx == width:
                out[i] = unzigzag(dec.decode_bypass())
            else:
                out[i] = offsets[i] + idx
        return out


def _gaussian_interval_probs(means: np.ndarray, scales: np.ndarray, lo: np.ndarray, width: int) -> np.ndarray:
    """Per-row probabilities of symbols lo..lo+width-1 plus the two-sided tail mass."""
    k = lo[:, None] + np.arange(width)[None, :]
    centred = np.abs(k - means[:, None])
    sig = scales[:, None]
    probs = ndtr((0.5 - centred) / sig) - ndtr((-0.5 - centred) / sig)
    below = ndtr((lo - 0.5 - means) / scales)
    above = ndtr(-((lo + width - 1) + 0.5 - means) / scales)
    return np.concatenate([probs, (below + above)[:, None]], axis=1)


def gaussian_cdf_table(mean: float, scale: float, s_min: int, s_max: int) -> DiscreteCDF:
    """Discretised Gaussian over [s_min, s_max] with an escape slot for the tails."""
    if s_min > s_max:
        raise ValidationError(f"empty alphabet: s_min={s_min} > s_max={s_max}")
    if not scale > 0:
        raise ValidationError(f"scale must be positive, got {scale}")
    probs = _gaussian_interval_probs(
        np.array([mean], dtype=np.float64), np.array([scale], dtype=np.float64), np.array([s_min]), s_max - s_min + 1
    )
    return DiscreteCDF(s_min=s_min, s_max=s_max, counts=integerize(probs)[0], escape=True)


def gaussian_table_set(means: np.ndarray, scales: np.ndarray, half_width: int) -> TableSet:
    """One table per element, centred on round(mean), in quantisation-step units."""
    means = np.asarray(means, dtype=np.float64).reshape(-1)
    scales = np.asarray(scales, dtype=np.float64).reshape(-1)
    if np.any(scales <= 0):
        raise ValidationError("gaussian scales must be positive")
    lo = np.rint(means).astype(np.int64) - half_width
    probs = _gaussian_interval_probs(means, scales, lo, 2 * half_width + 1)
    return TableSet(lo, integerize(probs))


@dataclass
class GaussianParams:
    mean: Tensor
    scale: Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.scale.shape:
            raise ShapeError(f"mean {self.mean.shape} and scale {self.scale.shape} differ")


class GaussianBits(Function):
    """Elementwise -log2 P(y) of a Gaussian integrated over [y - half, y + half]."""

    def forward(self, y: np.ndarray, mu: np.ndarray, sigma: np.ndarray, half: np.ndarray) -> np.ndarray:
        for name, a in (("mean", mu), ("scale", sigma), ("half-step", half)):
            if a.shape != y.shape:
                raise ShapeError(f"gaussian_bits: {name} shape {a.shape} != value shape {y.shape}")
        diff = y - mu
        v = np.abs(diff)
        upper = (half - v) / sigma
        lower = (-half - v) / sigma
        p = ndtr(upper) - ndtr(lower)
        live = p >= LIKELIHOOD_FLOOR
        p_safe = np.where(live, p, LIKELIHOOD_FLOOR)
        self.saved.update(sign=np.sign(diff), upper=upper, lower=lower, sigma=sigma, p=p_safe, live=live)
        return (-np.log2(p_safe)).astype(y.dtype, copy=False)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        s = self.saved
        phi_u = np.exp(-0.5 * s["upper"] ** 2) * _INV_SQRT_2PI
        phi_l = np.exp(-0.5 * s["lower"] ** 2) * _INV_SQRT_2PI
        sigma = s["sigma"]
        d_bits = np.where(s["live"], -grad / (s["p"] * _LN2), 0.0)
        dp_dv = (phi_l - phi_u) / sigma
        dp_dsigma = -(s["upper"] * phi_u - s["lower"] * phi_l) / sigma
        dp_dhalf = (phi_u + phi_l) / sigma
        g_v = d_bits * dp_dv
        dtype = grad.dtype
        return (
            (g_v * s["sign"]).astype(dtype),
            (-g_v * s["sign"]).astype(dtype),
            (d_bits * dp_dsigma).astype(dtype),
            (d_bits * dp_dhalf).astype(dtype),
        )


def gaussian_bits(y: Tensor, mu: Tensor, sigma: Tensor, half: Tensor) -> Tensor:
    return GaussianBits.apply(y, mu, sigma, half)


def rate_estimate(
    y_tilde: Tensor,
    params: GaussianParams,
    half: Tensor | None = None,
    where: np.ndarray | None = None,
) -> Tensor:
    """Differentiable bit count of ``y_tilde`` under ``params``.

    ``half`` is half the quantisation step at every element (unit step when
    omitted); ``where`` restricts the sum to a constant 0/1 selection.
    """
    if half is None:
        half = Tensor(np.full(y_tilde.shape, 0.5, dtype=y_tilde.dtype))
    bits = gaussian_bits(y_tilde, params.mean, params.scale, half)
    if where is not None:
        bits = bits * Tensor(np.broadcast_to(where, bits.shape).astype(bits.dtype))
    return tsum(bits)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


class FactorizedLogits(Function):
    """Per-channel monotone map of a value to the logit of its cumulative.

    Inputs are the [N, C, H, W] values followed by (matrix, bias, factor)
    per stage, the last stage having no factor.
    """

    def forward(self, x: np.ndarray, *params: np.ndarray, offset: float = 0.0) -> np.ndarray:
        n, c, h, w = x.shape
        v = (x + x.dtype.type(offset)).transpose(1, 0, 2, 3).reshape(c, 1, -1)
        n_stages = (len(params) + 1) // 3
        trace = []
        for k in range(n_stages):
            mat, bias = params[3 * k], params[3 * k + 1]
            weight = _softplus(mat)
            u = np.einsum("coi,cim->com", weight, v) + bias
            if k < n_stages - 1:
                ta = np.tanh(params[3 * k + 2])
                t = np.tanh(u)
                trace.append((v, mat, weight, t, ta))
                v = u + ta * t
            else:
                trace.append((v, mat, weight, None, None))
                v = u
        self.saved.update(trace=trace, shape=x.shape)
        return v.reshape(c, n, h, w).transpose(1, 0, 2, 3).astype(x.dtype, copy=False)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        n, c, h, w = self.saved["shape"]
        g = grad.transpose(1, 0, 2, 3).reshape(c, 1, -1)
        grads: List[np.ndarray] = []
        for v_prev, mat, weight, t, ta in reversed(self.saved["trace"]):
            if t is None:
                g_u = g
                stage = []
            else:
                g_u = g * (1.0 + ta * (1.0 - t * t))
                g_factor = (g * t).sum(axis=2, keepdims=True) * (1.0 - ta * ta)
                stage = [g_factor]
            g_bias = g_u.sum(axis=2, keepdims=True)
            g_mat = np.einsum("com,cim->coi", g_u, v_prev) * expit(mat)
            g = np.einsum("coi,com->cim", weight, g_u)
            grads = [g_mat, g_bias] + stage + grads
        g_x = g.reshape(c, n, h, w).transpose(1, 0, 2, 3)
        return tuple(a.astype(grad.dtype, copy=False) for a in [g_x] + grads)


class LogisticIntervalBits(Function):
    """-log2(sigmoid(upper) - sigmoid(lower)), evaluated on the stable side."""

    def forward(self, upper: np.ndarray, lower: np.ndarray) -> np.ndarray:
        if upper.shape != lower.shape:
            raise ShapeError(f"interval bounds differ in shape: {upper.shape} vs {lower.shape}")
        sign = np.where(upper + lower > 0, -1.0, 1.0)
        su, sl = expit(sign * upper), expit(sign * lower)
        p = np.abs(su - sl)
        live = p >= LIKELIHOOD_FLOOR
        p_safe = np.where(live, p, LIKELIHOOD_FLOOR)
        self.saved.update(su=su, sl=sl, p=p_safe, live=live)
        return (-np.log2(p_safe)).astype(upper.dtype, copy=False)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        s = self.saved
        d_bits = np.where(s["live"], -grad / (s["p"] * _LN2), 0.0)
        g_upper = d_bits * s["su"] * (1.0 - s["su"])
        g_lower = -d_bits * s["sl"] * (1.0 - s["sl"])
        return g_upper.astype(grad.dtype), g_lower.astype(grad.dtype)


class FactorizedPrior:
    """Learned per-channel cumulative model for the hyper-latent z."""

    def __init__(
        self,
        channels: int,
        filters: Sequence[int] = (3, 3, 3),
        init_scale: float = 10.0,
        tail_range: int = 32,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ) -> None:
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.tail_range = tail_range
        widths = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(widths) - 1))
        self.params: List[Tensor] = []
        self.names: List[str] = []
        for k in range(len(widths) - 1):
            fan_in, fan_out = widths[k], widths[k + 1]
            init = math.log(math.expm1(1.0 / scale / fan_out))
            self._add(f"matrix{k}", np.full((channels, fan_out, fan_in), init), dtype)
            self._add(f"bias{k}", rng.uniform(-0.5, 0.5, (channels, fan_out, 1)), dtype)
            if k < len(widths) - 2:
                self._add(f"factor{k}", np.zeros((channels, fan_out, 1)), dtype)

    def _add(self, name: str, value: np.ndarray, dtype) -> None:
        self.params.append(parameter(value.astype(dtype), name=f"prior.{name}"))
        self.names.append(name)

    def named_parameters(self, prefix: str = "prior") -> List[Tuple[str, Tensor]]:
        return [(f"{prefix}.{n}", p) for n, p in zip(self.names, self.params)]

    def logits(self, x: Tensor, offset: float = 0.0) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"factorized prior expects [N, {self.channels}, H, W], got {x.shape}")
        return FactorizedLogits.apply(x, *self.params, offset=offset)

    def bits(self, z_tilde: Tensor) -> Tensor:
        upper = self.logits(z_tilde, 0.5)
        lower = self.logits(z_tilde, -0.5)
        return LogisticIntervalBits.apply(upper, lower)

    def cumulative(self, values: np.ndarray) -> np.ndarray:
        """c(x) per channel for a [C, K] grid of values."""
        grid = Tensor(values[None, :, :, None].astype(self.params[0].dtype))
        return expit(self.logits(grid).data[0, :, :, 0])

    def table_set(self, n_positions: int) -> TableSet:
        """Per-channel integer tables repeated for ``n_positions`` elements each."""
        r = self.tail_range
        ks = np.arange(-r, r + 1, dtype=np.float64)
        grid = np.broadcast_to(ks, (self.channels, ks.shape[0]))
        upper = self.cumulative(grid + 0.5).astype(np.float64)
        lower = self.cumulative(grid - 0.5).astype(np.float64)
        probs = np.clip(upper - lower, 0.0, None)
        tail = lower[:, :1] + (1.0 - upper[:, -1:])
        counts = integerize(np.concatenate([probs, np.clip(tail, 0.0, None)], axis=1))
        offsets = np.full(self.channels, -r, dtype=np.int64)
        return TableSet(np.repeat(offsets, n_positions), np.repeat(counts, n_positions, axis=0))


def factorized_rate_and_code(z: Tensor, prior: FactorizedPrior, mode: str = "train"):
    """Rate (train) or byte stream (encode) of z under the factorized prior.

    ``train`` expects the noisy relaxation and returns a differentiable bit
    total; ``encode`` rounds with unit step, codes channel-major, and returns
    ``(bytes, symbols)``.
    """
    if mode == "train":
        return tsum(prior.bits(z))
    if mode == "encode":
        symbols = np.rint(z.data).astype(np.int64)
        n, c, h, w = symbols.shape
        flat = symbols.transpose(1, 0, 2, 3).reshape(-1)
        return prior.table_set(n * h * w).encode(flat), symbols
    raise ValidationError(f"unknown factorized coding mode {mode!r}")


def factorized_decode(data: bytes, prior: FactorizedPrior, shape: Tuple[int, int, int, int]) -> np.ndarray:
    n, c, h, w = shape
    flat = prior.table_set(n * h * w).decode(data)
    return flat.reshape(c, n, h, w).transpose(1, 0, 2, 3)


MAGIC = b"EVC1"
FORMAT_VERSION = 1
FORMAT_VERSION_WITH_ID = 2
_HEADER = struct.Struct("<4sBBHH")


@dataclass
class Bitstream:
    rate_index: int
    width: int
    height: int
    z_stream: bytes
    y1_stream: bytes
    y2_stream: bytes
    encoder_id: Optional[int] = None

    def to_bytes(self) -> bytes:
        for name, value, limit in (
            ("rate_index", self.rate_index, 0xFF),
            ("width", self.width, 0xFFFF),
            ("height", self.height, 0xFFFF),
        ):
            if not 0 <= value <= limit:
                raise ValidationError(f"{name}={value} does not fit the header field")
        version = FORMAT_VERSION if self.encoder_id is None else FORMAT_VERSION_WITH_ID
        parts = [_HEADER.pack(MAGIC, version, self.rate_index, self.width, self.height)]
        if self.encoder_id is not None:
            parts.append(struct.pack("<B", self.encoder_id))
        for stream in (self.z_stream, self.y1_stream, self.y2_stream):
            parts.append(struct.pack("<I", len(stream)))
            parts.append(stream)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size:
            raise DecodeError(f"bitstream of {len(data)} bytes is shorter than the header", offset=0)
        magic, version, rate_index, width, height = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise DecodeError(f"bad magic {magic!r}", offset=0)
        if version not in (FORMAT_VERSION, FORMAT_VERSION_WITH_ID):
            raise DecodeError(f"unsupported format version {version}", offset=4)
        pos = _HEADER.size
        encoder_id = None
        if version == FORMAT_VERSION_WITH_ID:
            if pos >= len(data):
                raise DecodeError("missing encoder id", offset=pos)
            encoder_id = data[pos]
            pos += 1
        streams = []
        for name in ("z", "y1", "y2"):
            if pos + 4 > len(data):
                raise DecodeError(f"truncated {name}-stream length", offset=pos)
            (length,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + length > len(data):
                raise DecodeError(f"{name}-stream claims {length} bytes, {len(data) - pos} left", offset=pos)
            streams.append(bytes(data[pos : pos + length]))
            pos += length
        if pos != len(data):
            raise DecodeError(f"{len(data) - pos} trailing bytes after y2-stream", offset=pos)
        return cls(rate_index, width, height, streams[0], streams[1], streams[2], encoder_id)

    def strip_encoder_id(self) -> "Bitstream":
        return Bitstream(self.rate_index, self.width, self.height, self.z_stream, self.y1_stream, self.y2_stream)

    @property
    def num_bytes(self) -> int:
        return len(self.to_bytes())
