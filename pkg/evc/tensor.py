"""Dense tensors with tape-based reverse-mode gradients.

Only the layer set the codec uses is implemented: convolution (grouped and
depthwise), leaky ReLU, channel-wise scaling, pixel shuffle, and the
elementwise arithmetic the rate-distortion loss needs. Ops record onto the
innermost active :class:`Tape`; with no tape active they run in plain
inference mode and nothing is retained.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from evc.errors import NonFiniteError, ShapeError, TapeError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_TAPES: List["Tape"] = []


def current_tape() -> Optional["Tape"]:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """A numpy array plus the bookkeeping reverse mode needs.

    ``grad`` is only ever populated on leaves (tensors not produced by a
    recorded op); intermediate gradients live inside :meth:`Tape.backward`.
    """

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: Any = None,
    ) -> None:
        arr = np.asarray(data)
        if dtype is None:
            keep = isinstance(data, np.ndarray) and np.issubdtype(arr.dtype, np.floating)
            dtype = arr.dtype if keep else DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._entry: Optional["TapeEntry"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._entry is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def astype(self, dtype: Any) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise TapeError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return Add.apply(self, other)
        return AddScalar.apply(self, value=float(other))

    __radd__ = __add__

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return Sub.apply(self, other)
        return AddScalar.apply(self, value=-float(other))

    def __rsub__(self, other: float) -> "Tensor":
        return AddScalar.apply(MulScalar.apply(self, value=-1.0), value=float(other))

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return Mul.apply(self, other)
        return MulScalar.apply(self, value=float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return MulScalar.apply(self, value=-1.0)


def const(data: Any, dtype: Any = None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data: Any, name: str | None = None, dtype: Any = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


@dataclass
class TapeEntry:
    fn: "Function"
    inputs: Tuple[Tensor, ...]
    output: Tensor


class Tape:
    """Ordered record of executed ops (the computation tape).

    Use as a context manager around a forward pass, then call
    :meth:`backward` on a scalar result.
    """

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        if not _TAPES or _TAPES[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a tape that is not innermost")
        _TAPES.pop()

    def record(self, fn: "Function", inputs: Tuple[Tensor, ...], output: Tensor) -> None:
        entry = TapeEntry(fn=fn, inputs=inputs, output=output)
        output._entry = entry
        self.entries.append(entry)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss or an explicit grad, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        if not np.all(np.isfinite(loss.data)):
            raise NonFiniteError(f"loss is not finite: {loss.data.reshape(-1)[:4]}")
        if loss.is_leaf:
            if loss.requires_grad:
                loss.accumulate_grad(grad)
            return

        pending = {id(loss): grad}
        for entry in reversed(self.entries):
            g_out = pending.pop(id(entry.output), None)
            if g_out is None:
                continue
            g_inputs = entry.fn.backward(g_out)
            if len(g_inputs) != len(entry.inputs):
                raise TapeError(
                    f"{type(entry.fn).__name__}.backward returned {len(g_inputs)} grads for {len(entry.inputs)} inputs"
                )
            for tensor, g in zip(entry.inputs, g_inputs):
                if g is None or not tensor.requires_grad:
                    continue
                if g.shape != tensor.shape:
                    raise TapeError(
                        f"{type(entry.fn).__name__} produced grad {g.shape} for input of shape {tensor.shape}"
                    )
                if tensor.is_leaf:
                    tensor.accumulate_grad(g)
                else:
                    key = id(tensor)
                    pending[key] = pending[key] + g if key in pending else g


class Function:
    """A differentiable op: ``forward`` on arrays, ``backward`` on the output grad."""

    def __init__(self) -> None:
        self.saved: dict[str, Any] = {}

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        fn = cls()
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        tape = current_tape()
        track = tape is not None and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=track, dtype=out.dtype)
        if track:
            tape.record(fn, tuple(tensors), result)
        return result


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _same_shape("add", a, b)
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad, grad


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _same_shape("sub", a, b)
        return a - b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad, -grad


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _same_shape("mul", a, b)
        self.saved["a"], self.saved["b"] = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad * self.saved["b"], grad * self.saved["a"]


class AddScalar(Function):
    def forward(self, a: np.ndarray, value: float = 0.0) -> np.ndarray:
        return a + a.dtype.type(value)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad,)


class MulScalar(Function):
    def forward(self, a: np.ndarray, value: float = 1.0) -> np.ndarray:
        self.saved["value"] = a.dtype.type(value)
        return a * self.saved["value"]

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.saved["value"],)


class Exp(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        out = np.exp(a)
        self.saved["out"] = out
        return out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.saved["out"],)


class Square(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["a"] = a
        return a * a

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (2.0 * grad * self.saved["a"],)


class Clamp(Function):
    def forward(self, a: np.ndarray, lo: float = -np.inf, hi: float = np.inf) -> np.ndarray:
        self.saved["pass"] = (a >= lo) & (a <= hi)
        return np.clip(a, lo, hi)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.saved["pass"],)


class Sum(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["shape"] = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.broadcast_to(grad, self.saved["shape"]).copy(),)


class SumPerSample(Function):
    """Sum over every axis except the batch axis: [N, ...] -> [N]."""

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["shape"] = a.shape
        return a.reshape(a.shape[0], -1).sum(axis=1)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        shape = self.saved["shape"]
        expand = grad.reshape((shape[0],) + (1,) * (len(shape) - 1))
        return (np.broadcast_to(expand, shape).copy(),)


class Take(Function):
    """Select one entry of a 1-D tensor as a shape-(1,) tensor."""

    def forward(self, a: np.ndarray, index: int = 0) -> np.ndarray:
        if a.ndim != 1 or not 0 <= index < a.shape[0]:
            raise ShapeError(f"take: index {index} invalid for shape {a.shape}")
        self.saved["index"], self.saved["n"] = index, a.shape[0]
        return a[index : index + 1].copy()

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros(self.saved["n"], dtype=grad.dtype)
        out[self.saved["index"]] = grad[0]
        return (out,)


class ScaleBy(Function):
    """Multiply every element of ``x`` by the single value held in ``a``."""

    def forward(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        if a.size != 1:
            raise ShapeError(f"scale_by: scale must hold one value, got shape {a.shape}")
        self.saved["x"], self.saved["a"] = x, a
        return x * a.reshape(())

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        a = self.saved["a"]
        g_a = np.asarray((grad * self.saved["x"]).sum(), dtype=a.dtype).reshape(a.shape)
        return grad * a.reshape(()), g_a


class LeakyReLU(Function):
    def forward(self, x: np.ndarray, negative_slope: float = 0.01) -> np.ndarray:
        if not 0.0 < negative_slope < 1.0:
            raise ValidationError(f"negative_slope must lie in (0, 1), got {negative_slope}")
        slope = x.dtype.type(negative_slope)
        self.saved["factor"] = np.where(x >= 0, x.dtype.type(1.0), slope)
        return x * self.saved["factor"]

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.saved["factor"],)


class ChannelScale(Function):
    def forward(self, x: np.ndarray, m: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or m.ndim != 1 or m.shape[0] != x.shape[1]:
            raise ShapeError(f"channel_scale: vector of length {m.shape} cannot scale tensor {x.shape}")
        self.saved["x"], self.saved["m"] = x, m
        return x * m[None, :, None, None]

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x, m = self.saved["x"], self.saved["m"]
        return grad * m[None, :, None, None], (grad * x).sum(axis=(0, 2, 3))


class PixelShuffle(Function):
    def forward(self, x: np.ndarray, r: int = 2) -> np.ndarray:
        self.saved["r"] = r
        return _pixel_shuffle(x, r)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (_space_to_depth(grad, self.saved["r"]),)


class SpaceToDepth(Function):
    def forward(self, x: np.ndarray, r: int = 2) -> np.ndarray:
        self.saved["r"] = r
        return _space_to_depth(x, r)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (_pixel_shuffle(grad, self.saved["r"]),)


def _pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"subpixel_upsample: {c} channels not divisible by {r}^2")
    out = x.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return out.reshape(n, c // (r * r), h * r, w * r)


def _space_to_depth(x: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"space_to_depth: spatial extents {h}x{w} not divisible by {r}")
    out = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out.reshape(n, c * r * r, h // r, w // r))


class ConcatChannels(Function):
    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        base = arrays[0].shape
        for a in arrays[1:]:
            if a.ndim != 4 or a.shape[0] != base[0] or a.shape[2:] != base[2:]:
                raise ShapeError(f"concat_channels: cannot join {base} with {a.shape}")
        self.saved["splits"] = np.cumsum([a.shape[1] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=1)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.ascontiguousarray(g) for g in np.split(grad, self.saved["splits"], axis=1))


class SliceChannels(Function):
    def forward(self, x: np.ndarray, start: int = 0, stop: int = 0) -> np.ndarray:
        if not 0 <= start < stop <= x.shape[1]:
            raise ShapeError(f"slice_channels: [{start}, {stop}) outside {x.shape[1]} channels")
        self.saved["shape"], self.saved["span"] = x.shape, (start, stop)
        return x[:, start:stop].copy()

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros(self.saved["shape"], dtype=grad.dtype)
        start, stop = self.saved["span"]
        out[:, start:stop] = grad
        return (out,)


class StraightThroughRound(Function):
    """Round in the forward pass, identity in the backward pass."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.rint(x)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad,)


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self) -> None:
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be [C_out, C_in/groups, k, k], got {self.weight.shape}")
        c_out, _, k, k2 = self.weight.shape
        if k != k2:
            raise ShapeError(f"only square kernels are supported, got {k}x{k2}")
        if self.bias.shape != (c_out,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {c_out} output channels")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ValidationError(
                f"invalid conv geometry stride={self.stride} padding={self.padding} groups={self.groups}"
            )
        if c_out % self.groups:
            raise ShapeError(f"C_out={c_out} not divisible by groups={self.groups}")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


def _conv_windows(xp: np.ndarray, k: int, stride: int, groups: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.reshape((n, groups, c // groups) + win.shape[2:])


class Conv2dFunction(Function):
    def forward(
        self,
        x: np.ndarray,
        w: np.ndarray,
        b: np.ndarray,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
    ) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"conv2d expects [N, C, H, W] input, got {x.shape}")
        n, c_in, h, wd = x.shape
        c_out, c_per, k, _ = w.shape
        if c_in != c_per * groups:
            raise ShapeError(f"conv2d: input has {c_in} channels, weight expects {c_per * groups}")
        if c_in % groups:
            raise ShapeError(f"conv2d: C_in={c_in} not divisible by groups={groups}")
        if h + 2 * padding < k or wd + 2 * padding < k:
            raise ShapeError(f"conv2d: input {h}x{wd} with padding {padding} smaller than kernel {k}")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = _conv_windows(xp, k, stride, groups)
        wg = w.reshape(groups, c_out // groups, c_per, k, k)
        out = np.einsum("ngchwij,gocij->ngohw", cols, wg, optimize=True)
        ho, wo = cols.shape[3], cols.shape[4]
        out = out.reshape(n, c_out, ho, wo) + b[None, :, None, None]
        self.saved.update(x=x, w=w, stride=stride, padding=padding, groups=groups)
        return out.astype(x.dtype, copy=False)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return conv2d_backward(grad, self.saved)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation with bias and zero padding."""
    return Conv2dFunction.apply(x, p.weight, p.bias, stride=p.stride, padding=p.padding, groups=p.groups)


def conv2d_backward(grad_out: np.ndarray, saved: dict) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. input, weight and bias from a tape entry's saved state."""
    try:
        x, w = saved["x"], saved["w"]
        stride, padding, groups = saved["stride"], saved["padding"], saved["groups"]
    except KeyError as exc:
        raise TapeError(f"conv2d backward is missing saved input {exc}") from exc
    n, c_in, h, wd = x.shape
    c_out, c_per, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _conv_windows(xp, k, stride, groups)
    ho, wo = cols.shape[3], cols.shape[4]
    if grad_out.shape != (n, c_out, ho, wo):
        raise TapeError(f"conv2d backward: grad shape {grad_out.shape} != forward output {(n, c_out, ho, wo)}")
    go = grad_out.reshape(n, groups, c_out // groups, ho, wo)
    wg = w.reshape(groups, c_out // groups, c_per, k, k)

    g_w = np.einsum("ngohw,ngchwij->gocij", go, cols, optimize=True).reshape(w.shape)
    g_b = grad_out.sum(axis=(0, 2, 3))
    dcols = np.einsum("ngohw,gocij->ngchwij", go, wg, optimize=True).reshape(n, c_in, ho, wo, k, k)
    g_xp = np.zeros(xp.shape, dtype=x.dtype)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            g_xp[:, :, i : i + span_h : stride, j : j + span_w : stride] += dcols[..., i, j]
    g_x = g_xp[:, :, padding : padding + h, padding : padding + wd] if padding else g_xp
    return np.ascontiguousarray(g_x), g_w.astype(w.dtype, copy=False), g_b.astype(w.dtype, copy=False)


def leaky_relu(x: Tensor, negative_slope: float = 0.01) -> Tensor:
    return LeakyReLU.apply(x, negative_slope=negative_slope)


def channel_scale(x: Tensor, m: Tensor) -> Tensor:
    return ChannelScale.apply(x, m)


def subpixel_upsample(x: Tensor, r: int) -> Tensor:
    return PixelShuffle.apply(x, r=r)


def space_to_depth(x: Tensor, r: int) -> Tensor:
    return SpaceToDepth.apply(x, r=r)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def square(x: Tensor) -> Tensor:
    return Square.apply(x)


def clamp(x: Tensor, lo: float = -np.inf, hi: float = np.inf) -> Tensor:
    return Clamp.apply(x, lo=lo, hi=hi)


def tsum(x: Tensor) -> Tensor:
    return Sum.apply(x)


def mean(x: Tensor) -> Tensor:
    return MulScalar.apply(Sum.apply(x), value=1.0 / x.data.size)


def sum_per_sample(x: Tensor) -> Tensor:
    return SumPerSample.apply(x)


def take(x: Tensor, index: int) -> Tensor:
    return Take.apply(x, index=index)


def scale_by(x: Tensor, a: Tensor) -> Tensor:
    return ScaleBy.apply(x, a)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return ConcatChannels.apply(*tensors)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return SliceChannels.apply(x, start=start, stop=stop)


def round_ste(x: Tensor) -> Tensor:
    return StraightThroughRound.apply(x)


def finite_diff_check(
    f: Callable[[], Tensor],
    theta: Tensor,
    h: float = 1e-4,
    indices: Iterable[int] | None = None,
) -> float:
    """Compare tape gradients of ``f`` w.r.t. ``theta`` with central differences.

    ``f`` takes no arguments and reads ``theta`` through its closure; it is
    re-evaluated with individual coordinates of ``theta.data`` nudged by
    ``h``. Returns max |g_tape - g_fd| / max(1e-8, |g_fd|) over the checked
    coordinates (all of them unless ``indices`` is given).
    """
    if theta.dtype != np.float64:
        raise ValidationError(f"finite_diff_check needs 64-bit parameters, got {theta.dtype}")
    theta.zero_grad()
    with Tape() as tape:
        out = f()
    base = out.data.reshape(-1)
    if base.size != 1:
        raise ShapeError(f"finite_diff_check: f must be scalar-valued, got shape {out.shape}")
    if not np.isfinite(base[0]):
        raise NonFiniteError(f"finite_diff_check: f evaluated to {base[0]}")
    tape.backward(out)
    g_tape = theta.grad.reshape(-1) if theta.grad is not None else np.zeros(theta.data.size)

    flat = theta.data.reshape(-1)
    worst = 0.0
    for idx in range(flat.size) if indices is None else indices:
        orig = flat[idx]
        flat[idx] = orig + h
        f_plus = float(f().data.reshape(-1)[0])
        flat[idx] = orig - h
        f_minus = float(f().data.reshape(-1)[0])
        flat[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"finite_diff_check: f not finite around coordinate {idx}")
        g_fd = (f_plus - f_minus) / (2.0 * h)
        err = abs(g_tape[idx] - g_fd) / max(1e-8, abs(g_fd))
        worst = max(worst, err)
    logger.debug("finite_diff_check param=%s max_rel_err=%.3e", theta.name, worst)
    return worst
