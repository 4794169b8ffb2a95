"""Binary checkpoints for models and encoder banks.

Layout (little-endian): magic ``EVCK``, u32 version, a fixed descriptor
block (scheme widths, latent/hyper widths, rate count, stage count, table
half-width, prior tail range, negative slope), u32 parameter count, then per
parameter a u32 byte length followed by float32 values in canonical order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import yaml

from evc.errors import DecodeError
from evc.model import ChannelScheme, Encoder, Model, build_encoder, build_model
from evc.tensor import Tensor

MAGIC = b"EVCK"
VERSION = 1
_DESCRIPTOR = struct.Struct("<4I4I6If")
_U32 = struct.Struct("<I")


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError(f"checkpoint truncated: need {n} bytes, {len(self.data) - self.pos} left", offset=self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def _pack_tensors(params: List[Tuple[str, Tensor]]) -> bytes:
    parts = [_U32.pack(len(params))]
    for _, p in params:
        blob = p.data.astype("<f4").tobytes()
        parts.append(_U32.pack(len(blob)))
        parts.append(blob)
    return b"".join(parts)


def _unpack_tensors(reader: _Reader, params: List[Tuple[str, Tensor]]) -> None:
    count = reader.u32()
    if count != len(params):
        raise DecodeError(f"checkpoint holds {count} tensors, model expects {len(params)}", offset=reader.pos)
    for name, p in params:
        length = reader.u32()
        if length != p.data.size * 4:
            raise DecodeError(f"{name}: blob of {length} bytes, expected {p.data.size * 4}", offset=reader.pos)
        values = np.frombuffer(reader.take(length), dtype="<f4").reshape(p.shape)
        p.data = values.astype(p.dtype)
        p.grad = None


def model_to_bytes(model: Model) -> bytes:
    header = MAGIC + _U32.pack(VERSION)
    descriptor = _DESCRIPTOR.pack(
        *model.enc_scheme.widths,
        *model.dec_scheme.widths,
        model.latent_channels,
        model.hyper_channels,
        model.quant.num_rates,
        model.num_stages,
        model.table_half_width,
        model.prior.tail_range,
        model.encoder.stages[0][0].slope,
    )
    return header + descriptor + _pack_tensors(model.named_parameters())


def _read_model(reader: _Reader) -> Model:
    magic = reader.take(4)
    if magic != MAGIC:
        raise DecodeError(f"bad checkpoint magic {magic!r}", offset=0)
    version = reader.u32()
    if version != VERSION:
        raise DecodeError(f"unsupported checkpoint version {version}", offset=4)
    d = _DESCRIPTOR.unpack(reader.take(_DESCRIPTOR.size))
    model = build_model(
        ChannelScheme(*d[0:4]),
        ChannelScheme(*d[4:8]),
        latent_channels=d[8],
        hyper_channels=d[9],
        num_rates=d[10],
        num_stages=d[11],
        table_half_width=d[12],
        negative_slope=float(np.float32(d[14])),
    )
    model.prior.tail_range = d[13]
    _unpack_tensors(reader, model.named_parameters())
    return model


def model_from_bytes(data: bytes) -> Model:
    reader = _Reader(data)
    model = _read_model(reader)
    if reader.pos != len(data):
        raise DecodeError(f"{len(data) - reader.pos} trailing bytes after checkpoint", offset=reader.pos)
    return model


def save_checkpoint(path: Path, model: Model) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(model))


def load_checkpoint(path: Path) -> Model:
    if not path.exists():
        raise FileNotFoundError(f"Missing checkpoint: {path}")
    return model_from_bytes(path.read_bytes())


def save_bank(path: Path, model: Model, encoders: List[Encoder], provenance: List[Dict]) -> None:
    """Shared modules as a model checkpoint, followed by one section per encoder."""
    parts = [model_to_bytes(model), _U32.pack(len(encoders))]
    for enc, tag in zip(encoders, provenance):
        meta = yaml.safe_dump(tag, sort_keys=True).encode("utf-8")
        parts.append(struct.pack("<4I", *enc.scheme.widths))
        parts.append(_U32.pack(len(meta)))
        parts.append(meta)
        parts.append(_pack_tensors(enc.named_parameters()))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def load_bank(path: Path) -> Tuple[Model, List[Encoder], List[Dict]]:
    if not path.exists():
        raise FileNotFoundError(f"Missing bank checkpoint: {path}")
    reader = _Reader(path.read_bytes())
    model = _read_model(reader)
    encoders: List[Encoder] = []
    provenance: List[Dict] = []
    for _ in range(reader.u32()):
        scheme = ChannelScheme(*struct.unpack("<4I", reader.take(16)))
        meta = reader.take(reader.u32()).decode("utf-8")
        enc = build_encoder(
            scheme,
            model.latent_channels,
            model.num_stages,
            dtype=model.dtype,
            negative_slope=model.encoder.stages[0][0].slope,
        )
        _unpack_tensors(reader, enc.named_parameters())
        encoders.append(enc)
        provenance.append(yaml.safe_load(meta) or {})
    return model, encoders, provenance
