"""Named parameter storage, seeded initialization, and the EVTK container format.

EVTK layout (little-endian)::

    b"EVTK"  u32 version
    u32 len  config text (UTF-8, ``key = value`` lines)
    section  parameters
    section  buffers (batch-norm running statistics)
    u8       has_train_state
      [u64 step, u32 epoch, section adam_m, section adam_v, u32 len + report CSV]
    u32      CRC-32 of every preceding byte

    section := u32 count, then per entry:
               u16 name_len, name (UTF-8), u8 rank, u32 dims[rank], f64 values[prod(dims)]
"""
from __future__ import annotations

import struct
import threading
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..errors import CheckpointError
from .tensor import Tensor

MAGIC = b"EVTK"
FORMAT_VERSION = 1


class ParameterStore:
    """Ordered name -> Tensor map of learnable weights plus non-learnable buffers."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.lock = threading.Lock()

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(values, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.params.items()}
        out.update({f"buffer:{k}": v.copy() for k, v in self.buffers.items()})
        return out

    def copy(self) -> "ParameterStore":
        other = ParameterStore(self.seed)
        for k, t in self.params.items():
            other.add(k, t.data.copy())
        for k, v in self.buffers.items():
            other.buffers[k] = v.copy()
        return other


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------- serialization


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    report_csv: str = ""


def _pack_section(entries: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode(
    params: dict[str, np.ndarray],
    buffers: dict[str, np.ndarray],
    config_text: str,
    train_state: TrainState | None = None,
) -> bytes:
    body = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_text(config_text)]
    body.append(_pack_section(params))
    body.append(_pack_section(buffers))
    if train_state is None:
        body.append(b"\x00")
    else:
        body.append(b"\x01" + struct.pack("<QI", train_state.step, train_state.epoch))
        body.append(_pack_section(train_state.m))
        body.append(_pack_section(train_state.v))
        body.append(_pack_text(train_state.report_csv))
    blob = b"".join(body)
    return blob + struct.pack("<I", zlib.crc32(blob))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("checkpoint text is not valid UTF-8") from exc

    def section(self) -> OrderedDict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode("utf-8")
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}I")
            size = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        return out


def decode(blob: bytes):
    """Inverse of :func:`encode`; returns (params, buffers, config_text, train_state)."""
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not an EVTK checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checkpoint is truncated or corrupt (CRC mismatch)")
    r = _Reader(blob[:-4])
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    config_text = r.text()
    params = r.section()
    buffers = r.section()
    (flag,) = r.unpack("<B")
    state = None
    if flag:
        step, epoch = r.unpack("<QI")
        m = r.section()
        v = r.section()
        state = TrainState(step, epoch, dict(m), dict(v), r.text())
    if r.pos != len(r.blob):
        raise CheckpointError("trailing bytes after checkpoint body")
    return params, buffers, config_text, state
