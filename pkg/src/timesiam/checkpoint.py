"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TSIA"                       magic
    u32 version
    u32 n, n bytes                config (UTF-8 JSON)
    u32 n, n bytes                metadata (UTF-8 JSON)
    u32 count                     tensor table header
      count x (u16 name_len, name, u8 ndim, ndim x u32 dims)
    float32 values                tensors in table order, row-major

The whole table header is parsed and checked against the file size before
any tensor buffer is allocated.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import CorruptCheckpointError, DataError, TruncatedCheckpointError, VersionMismatchError
from .nn import Module

MAGIC = b"TSIA"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    state: "OrderedDict[str, np.ndarray]"
    meta: dict = field(default_factory=dict)
    model: Module | None = field(default=None, compare=False, repr=False)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])

    @property
    def is_downstream(self) -> bool:
        return "downstream" in self.config

    def to_bytes(self) -> bytes:
        return encode_checkpoint(self.config, self.state, self.meta)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def build_model(self) -> Module:
        """Instantiate the stored architecture and load its parameters (eval mode)."""
        if self.is_downstream:
            from .finetune import build_downstream

            model = build_downstream(self.config)
        else:
            from .model import SiameseModel

            model = SiameseModel(self.model_config)
        model.load_state_dict(self.state)
        return model.eval()


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(config: dict, state: dict, meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for blob in (_json_bytes(config), _json_bytes(meta or {})):
        parts += [struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(state)))
    arrays = []
    for name, value in state.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape)] if arr.ndim else []
        arrays.append(arr)
    parts += [a.tobytes() for a in arrays]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"truncated checkpoint: file ends inside {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4:
        raise TruncatedCheckpointError("truncated checkpoint: missing magic bytes")
    if r.take(4, "magic") != MAGIC:
        raise CorruptCheckpointError("not a checkpoint: bad magic bytes")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    blobs = []
    for what in ("config", "metadata"):
        (n,) = r.unpack("<I", f"{what} length")
        try:
            blobs.append(json.loads(r.take(n, what).decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptCheckpointError(f"corrupt checkpoint {what}: {exc}") from None
    config, meta = blobs
    if not isinstance(config, dict) or "model" not in config:
        raise CorruptCheckpointError("checkpoint config lacks a model section")

    (count,) = r.unpack("<I", "tensor count")
    table = []
    for _ in range(count):
        (n,) = r.unpack("<H", "tensor name length")
        try:
            name = r.take(n, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptCheckpointError("corrupt tensor name") from None
        (ndim,) = r.unpack("<B", "tensor rank")
        dims = r.unpack(f"<{ndim}I", "tensor dims") if ndim else ()
        table.append((name, tuple(dims)))
    need = sum(4 * int(np.prod(d, dtype=np.int64)) for _, d in table)
    have = len(buf) - r.pos
    if have < need:
        raise TruncatedCheckpointError(f"truncated checkpoint: tensor data needs {need} bytes, {have} present")
    if have > need:
        raise CorruptCheckpointError(f"checkpoint has {have - need} trailing bytes")

    state = OrderedDict()
    for name, dims in table:
        n = int(np.prod(dims, dtype=np.int64))
        state[name] = np.frombuffer(r.take(4 * n, name), dtype="<f4").reshape(dims).astype(np.float32)
    return Checkpoint(config, state, meta)


def save_checkpoint(path, model: Module, meta: dict | None = None) -> Checkpoint:
    ckpt = Checkpoint(model.checkpoint_config(), model.state_dict(), dict(meta or {}), model)
    ckpt.save(path)
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    return decode_checkpoint(buf)


def load_model(path) -> Module:
    return load_checkpoint(path).build_model()


def load_into(model: Module, source) -> Checkpoint:
    """Load a checkpoint (object or path) into an existing model.

    Raises :class:`ShapeMismatchError` naming the first tensor that does not fit.
    """
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    model.load_state_dict(ckpt.state)
    return ckpt
