"""Binary checkpoint format.

Layout, all integers little-endian::

    magic      8 bytes  b"HSJPCKPT"
    version    u32      (currently 1)
    arch hash  u64      FNV-1a 64 over the layer-spec chain string
    count      u32      number of parameter tensors
    per tensor:
        name length u32, name (utf-8)
        rank u32, dims u32 * rank
        data float32 * prod(dims)

Tensors appear in the architecture's canonical parameter order, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile

import numpy as np

from .model import ModelState, architecture_hash, param_shapes

MAGIC = b"HSJPCKPT"
VERSION = 1
_MAX_RANK = 8
_MAX_NAME = 256


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(state: ModelState) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQI", VERSION, state.arch_hash, len(state.params)))
    for name, value in state.params.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return buf.getvalue()


def atomic_write(path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(state: ModelState, path) -> None:
    atomic_write(path, checkpoint_bytes(state))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(data: bytes) -> ModelState:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic: not an HSJP checkpoint")
    version, arch, count = r.unpack("<IQI", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    params: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"name length of tensor {i}")
        if name_len > _MAX_NAME:
            raise CheckpointError(f"tensor {i}: implausible name length {name_len}")
        try:
            name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor {i}: name is not valid utf-8") from None
        (rank,) = r.unpack("<I", f"rank of {name}")
        if rank > _MAX_RANK:
            raise CheckpointError(f"{name}: implausible rank {rank}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64))
        raw = r.take(4 * size, f"data of {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")

    if "stem1.weight" not in params or "head.weight" not in params:
        raise CheckpointError("checkpoint lacks stem1.weight or head.weight")
    in_ch = params["stem1.weight"].shape[1]
    head_ch = params["head.weight"].shape[0]
    expected = param_shapes(in_ch, head_ch)
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointError(f"missing layer {name}")
        if params[name].shape != shape:
            raise CheckpointError(f"layer {name}: shape {params[name].shape}, expected {shape}")
    extra = [n for n in params if n not in expected]
    if extra:
        raise CheckpointError(f"unexpected layer {extra[0]}")
    if list(params) != list(expected):
        raise CheckpointError("layers are not in canonical order")
    if arch != architecture_hash(in_ch, head_ch):
        raise CheckpointError(f"architecture hash mismatch: file {arch:#018x}, "
                              f"expected {architecture_hash(in_ch, head_ch):#018x}")
    return ModelState(params)


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
