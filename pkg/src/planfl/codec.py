"""Named-tensor wire frames and checkpoint files.

Frame layout (all integers little-endian)::

    b"PLN1"                     4 bytes  magic
    msg_type                    1 byte
    body_length                 u32      number of bytes that follow
    repeated tensor records:
        name_length             u16
        name                    utf-8
        ndim                    u8
        dims                    u32 * ndim
        data                    float64 * prod(dims)

A record's header is ``2 + len(name) + 1 + 4·ndim`` bytes, so a frame is
``4 + 1 + 4 + Σ(record header + 8·numel)`` bytes long.

Checkpoint files wrap one frame::

    b"PLNC"  u16 version  u32 meta_length  meta (utf-8 JSON)  frame
"""

from __future__ import annotations

import enum
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ProtocolError
from .tensor import Tensor

MAGIC = b"PLN1"
CKPT_MAGIC = b"PLNC"
CKPT_VERSION = 1
_HEAD = struct.Struct("<4sBI")


class MsgType(enum.IntEnum):
    GLOBAL_PROMPTS = 1
    LOCAL_PROMPTS = 2
    STAGE2_BROADCAST = 3
    AGGREGATORS = 4
    CHECKPOINT = 5
    DATASET = 6


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def record_header_size(name: str, ndim: int) -> int:
    return 2 + len(name.encode()) + 1 + 4 * ndim


def frame_size(tensors: dict) -> int:
    return _HEAD.size + sum(
        record_header_size(n, _as_array(t).ndim) + 8 * _as_array(t).size for n, t in tensors.items()
    )


def data_bytes(tensors: dict) -> int:
    """Tensor payload only: Σ numel · 8."""
    return sum(8 * _as_array(t).size for t in tensors.values())


def encode(msg_type: int, tensors: dict) -> bytes:
    parts = []
    for name, t in tensors.items():
        arr = _as_array(t)
        raw = name.encode()
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ProtocolError(f"tensor {name!r} cannot be framed")
        parts.append(struct.pack(f"<H{len(raw)}sB{arr.ndim}I", len(raw), raw, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return _HEAD.pack(MAGIC, int(msg_type), len(body)) + body


def decode(frame: bytes) -> tuple[MsgType, dict[str, np.ndarray]]:
    if len(frame) < _HEAD.size:
        raise ProtocolError("truncated frame header", offset=len(frame))
    magic, msg_type, body_len = _HEAD.unpack_from(frame, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}", offset=0)
    end = _HEAD.size + body_len
    if len(frame) < end:
        raise ProtocolError(f"truncated frame: need {end} bytes, have {len(frame)}", offset=len(frame))
    if len(frame) > end:
        raise ProtocolError(f"{len(frame) - end} trailing bytes after frame", offset=end)
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown message type {msg_type}", offset=4) from None
    out: dict[str, np.ndarray] = {}
    pos = _HEAD.size
    while pos < end:
        start = pos
        if pos + 2 > end:
            raise ProtocolError("truncated record name length", offset=pos)
        (n_len,) = struct.unpack_from("<H", frame, pos)
        pos += 2
        if pos + n_len + 1 > end:
            raise ProtocolError("truncated record name", offset=pos)
        try:
            name = frame[pos:pos + n_len].decode()
        except UnicodeDecodeError:
            raise ProtocolError("tensor name is not valid utf-8", offset=pos) from None
        pos += n_len
        ndim = frame[pos]
        pos += 1
        if pos + 4 * ndim > end:
            raise ProtocolError("truncated record shape", offset=pos)
        shape = struct.unpack_from(f"<{ndim}I", frame, pos)
        pos += 4 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > end:
            raise ProtocolError(f"truncated data for tensor {name!r}", offset=pos)
        if name in out:
            raise ProtocolError(f"duplicate tensor name {name!r}", offset=start)
        out[name] = np.frombuffer(frame, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    return kind, out


def save_checkpoint(path: str | Path, tensors: dict, meta: dict) -> int:
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    blob = (
        CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(meta_raw)) + meta_raw
        + encode(MsgType.CHECKPOINT, tensors)
    )
    Path(path).write_bytes(blob)
    return len(blob)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ProtocolError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 10 or blob[:4] != CKPT_MAGIC:
        raise ProtocolError(f"{path}: not a planfl checkpoint", offset=0)
    version, meta_len = struct.unpack_from("<HI", blob, 4)
    if version != CKPT_VERSION:
        raise ProtocolError(f"{path}: unsupported checkpoint version {version}", offset=4)
    if 10 + meta_len > len(blob):
        raise ProtocolError(f"{path}: truncated metadata", offset=len(blob))
    try:
        meta = json.loads(blob[10:10 + meta_len])
    except ValueError as exc:
        raise ProtocolError(f"{path}: corrupt metadata", offset=10) from exc
    kind, tensors = decode(blob[10 + meta_len:])
    if kind != MsgType.CHECKPOINT:
        raise ProtocolError(f"{path}: embedded frame has type {kind.name}", offset=10 + meta_len)
    return meta, tensors
