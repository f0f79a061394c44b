"""Binary checkpoint container for model, optimizer, RNG, and codec state.

Layout (all integers little-endian):

    magic    4 bytes  "DDMP"
    version  u32      currently 1
    config   u64 length + canonical JSON (sorted keys, compact separators)
    tensors  u32 count, then per tensor sorted by name:
                 u16 name length + UTF-8 name
                 u8 dtype tag (0 float64, 1 int64, 2 uint8)
                 u8 rank + u32 per dimension
                 raw little-endian payload
    optim    u8 flag; if 1: u64 step + two tensor tables (first and second
             moment, same encoding as above)
    rng      u64 length + canonical JSON of the generator state

The writer is fully deterministic, so save -> load -> save reproduces the
file byte for byte.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .tensor_core import require_finite

MAGIC = b"DDMP"
VERSION = 1

_DTYPE_TAGS = {"<f8": 0, "<i8": 1, "|u1": 2}
_TAG_DTYPES = {tag: np.dtype(code) for code, tag in _DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    """Everything needed to resume or exactly replay a run."""

    config: dict
    tensors: dict
    rng_state: dict
    optimizer: dict | None = None  # {"step": int, "m": {name: arr}, "v": {name: arr}}

    def __post_init__(self):
        for name, arr in self.tensors.items():
            if not isinstance(name, str) or not name:
                raise FormatError(f"tensor name must be a non-empty string, got {name!r}")
        if self.optimizer is not None:
            missing = {"step", "m", "v"} - set(self.optimizer)
            if missing:
                raise FormatError(f"optimizer state missing {sorted(missing)}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _dumps(obj) -> bytes:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":")).encode("utf-8")


def _encode_tensor(out: list, name: str, arr: np.ndarray):
    arr = np.asarray(arr)  # tobytes() below always emits C order
    if arr.dtype == np.float64:
        tag, data = 0, arr.astype("<f8", copy=False)
    elif arr.dtype in (np.int64, np.int32, np.intp):
        tag, data = 1, arr.astype("<i8")
    elif arr.dtype == np.uint8:
        tag, data = 2, arr
    else:
        raise FormatError(f"tensor {name}: unsupported dtype {arr.dtype}")
    name_b = name.encode("utf-8")
    if len(name_b) > 0xFFFF:
        raise FormatError(f"tensor name too long: {name[:32]}...")
    if arr.ndim > 0xFF:
        raise ShapeError(f"tensor {name}: rank {arr.ndim} too large")
    out.append(struct.pack("<H", len(name_b)))
    out.append(name_b)
    out.append(struct.pack("<BB", tag, arr.ndim))
    for dim in arr.shape:
        out.append(struct.pack("<I", dim))
    out.append(data.tobytes())


def _encode_table(out: list, tensors: dict):
    out.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        _encode_tensor(out, name, np.asarray(tensors[name]))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_table(reader: _Reader) -> dict:
    (count,) = reader.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        tag, rank = reader.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"tensor {name}: unknown dtype tag {tag}")
        shape = tuple(reader.unpack("<I")[0] for _ in range(rank))
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        arr = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape).copy()
        tensors[name] = arr
    return tensors


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize; rejects non-finite tensor values up front."""
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float64:
            require_finite(f"checkpoint tensor {name}", arr)
    out = [MAGIC, struct.pack("<I", VERSION)]
    config_b = _dumps(ckpt.config)
    out.append(struct.pack("<Q", len(config_b)))
    out.append(config_b)
    _encode_table(out, ckpt.tensors)
    if ckpt.optimizer is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<Q", int(ckpt.optimizer["step"])))
        _encode_table(out, ckpt.optimizer["m"])
        _encode_table(out, ckpt.optimizer["v"])
    rng_b = _dumps(ckpt.rng_state)
    out.append(struct.pack("<Q", len(rng_b)))
    out.append(rng_b)
    return b"".join(out)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (config_len,) = reader.unpack("<Q")
    config = json.loads(reader.take(config_len).decode("utf-8"))
    tensors = _decode_table(reader)
    (opt_flag,) = reader.unpack("<B")
    optimizer = None
    if opt_flag == 1:
        (step,) = reader.unpack("<Q")
        optimizer = {"step": int(step), "m": _decode_table(reader), "v": _decode_table(reader)}
    elif opt_flag != 0:
        raise FormatError(f"bad optimizer flag {opt_flag}")
    (rng_len,) = reader.unpack("<Q")
    rng_state = json.loads(reader.take(rng_len).decode("utf-8"))
    if reader.pos != len(data):
        raise FormatError(f"{len(data) - reader.pos} trailing bytes after checkpoint")
    return Checkpoint(config=config, tensors=tensors, rng_state=rng_state, optimizer=optimizer)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def restore_rng_state(state: dict):
    """Rebuild the saved generator state into the array layout numpy wants."""
    bg = state["bg_state"]
    inner = {k: np.array(v, dtype=np.uint64) for k, v in bg["state"].items()}
    return {
        "seed": state["seed"],
        "bg_state": {
            "bit_generator": bg["bit_generator"],
            "state": inner,
            "buffer": np.array(bg["buffer"], dtype=np.uint64),
            "buffer_pos": int(bg["buffer_pos"]),
            "has_uint32": int(bg["has_uint32"]),
            "uinteger": int(bg["uinteger"]),
        },
    }
