"""Binary container for named tensors.

Layout: 8-byte magic ``PVITCKPT``, version u32 (little-endian), u32 byte
length of a UTF-8 JSON header, the header, then the raw little-endian tensor
payloads back to back. Header fields: ``entries`` (name, dtype, shape,
byte_offset, byte_length — offsets relative to the payload start),
``config_hash``, ``epoch``, ``step``, ``rng_state``, and an optional
``config`` echo. Writing is deterministic: same tensors and metadata give the
same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PVITCKPT"
VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "|u1",
}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_hash: str = ""
    epoch: int = 0
    step: int = 0
    rng_state: dict | None = None
    config: dict | None = None
    extra: dict = field(default_factory=dict)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def save_checkpoint(path, tensors: dict[str, np.ndarray], **meta) -> None:
    entries = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise FormatError(f"unsupported tensor dtype {arr.dtype.name} for entry {name!r}")
        raw = np.ascontiguousarray(arr).astype(np.dtype(_DTYPES[arr.dtype.name]), copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = {
        "entries": entries,
        "config_hash": meta.get("config_hash", ""),
        "epoch": int(meta.get("epoch", 0)),
        "step": int(meta.get("step", 0)),
        "rng_state": meta.get("rng_state"),
        "config": meta.get("config"),
        "extra": meta.get("extra", {}),
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {MAGIC!r}", offset=0)
    if len(data) < 16:
        raise FormatError("truncated container header", offset=len(data))
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", offset=8)
    (hlen,) = struct.unpack_from("<I", data, 12)
    if 16 + hlen > len(data):
        raise FormatError("header length exceeds file size", offset=12)
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"invalid header JSON: {e}", offset=16) from e
    payload = data[16 + hlen :]
    tensors: dict[str, np.ndarray] = {}
    for e in header["entries"]:
        off, length = e["byte_offset"], e["byte_length"]
        if off + length > len(payload):
            raise FormatError(f"entry {e['name']!r} exceeds payload", offset=16 + hlen + off)
        arr = np.frombuffer(payload[off : off + length], dtype=np.dtype(_DTYPES[e["dtype"]]))
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"], copy=False).copy()
    return Checkpoint(
        tensors=tensors,
        config_hash=header.get("config_hash", ""),
        epoch=header.get("epoch", 0),
        step=header.get("step", 0),
        rng_state=header.get("rng_state"),
        config=header.get("config"),
        extra=header.get("extra", {}) or {},
    )
