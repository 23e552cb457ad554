"""Binary container for named float64 arrays.

Layout (little-endian throughout):

    magic  b"FAUD1"
    version u32
    record*:
        name_len u16
        name     UTF-8 bytes
        rank     u8
        dims     rank x u32
        payload  prod(dims) x f64   (rank 0 -> a single f64)

A JSON metadata blob (model architecture, dataset manifest pointers, ...)
rides in a reserved record named ``__meta_json__`` whose payload is the UTF-8
bytes widened one-per-f64, keeping the container format itself uniform.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FAUD1"
VERSION = 1
META_RECORD = "__meta_json__"


class CheckpointError(RuntimeError):
    pass


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    if len(nb) > 0xFFFF:
        raise CheckpointError(f"record name too long: {len(nb)} bytes")
    if arr.ndim > 0xFF:
        raise CheckpointError(f"rank {arr.ndim} exceeds container limit")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        if meta is not None:
            blob = json.dumps(meta, sort_keys=True).encode("utf-8")
            _write_record(fh, META_RECORD, np.frombuffer(blob, dtype=np.uint8).astype(np.float64))
        for name, arr in params.items():
            if name == META_RECORD:
                raise CheckpointError(f"parameter name {META_RECORD!r} is reserved")
            _write_record(fh, name, np.asarray(arr, dtype=np.float64))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (params, meta); meta is {} when the file carries none."""
    path = Path(path)
    params: dict[str, np.ndarray] = {}
    meta: dict = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported container version {version}")
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise CheckpointError("truncated checkpoint while reading record header")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            dims = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "dims"))[0] for _ in range(rank)
            )
            count = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, count * 8, f"payload of {name!r}")
            arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
            if name == META_RECORD:
                meta = json.loads(bytes(arr.astype(np.uint8)).decode("utf-8"))
                continue
            if name in params:
                raise CheckpointError(f"duplicate record {name!r}")
            params[name] = arr
    return params, meta
