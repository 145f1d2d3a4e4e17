"""GRID1 binary container: named little-endian f32/f64 arrays.

Layout::

    magic "GRD1" | version u16 | record count u32
    per record: name length u16, UTF-8 name, dtype u8 (1=f32, 2=f64),
                ndim u8, dims u32 * ndim, row-major payload
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GRD1"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class Grid1Error(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode(records: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(records)))
    for name, arr in records.items():
        arr = np.asarray(arr)
        if arr.dtype not in CODES:
            raise TypeError(f"record {name!r}: dtype {arr.dtype} is not f32/f64")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=DTYPES[CODES[arr.dtype]]).tobytes())
    return buf.getvalue()


def decode(blob: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise Grid1Error(f"truncated {what}: need {n} bytes, have {len(blob) - pos}", pos)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise Grid1Error("bad magic, expected b'GRD1'", 0)
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise Grid1Error(f"unsupported version {version}", 4)
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        start = pos
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise Grid1Error("record name is not UTF-8", start) from exc
        code_at = pos
        code, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if code not in DTYPES:
            raise Grid1Error(f"unknown dtype code {code}", code_at)
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        dtype = DTYPES[code]
        n = int(np.prod(dims)) if ndim else 1
        payload = take(n * dtype.itemsize, f"payload of {name!r}")
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if pos != len(blob):
        raise Grid1Error(f"{len(blob) - pos} trailing bytes", pos)
    return records


def write(path: str | Path, records: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(records))


def read(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def write_manifest(path: str | Path, entries: Mapping[str, object]) -> None:
    """Plain ``key = value`` text sidecar."""
    lines = [f"{k} = {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out
