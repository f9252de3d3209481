"""Flat little-endian binary container for named arrays.

Layout::

    b"MINTARR1"  uint32 n_records
    repeated n_records times:
        uint16 name_len, name (utf-8)
        uint8 dtype_code, uint8 ndim, uint64[ndim] shape
        raw little-endian data, C order

Writing the same arrays in the same order always yields the same bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MINTARR1"

DTYPE_CODES: dict[int, np.dtype] = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i4"),
    4: np.dtype("<i8"),
    5: np.dtype("u1"),
    6: np.dtype("?"),
}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}


class ContainerError(ValueError):
    pass


def _code_for(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    for code, known in DTYPE_CODES.items():
        if known == dt:
            return code
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def encode_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        code = _code_for(arr)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype(DTYPE_CODES[code], copy=False).tobytes(order="C"))
    return b"".join(chunks)


def decode_arrays(buf: bytes) -> dict[str, np.ndarray]:
    if buf[: len(MAGIC)] != MAGIC:
        raise ContainerError("bad magic: not a MINTARR1 container")
    off = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + name_len].decode("utf-8")
            off += name_len
            code, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            if code not in DTYPE_CODES:
                raise ContainerError(f"record {name!r}: unknown dtype code {code}")
            dt = DTYPE_CODES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(buf):
                raise ContainerError(f"record {name!r}: truncated payload")
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
            off += nbytes
    except struct.error as exc:
        raise ContainerError(f"truncated container: {exc}") from exc
    return out


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_arrays(arrays))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    return decode_arrays(Path(path).read_bytes())
