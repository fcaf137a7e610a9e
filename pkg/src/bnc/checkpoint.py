"""Flat binary container of named arrays.

Layout: magic "BNCKPT01", then per entry: name length (u16 LE), UTF-8 name,
rank (u8), dims (u32 LE each), raw 32-bit little-endian values, repeated
until end of file.

float64 arrays round-trip losslessly through the 32-bit value format by
storing their raw bit pattern as pairs of 32-bit words under the entry name
"<name>.f64bits" with a trailing dimension of 2; the loader reassembles them.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"BNCKPT01"
_F64_SUFFIX = ".f64bits"


class CheckpointError(ValueError):
    """Malformed checkpoint container."""


def save_arrays(path: str, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float64:
            name = name + _F64_SUFFIX
            payload = arr.astype("<f8").view("<u4").reshape(*arr.shape, 2)
            raw = payload.tobytes()
            dims = payload.shape
        else:
            payload = arr.astype("<f4")
            raw = payload.tobytes()
            dims = payload.shape
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name!r}")
        if len(dims) > 0xFF:
            raise CheckpointError(f"rank {len(dims)} too large for entry {name!r}")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", len(dims)))
        for d in dims:
            chunks.append(struct.pack("<I", d))
        chunks.append(raw)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_arrays(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"bad magic at byte 0: {blob[:8]!r}")
    out: dict[str, np.ndarray] = {}
    off = 8
    total = len(blob)
    while off < total:
        if off + 2 > total:
            raise CheckpointError(f"truncated entry header at byte {off}")
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        if off + name_len + 1 > total:
            raise CheckpointError(f"truncated entry name at byte {off}")
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        rank = blob[off]
        off += 1
        if off + 4 * rank > total:
            raise CheckpointError(f"truncated dims of {name!r} at byte {off}")
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        count = 1
        for d in dims:
            count *= d
        nbytes = 4 * count
        if off + nbytes > total:
            raise CheckpointError(f"truncated data of {name!r} at byte {off}")
        words = np.frombuffer(blob, dtype="<u4", count=count, offset=off)
        off += nbytes
        if name.endswith(_F64_SUFFIX):
            arr = words.reshape(dims).copy().view("<f8").reshape(dims[:-1])
            out[name[:-len(_F64_SUFFIX)]] = arr.astype(np.float64)
        else:
            out[name] = words.view("<f4").reshape(dims).astype(np.float32)
    return out
