"""Binary checkpoint container used by the codec (BVAE) and LDM (BLDM) files.

Layout, all integers little-endian:

    offset 0   magic, 4 bytes ("BVAE" or "BLDM")
    offset 4   u32 version
    offset 8   u32 metadata length L
    offset 12  metadata: L bytes of UTF-8 JSON (sorted keys)
    then       u32 blob count, followed per blob by:
                   u16 name length, name bytes,
                   u8 dtype code (0 = float32, 1 = float64, 2 = int64),
                   u8 ndim, ndim x u32 dims,
                   raw array bytes (C order)

Weights are stored as float32; the noise schedule rides along as float64 so
inference replays exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatch

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def save_blobs(path: str | Path, magic: bytes, version: int,
               meta: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<II", version, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"unsupported blob dtype {arr.dtype} for {name!r}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_blobs(path: str | Path, magic: bytes) -> tuple[int, dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != magic:
        raise CheckpointMismatch(f"{path}: expected {magic!r} checkpoint")
    version, meta_len = struct.unpack_from("<II", raw, 4)
    pos = 12
    meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_blobs,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_blobs):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dtype = _DTYPES[code]
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).reshape(dims)
        pos += count * dtype.itemsize
        arrays[name] = arr.copy()
    return version, meta, arrays


def rng_state_to_meta(rng: np.random.Generator) -> dict:
    """JSON-safe snapshot of a PCG64 generator state."""
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def rng_state_from_meta(meta: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": meta["bit_generator"],
        "state": {"state": int(meta["state"]), "inc": int(meta["inc"])},
        "has_uint32": int(meta["has_uint32"]),
        "uinteger": int(meta["uinteger"]),
    }
    return rng
