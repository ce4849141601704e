"""Binary checkpoint container ("DACW"): named arrays + JSON manifest + CRC.

Layout mirrors the episode format: magic, u32 version, u64 JSON-manifest
length, manifest, then raw little-endian payloads in manifest order.  A CRC32
over the payload catches corruption on load.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"DACW"
VERSION = 1


class CheckpointError(ValueError):
    pass


_DTYPES = {"f32": np.float32, "f64": np.float64, "i64": np.int64, "u8": np.uint8}
_NAMES = {np.dtype(v): k for k, v in _DTYPES.items()}


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    order = list(arrays.keys())
    payload = b"".join(
        np.ascontiguousarray(arrays[k]).tobytes() for k in order
    )
    manifest = {
        "arrays": [
            {"name": k, "dtype": _NAMES[np.dtype(arrays[k].dtype)],
             "shape": list(arrays[k].shape)}
            for k in order
        ],
        "meta": meta or {},
        "crc32": zlib.crc32(payload),
    }
    hdr = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        f.write(payload)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic: {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hdr_len,) = struct.unpack_from("<Q", data, 8)
    manifest = json.loads(data[16:16 + hdr_len].decode("utf-8"))
    payload = data[16 + hdr_len:]
    if zlib.crc32(payload) != manifest["crc32"]:
        raise CheckpointError("payload checksum mismatch")
    arrays = {}
    off = 0
    for spec in manifest["arrays"]:
        dt = np.dtype(_DTYPES[spec["dtype"]])
        n = int(np.prod(spec["shape"])) * dt.itemsize
        arrays[spec["name"]] = np.frombuffer(payload[off:off + n], dtype=dt).reshape(
            spec["shape"]).copy()
        off += n
    return arrays, manifest["meta"]
