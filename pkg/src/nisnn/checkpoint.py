"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic    8 bytes   b"NISNNCKP"
    version  u32
    hlen     u32       length of the UTF-8 JSON header
    header   hlen bytes {"meta": {...}, "entries": [{"name", "shape", "offset", "count"}]}
    payload  float32 little-endian values, entries back to back (offset in values)
    checksum u64       first 8 bytes of BLAKE2b(payload), read as little-endian
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"NISNNCKP"
VERSION = 1


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def write_checkpoint(path, entries: dict[str, np.ndarray], meta: dict | None = None) -> None:
    manifest, chunks, offset = [], [], 0
    for name, arr in entries.items():
        flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "count": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += flat.size
    payload = b"".join(chunks)
    header = json.dumps({"meta": meta or {}, "entries": manifest}, sort_keys=True).encode("utf-8")
    blob = MAGIC + struct.pack("<II", VERSION, len(header)) + header + payload + struct.pack("<Q", _checksum(payload))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = 16 + hlen
    header = json.loads(blob[16:start].decode("utf-8"))
    payload = blob[start:-8]
    (stored,) = struct.unpack("<Q", blob[-8:])
    if stored != _checksum(payload):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    values = np.frombuffer(payload, dtype="<f4")
    entries = {}
    for e in header["entries"]:
        chunk = values[e["offset"] : e["offset"] + e["count"]]
        entries[e["name"]] = chunk.reshape(e["shape"]).astype(np.float32)
    return entries, header["meta"]
