"""Binary checkpoint container for named float64 arrays.

Layout: 8-byte magic "LPICKPT1", u32 manifest byte length, UTF-8 JSON
manifest, then one record per array in manifest order: u32 name length,
name bytes, u32 rank, rank x u64 dims, raw little-endian float64 data.
Round trips are bit-exact; loads verify magic, version, and per-array
byte counts and name the offending array on truncation or mismatch.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LPICKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, manifest: dict) -> None:
    """Write arrays (name -> ndarray) with a JSON manifest."""
    manifest = dict(manifest)
    manifest["version"] = VERSION
    manifest["arrays"] = list(arrays.keys())
    manifest["checksums"] = {
        name: hashlib.sha256(
            np.ascontiguousarray(np.asarray(a, dtype="<f8")).tobytes()).hexdigest()
        for name, a in arrays.items()
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple:
    """Return (arrays, manifest); raises CheckpointError on any framing fault."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (mlen,) = struct.unpack_from("<I", raw, 8)
    off = 12
    if off + mlen > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest: {e}")
    off += mlen
    if manifest.get("version") != VERSION:
        raise CheckpointError(
            f"{path}: version {manifest.get('version')} unsupported (want {VERSION})")
    arrays = {}
    for expected in manifest["arrays"]:
        try:
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            if name != expected:
                raise CheckpointError(
                    f"{path}: array order mismatch: found {name!r}, expected {expected!r}")
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", raw, off)
            off += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = count * 8
            if off + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated data for array {expected!r}")
            payload = raw[off:off + nbytes]
            want = manifest.get("checksums", {}).get(expected)
            if want is not None and hashlib.sha256(payload).hexdigest() != want:
                raise CheckpointError(f"{path}: checksum mismatch in array {expected!r}")
            arrays[name] = np.frombuffer(payload, dtype="<f8",
                                         count=count).reshape(dims).copy()
            off += nbytes
        except struct.error:
            raise CheckpointError(f"{path}: truncated header for array {expected!r}")
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes after last array")
    return arrays, manifest


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
