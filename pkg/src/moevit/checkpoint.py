"""Binary checkpoints: magic + version + JSON header + raw little-endian blobs.

Layout:
    bytes 0..3   magic b"MOEV"
    bytes 4..7   format version, little-endian u32 (currently 1)
    bytes 8..15  header length, little-endian u64
    header       UTF-8 JSON with sorted keys: config snapshot, epoch, RNG
                 state, optimizer step counter, and a tensor manifest
                 [{name, dtype, shape, offset, nbytes}, ...]
    blobs        raw C-order little-endian tensor data at manifest offsets

Saving the result of a load produces a byte-identical file (sorted keys, fixed
separators, deterministic blob order). Unknown versions are rejected.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import CheckpointError

MAGIC = b"MOEV"
VERSION = 1


def _le_dtype(dtype: np.dtype) -> str:
    return np.dtype(dtype).newbyteorder("<").str


def save_checkpoint(path: str, tensors: dict, meta: dict) -> None:
    """Write named arrays + JSON-serializable metadata. `meta` must not contain 'tensors'."""
    if "tensors" in meta:
        raise CheckpointError("metadata key 'tensors' is reserved for the manifest")
    names = sorted(tensors)
    manifest = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = arr.tobytes()
        manifest.append(
            {"name": name, "dtype": _le_dtype(arr.dtype), "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = dict(meta)
    header["tensors"] = manifest
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(VERSION).tobytes())
        f.write(np.uint64(len(header_bytes)).tobytes())
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str) -> tuple[dict, dict]:
    """Returns (tensors, meta). Meta retains every header key except 'tensors'."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    header_len = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    base = 16 + header_len
    tensors = {}
    for entry in header.pop("tensors"):
        start = base + entry["offset"]
        blob = raw[start : start + entry["nbytes"]]
        if len(blob) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated blob for tensor '{entry['name']}'")
        arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
    return tensors, header
