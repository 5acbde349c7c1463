"""FSNETv01 checkpoint container.

Layout: magic ``FSNETv01`` (8 bytes), little-endian uint32 header length, a
UTF-8 JSON header ``{"config": ..., "manifest": [{name, shape, offset}, ...]}``,
then the tensors as raw little-endian float32 in manifest order.  Offsets are
bytes from the start of the payload region (right after the header), so they
are independent of header size; the loader validates them against the shapes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from fsnet.errors import DataError

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint", "assign_parameters", "file_sha256"]

MAGIC = b"FSNETv01"


def save_checkpoint(path, config: dict, params) -> None:
    """Write `params` (objects with .name/.value) under a JSON-able config."""
    manifest = []
    offset = 0
    blobs = []
    seen = set()
    for p in params:
        if p.name in seen:
            raise DataError(f"duplicate tensor name {p.name!r}")
        seen.add(p.name)
        arr = np.ascontiguousarray(p.value, dtype="<f4")
        manifest.append({"name": p.name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"config": config, "manifest": manifest}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """-> (config dict, {name: float32 array} in manifest order)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise DataError(f"{path}: not an FSNETv01 checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise DataError(f"{path}: truncated header")
    try:
        head = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: bad header: {e}") from e
    if not isinstance(head, dict) or "config" not in head or "manifest" not in head:
        raise DataError(f"{path}: header missing config/manifest")
    payload = raw[12 + hlen :]
    tensors = {}
    offset = 0
    for entry in head["manifest"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if entry["offset"] != offset:
            raise DataError(f"{path}: {name}: offset {entry['offset']} != {offset}")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 4 * n
        if offset + nbytes > len(payload):
            raise DataError(f"{path}: {name}: payload truncated")
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
        tensors[name] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise DataError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return head["config"], tensors


def assign_parameters(params, tensors: dict) -> None:
    """Load tensors into parameters by name; names and shapes must line up."""
    names = [p.name for p in params]
    missing = [n for n in names if n not in tensors]
    extra = [n for n in tensors if n not in set(names)]
    if missing or extra:
        raise DataError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for p in params:
        t = tensors[p.name]
        if t.shape != p.value.shape:
            raise DataError(
                f"{p.name}: checkpoint shape {t.shape} != model {p.value.shape}"
            )
        p.value[...] = t
        p.zero_grad()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
