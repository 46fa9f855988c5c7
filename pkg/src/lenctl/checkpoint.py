"""Named-array checkpoint container.

Binary layout: magic, format version, a canonical-JSON metadata blob, then
length-prefixed records of (name, shape, row-major float64 payload), sorted
by name. Re-saving a loaded checkpoint is byte-identical, which the harness
leans on for resumability and determinism checks.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"LCKP"
VERSION = 1


class CheckpointError(IOError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    """Write atomically (temp file in the target directory, then rename)."""
    meta = canonical_json(metadata or {})
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(meta))
    blob += meta
    names = sorted(arrays)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes()
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    if not os.path.exists(path):
        raise CheckpointError(f"missing checkpoint file: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint: {path}")
        out = raw[off : off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    metadata = json.loads(take(meta_len).decode("utf-8"))
    (n,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
        arrays[name] = arr
    if off != len(raw):
        raise CheckpointError(f"trailing bytes in {path}")
    return arrays, metadata


def namespaced(groups: dict[str, dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Flatten {"policy": {...}, "critic": {...}} into dotted names."""
    out = {}
    for prefix, arrays in groups.items():
        for k, v in arrays.items():
            out[f"{prefix}.{k}"] = v
    return out


def split_namespace(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    plen = len(prefix) + 1
    out = {k[plen:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}
    if not out:
        raise CheckpointError(f"checkpoint has no arrays under {prefix!r}")
    return out
