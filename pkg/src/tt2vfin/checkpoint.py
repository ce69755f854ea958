"""Binary parameter checkpoints with a JSON sidecar manifest.

Layout (all integers little-endian)::

    magic     8 bytes   b"TT2VCKPT"
    version   u32       1
    count     u32       number of arrays
    repeated count times:
        name_len  u32
        name      name_len bytes, UTF-8
        ndim      u32
        shape     ndim x u64
        data      prod(shape) x float64 (little-endian, row-major)
    digest    32 bytes  SHA-256 of every preceding byte

The manifest (``<checkpoint>.manifest.json``) records the model config, seed,
run metadata and the SHA-256 of the whole checkpoint file.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .numerics import Tensor

MAGIC = b"TT2VCKPT"
VERSION = 1


def encode_checkpoint(params: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, t in params.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> dict[str, Tensor]:
    if len(blob) < len(MAGIC) + 8 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint integrity check failed (truncated or corrupt)")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CheckpointError("checkpoint ends unexpectedly")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(body):
            raise CheckpointError("checkpoint ends unexpectedly")
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(body):
            raise CheckpointError(f"array {name!r} is truncated")
        arr = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape)
        pos += nbytes
        params[name] = Tensor(arr.astype(np.float64), requires_grad=True, name=name)
    if pos != len(body):
        raise CheckpointError("trailing bytes after last array")
    return params


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def save_checkpoint(path: str | Path, params: dict, manifest: dict) -> Path:
    path = Path(path)
    blob = encode_checkpoint(params)
    path.write_bytes(blob)
    meta = dict(manifest, format="tt2vfin-checkpoint-v1", sha256=hashlib.sha256(blob).hexdigest())
    manifest_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    mpath = manifest_path(path)
    try:
        manifest = json.loads(mpath.read_text())
    except OSError:
        raise CheckpointError(f"missing manifest {mpath}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest {mpath} is not valid JSON: {exc}") from None
    if manifest.get("sha256") != hashlib.sha256(blob).hexdigest():
        raise CheckpointError(f"checkpoint {path} does not match its manifest checksum")
    return decode_checkpoint(blob), manifest
