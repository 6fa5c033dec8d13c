"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"LAEC" | u32 version | u32 n_params
    n_params x ( u32 name_len | utf-8 name | u32 rank | rank x u32 dim | f32 data )
    u64 global_step | 32-byte config digest

Parameters are written in lexicographic name order. A JSON sidecar
(``<path>.json``) may carry the experiment config and averaging provenance.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LAEC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int = 0
    digest: bytes = bytes(32)
    meta: dict = field(default_factory=dict)


def save(path, ckpt: Checkpoint) -> None:
    if len(ckpt.digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(ckpt.params))]
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    chunks.append(struct.pack("<Q", ckpt.step))
    chunks.append(ckpt.digest)
    path = Path(path)
    path.write_bytes(b"".join(chunks))
    if ckpt.meta:
        Path(str(path) + ".json").write_text(json.dumps(ckpt.meta, indent=1, sort_keys=True) + "\n")


def load(path) -> Checkpoint:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        params[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).copy()
        off += 4 * size
    (step,) = struct.unpack_from("<Q", buf, off)
    digest = buf[off + 8:off + 40]
    if len(digest) != 32:
        raise CheckpointError(f"{path}: truncated footer")
    meta_path = Path(str(path) + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Checkpoint(params, step, digest, meta)


def average(ckpts: list[Checkpoint]) -> Checkpoint:
    """Elementwise arithmetic mean of parameters across checkpoints."""
    if not ckpts:
        raise CheckpointError("nothing to average")
    ref = ckpts[0]
    for c in ckpts[1:]:
        if set(c.params) != set(ref.params):
            raise CheckpointError("checkpoints have different parameter names")
        for k, v in c.params.items():
            if v.shape != ref.params[k].shape:
                raise CheckpointError(f"shape mismatch for {k}: {v.shape} vs {ref.params[k].shape}")
    out = {}
    for k in ref.params:
        acc = np.zeros(ref.params[k].shape, dtype=np.float64)
        for c in ckpts:
            acc += c.params[k]
        out[k] = (acc / len(ckpts)).astype(np.float32)
    meta = dict(ref.meta)
    meta["averaged_steps"] = [c.step for c in ckpts]
    return Checkpoint(out, max(c.step for c in ckpts), ref.digest, meta)
