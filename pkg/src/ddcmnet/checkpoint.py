"""Checkpoint container of named float64 tensors.

Layout (little-endian)::

    magic      8 bytes  b"DDCMCKPT"
    version    u16      1
    meta_len   u32      length of the UTF-8 JSON metadata that follows
    meta       bytes    {"network": NetworkConfig fields, ...extra}
    count      u32      number of tensors
    per tensor:
      name_len u16, name (UTF-8)
      ndim     u8,  dims u32 * ndim
      data     float64 * prod(dims), row-major

Tensors are written in sorted name order so identical state gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import JointTaskDDCM, NetworkConfig

MAGIC = b"DDCMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, tensors: dict[str, np.ndarray], meta: dict):
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    version, meta_len = take("<HI")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (n,) = take("<H")
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        if pos + 8 * size > len(blob):
            raise CheckpointError(f"{path}: truncated tensor {name!r} at byte {pos}")
        tensors[name] = np.frombuffer(blob, "<f8", size, pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return tensors, meta


def save_model(path, net: JointTaskDDCM, optimizer=None, extra: dict | None = None):
    tensors = {f"model.{k}": v for k, v in net.state_dict().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_dict())
    meta = {"network": _config_json(net.cfg)}
    meta.update(extra or {})
    save(path, tensors, meta)


def _config_json(cfg: NetworkConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.to_dict().items()}


def load_model(path, cfg: NetworkConfig | None = None):
    """Rebuild the network from its config echo (or check it against ``cfg``) and load weights."""
    tensors, meta = load(path)
    saved = NetworkConfig.from_dict(meta["network"])
    if cfg is not None and cfg != saved:
        raise CheckpointError(f"{path}: network config differs from the checkpoint's")
    net = JointTaskDDCM(saved)
    net.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    return net, meta


def load_optimizer_state(path, optimizer):
    tensors, _ = load(path)
    optimizer.load_state_dict(tensors)
