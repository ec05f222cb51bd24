"""Versioned binary model checkpoints.

Layout::

    magic     8 bytes  b"SPBDCKPT"
    version   uint32 LE
    hdr_len   uint32 LE
    header    hdr_len bytes of UTF-8 JSON: config, band count, block table
    payload   little-endian float32 blocks in declaration order

The block table lists ``name`` and ``shape`` for every stored array:
trainable parameters first, then batch-norm running statistics, then any
extra arrays (e.g. the input scaler).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .attention import AttentionCnnConfig, AttentionCnnModel

MAGIC = b"SPBDCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: AttentionCnnModel, extras=None, meta=None):
    extras = dict(extras or {})
    arrays = model.state_arrays() + [(f"extra.{k}", np.asarray(v)) for k, v in extras.items()]
    header = {
        "config": model.config.to_dict(),
        "bands": model.bands,
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "meta": meta or {},
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hdr)))
        fh.write(hdr)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return Path(path)


def load_checkpoint(path):
    """Returns ``(model, extras, meta)``; the model is rebuilt in float32."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hdr_len = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hdr_len])
    cfg = dict(header["config"], dtype="float32")
    model = AttentionCnnModel(AttentionCnnConfig(**cfg), int(header["bands"]))
    offset = 16 + hdr_len
    declared = offset + 4 * sum(int(np.prod(b["shape"], dtype=np.int64)) for b in header["blocks"])
    if declared != len(raw):
        raise CheckpointError(f"{path}: payload size {len(raw)} does not match block table ({declared})")
    stored = {}
    for blk in header["blocks"]:
        count = int(np.prod(blk["shape"], dtype=np.int64))
        stored[blk["name"]] = np.frombuffer(raw, "<f4", count, offset).reshape(blk["shape"])
        offset += 4 * count
    for name, arr in model.state_arrays():
        if name not in stored or stored[name].shape != arr.shape:
            raise CheckpointError(f"{path}: missing or misshapen block {name!r}")
        arr[...] = stored[name]
    extras = {k[len("extra."):]: v.copy() for k, v in stored.items() if k.startswith("extra.")}
    return model, extras, header.get("meta", {})
