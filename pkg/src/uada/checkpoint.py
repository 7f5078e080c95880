"""``uada-ckpt/1`` checkpoint container.

Layout: the 8-byte magic ``UADACKPT``, a little-endian u32 header length, a
UTF-8 JSON header (format tag, config echo, tensor index) and then every
tensor as raw little-endian float32 in index order. Parameter names are
namespaced by sub-network (``translator.``, ``segmenter.``).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptDataError

CKPT_FORMAT = "uada-ckpt/1"
CKPT_MAGIC = b"UADACKPT"


def save_checkpoint(path, state_dict: dict, config: dict | None = None) -> Path:
    path = Path(path)
    index, blobs, offset = [], [], 0
    for name, t in state_dict.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        blob = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"format": CKPT_FORMAT, "config": config or {}, "tensors": index}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(header)) + header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(state_dict, config)``; tensors are float32."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CorruptDataError(f"{path}: not a {CKPT_FORMAT} checkpoint")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    if header.get("format") != CKPT_FORMAT:
        raise CorruptDataError(f"{path}: unsupported format {header.get('format')!r}")
    base = 12 + hlen
    state = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(data):
            raise CorruptDataError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=entry["nbytes"] // 4, offset=start)
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))
    return state, header["config"]
