"""Flat named-tensor archive.

Layout::

    b"CLUECKPT"                 magic, 8 bytes
    uint64 little-endian        header length N
    N bytes                     UTF-8 JSON header
    raw tensor data             little-endian float32, concatenated

The header holds ``meta`` (config, step, RNG state, anything JSON-able) and
``tensors``, mapping each name to its shape and byte offset into the data
section. Tensor order is sorted by name, and the JSON is written with sorted
keys, so equal contents always produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CLUECKPT"


def save_archive(path, tensors: dict[str, torch.Tensor], meta: dict) -> str:
    """Write the archive and return its SHA-256 hex digest."""
    index, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().contiguous().numpy().astype("<f4", copy=False)
        buf = arr.tobytes(order="C")
        index[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(buf)}
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def load_archive(path) -> tuple[dict[str, torch.Tensor], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint archive")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + n])
    data = blob[16 + n :]
    tensors = {}
    for name, rec in header["tensors"].items():
        raw = data[rec["offset"] : rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(rec["shape"])
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return tensors, header["meta"]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
