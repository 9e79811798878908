"""Seed derivation.

Every random stream is derived from one master seed: the component path is
hashed with SHA-256 and the first 8 bytes, read little-endian, are added to
the master seed modulo 2**63. Streams for different components never share
state, and adding a component does not shift the others.
"""

from __future__ import annotations

import hashlib
import os
import random

import numpy as np
import torch

_MOD = 2**63


def derive_seed(master: int, *path: object) -> int:
    key = "/".join(str(p) for p in path).encode()
    offset = int.from_bytes(hashlib.sha256(key).digest()[:8], "little")
    return (int(master) + offset) % _MOD


def torch_generator(master: int, *path: object) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(master, *path))
    return g


def numpy_rng(master: int, *path: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *path))


def set_deterministic(enabled: bool = True) -> None:
    """Force single-threaded, bit-reproducible torch execution."""
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
    else:
        torch.use_deterministic_algorithms(False)


def seed_globals(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
