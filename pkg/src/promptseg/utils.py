"""Seeding and parameter-digest helpers shared across training phases."""

from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


def derive_seed(base: int, salt: str) -> int:
    """Stable per-phase seed so phases draw from independent streams."""
    h = hashlib.sha256(f"{base}:{salt}".encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") % (2**63)

def seed_all(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def tensor_bytes(t: torch.Tensor) -> bytes:
    """Canonical little-endian bytes of a tensor (row-major)."""
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def params_digest(named: dict[str, torch.Tensor]) -> str:
    """SHA-256 over concatenated parameter bytes, in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(named):
        h.update(tensor_bytes(named[name]))
    return h.hexdigest()


def module_digest(module: torch.nn.Module) -> str:
    return params_digest(dict(module.state_dict()))
