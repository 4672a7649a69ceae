"""Name-keyed seed splitting.

Every random stream in a run is derived from the master seed plus a path of
component names, e.g. ``derive_seed(7, "meta", 12, "task", 1, "vd")``.  The
derivation hashes the path with SHA-256, so a stream depends only on its own
key, never on how many other streams were drawn before it.  Reordering or
parallelising work therefore cannot change results.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *keys: object) -> int:
    """Return a 64-bit seed for the stream addressed by ``keys``."""
    text = "/".join([str(int(master))] + [str(k) for k in keys])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(master: int, *keys: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *keys)))
