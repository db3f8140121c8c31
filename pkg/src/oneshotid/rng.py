"""Deterministic random stream derivation.

Every stochastic component takes its own generator derived from one root
seed plus a path of labels, e.g. ``derive_rng(seed, "fold", 3, "epoch", 7)``.
Streams for different paths are independent, and the same (seed, path)
always yields the same stream, so runs reproduce regardless of the order
components consume randomness in.
"""

import hashlib

import numpy as np


def derive_seed(root_seed, *path):
    """Collapse a root seed and a label path into a 64-bit child seed."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(root_seed, *path):
    return np.random.default_rng(derive_seed(root_seed, *path))
