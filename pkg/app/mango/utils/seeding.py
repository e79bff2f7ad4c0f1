"""
seeding.py

Named random sub-streams derived from a single experiment seed, so that
initialization, data, batching and sampling can be reseeded independently.
"""

import zlib

import numpy as np

from mango.errors import ContractError

STREAMS = (
    "init", "init-head", "data", "maps", "split", "batches", "sampling",
    "pca", "autoencoder", "autoencoder-batches",
)
# audit streams are named per layer kind and size, e.g. "audit-coupling-8-2"
AUDIT_PREFIX = "audit-"


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Generator for sub-stream `name` of `seed`; stable across runs and platforms."""
    if name not in STREAMS and not name.startswith(AUDIT_PREFIX):
        raise ContractError(f"unknown random stream {name!r}; expected one of {STREAMS} or {AUDIT_PREFIX}*")
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
