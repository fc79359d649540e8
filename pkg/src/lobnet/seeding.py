"""Deterministic seed derivation.

Every source of randomness in a run is seeded from one master seed via
labeled hashing, so adding or reordering pipeline stages never shifts the
streams of the others.
"""

import hashlib


def child_seed(master, label):
    """A stable 63-bit seed for the given purpose label."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
