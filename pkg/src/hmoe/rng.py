"""Deterministic seed derivation for named model components.

Deriving per-component seeds from (base seed, label) keeps shared
components bit-identical across model variants that add or remove other
components, which the equivalence tests rely on.
"""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")
