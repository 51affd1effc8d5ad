"""Named random streams derived from a single per-run seed.

Every consumer of randomness (weight init, env noise, CEM sampling,
batch shuffling, ...) gets its own generator keyed by a string name, so
adding a consumer never perturbs the draws seen by existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _name_key(name: str) -> int:
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for consumer `name` under run seed `seed`.

    Deterministic across processes and platforms (no reliance on
    PYTHONHASHSEED).
    """
    return np.random.default_rng(np.random.SeedSequence([seed & _MASK64, _name_key(name)]))


def substream(seed: int, name: str, index: int) -> np.random.Generator:
    """Indexed variant of :func:`stream`, e.g. one stream per ensemble member."""
    return stream(seed, f"{name}/{index}")
