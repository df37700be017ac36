"""Seed derivation: every random stream is a Philox generator keyed by integers."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(root_seed: int, *keys: int | str) -> np.random.Generator:
    """Counter-based generator for ``(root_seed, *keys)``.

    String keys are hashed stably (not with ``hash()``, which is salted per process).
    """
    words = [int(root_seed) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            digest = hashlib.blake2b(k.encode("utf-8"), digest_size=8).digest()
            words += [int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:], "little")]
        else:
            words.append(int(k) & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


# Stage names used when deriving per-stage streams from the root seed.
STAGE_DATA = "data"
STAGE_INIT = "init"
STAGE_PRETRAIN = "pretrain"
STAGE_TUNE = "tune"
STAGE_EVAL = "eval"
