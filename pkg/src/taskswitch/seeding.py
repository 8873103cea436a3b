"""Deterministic seed splitting for every random subsystem."""

from __future__ import annotations

import zlib

import numpy as np


def split_seed(root_seed: int, *labels: str | int) -> np.random.SeedSequence:
    """Derive an independent SeedSequence for a named subsystem.

    Labels are hashed to stable 32-bit keys so the stream depends only on
    (root_seed, labels), never on call order.
    """
    keys = [int(root_seed)]
    for label in labels:
        if isinstance(label, int):
            keys.append(label & 0xFFFFFFFF)
        else:
            keys.append(zlib.crc32(label.encode("utf-8")))
    return np.random.SeedSequence(keys)


def rng_for(root_seed: int, *labels: str | int) -> np.random.Generator:
    return np.random.default_rng(split_seed(root_seed, *labels))
