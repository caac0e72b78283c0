"""Deterministic fan-out of one global seed to every stochastic component."""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["derive_rng", "derive_seed"]


def _path_entropy(path):
    return [zlib.crc32(str(p).encode("utf-8")) for p in path]


def derive_seed(seed, *path):
    """A child seed for component `path`, stable across runs and platforms."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_path_entropy(path)])
    return int(ss.generate_state(1)[0])


def derive_rng(seed, *path):
    """A Generator seeded for component `path` under the global `seed`."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_path_entropy(path)])
    return np.random.Generator(np.random.PCG64(ss))
