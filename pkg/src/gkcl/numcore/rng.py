"""Reproducible random streams.

Every stream is a PCG64 generator seeded through numpy's ``SeedSequence``
from a root seed plus a *path* of labels.  ``split(label)`` appends a label to
the path, so a child stream depends only on ``(seed, path)`` and never on how
much of the parent has been consumed.  PCG64 output and numpy's Gaussian /
uniform transforms are platform independent, which gives bit-identical
streams across machines for a fixed numpy version.
"""

from __future__ import annotations

import hashlib
from typing import Hashable

import numpy as np

from ..errors import ParameterError


def _label_key(label: Hashable) -> int:
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool) and label >= 0:
        text = f"i:{int(label)}"
    else:
        text = f"s:{label}"
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


class RngState:
    """A named PCG64 stream with deterministic child derivation."""

    __slots__ = ("seed", "path", "generator")

    def __init__(self, seed: int, path: tuple = ()):
        if seed < 0 or seed >= 2**64:
            raise ParameterError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(_label_key(p) for p in self.path))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def split(self, label: Hashable) -> "RngState":
        return RngState(self.seed, self.path + (label,))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, path={self.path!r})"

    # thin wrappers so callers never touch the numpy generator directly
    def normal(self, shape: tuple[int, ...]) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, shape: tuple[int, ...], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self.generator.choice(n, size=k, replace=False)


def sample_gaussian(shape: tuple[int, int], rng: RngState) -> np.ndarray:
    return rng.normal(shape)


def sample_uniform(shape: tuple[int, int], rng: RngState, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    return rng.uniform(shape, low, high)


def sample_permutation(n: int, rng: RngState) -> np.ndarray:
    if n < 1:
        raise ParameterError("permutation size must be positive")
    return rng.permutation(n)
