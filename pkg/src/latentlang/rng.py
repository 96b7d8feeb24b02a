"""SplitMix64: the one PRNG used everywhere in the toolkit.

SplitMix64 is counter based: the i-th output (1-based) of a stream with state
``s`` is ``mix64(s + i * GAMMA) mod 2**64``.  This makes it trivial to derive
independent per-message streams from ``(seed, index)`` and to evaluate many
streams side by side with numpy.

Algorithm (fixed, so other implementations can agree bit for bit)::

    GAMMA = 0x9E3779B97F4A7C15
    mix64(z):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)
    next():   state += GAMMA; return mix64(state)
    uniform:  (next() >> 11) * 2**-53            # in [0, 1)
    derive(seed, label): mix64(seed ^ mix64(label * GAMMA + 1))

String labels are mapped to integers by the first 8 bytes (big endian) of
their SHA-256 digest.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / (1 << 53)


def mix64(z: int) -> int:
    z &= MASK
    z = ((z ^ (z >> 30)) * _M1) & MASK
    z = ((z ^ (z >> 27)) * _M2) & MASK
    return z ^ (z >> 31)


def mix64_array(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    # uint64 array arithmetic wraps modulo 2**64
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def label_to_int(label: int | str) -> int:
    if isinstance(label, str):
        return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "big")
    if label < 0:
        raise ValueError("integer labels must be non-negative")
    return label & MASK


def derive(seed: int, *labels: int | str) -> int:
    """Derive a child seed from ``seed`` and a path of labels."""
    h = seed & MASK
    for label in labels:
        lab = label_to_int(label)
        h = mix64(h ^ mix64((lab * GAMMA + 1) & MASK))
    return h


def derive_many(seed: int, indices: np.ndarray) -> np.ndarray:
    """Vectorised ``derive(seed, i)`` for an array of integer labels."""
    idx = np.asarray(indices, dtype=np.uint64)
    inner = mix64_array(idx * np.uint64(GAMMA) + np.uint64(1))
    return mix64_array(np.uint64(seed & MASK) ^ inner)


class SplitMix64:
    """Sequential SplitMix64 stream with a little sampling toolkit on top."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK

    def __repr__(self) -> str:
        return f"SplitMix64(state={self.state:#018x})"

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK
        return mix64(self.state)

    def random(self) -> float:
        return (self.next_u64() >> 11) * _INV_2_53

    def uniforms(self, n: int) -> np.ndarray:
        """The next ``n`` uniforms, identical to ``n`` calls of :meth:`random`."""
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
        z = mix64_array(np.uint64(self.state) + steps)
        self.state = (self.state + n * GAMMA) & MASK
        return (z >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def choice(self, probs: Sequence[float] | np.ndarray) -> int:
        return int(categorical(np.asarray(probs, dtype=float)[None, :], np.array([self.random()]))[0])

    def dirichlet_ones(self, n: int) -> np.ndarray:
        """Symmetric Dirichlet(1, ..., 1) via normalised exponentials."""
        u = self.uniforms(n)
        e = -np.log1p(-u)
        return e / e.sum()

    def spawn(self, *labels: int | str) -> "SplitMix64":
        """Child stream keyed by labels; does not advance this stream."""
        return SplitMix64(derive(self.state, *labels))

    def split(self) -> "SplitMix64":
        """Child stream seeded from the next output; advances this stream."""
        return SplitMix64(self.next_u64())


def stream_uniforms(states: np.ndarray, step: int) -> np.ndarray:
    """The ``step``-th uniform (1-based) of each stream in ``states``."""
    z = mix64_array(np.asarray(states, dtype=np.uint64) + np.uint64((step * GAMMA) & MASK))
    return (z >> np.uint64(11)).astype(np.float64) * _INV_2_53


def categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw, one per row: smallest i with u < cumsum(p)[i].

    Rows of ``probs`` need not be identical.  Rounding at the top end falls
    back to the last index with positive mass, so zero-probability outcomes
    are never returned.
    """
    probs = np.asarray(probs, dtype=float)
    cdf = np.cumsum(probs, axis=-1)
    hit = u[:, None] < cdf
    idx = hit.argmax(axis=-1)
    missed = ~hit.any(axis=-1)
    if missed.any():
        positive = probs[missed] > 0
        last = probs.shape[-1] - 1 - positive[:, ::-1].argmax(axis=-1)
        idx[missed] = last
    return idx
