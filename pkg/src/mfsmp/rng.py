"""Counter-based Gaussian streams.

Every normal draw is a pure function of ``(seed, stream, step, slot)``: the
Philox key holds ``(seed, stream)``, the top counter word holds the step,
and slot ``s`` (``s = particle * width + coordinate``) always consumes raw
words ``2s`` and ``2s + 1`` of that step's block through Box-Muller.  The
value seen by particle ``j`` therefore does not depend on ``N``.
"""

from __future__ import annotations

import numpy as np

NOISE_STREAM = 0x4D46534D50
COPY_STREAM = 0x434F5059

_TWO_M53 = 2.0**-53


def _block(seed: int, stream: int, step: int, count: int) -> np.ndarray:
    gen = np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream)], counter=[0, 0, 0, int(step)])
    return gen.random_raw(count)


def _uniform_open(raw: np.ndarray) -> np.ndarray:
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53


def standard_normals(seed: int, step: int, size: int, stream: int = NOISE_STREAM) -> np.ndarray:
    raw = _block(seed, stream, step, 2 * size).reshape(size, 2)
    u1 = _uniform_open(raw[:, 0])
    u2 = _uniform_open(raw[:, 1])
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def brownian_increments(seed: int, steps: int, particles: int, dim: int, dt: float) -> np.ndarray:
    """Increments of shape ``(steps, particles, dim)`` with variance ``dt``."""
    out = np.empty((steps, particles, dim))
    scale = np.sqrt(dt)
    for m in range(steps):
        out[m] = standard_normals(seed, m, particles * dim).reshape(particles, dim) * scale
    return out


def permutation(seed: int, tag: int, size: int) -> np.ndarray:
    """Deterministic permutation of ``range(size)`` keyed by ``(seed, tag)``."""
    raw = _block(seed, COPY_STREAM, tag, size)
    return np.argsort(raw, kind="stable")
