"""Deterministic random number generation.

Every random draw in this package comes from one generator family so that
checkpoints, synthetic datasets and splits are reproducible from a single
64-bit seed, independent of numpy's global state and version.

Algorithm (recorded here so outputs can be re-derived externally):

* ``output[i] = splitmix64_mix(seed + (i + 1) * GOLDEN)`` where
  ``splitmix64_mix`` is the finaliser of Steele et al.'s SplitMix64 and
  ``GOLDEN = 0x9E3779B97F4A7C15``, all in wrapping uint64 arithmetic.
  This is a counter-based use of SplitMix64: draw *i* depends only on
  ``(seed, i)``, so streams can be generated in any order or in parallel.
* Uniforms take the top 53 bits: ``u = (output >> 11) * 2**-53`` in [0, 1).
* Normals are produced from uniform pairs by the Box-Muller transform.

Derived stream seeds are made with :func:`mix64`, the same finaliser applied
to ``seed XOR tag``.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = 2.0**-53


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def mix64(seed: int, tag: int = 0) -> int:
    """Derive a new 64-bit seed from (seed, tag), e.g. per-parameter streams."""
    z = np.array([(seed ^ tag) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    with np.errstate(over="ignore"):
        return int(_mix(z)[0])


def uniform(seed: int, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """n float64 uniforms in [lo, hi), bit-identical for identical inputs."""
    idx = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _GOLDEN)
    u = (bits >> np.uint64(11)).astype(np.float64) * _U53
    return lo + u * (hi - lo)


def normal(seed: int, n: int, std: float = 1.0) -> np.ndarray:
    """n float64 draws from N(0, std^2) via Box-Muller on counter pairs."""
    m = (n + 1) // 2
    u = uniform(seed, 2 * m)
    u1, u2 = u[0::2], u[1::2]
    # 1 - u1 lies in (0, 1], keeping the log argument strictly positive
    r = np.sqrt(-2.0 * np.log1p(-u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * m, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return std * out[:n]


def shuffled(n: int, seed: int) -> list[int]:
    """Deterministic Fisher-Yates permutation of range(n)."""
    order = list(range(n))
    u = uniform(seed, n)
    for i in range(n - 1, 0, -1):
        j = int(u[i] * (i + 1))
        order[i], order[j] = order[j], order[i]
    return order
