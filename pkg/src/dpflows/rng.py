"""Counter-based random draws keyed by integer tuples.

Every draw is a pure function of its key, so noise and test inputs are
reproducible across runs, platforms, and any tiling or evaluation order.
The construction is frozen for this repository version:

1. absorb the key tuple into 64 bits with splitmix64-style mixing,
2. derive two independent 64-bit words from the absorbed state,
3. map them to uniforms and apply the Box-Muller cosine branch.

The scalar path below (pure Python integers) is the canonical definition.
The array path vectorizes only the integer mixing; the final Box-Muller
transform goes through the same libm calls per element, so the two paths
agree bitwise and draws never depend on how indices are batched.
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

_M64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
# Salts separating the two uniform streams of one draw.
_SALT_A = 0xD1B54A32D192ED03
_SALT_B = 0x8BB84B93962EACC9
_TWO_NEG53 = 2.0 ** -53
_TWO_PI = 2.0 * math.pi


def _mix64(z: int) -> int:
    z &= _M64
    z = ((z ^ (z >> 30)) * _MIX1) & _M64
    z = ((z ^ (z >> 27)) * _MIX2) & _M64
    return z ^ (z >> 31)


def absorb(*parts: int) -> int:
    """Fold integers (any sign) into a single 64-bit state."""
    h = _mix64(parts[0] & _M64) if parts else _mix64(0)
    for v in parts[1:]:
        h = _mix64((h + _GAMMA) ^ (v & _M64))
    return h


def normal_from_state(state: int) -> float:
    """One standard-normal draw from an absorbed 64-bit state."""
    w1 = _mix64(state ^ _SALT_A)
    w2 = _mix64(state ^ _SALT_B)
    u1 = ((w1 >> 11) + 1) * _TWO_NEG53  # (0, 1], keeps log finite
    u2 = (w2 >> 11) * _TWO_NEG53  # [0, 1)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)


def keyed_normal(seed: int, layer_id: int, step: int, flat_index: int) -> float:
    return normal_from_state(absorb(seed, layer_id, step, flat_index))


def _vec_mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def keyed_normal_array(seed: int, layer_id: int, step: int, flat_indices) -> np.ndarray:
    """Vectorized ``keyed_normal`` over an array of flat indices.

    Bitwise-identical to the scalar path element by element. numpy's
    transcendental ufuncs can differ from libm by an ulp, so the final
    transform stays on ``math``; only the integer mixing is vectorized.
    """
    idx = np.ascontiguousarray(flat_indices, dtype=np.uint64)
    base = absorb(seed, layer_id, step)  # pure-int prefix, then vector tail
    h = _vec_mix((np.full(idx.shape, (base + _GAMMA) & _M64, dtype=np.uint64)) ^ idx)
    w1 = (_vec_mix(h ^ np.uint64(_SALT_A)) >> np.uint64(11)).ravel().tolist()
    w2 = (_vec_mix(h ^ np.uint64(_SALT_B)) >> np.uint64(11)).ravel().tolist()
    out = np.empty(len(w1), dtype=np.float64)
    for i, (a, b) in enumerate(zip(w1, w2)):
        out[i] = math.sqrt(-2.0 * math.log((a + 1) * _TWO_NEG53)) \
            * math.cos(_TWO_PI * (b * _TWO_NEG53))
    return out.reshape(idx.shape)


def keyed_uniform_array(key_parts: Iterable[int], count: int, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Deterministic uniforms in [low, high) for input generation."""
    base = absorb(*key_parts)
    idx = np.arange(count, dtype=np.uint64)
    h = _vec_mix((np.full(count, (base + _GAMMA) & _M64, dtype=np.uint64)) ^ idx)
    u = (h >> np.uint64(11)).astype(np.float64) * _TWO_NEG53
    return low + (high - low) * u
