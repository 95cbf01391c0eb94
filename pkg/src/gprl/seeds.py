"""Deterministic seed derivation.

One master seed expands into independent per-purpose seeds through a
splitmix64 step applied to (master ^ fnv1a64(label)). Every stochastic
operation in the package takes one of these derived seeds explicitly;
nothing reads global RNG state.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1


def _fnv1a64(label: str) -> int:
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK
    return h


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive_seed(master: int, label: str) -> int:
    """Stable 63-bit seed for one named purpose under a master seed."""
    return _splitmix64((int(master) & _MASK) ^ _fnv1a64(label)) >> 1
