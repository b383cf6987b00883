"""Deterministic seed derivation.

A single master seed fans out into independent per-subsystem streams via a
splitmix64-style mix: the master seed is combined with a label (arbitrary
strings/ints identifying the stream) by folding each label token through the
splitmix64 finalizer. The derivation is pure arithmetic on 64-bit integers,
so any subsystem can be re-seeded independently of execution order.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    """splitmix64 finalizer."""
    z = (z + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive(master: int, *labels: int | str) -> int:
    """Derive a 64-bit stream seed from a master seed and label tokens.

    String labels are folded in bytewise; integer labels directly. The same
    (master, labels) pair always yields the same seed.
    """
    state = _mix(int(master) & _MASK)
    for label in labels:
        if isinstance(label, str):
            for b in label.encode("utf-8"):
                state = _mix(state ^ b)
        else:
            state = _mix(state ^ (int(label) & _MASK))
    return state


def rng(master: int, *labels: int | str) -> np.random.Generator:
    """Seeded generator for the stream identified by the labels."""
    return np.random.Generator(np.random.PCG64(derive(master, *labels)))
