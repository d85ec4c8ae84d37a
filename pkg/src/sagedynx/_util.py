"""Internal helpers: seeded RNG streams and box arithmetic."""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a(label: str) -> int:
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def rng_for(seed: int, *labels) -> np.random.Generator:
    """Generator for an independent, reproducible stream.

    Streams are keyed by (seed, labels) so adding a new consumer never
    perturbs existing ones. Labels may be strings or ints.
    """
    entropy = [int(seed)]
    for lab in labels:
        entropy.append(_fnv1a(lab) if isinstance(lab, str) else int(lab))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def as_box(box) -> np.ndarray:
    """Normalize to an (n, 2) float array of [lo, hi] rows."""
    arr = np.asarray(box, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"box must be (n, 2), got {arr.shape}")
    if np.any(arr[:, 0] >= arr[:, 1]):
        raise ValueError("box lower bounds must be < upper bounds")
    return arr


def box_violation(x: np.ndarray, box: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Total inf-norm violation distance of x to box shrunk by margin.

    x: (..., n); returns (...,) with 0 exactly when inside.
    """
    lo = box[:, 0] + margin
    hi = box[:, 1] - margin
    under = np.maximum(lo - x, 0.0)
    over = np.maximum(x - hi, 0.0)
    return (under + over).sum(axis=-1)


def in_box(x: np.ndarray, box: np.ndarray, margin: float = 0.0) -> np.ndarray:
    return box_violation(x, box, margin) == 0.0


def clip_to_box(x: np.ndarray, box: np.ndarray, margin: float = 0.0) -> np.ndarray:
    return np.clip(x, box[:, 0] + margin, box[:, 1] - margin)


def box_corners(radius, n: int) -> np.ndarray:
    """All 2^n corners of the inf-ball of the given (scalar or (n,)) radius."""
    r = np.broadcast_to(np.asarray(radius, dtype=float), (n,))
    signs = np.array(
        [[1.0 if (i >> d) & 1 else -1.0 for d in range(n)] for i in range(2**n)]
    )
    return signs * r
