"""Central finite differences as an independent check on reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np


def relative_error(fd: np.ndarray, an: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """|fd - an| / max(|fd|, |an|, floor), elementwise."""
    fd = np.asarray(fd, dtype=np.float64)
    an = np.asarray(an, dtype=np.float64)
    return np.abs(fd - an) / np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor)


def central_difference(f: Callable[[], float], array: np.ndarray, index: tuple, h: float = 1e-5) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h, perturbing ``array`` in place."""
    orig = array[index]
    array[index] = orig + h
    up = f()
    array[index] = orig - h
    down = f()
    array[index] = orig
    return (up - down) / (2.0 * h)


def numeric_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5,
                     indices=None) -> np.ndarray:
    """Central-difference gradient of ``f`` w.r.t. every (or the listed) entries of ``array``."""
    out = np.zeros_like(array, dtype=np.float64)
    idx_iter = np.ndindex(*array.shape) if indices is None else indices
    for idx in idx_iter:
        out[idx] = central_difference(f, array, idx, h)
    return out
