"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numbers

import numpy as np


def check_random_state(seed) -> np.random.Generator:
    """Turn ``None``, an int, a SeedSequence or a Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise ValueError(f"{seed!r} cannot be used to seed a numpy Generator")


def check_token_array(X, name: str = "X", ndim: int = 2, width: int | None = None) -> np.ndarray:
    """Validate an integer token array of the given rank (and trailing width)."""
    arr = np.asarray(X)
    if arr.ndim == ndim - 1:
        arr = arr[None]
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if arr.size and not np.all(np.mod(arr, 1) == 0):
            raise ValueError(f"{name} must hold integer token ids")
        arr = arr.astype(np.int64)
    if width is not None and arr.shape[-1] != width:
        raise ValueError(f"{name} must have {width} columns, got {arr.shape[-1]}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return arr.astype(np.int64, copy=False)


def check_positive(value, name: str, allow_zero: bool = False):
    if allow_zero:
        if value < 0:
            raise ValueError(f"{name} must be non-negative, got {value}")
    elif value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value
