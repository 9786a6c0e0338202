"""Input validation helpers shared by the estimator and the functional API."""

from __future__ import annotations

import numbers

import numpy as np


def check_positive(value, name, *, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if strict and value <= 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    if not strict and value < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return float(value)


def check_int(value, name, *, minimum=None):
    if isinstance(value, (bool, np.bool_)) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value


def check_pairs(X, n=None, m=None):
    """Coerce ``X`` into an ``(k, 2)`` int64 array of (user, item) indices.

    Raises ``ValueError`` for negative indices or indices outside ``[0, n)`` /
    ``[0, m)`` when the bounds are given.
    """
    arr = np.asarray(X)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected an array of shape (k, 2), got {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("pair indices must be integers")
    arr = arr.astype(np.int64, copy=False)
    if arr.size and arr.min() < 0:
        raise ValueError("pair indices must be non-negative")
    if n is not None and arr.size and arr[:, 0].max() >= n:
        raise ValueError(f"user index out of range for n={n}")
    if m is not None and arr.size and arr[:, 1].max() >= m:
        raise ValueError(f"item index out of range for m={m}")
    return arr


def check_tau_vector(tau, size, name="tau"):
    """Broadcast a scalar or per-entry temperature to a float64 vector of ``size``."""
    t = np.asarray(tau, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(size, float(t))
    if t.shape != (size,):
        raise ValueError(f"{name} must be a scalar or have shape ({size},), got {t.shape}")
    if not np.all(np.isfinite(t)) or np.any(t <= 0):
        raise ValueError(f"{name} must be finite and > 0")
    return t
