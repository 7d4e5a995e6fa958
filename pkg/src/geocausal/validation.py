"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np


def check_matrix(X, allow_nan: bool = False, dtype=np.float64) -> np.ndarray:
    """Return ``X`` as a 2-D float array, rejecting inf (and NaN unless allowed)."""
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {X.shape}")
    if np.isinf(X).any() or (not allow_nan and np.isnan(X).any()):
        raise ValueError("input contains non-finite values")
    return X


def check_vector(x, name: str = "x", n: int | None = None, finite: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if n is not None and len(x) != n:
        raise ValueError(f"{name} has length {len(x)}, expected {n}")
    if finite and not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_binary(y, n: int | None = None, name: str = "treatment") -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if n is not None and len(y) != n:
        raise ValueError(f"{name} has length {len(y)}, expected {n}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"{name} must be 0/1")
    return y.astype(int)


def check_same_length(**arrays) -> int:
    lengths = {k: len(v) for k, v in arrays.items()}
    if len(set(lengths.values())) > 1:
        raise ValueError(f"length mismatch: {lengths}")
    return next(iter(lengths.values()))
