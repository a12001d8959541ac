"""Input validation helpers shared by the estimator, transformers and CLI."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, DimensionError


def check_bscan(image) -> np.ndarray:
    """Return a finite 2-D float64 copy of ``image``."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"a B-scan must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError("a B-scan needs at least one row and one column")
    if not np.isfinite(arr).all():
        raise ValueError("B-scan contains non-finite values")
    return arr


def check_bscans(X):
    """Accept a 3-D array or a sequence of 2-D scans (sizes may differ)."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise DimensionError("expected a sequence of B-scans, got a single 2-D array")
    scans = [check_bscan(x) for x in X]
    if not scans:
        raise ValueError("no B-scans given")
    return scans


def check_boundaries(y, n_scans: int, n_boundaries=None):
    """Validate per-scan boundary matrices (B, W_i); NaN marks invalid columns."""
    out = []
    if len(y) != n_scans:
        raise DimensionError(f"{len(y)} boundary sets for {n_scans} scans")
    for i, b in enumerate(y):
        b = np.asarray(b, dtype=np.float64)
        if b.ndim != 2:
            raise DimensionError(f"boundaries of scan {i} must be (B, W), got {b.shape}")
        if n_boundaries is not None and b.shape[0] != n_boundaries:
            raise ConfigError(f"scan {i} has {b.shape[0]} boundaries, model expects {n_boundaries}")
        out.append(b)
    return out


def check_groups(groups, n_scans: int) -> np.ndarray:
    """Volume label per scan; ``None`` puts every scan in its own volume."""
    if groups is None:
        return np.arange(n_scans)
    g = np.asarray(groups)
    if g.shape != (n_scans,):
        raise DimensionError(f"groups must have one entry per scan ({n_scans}), got {g.shape}")
    return g
