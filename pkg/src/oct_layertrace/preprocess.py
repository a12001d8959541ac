"""Standardize raw B-scans to the fixed-size two-channel network input."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import InputTooWideError
from .validation import check_bscan


class DegenerateProfileWarning(UserWarning):
    """The row profile is flat; the ROI center fell back to the image middle."""


def locate_roi_center(image, return_flag: bool = False):
    """Row coordinate of the retina: mean of a Gaussian fitted to the row profile.

    The profile sums every row across columns.  The Gaussian is fitted by
    weighted moments (profile minus its minimum as weights), then refined once
    using only rows within three standard deviations of the first estimate.
    """
    img = check_bscan(image)
    h = img.shape[0]
    profile = img.sum(axis=1)
    weights = profile - profile.min()
    total = weights.sum()
    if not np.isfinite(total) or total <= 0:
        warnings.warn("flat row profile; using the image middle as ROI center", DegenerateProfileWarning)
        return (h / 2.0, True) if return_flag else h / 2.0
    rows = np.arange(h, dtype=np.float64)
    mu = float((rows * weights).sum() / total)
    sigma = float(np.sqrt(((rows - mu) ** 2 * weights).sum() / total))
    keep = np.abs(rows - mu) <= 3 * sigma
    if keep.any() and weights[keep].sum() > 0:
        mu = float((rows[keep] * weights[keep]).sum() / weights[keep].sum())
    mu = min(max(mu, 0.0), np.nextafter(h, 0))
    return (mu, False) if return_flag else mu


def make_position_cue(height: int, width: int, dtype=np.float64) -> np.ndarray:
    """Row index rescaled to [0, 1]: constant along rows, 0 at the top, 1 at the bottom."""
    col = np.arange(height, dtype=np.float64) / max(height - 1, 1)
    return np.broadcast_to(col[:, None], (height, width)).astype(dtype)


@dataclass
class StandardizedInput:
    """Network-ready image with everything needed to undo the geometry.

    ``shift`` is the integer vertical offset: standardized row = raw row - shift.
    ``pad`` is the number of zero columns appended on the right.
    """

    image: np.ndarray
    cue: np.ndarray
    shift: int
    pad: int
    raw_shape: Tuple[int, int]
    row_valid: np.ndarray
    column_valid: np.ndarray
    roi_center: float
    degenerate: bool = False

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]

    @property
    def pixel_valid(self) -> np.ndarray:
        return self.row_valid[:, None] & self.column_valid[None, :]

    def stacked(self, dtype=np.float32) -> np.ndarray:
        return np.stack([self.image, self.cue]).astype(dtype)

    def to_standard(self, boundaries) -> np.ndarray:
        """Map raw-space boundary rows (B, W0) into standardized space (B, W)."""
        L = np.asarray(boundaries, dtype=np.float64)
        out = np.full(L.shape[:-1] + (self.width,), np.nan)
        out[..., : L.shape[-1]] = L - self.shift
        return out

    def to_raw(self, boundaries) -> np.ndarray:
        """Inverse of :meth:`to_standard`; drops the padded columns."""
        L = np.asarray(boundaries, dtype=np.float64)
        return L[..., : self.raw_shape[1]] + self.shift


def standardize(raw, height: int = 300, width: int = 800) -> StandardizedInput:
    """Center the retina vertically, crop/pad to ``height`` and right-pad to ``width``.

    Intensities of the raw pixels kept in the output are normalized to zero
    mean and unit variance; padded pixels are 0.  Raises :class:`InputTooWideError` when the
    raw scan is wider than ``width`` (no horizontal resampling is done).
    """
    img = check_bscan(raw)
    h0, w0 = img.shape
    if w0 > width:
        raise InputTooWideError(f"B-scan is {w0} columns wide; the standardized width is {width}")
    yc, degenerate = locate_roi_center(img, return_flag=True)
    shift = int(np.floor(yc - height / 2.0 + 0.5))

    rows = np.arange(height) + shift
    row_valid = (rows >= 0) & (rows < h0)
    column_valid = np.arange(width) < w0

    # Statistics come from exactly the raw pixels that land in the output.
    kept = img[rows[row_valid]]
    std = kept.std()
    out = np.zeros((height, width), dtype=np.float64)
    out[row_valid, :w0] = (kept - kept.mean()) / (std if std > 0 else 1.0)
    return StandardizedInput(
        image=out,
        cue=make_position_cue(height, width),
        shift=shift,
        pad=width - w0,
        raw_shape=(h0, w0),
        row_valid=row_valid,
        column_valid=column_valid,
        roi_center=yc,
        degenerate=degenerate,
    )


class BScanStandardizer(TransformerMixin, BaseEstimator):
    """Stateless transformer: list of raw B-scans -> (N, 2, height, width) array.

    The per-scan transform records of the last call are kept in
    ``records_`` so predictions can be mapped back to raw coordinates.
    """

    def __init__(self, height: int = 300, width: int = 800, dtype: str = "float32"):
        self.height = height
        self.width = width
        self.dtype = dtype

    def fit(self, X, y=None):
        self.n_features_in_ = 2
        return self

    def transform(self, X) -> np.ndarray:
        self.records_ = [standardize(x, self.height, self.width) for x in X]
        return np.stack([r.stacked(self.dtype) for r in self.records_])


def standardize_volume(images, height: int = 300, width: int = 800, boundaries: Optional[np.ndarray] = None):
    """Standardize every slice; optionally map raw GT into standardized space."""
    records = [standardize(img, height, width) for img in images]
    if boundaries is None:
        return records, None
    return records, np.stack([r.to_standard(b) for r, b in zip(records, boundaries)])
