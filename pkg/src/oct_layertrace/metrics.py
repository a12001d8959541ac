"""Boundary error metrics, aggregated reports and overlay rendering.

Aggregation rule: MAE is first computed per (scan, boundary) over that scan's
valid columns.  Per-boundary mean and std are taken across scans (population
std).  A scan's overall MAE is the mean over its boundaries; the overall
mean equals the mean of the per-boundary means.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from .data import boundary_names_for, raster
from .exceptions import DimensionError

GT_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 0)


class EmptyScanWarning(UserWarning):
    """A scan had no valid columns and was left out of the aggregate."""


def _as_stack(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[None], False
    if a.ndim != 3:
        raise DimensionError(f"expected (B, W) or (S, B, W) boundaries, got {a.shape}")
    return a, True


def _column_mask(pred, gt, mask):
    finite = np.isfinite(pred).all(axis=-2) & np.isfinite(gt).all(axis=-2)
    if mask is None:
        return finite
    m = np.asarray(mask, dtype=bool)
    return np.broadcast_to(m, finite.shape) & finite


def boundary_mae(pred, gt, mask=None) -> np.ndarray:
    """Mean |pred - gt| per boundary over valid columns.

    Shapes (B, W) give a (B,) result; stacks (S, B, W) give (S, B).  Scans
    without valid columns yield NaN rows and an :class:`EmptyScanWarning`.
    """
    p, stacked = _as_stack(pred)
    g, _ = _as_stack(gt)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} and ground truth {g.shape} differ")
    cols = _column_mask(p, g, None if mask is None else (np.asarray(mask)[None] if not stacked else mask))
    n = cols.sum(axis=-1)
    err = np.where(cols[:, None, :], np.abs(np.where(cols[:, None, :], p - g, 0.0)), 0.0)
    out = np.full(p.shape[:2], np.nan)
    ok = n > 0
    out[ok] = err[ok].sum(axis=-1) / n[ok, None]
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} scan(s) without valid columns excluded", EmptyScanWarning)
    return out if stacked else out[0]


def inter_marker_error(marker1, marker2, mask=None) -> np.ndarray:
    """Boundary MAE between two annotations of the same scans (symmetric)."""
    return boundary_mae(marker1, marker2, mask)


def ordering_violation_rate(pred, mask=None, sort: bool = False) -> np.ndarray:
    """Fraction of valid columns where boundary j+1 lies above boundary j, per pair.

    With ``sort=True`` each column is sorted first (isotonic post-processing),
    which makes every rate zero.
    """
    p, _ = _as_stack(pred)
    if sort:
        p = np.sort(p, axis=-2)
    cols = np.isfinite(p).all(axis=-2)
    if mask is not None:
        cols &= np.broadcast_to(np.asarray(mask, dtype=bool), cols.shape)
    total = cols.sum()
    if p.shape[1] < 2:
        return np.zeros(0)
    crossing = (np.diff(np.where(cols[:, None, :], p, 0.0), axis=1) < 0) & cols[:, None, :]
    if total == 0:
        return np.zeros(p.shape[1] - 1)
    return crossing.sum(axis=(0, 2)) / total


@dataclass
class MetricsReport:
    boundary_names: List[str]
    per_scan: np.ndarray  # (S, B) MAE, NaN rows for excluded scans
    n_columns: np.ndarray  # (B,)
    violation_rate: np.ndarray  # (B-1,)
    dataset: str = ""
    model: str = ""
    meta: Dict = field(default_factory=dict)

    @property
    def scans(self) -> np.ndarray:
        return self.per_scan[np.isfinite(self.per_scan).all(axis=1)]

    @property
    def mean(self) -> np.ndarray:
        return self.scans.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.scans.std(axis=0)

    @property
    def overall_mean(self) -> float:
        return float(self.mean.mean())

    @property
    def overall_std(self) -> float:
        return float(self.scans.mean(axis=1).std())

    @property
    def n_scans(self) -> int:
        return int(len(self.scans))

    def rows(self):
        """(name, mean, std) per boundary followed by the Overall row."""
        out = [(n, float(m), float(s)) for n, m, s in zip(self.boundary_names, self.mean, self.std)]
        out.append(("Overall", self.overall_mean, self.overall_std))
        return out

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": self.model,
            "n_scans": self.n_scans,
            "boundaries": [
                {"name": n, "mae_mean": m, "mae_std": s, "n_columns": int(c)}
                for (n, m, s), c in zip(self.rows()[:-1], self.n_columns)
            ],
            "overall": {"mae_mean": self.overall_mean, "mae_std": self.overall_std},
            "ordering_violation_rate": [float(v) for v in self.violation_rate],
            "meta": self.meta,
        }


def evaluate(pred, gt, mask=None, boundary_names: Optional[Sequence[str]] = None, dataset="", model="",
             sort: bool = False) -> MetricsReport:
    """Build a :class:`MetricsReport` from (S, B, W) predictions and GT."""
    p, _ = _as_stack(pred)
    g, _ = _as_stack(gt)
    if sort:
        p = np.sort(p, axis=-2)
    per_scan = boundary_mae(p, g, mask)
    if per_scan.ndim == 1:
        per_scan = per_scan[None]
    cols = _column_mask(p, g, mask)
    names = list(boundary_names) if boundary_names is not None else boundary_names_for(p.shape[1])
    return MetricsReport(
        boundary_names=names,
        per_scan=per_scan,
        n_columns=np.full(p.shape[1], int(cols.sum())),
        violation_rate=ordering_violation_rate(p, mask),
        dataset=dataset,
        model=model,
    )


def write_report_csv(path, columns: Dict[str, MetricsReport]):
    """One row per boundary plus Overall; a mean and std column per labelled report."""
    labels = list(columns)
    first = columns[labels[0]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["boundary"]
        for lab in labels:
            header += [f"{lab} mean", f"{lab} std"]
        w.writerow(header)
        all_rows = [columns[lab].rows() for lab in labels]
        for i, (name, _, _) in enumerate(first.rows()):
            row = [name]
            for rows in all_rows:
                row += [f"{rows[i][1]:.6f}", f"{rows[i][2]:.6f}"]
            w.writerow(row)


def write_report_json(path, columns: Dict[str, MetricsReport]):
    Path(path).write_text(json.dumps({k: v.to_dict() for k, v in columns.items()}, indent=2) + "\n")


def render_overlay(image, pred=None, gt=None, path=None) -> np.ndarray:
    """Grayscale scan with GT curves in green, predictions in red drawn on top.

    Each curve marks one pixel per column at the rounded coordinate; where the
    two coincide the pixel is red.  Returns the (H, W, 3) uint8 image and
    writes it as PNG when ``path`` is given.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"overlay needs a 2-D image, got {img.shape}")
    lo, hi = np.min(img), np.max(img)
    gray = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo) * 255.0
    rgb = np.repeat(np.rint(gray).astype(np.uint8)[:, :, None], 3, axis=2)
    h, w = img.shape
    for curves, color in ((gt, GT_COLOR), (pred, PRED_COLOR)):
        if curves is None:
            continue
        L = np.asarray(curves, dtype=np.float64)
        for row in L.reshape(-1, L.shape[-1]):
            x = np.flatnonzero(np.isfinite(row[:w]))
            y = raster(row[x])
            keep = (y >= 0) & (y < h)
            rgb[y[keep], x[keep]] = color
    if path is not None:
        Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
    return rgb
