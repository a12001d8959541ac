"""Online geometric augmentation applied jointly to a B-scan and its ground truth.

A sample carries the image, exact boundary coordinates and an integer label
map (region index per pixel, -1 where undefined).  Integer transforms move the
coordinates exactly; rotation and scaling resample the label map with
nearest-neighbour interpolation and re-extract the coordinates from it.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .data import encode_gt, gt_consistency_violations, raster
from .exceptions import ConfigError

REFERENCE_HEIGHT = 300
REFERENCE_WIDTH = 800
MIN_VALID_FRACTION = 0.5


def sine_profile(x, amplitude, period, phase):
    return amplitude * np.sin(2.0 * np.pi * np.asarray(x, dtype=np.float64) / period + phase)


def roll_displacement(width, amplitude, period, phase=0.0, profile: Callable = sine_profile) -> np.ndarray:
    """Integer vertical displacement d(x) per column."""
    return np.rint(profile(np.arange(width), amplitude, period, phase)).astype(np.int64)


@dataclass
class AugmentSpec:
    rotation: float = 5.0
    scale: tuple = (0.95, 1.05)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    shift: float = 10.0
    roll_amplitude: float = 15.0
    roll_period: float = 200.0
    roll_prob: float = 1.0
    seed: Optional[int] = None
    max_tries: int = 20

    def __post_init__(self):
        self.scale = tuple(float(s) for s in self.scale)
        values = [self.rotation, *self.scale, self.shift, self.roll_amplitude, self.roll_period]
        if len(self.scale) != 2 or not np.all(np.isfinite(values)):
            raise ConfigError("augmentation ranges must be finite; scale is (low, high)")
        if not 0 < self.scale[0] <= self.scale[1]:
            raise ConfigError("scale range must satisfy 0 < low <= high")
        if self.rotation < 0 or self.shift < 0 or self.roll_amplitude < 0 or self.roll_period <= 0:
            raise ConfigError("rotation, shift and roll amplitude must be >= 0; roll period > 0")
        for p in (self.hflip_prob, self.vflip_prob, self.roll_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probability {p} outside [0, 1]")
        if self.max_tries < 1:
            raise ConfigError("max_tries must be >= 1")

    @classmethod
    def identity(cls, **overrides) -> "AugmentSpec":
        base = dict(rotation=0.0, scale=(1.0, 1.0), hflip_prob=0.0, vflip_prob=0.0, shift=0.0, roll_amplitude=0.0)
        base.update(overrides)
        return cls(**base)

    def scaled_to(self, height: int, width: int) -> "AugmentSpec":
        """Rescale pixel magnitudes defined for a 300x800 scan to another size."""
        fy, fx = height / REFERENCE_HEIGHT, width / REFERENCE_WIDTH
        return dataclasses.replace(
            self,
            shift=self.shift * min(fy, fx),
            roll_amplitude=self.roll_amplitude * fy,
            roll_period=self.roll_period * fx,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scale"] = list(self.scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown augmentation fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0
    scale: float = 1.0
    dy: int = 0
    dx: int = 0
    roll_phase: Optional[float] = None

    @classmethod
    def draw(cls, spec: AugmentSpec, rng) -> "AugmentParams":
        # Every draw is consumed whatever the probabilities, keeping RNG streams aligned.
        u = rng.random(3)
        angle = rng.uniform(-spec.rotation, spec.rotation)
        scale = rng.uniform(*spec.scale)
        s = int(np.floor(spec.shift))
        dy, dx = (int(v) for v in rng.integers(-s, s + 1, size=2))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        use_roll = u[2] < spec.roll_prob and spec.roll_amplitude > 0
        return cls(
            hflip=bool(u[0] < spec.hflip_prob),
            vflip=bool(u[1] < spec.vflip_prob),
            angle=float(angle),
            scale=float(scale),
            dy=dy,
            dx=dx,
            roll_phase=float(phase) if use_roll else None,
        )


@dataclass
class Sample:
    """Image plus ground truth in one coordinate frame.

    ``boundaries`` is (B, W) with NaN in invalid columns; ``labels`` is the
    (H, W) region index map; ``pixel_mask`` marks pixels holding real data.
    """

    image: np.ndarray
    boundaries: np.ndarray
    labels: np.ndarray
    pixel_mask: np.ndarray
    wrapped_columns: int = 0
    params: Optional[AugmentParams] = None

    @classmethod
    def from_boundaries(cls, image, boundaries, pixel_mask=None) -> "Sample":
        image = np.asarray(image, dtype=np.float64)
        L = np.asarray(boundaries, dtype=np.float64)
        h = image.shape[0]
        regions, _ = encode_gt(L, h)
        valid = ~np.isnan(L).any(axis=0)
        labels = np.where(valid[None], np.argmax(regions, axis=0), -1).astype(np.int16)
        mask = np.ones(image.shape, bool) if pixel_mask is None else np.asarray(pixel_mask, bool).copy()
        return cls(image.copy(), L.copy(), labels, mask)

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.boundaries).any(axis=0)

    @property
    def n_boundaries(self) -> int:
        return self.boundaries.shape[0]

    def regions(self) -> np.ndarray:
        """One-hot region stack taken from the label map (zero where labels are -1)."""
        r = self.n_boundaries + 1
        out = (self.labels[None] == np.arange(r)[:, None, None]).astype(np.uint8)
        out[:, :, ~self.valid] = 0
        return out

    def edge(self) -> np.ndarray:
        return encode_gt(self.boundaries, self.image.shape[0], self.valid)[1]


def _labels_to_boundaries(labels, n_boundaries):
    """Extract boundary rows from a label map; returns (L, extended labels).

    A column is usable when its defined labels are non-decreasing and run from
    0 to B, with undefined pixels only above or below them.  Those outer
    pixels inherit the neighbouring region label.
    """
    h, w = labels.shape
    lab = labels.astype(np.int64)
    defined = lab >= 0
    any_def = defined.any(axis=0)
    top = np.argmax(defined, axis=0)
    bottom = h - 1 - np.argmax(defined[::-1], axis=0)
    rows = np.arange(h)[:, None]
    filled = np.where(rows < top, 0, np.where(rows > bottom, n_boundaries, lab))
    cols = np.arange(w)
    ok = any_def & (filled >= 0).all(axis=0) & (np.diff(filled, axis=0) >= 0).all(axis=0)
    ok &= (lab[top, cols] == 0) & (lab[bottom, cols] == n_boundaries)
    L = (filled[None] <= np.arange(n_boundaries)[:, None, None]).sum(axis=1).astype(np.float64)
    L[:, ~ok] = np.nan
    out = np.where(ok[None], filled, -1).astype(labels.dtype)
    return L, out


def _invalidate(sample: Sample, cols):
    sample.boundaries[:, cols] = np.nan
    sample.labels[:, cols] = -1


def hflip(sample: Sample) -> Sample:
    return dataclasses.replace(
        sample,
        image=sample.image[:, ::-1].copy(),
        boundaries=sample.boundaries[:, ::-1].copy(),
        labels=sample.labels[:, ::-1].copy(),
        pixel_mask=sample.pixel_mask[:, ::-1].copy(),
    )


def vflip(sample: Sample) -> Sample:
    """Flip rows; boundary and region order is reversed to stay top-to-bottom."""
    h = sample.image.shape[0]
    b = sample.n_boundaries
    L = sample.boundaries[::-1]
    flipped = h - L
    # raster(H - v) can differ from H - raster(v) only at exact half rows.
    with np.errstate(invalid="ignore"):
        finite = np.isfinite(L)
        exact = np.where(finite, h - raster(np.where(finite, L, 0)), np.nan)
        off = finite & (raster(np.where(finite, flipped, 0)) != exact)
    flipped = np.where(off, exact, flipped)
    labels = sample.labels[::-1]
    labels = np.where(labels >= 0, b - labels, -1).astype(sample.labels.dtype)
    return dataclasses.replace(
        sample,
        image=sample.image[::-1].copy(),
        boundaries=flipped,
        labels=labels,
        pixel_mask=sample.pixel_mask[::-1].copy(),
    )


def _affine_matrix(shape, angle_deg, scale):
    """Output -> input mapping about the image center: in = M @ out + offset."""
    t = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]])
    m = rot / scale
    c = (np.asarray(shape, dtype=np.float64) - 1) / 2.0
    return m, c - m @ c


def rotate_scale(sample: Sample, angle: float, scale: float) -> Sample:
    """Joint rotation (degrees) and isotropic scaling about the image center."""
    if angle == 0.0 and scale == 1.0:
        return sample
    m, offset = _affine_matrix(sample.image.shape, angle, scale)
    image = ndimage.affine_transform(sample.image, m, offset, order=1, mode="constant", cval=0.0)
    labels = ndimage.affine_transform(sample.labels, m, offset, order=0, mode="constant", cval=-1)
    mask = ndimage.affine_transform(sample.pixel_mask.astype(np.uint8), m, offset, order=0, cval=0).astype(bool)
    L, labels = _labels_to_boundaries(labels, sample.n_boundaries)
    return dataclasses.replace(sample, image=image, boundaries=L, labels=labels.astype(sample.labels.dtype),
                               pixel_mask=mask)


def _shift_array(a, dy, dx, fill):
    h, w = a.shape
    out = np.full_like(a, fill)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = a[ys, xs]
    return out


def shift(sample: Sample, dy: int, dx: int) -> Sample:
    """Integer translation; vacated pixels are zero and undefined."""
    if dy == 0 and dx == 0:
        return sample
    h, w = sample.image.shape
    image = _shift_array(sample.image, dy, dx, 0.0)
    mask = _shift_array(sample.pixel_mask, dy, dx, False)
    labels = _shift_array(sample.labels, dy, dx, -1)
    L = np.full_like(sample.boundaries, np.nan)
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    L[:, xd] = sample.boundaries[:, xs] + dy
    extracted, labels = _labels_to_boundaries(labels, sample.n_boundaries)
    out = dataclasses.replace(sample, image=image, boundaries=L, labels=labels.astype(sample.labels.dtype),
                              pixel_mask=mask)
    _invalidate(out, ~np.isfinite(extracted).all(axis=0))
    return out


def column_roll(image, boundaries, amplitude, period, phase=0.0, edge=None, regions=None,
                profile: Callable = sine_profile):
    """Circularly shift column x down by d(x) rows.

    Boundaries become ``(L + d) mod H``, taken on the raster grid (values in
    [-0.5, H - 0.5)).  Returns ``(image, boundaries, edge,
    regions, wrapped)`` where ``wrapped`` flags columns in which a boundary
    crossed the top or bottom edge; ``edge``/``regions`` are None when not given.
    """
    image = np.asarray(image)
    h, w = image.shape[-2:]
    d = roll_displacement(w, amplitude, period, phase, profile)
    src = (np.arange(h)[:, None] - d[None, :]) % h

    def roll(a):
        if a is None:
            return None
        a = np.asarray(a)
        return np.take_along_axis(a, np.broadcast_to(src, a.shape[:-2] + (h, w)), axis=-2)

    L = np.asarray(boundaries, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        moved = L + d[None, :]
        r = raster(np.where(np.isfinite(moved), moved, 0))
        wrapped = np.isfinite(moved).all(axis=0) & ((r < 0) | (r >= h)).any(axis=0)
        # Modulo on the raster grid so raster(L') == (raster(L) + d) mod H.
        rolled = moved - h * np.floor_divide(r, h)
    return roll(image), rolled, roll(edge), roll(regions), wrapped


def roll_sample(sample: Sample, amplitude, period, phase, profile: Callable = sine_profile) -> Sample:
    """Column roll inside the augmentation chain.

    The image wraps circularly.  Rows that wrapped carry no ground truth, so
    they are masked out and inherit the nearest region label; columns whose
    boundaries wrapped become invalid.
    """
    h, w = sample.image.shape
    image, L, _, _, wrapped = column_roll(sample.image, sample.boundaries, amplitude, period, phase, profile=profile)
    d = roll_displacement(w, amplitude, period, phase, profile)
    src = np.arange(h)[:, None] - d[None, :]
    inside = (src >= 0) & (src < h)
    src_c = np.clip(src, 0, h - 1)
    labels = np.where(inside, np.take_along_axis(sample.labels, src_c, axis=0), -1)
    mask = inside & np.take_along_axis(sample.pixel_mask, src_c, axis=0)
    extracted, labels = _labels_to_boundaries(labels, sample.n_boundaries)
    out = dataclasses.replace(sample, image=image, boundaries=L, labels=labels.astype(sample.labels.dtype),
                              pixel_mask=mask, wrapped_columns=sample.wrapped_columns + int(wrapped.sum()))
    _invalidate(out, wrapped | ~np.isfinite(extracted).all(axis=0))
    return out


def transform(sample: Sample, params: AugmentParams, spec: AugmentSpec) -> Sample:
    """Apply ``params`` in the fixed order flip, rotate, scale, shift, roll."""
    out = sample
    if params.hflip:
        out = hflip(out)
    if params.vflip:
        out = vflip(out)
    out = rotate_scale(out, params.angle, params.scale)
    out = shift(out, params.dy, params.dx)
    if params.roll_phase is not None:
        out = roll_sample(out, spec.roll_amplitude, spec.roll_period, params.roll_phase)
    return dataclasses.replace(out, params=params)


def apply_augmentations(sample: Sample, spec: AugmentSpec, rng) -> Sample:
    """Draw random transforms until at least half the valid columns survive.

    Falls back to the untouched sample after ``spec.max_tries`` rejections.
    """
    need = MIN_VALID_FRACTION * sample.valid.sum()
    for _ in range(spec.max_tries):
        params = AugmentParams.draw(spec, rng)
        out = transform(sample, params, spec)
        if out.valid.sum() >= need and out.valid.any():
            return out
    return dataclasses.replace(sample, params=AugmentParams())


def consistency_violations(sample: Sample) -> int:
    """Columns where label map, edge map and coordinates disagree."""
    return gt_consistency_violations(sample.boundaries, sample.regions(), sample.edge(), sample.valid)
