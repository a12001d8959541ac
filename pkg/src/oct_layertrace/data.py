"""Ground-truth encodings, synthetic OCT phantoms, splits and the on-disk layout.

A boundary coordinate L[j, x] is a real row position; pixel row ``y`` belongs
to region ``r`` when ``raster(L[r-1, x]) <= y < raster(L[r, x])`` with the
image top and bottom as sentinels, where ``raster(v) = floor(v + 0.5)``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from .exceptions import ConfigError, EncodeError, SpecInfeasibleError, SplitError

DATASET_VERSION = 1

BOUNDARY_NAMES = (
    "Vitreous-RNFL",
    "RNFL-GCL&IPL",
    "GCL&IPL-INL",
    "INL-OPL",
    "OPL-ONL&IS",
    "ONL&IS-OS",
    "OS-RPE",
    "RPE-Choroid",
)
REGION_NAMES = ("Vitreous", "RNFL", "GCL+IPL", "INL", "OPL", "ONL+IS", "OS", "RPE", "Choroid")
# Boundaries annotated in the pathology data; M_mixed is trained on these only.
MIXED_BOUNDARIES = ("Vitreous-RNFL", "OS-RPE", "RPE-Choroid")


def raster(coords) -> np.ndarray:
    """Round-half-up to integer rows (consistent under integer shifts)."""
    return np.floor(np.asarray(coords, dtype=np.float64) + 0.5).astype(np.int64)


def boundary_names_for(n_boundaries: int) -> List[str]:
    if n_boundaries == len(BOUNDARY_NAMES):
        return list(BOUNDARY_NAMES)
    if n_boundaries == len(MIXED_BOUNDARIES):
        return list(MIXED_BOUNDARIES)
    return [f"B{j + 1}" for j in range(n_boundaries)]


@dataclass
class GroundTruth:
    """Boundary rows (B, W) ordered top to bottom plus a per-column validity mask."""

    boundaries: np.ndarray
    height: int
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.boundaries = np.asarray(self.boundaries, dtype=np.float64)
        if self.valid is None:
            self.valid = ~np.isnan(self.boundaries).any(axis=0)
        self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def n_boundaries(self):
        return self.boundaries.shape[0]

    @property
    def width(self):
        return self.boundaries.shape[1]

    def encode(self):
        return encode_gt(self.boundaries, self.height, self.valid)


def check_ordering(boundaries, height, valid=None):
    """Raise :class:`EncodeError` naming the first column that breaks ordering."""
    L = np.asarray(boundaries, dtype=np.float64)
    valid = np.ones(L.shape[1], bool) if valid is None else np.asarray(valid, bool)
    cols = np.flatnonzero(valid)
    if cols.size == 0:
        return
    sub = L[:, cols]
    r = raster(np.where(np.isfinite(sub), sub, -1))
    bad = ~np.isfinite(sub).all(axis=0)
    bad |= (r < 0).any(axis=0) | (r >= height).any(axis=0)
    if L.shape[0] > 1:
        bad |= (np.diff(sub, axis=0) < 0).any(axis=0)
    if bad.any():
        x = int(cols[np.argmax(bad)])
        raise EncodeError(f"boundary ordering/range violated in column {x}: {L[:, x].tolist()}", column=x)


def encode_gt(boundaries, height: int, valid=None):
    """Rasterize boundaries into (RegionStack (R,H,W), EdgeMap (H,W)), both uint8.

    Invalid columns are all-zero in both encodings.
    """
    L = np.asarray(boundaries, dtype=np.float64)
    b, w = L.shape
    valid = ~np.isnan(L).any(axis=0) if valid is None else np.asarray(valid, bool)
    check_ordering(L, height, valid)
    r = raster(np.where(valid[None, :], L, 0))
    rows = np.arange(height)[:, None, None]
    labels = (rows >= r[None, :, :]).sum(axis=1)  # (H, W) in 0..B
    regions = (labels[None] == np.arange(b + 1)[:, None, None]).astype(np.uint8)
    regions[:, :, ~valid] = 0
    edge = np.zeros((height, w), dtype=np.uint8)
    cols = np.flatnonzero(valid)
    edge[r[:, cols], np.broadcast_to(cols, (b, cols.size))] = 1
    return regions, edge


def decode_regions(regions, valid=None) -> np.ndarray:
    """Recover rasterized boundaries from a region stack.

    Boundary j is the first row of region j (0-based region below it), read as
    the number of rows labelled above it; NaN for invalid columns.
    """
    regions = np.asarray(regions)
    counts = regions.sum(axis=1).astype(np.float64)  # (R, W)
    L = np.cumsum(counts, axis=0)[:-1]
    if valid is None:
        valid = regions.sum(axis=(0, 1)) > 0
    L[:, ~np.asarray(valid, bool)] = np.nan
    return L


def gt_consistency_violations(boundaries, regions, edge, valid) -> int:
    """Count columns where the three GT encodings disagree."""
    L = np.asarray(boundaries, dtype=np.float64)
    valid = np.asarray(valid, bool)
    height = regions.shape[1]
    bad = np.zeros(L.shape[1], dtype=bool)
    part = regions.sum(axis=0)
    bad |= valid & (part != 1).any(axis=0)
    bad |= ~valid & (part != 0).any(axis=0)
    decoded = decode_regions(regions, valid)
    with np.errstate(invalid="ignore"):
        r = np.where(valid[None], raster(np.where(valid[None], L, 0)), -1)
        bad |= valid & (decoded != r).any(axis=0)
    _, edge_ref = encode_gt(np.where(valid[None], L, np.nan), height, valid)
    bad |= (edge_ref != edge).any(axis=0)
    return int(bad.sum())


def select_boundaries(boundaries, names=MIXED_BOUNDARIES, available=BOUNDARY_NAMES) -> np.ndarray:
    """Keep only the named boundaries (e.g. the 3 shared by all datasets)."""
    idx = [list(available).index(n) for n in names]
    return np.asarray(boundaries)[..., idx, :]


def jitter_boundaries(boundaries, sigma: float, rng) -> np.ndarray:
    """Add i.i.d. Gaussian marker noise (emulates a second annotator)."""
    L = np.asarray(boundaries, dtype=np.float64)
    return L + rng.normal(0.0, sigma, size=L.shape)


# -- phantoms ----------------------------------------------------------------------

ANATOMICAL_THICKNESS = (40.0, 70.0, 35.0, 30.0, 100.0, 25.0, 20.0)
ANATOMICAL_INTENSITY = (0.05, 0.75, 0.45, 0.22, 0.55, 0.18, 0.5, 0.9, 0.4)


@dataclass
class PhantomSpec:
    """Parameters of the synthetic B-scan generator.

    Lengths given as fractions are relative to the image height (vertical) or
    width (horizontal).
    """

    n_boundaries: int = 8
    height: int = 300
    width: int = 800
    n_slices: int = 11
    retina_fraction: float = 0.42
    layer_thickness: Optional[List[float]] = None
    center_jitter: float = 0.06
    tilt: float = 0.08
    curve_amplitude: float = 0.04
    curve_frequency: tuple = (0.5, 2.0)
    thickness_variation: float = 0.15
    slice_variation: float = 0.05
    region_intensity: Optional[List[float]] = None
    contrast: float = 1.0
    speckle: float = 0.25
    shadow_count: int = 2
    shadow_width: float = 0.02
    shadow_attenuation: float = 0.4
    pathological: bool = False
    drusen_count: int = 3
    drusen_width: float = 0.04
    drusen_height: float = 0.12
    min_gap: float = 2.0
    margin: float = 3.0
    max_tries: int = 200
    version: int = DATASET_VERSION

    def __post_init__(self):
        if self.n_boundaries < 1 or self.n_slices < 1:
            raise ConfigError("n_boundaries and n_slices must be positive")
        if self.layer_thickness is not None and len(self.layer_thickness) != self.n_boundaries - 1:
            raise ConfigError("layer_thickness needs n_boundaries - 1 entries")
        if self.region_intensity is not None and len(self.region_intensity) != self.n_boundaries + 1:
            raise ConfigError("region_intensity needs n_boundaries + 1 entries")
        if not 0.0 <= self.shadow_attenuation <= 1.0:
            raise ConfigError("shadow_attenuation must lie in [0, 1]")
        if self.speckle < 0:
            raise ConfigError("speckle must be >= 0")
        self.curve_frequency = tuple(self.curve_frequency)

    def thickness_weights(self) -> np.ndarray:
        if self.layer_thickness is not None:
            t = np.asarray(self.layer_thickness, dtype=np.float64)
        elif self.n_boundaries == len(BOUNDARY_NAMES):
            t = np.asarray(ANATOMICAL_THICKNESS)
        else:
            t = np.ones(max(self.n_boundaries - 1, 0))
        return t / t.sum() if t.size else t

    def intensities(self) -> np.ndarray:
        if self.region_intensity is not None:
            v = np.asarray(self.region_intensity, dtype=np.float64)
        elif self.n_boundaries == len(BOUNDARY_NAMES):
            v = np.asarray(ANATOMICAL_INTENSITY)
        else:
            v = np.where(np.arange(self.n_boundaries + 1) % 2 == 1, 0.7, 0.3)
            v[0] = 0.05
        mean = v.mean()
        return np.clip(mean + self.contrast * (v - mean), 0.0, 1.0)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown phantom spec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class Volume:
    """Ordered B-scans of one acquisition with boundary GT per slice."""

    images: np.ndarray  # (S, H, W) uint8
    boundaries: np.ndarray  # (S, B, W) float, NaN marks invalid columns
    name: str = "vol_000"
    pathological: bool = False
    boundary_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.boundaries = np.asarray(self.boundaries, dtype=np.float64)
        if not self.boundary_names:
            self.boundary_names = boundary_names_for(self.boundaries.shape[1])

    @property
    def n_slices(self):
        return self.images.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.boundaries).any(axis=1)

    def ground_truth(self, i) -> GroundTruth:
        return GroundTruth(self.boundaries[i], self.images.shape[1], self.valid[i])

    def with_boundaries(self, names) -> "Volume":
        idx = [self.boundary_names.index(n) for n in names]
        return Volume(self.images, self.boundaries[:, idx], self.name, self.pathological, list(names))


def _curve(rng, width, amplitude, freq_range, n_terms=3):
    x = np.arange(width) / width
    amps = rng.uniform(0.3, 1.0, n_terms) * amplitude / n_terms
    freqs = rng.uniform(*freq_range, n_terms)
    phases = rng.uniform(0, 2 * np.pi, n_terms)
    return amps, freqs, phases, x


def _sample_boundaries(spec: PhantomSpec, rng, base):
    """One slice's boundary set; ``base`` holds volume-level curve parameters."""
    H, W, B = spec.height, spec.width, spec.n_boundaries
    x = np.arange(W) / W
    sv = spec.slice_variation
    phases = base["phases"] + rng.normal(0, sv * 2 * np.pi, base["phases"].shape)
    amps = base["amps"] * (1 + rng.normal(0, sv, base["amps"].shape))
    top = base["center"] - 0.5 * base["thickness"] + base["tilt"] * (x - 0.5) * H
    top = top + H * (amps[:, None] * np.sin(2 * np.pi * base["freqs"][:, None] * x[None] + phases[:, None])).sum(0)
    L = np.empty((B, W))
    L[0] = top
    weights = spec.thickness_weights()
    for j in range(1, B):
        a, f, p = base["layer_mod"][j - 1]
        mod = 1 + spec.thickness_variation * a * np.sin(2 * np.pi * f * x + p + rng.normal(0, sv))
        L[j] = L[j - 1] + base["thickness"] * weights[j - 1] * mod
    if spec.pathological and spec.drusen_count > 0 and B >= 2:
        n = int(rng.integers(1, spec.drusen_count + 1))
        bump = np.zeros(W)
        for _ in range(n):
            c = rng.uniform(0.15, 0.85) * W
            s = max(1.0, spec.drusen_width * W * rng.uniform(0.6, 1.4))
            hgt = spec.drusen_height * base["thickness"] * rng.uniform(0.5, 1.0)
            bump = np.maximum(bump, hgt * np.exp(-0.5 * ((np.arange(W) - c) / s) ** 2))
        L[-2:] -= bump
        # Elevated bottom boundaries push the ones above them upward.
        for j in range(B - 3, -1, -1):
            L[j] = np.minimum(L[j], L[j + 1] - spec.min_gap)
    return L


def _feasible(L, spec):
    if not np.isfinite(L).all():
        return False
    if L.min() < spec.margin or L.max() > spec.height - 1 - spec.margin:
        return False
    return L.shape[0] < 2 or np.diff(L, axis=0).min() >= spec.min_gap


def render_slice(L, spec: PhantomSpec, rng) -> np.ndarray:
    """Intensity image for boundary set ``L`` (float in [0, 1] before quantization)."""
    regions, _ = encode_gt(L, spec.height)
    labels = regions.argmax(axis=0)
    img = spec.intensities()[labels]
    if spec.speckle > 0:
        k = 1.0 / spec.speckle ** 2
        img = img * rng.gamma(k, 1.0 / k, size=img.shape)
    W = spec.width
    for _ in range(spec.shadow_count):
        half = max(1, int(round(spec.shadow_width * W / 2)))
        c = int(rng.integers(half, max(half + 1, W - half)))
        lo, hi = max(0, c - half), min(W, c + half + 1)
        below = np.arange(spec.height)[:, None] >= raster(L[0, lo:hi])[None, :]
        img[:, lo:hi] = np.where(below, img[:, lo:hi] * spec.shadow_attenuation, img[:, lo:hi])
    return img


def generate_phantom(spec: PhantomSpec, rng, name: str = "vol_000") -> Volume:
    """Sample one volume of ``spec.n_slices`` B-scans with exact GT."""
    H, W, B = spec.height, spec.width, spec.n_boundaries
    images = np.empty((spec.n_slices, H, W), dtype=np.uint8)
    bounds = np.empty((spec.n_slices, B, W))
    thickness = spec.retina_fraction * H if B > 1 else 0.0
    for _ in range(spec.max_tries):
        amps, freqs, phases, _ = _curve(rng, W, spec.curve_amplitude, spec.curve_frequency)
        base = {
            "center": H / 2 + rng.uniform(-1, 1) * spec.center_jitter * H,
            "thickness": thickness,
            "tilt": rng.uniform(-1, 1) * spec.tilt,
            "amps": amps,
            "freqs": freqs,
            "phases": phases,
            "layer_mod": [
                (rng.uniform(-1, 1), rng.uniform(*spec.curve_frequency), rng.uniform(0, 2 * np.pi))
                for _ in range(max(B - 1, 0))
            ],
        }
        slices = []
        for _s in range(spec.n_slices):
            for _t in range(spec.max_tries):
                L = _sample_boundaries(spec, rng, base)
                if _feasible(L, spec):
                    slices.append(L)
                    break
            else:
                break
        if len(slices) == spec.n_slices:
            break
    else:
        raise SpecInfeasibleError(
            f"could not sample ordered boundaries with gap >= {spec.min_gap} within {spec.max_tries} tries"
        )
    for s, L in enumerate(slices):
        img = render_slice(L, spec, rng)
        images[s] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        bounds[s] = L
    return Volume(images, bounds, name=name, pathological=spec.pathological)


def generate_dataset(spec: PhantomSpec, n_volumes: int, seed: int, pathological_spec: Optional[PhantomSpec] = None,
                     n_pathological: int = 0) -> List[Volume]:
    """Deterministic list of phantom volumes (normal first, then pathological)."""
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(n_volumes + n_pathological)
    vols = [generate_phantom(spec, np.random.default_rng(c), f"vol_{i:03d}") for i, c in enumerate(children[:n_volumes])]
    if n_pathological:
        pspec = pathological_spec or dataclasses.replace(spec, pathological=True)
        for k, c in enumerate(children[n_volumes:]):
            vols.append(generate_phantom(pspec, np.random.default_rng(c), f"vol_{n_volumes + k:03d}"))
    return vols


# -- splitting ------------------------------------------------------------------------

def split_dataset(volumes: Sequence, ratio=(8, 2), seed: int = 0, min_per_stratum: int = 5):
    """Volume-level train/test split, stratified by the pathology flag."""
    volumes = list(volumes)
    if len(volumes) < min_per_stratum:
        raise SplitError(f"need at least {min_per_stratum} volumes, got {len(volumes)}")
    rng = np.random.default_rng(seed)
    frac = ratio[1] / float(sum(ratio))
    train, test = [], []
    for flag in (False, True):
        stratum = [v for v in volumes if bool(getattr(v, "pathological", False)) == flag]
        if not stratum:
            continue
        if len(stratum) < min_per_stratum:
            kind = "pathological" if flag else "normal"
            raise SplitError(f"only {len(stratum)} {kind} volumes; need at least {min_per_stratum}")
        order = rng.permutation(len(stratum))
        n_test = max(1, int(math.floor(len(stratum) * frac + 0.5)))
        test += [stratum[i] for i in sorted(order[:n_test])]
        train += [stratum[i] for i in sorted(order[n_test:])]
    return train, test


# -- on-disk container ------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_image(path, pixels):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)


def write_boundaries_csv(path, boundaries):
    lines = []
    for row in np.asarray(boundaries, dtype=np.float64):
        lines.append(",".join("nan" if math.isnan(v) else repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_boundaries_csv(path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array([[float(v) for v in line.split(",")] for line in rows], dtype=np.float64)


def write_volume(volume: Volume, directory, image_format: str = "pgm") -> Path:
    d = Path(directory) / volume.name
    d.mkdir(parents=True, exist_ok=True)
    slices = []
    for i in range(volume.n_slices):
        stem = f"slice_{i:02d}"
        write_image(d / f"{stem}.{image_format}", volume.images[i])
        write_boundaries_csv(d / f"{stem}.csv", volume.boundaries[i])
        slices.append({"image": f"{stem}.{image_format}", "boundaries": f"{stem}.csv"})
    manifest = {
        "version": DATASET_VERSION,
        "name": volume.name,
        "height": int(volume.images.shape[1]),
        "width": int(volume.images.shape[2]),
        "n_boundaries": int(volume.boundaries.shape[1]),
        "boundary_names": list(volume.boundary_names),
        "pathological": bool(volume.pathological),
        "slices": slices,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def read_volume(directory) -> Volume:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise ConfigError(f"{d}: unsupported dataset version {manifest.get('version')}")
    images = np.stack([read_image(d / s["image"]) for s in manifest["slices"]])
    bounds = np.stack([read_boundaries_csv(d / s["boundaries"]) for s in manifest["slices"]])
    return Volume(images, bounds, manifest["name"], manifest["pathological"], manifest["boundary_names"])


def write_dataset(volumes: Sequence[Volume], root, extra: Optional[dict] = None, image_format: str = "pgm"):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for v in volumes:
        write_volume(v, root, image_format)
    manifest = {"version": DATASET_VERSION, "volumes": [v.name for v in volumes]}
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_dataset(root) -> List[Volume]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise ConfigError(f"{root}: unsupported dataset version {manifest.get('version')}")
    return [read_volume(root / name) for name in manifest["volumes"]]
