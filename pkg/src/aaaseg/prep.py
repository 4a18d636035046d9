"""Preprocessing and training-time augmentation.

Resampling uses a voxel-centred grid: output voxel ``i`` of ``m`` samples
source coordinate ``(i + 0.5) * n / m - 0.5`` so the physical extent
``n * spacing`` is preserved. Rigid transforms rotate about the z axis
through the volume centre, in physical in-plane coordinates.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .kernels import trilinear_sample
from .volcore import BinaryMask3D, Volume3D, same_geometry

__all__ = [
    "RoiBounds",
    "RigidTransform",
    "AugmentPlan",
    "crop_roi",
    "window_level",
    "resample_trilinear",
    "resample_nearest",
    "mask_bbox",
    "random_crop_containing",
    "apply_rigid",
    "build_augmented_set",
    "crop_extent_range",
    "augment_item",
    "DEFAULT_WINDOW",
]

DEFAULT_WINDOW = (150.0, 500.0)  # center, width in HU


@dataclass(frozen=True)
class RoiBounds:
    """Inclusive voxel bounds (x0, y0, z0) .. (x1, y1, z1)."""

    lo: Tuple[int, int, int]
    hi: Tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))
        if len(self.lo) != 3 or len(self.hi) != 3:
            raise ValueError("ROI bounds need three components each")
        for ax, a, b in zip("xyz", self.lo, self.hi):
            if a > b:
                raise ValueError(f"ROI min {a} > max {b} on axis {ax}")

    @classmethod
    def parse(cls, text):
        v = [int(p) for p in str(text).split(",")]
        if len(v) != 6:
            raise ValueError(f"ROI needs x0,y0,z0,x1,y1,z1, got {text!r}")
        return cls(v[:3], v[3:])

    @property
    def extent(self):
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))

    def slices(self):
        (x0, y0, z0), (x1, y1, z1) = self.lo, self.hi
        return np.s_[z0:z1 + 1, y0:y1 + 1, x0:x1 + 1]


def crop_roi(vol, bounds):
    for ax, a, b, n in zip("xyz", bounds.lo, bounds.hi, vol.dims):
        if a < 0 or b >= n:
            raise ValueError(f"ROI [{a}, {b}] out of range on axis {ax} (size {n})")
    origin = tuple(o + a * s for o, a, s in zip(vol.origin, bounds.lo, vol.spacing))
    return type(vol)(vol.data[bounds.slices()], vol.spacing, origin)


def window_level(vol, center=DEFAULT_WINDOW[0], width=DEFAULT_WINDOW[1]):
    """Clamp to [center - width/2, center + width/2] and map linearly onto [0, 255]."""
    if not width > 0:
        raise ValueError(f"window width must be > 0, got {width}")
    lo = center - width / 2.0
    v = np.clip(vol.data.astype(np.float64), lo, lo + width)
    out = np.clip((v - lo) * (255.0 / width), 0.0, 255.0)
    return vol.with_data(out.astype(np.float32))


def _dims3(target_dims):
    t = tuple(int(v) for v in target_dims)
    if len(t) != 3 or min(t) < 1:
        raise ValueError(f"target dims must be three positive integers, got {target_dims}")
    return t


def _resample_grid(vol, target_dims):
    """Source coordinates per axis, new spacing and origin."""
    coords, spacing, origin = [], [], []
    for n, m, s, o in zip(vol.dims, target_dims, vol.spacing, vol.origin):
        r = n / m
        coords.append((np.arange(m) + 0.5) * r - 0.5)
        spacing.append(s * r)
        origin.append(o + (0.5 * r - 0.5) * s)
    return coords, tuple(spacing), tuple(origin)


def resample_trilinear(vol, target_dims):
    """Trilinear resample to ``target_dims`` (nx, ny, nz), edge-clamped."""
    target = _dims3(target_dims)
    if target == vol.dims:
        return Volume3D(vol.data, vol.spacing, vol.origin)
    (cx, cy, cz), spacing, origin = _resample_grid(vol, target)
    z, y, x = np.meshgrid(cz, cy, cx, indexing="ij")
    out = trilinear_sample(vol.data, z, y, x)
    return Volume3D(out.astype(np.float32), spacing, origin)


def resample_nearest(mask, target_dims):
    """Nearest-neighbour companion of :func:`resample_trilinear` for masks."""
    target = _dims3(target_dims)
    if target == mask.dims:
        return BinaryMask3D(mask.data, mask.spacing, mask.origin)
    coords, spacing, origin = _resample_grid(mask, target)
    ix, iy, iz = (np.clip(np.floor(c + 0.5).astype(np.int64), 0, n - 1) for c, n in zip(coords, mask.dims))
    out = mask.data[np.ix_(iz, iy, ix)]
    return BinaryMask3D(out, spacing, origin)


def mask_bbox(mask):
    """Inclusive (lo, hi) voxel bounds of the foreground, in (x, y, z) order, or None."""
    idx = np.argwhere(mask.data)
    if idx.size == 0:
        return None
    lo = idx.min(axis=0)[::-1]
    hi = idx.max(axis=0)[::-1]
    return tuple(int(v) for v in lo), tuple(int(v) for v in hi)


def random_crop_containing(vol, mask, crop_dims, rng):
    """Crop of ``crop_dims`` (nx, ny, nz) placed uniformly among those containing the mask box."""
    if not same_geometry(vol, mask):
        raise ValueError("image and mask geometry differ")
    crop = _dims3(crop_dims)
    box = mask_bbox(mask)
    if box is None:
        raise ValueError("mask is empty; no aneurysm to contain")
    lo = []
    for ax, c, n, a, b in zip("xyz", crop, vol.dims, *box):
        if c > n:
            raise ValueError(f"crop size {c} exceeds volume size {n} on axis {ax}")
        if b - a + 1 > c:
            raise ValueError(f"aneurysm extent {b - a + 1} exceeds crop size {c} on axis {ax}")
        first, last = max(0, b - c + 1), min(a, n - c)
        lo.append(int(rng.integers(first, last + 1)))
    bounds = RoiBounds(lo, [a + c - 1 for a, c in zip(lo, crop)])
    return crop_roi(vol, bounds), crop_roi(mask, bounds)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (degrees, about z; positive turns +x towards +y) then translation (voxels)."""

    angle_deg: float = 0.0
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        if not math.isfinite(self.angle_deg) or not all(map(math.isfinite, self.translation)):
            raise ValueError("rigid transform parameters must be finite")

    @property
    def is_identity(self):
        return self.angle_deg == 0.0 and self.translation == (0.0, 0.0, 0.0)


def _source_coords(dims, spacing, t):
    """Source voxel coordinates for every output voxel under the inverse transform."""
    nx, ny, nz = dims
    sx, sy, _ = spacing
    z, y, x = np.meshgrid(np.arange(nz, dtype=np.float64), np.arange(ny, dtype=np.float64),
                          np.arange(nx, dtype=np.float64), indexing="ij")
    tx, ty, tz = t.translation
    # remove translation, then work in mm about the in-plane centre
    px = (x - tx - (nx - 1) / 2.0) * sx
    py = (y - ty - (ny - 1) / 2.0) * sy
    th = math.radians(t.angle_deg)
    c, s = math.cos(th), math.sin(th)
    if t.angle_deg % 90 == 0:
        c, s = round(c), round(s)
    qx = c * px + s * py
    qy = -s * px + c * py
    return z - tz, qy / sy + (ny - 1) / 2.0, qx / sx + (nx - 1) / 2.0


def apply_rigid(vol, mask, t):
    """Resample image (trilinear, zero fill) and mask (nearest, background fill)."""
    if not same_geometry(vol, mask):
        raise ValueError("image and mask geometry differ")
    if t.is_identity:
        return vol, mask
    z, y, x = _source_coords(vol.dims, vol.spacing, t)
    img = trilinear_sample(vol.data, z, y, x, zero_outside=True).astype(np.float32)
    iz, iy, ix = (np.floor(c + 0.5).astype(np.int64) for c in (z, y, x))
    nz, ny, nx = mask.data.shape
    inside = (iz >= 0) & (iz < nz) & (iy >= 0) & (iy < ny) & (ix >= 0) & (ix < nx)
    m = np.zeros(mask.data.shape, dtype=bool)
    m[inside] = mask.data[iz[inside], iy[inside], ix[inside]]
    return vol.with_data(img), mask.with_data(m)


@dataclass(frozen=True)
class AugmentPlan:
    crops_per_scan: int = 4
    transforms_per_crop: int = 35
    rotation_deg: float = 10.0
    translation_vox: float = 10.0
    seed: int = 0
    # smallest crop extent as a fraction of the volume; each crop draws its
    # extent per axis between this (grown to fit the mask box) and the full
    # volume. crop_dims fixes the extent instead.
    crop_fraction: float = 0.85
    crop_dims: Optional[Tuple[int, int, int]] = None
    # resample each crop to these dims; None keeps the source dims
    target_dims: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        if self.crops_per_scan < 1 or self.transforms_per_crop < 1:
            raise ValueError("crops_per_scan and transforms_per_crop must be >= 1")
        if self.rotation_deg < 0 or self.translation_vox < 0:
            raise ValueError("augmentation ranges must be non-negative")
        if not 0 < self.crop_fraction <= 1:
            raise ValueError("crop_fraction must lie in (0, 1]")

    @property
    def total(self):
        return self.crops_per_scan * self.transforms_per_crop


def crop_extent_range(plan, vol, mask):
    """Per-axis (lo, hi) crop extents a plan may draw for this scan."""
    box = mask_bbox(mask)
    if box is None:
        raise ValueError("mask is empty; no aneurysm to contain")
    return tuple(
        (min(n, max(b - a + 1, int(round(plan.crop_fraction * n)))), n) for n, a, b in zip(vol.dims, *box)
    )


def _crop_dims(plan, vol, mask, rng):
    if plan.crop_dims is not None:
        return _dims3(plan.crop_dims)
    return tuple(int(rng.integers(lo, hi + 1)) for lo, hi in crop_extent_range(plan, vol, mask))


def _draw_transform(plan, rng):
    angle = float(rng.uniform(-plan.rotation_deg, plan.rotation_deg))
    tr = rng.uniform(-plan.translation_vox, plan.translation_vox, size=2)
    return RigidTransform(angle, (float(tr[0]), float(tr[1]), 0.0))


def _crop(vol, mask, plan, scan_index, crop_index):
    rng = np.random.default_rng([plan.seed, scan_index, crop_index])
    cv, cm = random_crop_containing(vol, mask, _crop_dims(plan, vol, mask, rng), rng)
    target = plan.target_dims or vol.dims
    return resample_trilinear(cv, target), resample_nearest(cm, target)


def _transform(cv, cm, plan, scan_index, crop_index, transform_index):
    if transform_index == 0:
        return cv, cm
    rng = np.random.default_rng([plan.seed, scan_index, crop_index, transform_index])
    return apply_rigid(cv, cm, _draw_transform(plan, rng))


def augment_item(vol, mask, plan, scan_index, crop_index, transform_index):
    """One augmented pair; a pure function of its indices and the plan seed."""
    cv, cm = _crop(vol, mask, plan, scan_index, crop_index)
    return _transform(cv, cm, plan, scan_index, crop_index, transform_index)


def build_augmented_set(vol, mask, plan=AugmentPlan(), scan_index=0):
    """``crops_per_scan * transforms_per_crop`` pairs; the first per crop is untransformed."""
    out = []
    for c in range(plan.crops_per_scan):
        cv, cm = _crop(vol, mask, plan, scan_index, c)
        out.extend(_transform(cv, cm, plan, scan_index, c, k) for k in range(plan.transforms_per_crop))
    return out
