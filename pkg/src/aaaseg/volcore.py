"""Volume, mask and histogram value types.

Voxel buffers are stored as numpy arrays indexed ``[z, y, x]`` in C order,
so x varies fastest in memory. Network tensors use (N, C, D, H, W) with
D=z, H=y, W=x, which makes volume -> tensor a reshape.
"""
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Volume3D",
    "BinaryMask3D",
    "Histogram",
    "mask_to_tensor",
    "volume_to_tensor",
    "tensor_to_volume",
    "foreground_count",
    "mask_volume_mm3",
    "histogram",
    "flat_index",
    "unflat_index",
    "same_geometry",
]


def _triple(values, name, cast=float):
    t = tuple(cast(v) for v in values)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(t)}")
    return t


@dataclass(frozen=True, eq=False)
class _Grid:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    @property
    def dims(self):
        """(nx, ny, nz)."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def voxel_volume(self):
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def _check(self):
        if self.data.ndim != 3:
            raise ValueError(f"voxel buffer must be 3D [z, y, x], got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"dims must be positive, got {self.dims}")
        object.__setattr__(self, "spacing", _triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))
        if not all(s > 0 and np.isfinite(s) for s in self.spacing):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        self.data.setflags(write=False)


@dataclass(frozen=True, eq=False)
class Volume3D(_Grid):
    """Scalar float32 grid with spacing and origin in mm."""

    def __post_init__(self):
        object.__setattr__(self, "data", np.ascontiguousarray(self.data, dtype=np.float32).copy())
        self._check()

    def with_data(self, data):
        return Volume3D(data, self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class BinaryMask3D(_Grid):
    """Boolean grid sharing the geometry conventions of :class:`Volume3D`."""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.bool_:
            data = data != 0
        object.__setattr__(self, "data", np.ascontiguousarray(data).copy())
        self._check()

    def with_data(self, data):
        return BinaryMask3D(data, self.spacing, self.origin)


def same_geometry(a, b, tol=1e-6):
    return (
        a.data.shape == b.data.shape
        and np.allclose(a.spacing, b.spacing, rtol=0, atol=tol)
        and np.allclose(a.origin, b.origin, rtol=0, atol=tol)
    )


def flat_index(x, y, z, dims):
    nx, ny, _ = dims
    return x + nx * (y + ny * z)


def unflat_index(i, dims):
    nx, ny, _ = dims
    return i % nx, (i // nx) % ny, i // (nx * ny)


def mask_to_tensor(mask):
    """Boolean mask -> (1, 1, nz, ny, nx) float32 tensor of 0/1."""
    return mask.data.astype(np.float32)[None, None]


def volume_to_tensor(vol, scale=255.0):
    """Divide every voxel by ``scale`` and add batch/channel axes."""
    if not scale > 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    bad = ~np.isfinite(vol.data)
    if bad.any():
        z, y, x = np.argwhere(bad)[0]
        raise ValueError(f"non-finite voxel at (x={x}, y={y}, z={z})")
    return (vol.data / np.float32(scale)).astype(np.float32)[None, None]


def tensor_to_volume(t, like):
    """Inverse of :func:`volume_to_tensor` for one item, geometry from ``like``."""
    t = np.asarray(t)
    if t.ndim == 5:
        if t.shape[:2] != (1, 1):
            raise ValueError(f"expected a (1, 1, D, H, W) tensor, got {t.shape}")
        t = t[0, 0]
    if t.shape != like.data.shape:
        raise ValueError(f"tensor spatial shape {t.shape} != volume shape {like.data.shape}")
    return Volume3D(t, like.spacing, like.origin)


def foreground_count(mask):
    return int(np.count_nonzero(mask.data))


def mask_volume_mm3(mask):
    return foreground_count(mask) * mask.voxel_volume


@dataclass(frozen=True)
class Histogram:
    counts: np.ndarray
    lower: float
    upper: float

    @property
    def bin_count(self):
        return int(self.counts.size)

    @property
    def width(self):
        return (self.upper - self.lower) / self.bin_count

    @property
    def total(self):
        return int(self.counts.sum())

    def edges(self):
        return self.lower + self.width * np.arange(self.bin_count + 1)


def histogram(values, bin_count=256, lower=0.0, upper=1.0):
    """Fixed-range histogram; out-of-range values are clamped to the end bins."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("histogram of an empty sequence")
    if not np.isfinite(values).all():
        raise ValueError("histogram input contains non-finite values")
    if bin_count < 2:
        raise ValueError(f"bin_count must be >= 2, got {bin_count}")
    if not upper > lower:
        raise ValueError(f"upper ({upper}) must exceed lower ({lower})")
    width = (upper - lower) / bin_count
    idx = np.floor((values - lower) / width)
    idx = np.clip(idx, 0, bin_count - 1).astype(np.int64)
    counts = np.bincount(idx, minlength=bin_count).astype(np.int64)
    return Histogram(counts, float(lower), float(upper))
