"""Synthetic CTA-like aneurysm phantoms with exact ground truth.

The aneurysm sac is a rotated ellipsoid (outer wall) filled with thrombus
and crossed by a contrast-filled lumen tube. Post-operative cases replace
the single lumen by two disjoint stent-graft limbs with bright strut
speckle. A vertebral body and bowel loops are placed outside the sac as
confounders; the bowel sits within a few HU of the thrombus.

The ground-truth mask is lumen + thrombus, i.e. everything inside the
outer wall.
"""
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kvconfig
from .volcore import BinaryMask3D, Volume3D

__all__ = [
    "PhantomSpec",
    "CohortCase",
    "LABELS",
    "load_default_spec",
    "load_spec",
    "phantom_labels",
    "generate_phantom",
    "randomize_spec",
    "generate_cohort",
    "spec_hash",
    "ellipsoid_volume_mm3",
]

LABELS = {"background": 0, "thrombus": 1, "lumen": 2, "vertebra": 3, "bowel": 4, "stent": 5}
DEFAULT_SPEC_FILE = "phantom_v1.cfg"


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 32)
    spacing: tuple = (1.0, 1.0, 2.0)
    semi_axes_mm: tuple = (16.0, 13.0, 20.0)
    rotation_deg: float = 0.0
    center_offset_mm: tuple = (0.0, 0.0, 0.0)
    lumen_radius_mm: float = 5.0
    lumen_offset: float = 0.3
    lumen_angle_deg: float = 0.0
    waviness_mm: float = 1.5
    waviness_period_mm: float = 48.0
    wall_mm: float = 1.5
    parent_vessel: bool = True
    stage: str = "pre"
    hu_lumen: float = 300.0
    hu_thrombus: float = 40.0
    hu_vertebra: float = 700.0
    hu_bowel: float = 30.0
    hu_background: float = -50.0
    hu_stent: float = 1500.0
    noise_sd: float = 20.0
    confounders: bool = True
    n_bowel: int = 2
    bowel_radius_mm: float = 7.0
    bowel_gap_mm: float = 3.0
    vertebra_radii_mm: tuple = (14.0, 11.0)
    vertebra_gap_mm: float = 4.0
    stent_fraction: float = 0.08
    limb_gap_mm: float = 3.0
    seed: int = 0
    version: str = "phantom-v1"
    ranges: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        for name in ("dims", "spacing", "semi_axes_mm", "center_offset_mm", "vertebra_radii_mm"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.stage not in ("pre", "post"):
            raise ValueError(f"stage must be 'pre' or 'post', got {self.stage!r}")

    def to_dict(self):
        d = asdict(self)
        d.pop("ranges")
        return d


def spec_hash(spec):
    blob = json.dumps(spec.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _spec_from_mapping(d):
    names = {f.name for f in fields(PhantomSpec)}
    ranges = {k[len("range."):]: v for k, v in d.items() if k.startswith("range.")}
    kwargs = {k: v for k, v in d.items() if k in names}
    unknown = [k for k in d if k not in names and not k.startswith("range.")]
    if unknown:
        raise ValueError(f"unknown phantom spec keys: {', '.join(sorted(unknown))}")
    return PhantomSpec(ranges=ranges, **kwargs)


def load_spec(path):
    return _spec_from_mapping(kvconfig.load(path))


def load_default_spec():
    text = resources.files("aaaseg.data").joinpath(DEFAULT_SPEC_FILE).read_text()
    return _spec_from_mapping(kvconfig.loads(text, DEFAULT_SPEC_FILE))


def ellipsoid_volume_mm3(spec):
    a, b, c = spec.semi_axes_mm
    return 4.0 / 3.0 * math.pi * a * b * c


def _grid_mm(spec):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    z, y, x = np.meshgrid(np.arange(nz) * sz, np.arange(ny) * sy, np.arange(nx) * sx, indexing="ij")
    return x, y, z


def _center_mm(spec):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    ox, oy, oz = spec.center_offset_mm
    return ((nx - 1) * sx / 2 + ox, (ny - 1) * sy / 2 + oy, (nz - 1) * sz / 2 + oz)


def _lumen_layout(spec):
    """Lumen tube radius, centres relative to the centreline, and enclosing radius."""
    r = spec.lumen_radius_mm
    if spec.stage == "pre":
        return r, [(0.0, 0.0)], r
    limb = 0.6 * r
    half = limb + spec.limb_gap_mm / 2
    ang = math.radians(spec.lumen_angle_deg + 90.0)
    dx, dy = half * math.cos(ang), half * math.sin(ang)
    return limb, [(dx, dy), (-dx, -dy)], half + limb


def phantom_labels(spec):
    """Integer label map [z, y, x] using :data:`LABELS`."""
    a, b, c = spec.semi_axes_mm
    if min(a, b, c) <= 0:
        raise ValueError(f"semi-axes must be positive, got {spec.semi_axes_mm}")
    x, y, z = _grid_mm(spec)
    cx, cy, cz = _center_mm(spec)
    th = math.radians(spec.rotation_deg)
    u = (x - cx) * math.cos(th) + (y - cy) * math.sin(th)
    v = -(x - cx) * math.sin(th) + (y - cy) * math.cos(th)
    w = z - cz
    sac = (u / a) ** 2 + (v / b) ** 2 + (w / c) ** 2 <= 1.0

    tube_r, tube_offsets, enclosing = _lumen_layout(spec)
    room = min(a, b) - enclosing - spec.wall_mm - spec.waviness_mm
    if room < 0:
        raise ValueError(
            f"lumen (enclosing radius {enclosing:.2f} mm + wall {spec.wall_mm} mm + waviness "
            f"{spec.waviness_mm} mm) does not fit inside the sac minor semi-axis {min(a, b):.2f} mm"
        )
    la = math.radians(spec.lumen_angle_deg)
    off = spec.lumen_offset * room
    lx0 = cx + off * math.cos(la)
    ly0 = cy + off * math.sin(la)
    phase = 2 * math.pi * (z - cz) / spec.waviness_period_mm
    lx = lx0 + spec.waviness_mm * np.sin(phase)
    ly = ly0 + 0.5 * spec.waviness_mm * np.sin(2 * phase)

    lumen = np.zeros(sac.shape, dtype=bool)
    for dx, dy in tube_offsets:
        lumen |= (x - lx - dx) ** 2 + (y - ly - dy) ** 2 <= tube_r**2
    if spec.parent_vessel:
        vessel = (x - lx) ** 2 + (y - ly) ** 2 <= (enclosing + spec.wall_mm) ** 2
        gt = sac | vessel
    else:
        # keep a thrombus rim between lumen and outer wall
        inner = (u / (a - spec.wall_mm)) ** 2 + (v / (b - spec.wall_mm)) ** 2 + (w / max(c - spec.wall_mm, 1e-6)) ** 2 <= 1.0
        lumen &= inner
        gt = sac
    if (lumen & ~gt).any():
        raise ValueError("lumen extends outside the outer wall")

    labels = np.zeros(sac.shape, dtype=np.uint8)
    rng = np.random.default_rng(spec.seed)
    if spec.confounders:
        sx, sy, sz = spec.spacing
        dist = ndimage.distance_transform_edt(~gt, sampling=(sz, sy, sx))
        # vertebral body: posterior (+y) of the sac, spanning all slices
        ry_extent = np.max(np.where(gt, y, -np.inf))
        vr_x, vr_y = spec.vertebra_radii_mm
        vcy = ry_extent + spec.vertebra_gap_mm + vr_y
        vert = ((x - cx) / vr_x) ** 2 + ((y - vcy) / vr_y) ** 2 <= 1.0
        vert &= dist > spec.vertebra_gap_mm
        labels[vert] = LABELS["vertebra"]
        # bowel loops: anterior/lateral blobs hugging the sac at a small gap
        for _ in range(int(spec.n_bowel)):
            ang = rng.uniform(math.pi, 2 * math.pi)  # -y half plane (anterior)
            rad = spec.bowel_radius_mm * rng.uniform(0.8, 1.2)
            reach = max(a, b) + spec.bowel_gap_mm + 0.6 * rad
            bx = cx + reach * math.cos(ang)
            by = cy + reach * math.sin(ang)
            bz = cz + rng.uniform(-c, c)
            blob = ((x - bx) ** 2 + (y - by) ** 2 + ((z - bz) / 1.5) ** 2) <= rad**2
            blob &= dist > spec.bowel_gap_mm
            labels[blob & (labels == 0)] = LABELS["bowel"]
    labels[gt] = LABELS["thrombus"]
    labels[lumen] = LABELS["lumen"]
    if spec.stage == "post" and spec.stent_fraction > 0:
        # struts on a thin shell just outside each limb, inside the outer wall
        shell = np.zeros(sac.shape, dtype=bool)
        for dx, dy in tube_offsets:
            d = np.sqrt((x - lx - dx) ** 2 + (y - ly - dy) ** 2)
            shell |= (d > tube_r) & (d <= tube_r + 1.0)
        shell &= gt & ~lumen
        pick = shell & (rng.random(sac.shape) < spec.stent_fraction)
        labels[pick] = LABELS["stent"]
    return labels


def generate_phantom(spec):
    """Return (CT-like Volume3D in HU, ground-truth BinaryMask3D)."""
    labels = phantom_labels(spec)
    hu = np.array(
        [spec.hu_background, spec.hu_thrombus, spec.hu_lumen, spec.hu_vertebra, spec.hu_bowel, spec.hu_stent],
        dtype=np.float64,
    )
    img = hu[labels]
    if spec.noise_sd > 0:
        noise_rng = np.random.default_rng([spec.seed, 1])
        img = img + noise_rng.normal(0.0, spec.noise_sd, img.shape)
    gt = np.isin(labels, (LABELS["thrombus"], LABELS["lumen"], LABELS["stent"]))
    return Volume3D(img.astype(np.float32), spec.spacing), BinaryMask3D(gt, spec.spacing)


def randomize_spec(base, rng, stage=None, seed=None):
    """Draw one case's geometry from ``base.ranges``; untouched fields keep base values."""
    r = base.ranges

    def draw(key, default):
        if key not in r:
            return default
        lo, hi = r[key]
        if isinstance(lo, int) and isinstance(hi, int):
            return int(rng.integers(lo, hi + 1))
        return float(rng.uniform(lo, hi))

    a = draw("semi_axis_a_mm", base.semi_axes_mm[0])
    ecc = draw("eccentricity", None)
    b = a * math.sqrt(1 - ecc**2) if ecc is not None else base.semi_axes_mm[1]
    c = draw("semi_axis_c_mm", base.semi_axes_mm[2])
    oxy = [draw("center_offset_xy_mm", base.center_offset_mm[i]) for i in range(2)]
    oz = draw("center_offset_z_mm", base.center_offset_mm[2])
    stage = stage or base.stage
    spec = replace(
        base,
        semi_axes_mm=(a, b, c),
        rotation_deg=draw("rotation_deg", base.rotation_deg),
        center_offset_mm=(oxy[0], oxy[1], oz),
        lumen_radius_mm=draw("lumen_radius_mm", base.lumen_radius_mm),
        lumen_offset=draw("lumen_offset", base.lumen_offset),
        lumen_angle_deg=float(rng.uniform(0, 360)),
        waviness_mm=draw("waviness_mm", base.waviness_mm),
        n_bowel=draw("n_bowel", base.n_bowel),
        bowel_radius_mm=draw("bowel_radius_mm", base.bowel_radius_mm),
        stage=stage,
        seed=int(rng.integers(0, 2**31 - 1)) if seed is None else seed,
    )
    # shrink the lumen until it fits the drawn sac
    _, _, enclosing = _lumen_layout(spec)
    room = min(a, b) - enclosing - spec.wall_mm - spec.waviness_mm
    if room < 1.0:
        scale = spec.lumen_radius_mm / enclosing
        fit = (min(a, b) - spec.wall_mm - spec.waviness_mm - 1.0) * scale
        spec = replace(spec, lumen_radius_mm=max(fit, 1.5))
        _, _, enclosing = _lumen_layout(spec)
        room = min(a, b) - enclosing - spec.wall_mm - spec.waviness_mm
        if room < 0:
            spec = replace(spec, waviness_mm=max(0.0, spec.waviness_mm + room))
    return spec


@dataclass(frozen=True)
class CohortCase:
    case_id: str
    stage: str
    spec: PhantomSpec
    image: Volume3D
    mask: BinaryMask3D


def generate_cohort(n, base, seed=0, prefix="case"):
    """``n`` randomized phantoms alternating pre/post stages."""
    if n < 1:
        raise ValueError("cohort size must be >= 1")
    start = int(np.random.default_rng(seed).integers(0, 2))
    cases = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        stage = ("pre", "post")[(start + i) % 2]
        spec = randomize_spec(base, rng, stage=stage)
        img, gt = generate_phantom(spec)
        cases.append(CohortCase(f"{prefix}_{i:03d}", stage, spec, img, gt))
    return cases


def write_cohort(cases, out_dir):
    """MetaImage image/mask pairs plus ``manifest.csv`` (case_id, stage, seed, spec_hash)."""
    import csv

    from .volio import write_metaimage

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for case in cases:
        write_metaimage(case.image, out / f"{case.case_id}_image.mhd")
        write_metaimage(case.mask, out / f"{case.case_id}_mask.mhd")
        rows.append((case.case_id, case.stage, case.spec.seed, spec_hash(case.spec)))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "stage", "seed", "spec_hash"])
        w.writerows(rows)
    return out / "manifest.csv"


def read_cohort(cohort_dir):
    """Load (case_id, stage, image, mask) tuples listed in a cohort manifest."""
    import csv

    from .volio import read_metaimage

    root = Path(cohort_dir)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise FileNotFoundError(f"cohort manifest not found: {manifest}")
    out = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            cid = row["case_id"]
            img = read_metaimage(root / f"{cid}_image.mhd")
            mask = read_metaimage(root / f"{cid}_mask.mhd", as_mask=True)
            out.append((cid, row["stage"], img, mask))
    return out
