"""Overlap and clinical metrics: Dice, Jaccard, maximum axial diameter, volumes, Mann-Whitney U."""
import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .volcore import foreground_count, mask_volume_mm3, same_geometry

__all__ = [
    "dice",
    "jaccard",
    "Circle",
    "minimum_enclosing_circle",
    "DiameterResult",
    "max_axial_diameter",
    "relative_volume_difference",
    "MannWhitneyResult",
    "mann_whitney_u",
    "MetricsReport",
    "evaluate_case",
]


def _pair(a, b):
    if not same_geometry(a, b):
        raise ValueError(f"mask geometry differs: dims {a.dims} vs {b.dims}, spacing {a.spacing} vs {b.spacing}")
    return a.data, b.data


def dice(a, b):
    """2|a & b| / (|a| + |b|); 1.0 when both are empty."""
    x, y = _pair(a, b)
    sa, sb = int(np.count_nonzero(x)), int(np.count_nonzero(y))
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(x & y)) / (sa + sb)


def jaccard(a, b):
    """|a & b| / |a | b|; 1.0 when both are empty."""
    x, y = _pair(a, b)
    union = int(np.count_nonzero(x | y))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(x & y)) / union


# ---------------------------------------------------------------------------
# minimum enclosing circle (Welzl, iterative form)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Circle:
    x: float
    y: float
    r: float

    def contains(self, p, rel=1e-12):
        return math.hypot(p[0] - self.x, p[1] - self.y) <= self.r * (1 + rel) + 1e-12


def _diameter_circle(a, b):
    cx, cy = (a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0
    return Circle(cx, cy, max(math.hypot(cx - a[0], cy - a[1]), math.hypot(cx - b[0], cy - b[1])))


def _circumcircle(a, b, c):
    # translate to the bounding-box centre for conditioning
    ox = (min(a[0], b[0], c[0]) + max(a[0], b[0], c[0])) / 2.0
    oy = (min(a[1], b[1], c[1]) + max(a[1], b[1], c[1])) / 2.0
    ax, ay = a[0] - ox, a[1] - oy
    bx, by = b[0] - ox, b[1] - oy
    cx, cy = c[0] - ox, c[1] - oy
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if d == 0.0:
        return None
    a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
    x = ox + (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    y = oy + (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    r = max(math.hypot(x - p[0], y - p[1]) for p in (a, b, c))
    return Circle(x, y, r)


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _circle_two(points, p, q):
    circ = _diameter_circle(p, q)
    left = right = None
    for r in points:
        if circ.contains(r):
            continue
        cross = _cross(p, q, r)
        c = _circumcircle(p, q, r)
        if c is None:
            continue
        side = _cross(p, q, (c.x, c.y))
        if cross > 0 and (left is None or side > _cross(p, q, (left.x, left.y))):
            left = c
        elif cross < 0 and (right is None or side < _cross(p, q, (right.x, right.y))):
            right = c
    if left is None and right is None:
        return circ
    if left is None:
        return right
    if right is None:
        return left
    return left if left.r <= right.r else right


def _circle_one(points, p):
    c = Circle(p[0], p[1], 0.0)
    for i, q in enumerate(points):
        if not c.contains(q):
            c = _diameter_circle(p, q) if c.r == 0.0 else _circle_two(points[:i + 1], p, q)
    return c


def minimum_enclosing_circle(points, seed=0):
    """Smallest circle containing every (x, y) point."""
    pts = [(float(x), float(y)) for x, y in points]
    if not pts:
        raise ValueError("minimum enclosing circle of an empty point set is undefined")
    random.Random(seed).shuffle(pts)
    c = None
    for i, p in enumerate(pts):
        if c is None or not c.contains(p):
            c = _circle_one(pts[:i + 1], p)
    return c


# ---------------------------------------------------------------------------
# maximum axial diameter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiameterResult:
    max_diameter_mm: float
    slice_index: Optional[int]  # None for an empty mask
    profile_mm: Tuple[float, ...] = field(repr=False)

    @property
    def empty(self):
        return self.slice_index is None


def _slice_points(sl, sx, sy):
    """Voxel centres (mm) of the left/rightmost foreground voxel in each row; the hull is among them."""
    rows = np.flatnonzero(sl.any(axis=1))
    if rows.size == 0:
        return []
    sub = sl[rows]
    first = sub.argmax(axis=1)
    last = sub.shape[1] - 1 - sub[:, ::-1].argmax(axis=1)
    pts = set()
    for y, x0, x1 in zip(rows.tolist(), first.tolist(), last.tolist()):
        pts.add((x0 * sx, y * sy))
        pts.add((x1 * sx, y * sy))
    return sorted(pts)


def max_axial_diameter(mask):
    """Per-slice minimum-enclosing-circle diameter (voxel centres, mm); max over z, ties to lowest z."""
    sx, sy, _ = mask.spacing
    profile = []
    best, best_z = 0.0, None
    for z in range(mask.data.shape[0]):
        pts = _slice_points(mask.data[z], sx, sy)
        d = 2.0 * minimum_enclosing_circle(pts).r if pts else 0.0
        profile.append(d)
        if pts and (best_z is None or d > best):
            best, best_z = d, z
    return DiameterResult(best, best_z, tuple(profile))


# ---------------------------------------------------------------------------
# volumes
# ---------------------------------------------------------------------------

def relative_volume_difference(cases):
    """Mean and per-case |V_pred - V_true| / V_true."""
    per = []
    for i, (vp, vt) in enumerate(cases):
        if not vt > 0:
            raise ValueError(f"case {i}: ground-truth volume must be > 0, got {vt}")
        per.append(abs(vp - vt) / vt)
    if not per:
        raise ValueError("no cases")
    return float(np.mean(per)), per


# ---------------------------------------------------------------------------
# Mann-Whitney U
# ---------------------------------------------------------------------------

EXACT_LIMIT = 12


@dataclass(frozen=True)
class MannWhitneyResult:
    u_a: float
    u_b: float
    p: float
    method: str  # "exact" or "normal"


def _midranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sv = np.asarray(values, dtype=np.float64)[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def mann_whitney_u(sample_a, sample_b, alternative="greater"):
    """U test of ``a`` tending to exceed ``b`` (one-sided) via midrank sums.

    Small problems (n_a + n_b <= 12) use the exact permutation distribution
    of the observed ranks; larger ones use a normal approximation with tie
    and continuity corrections.
    """
    if alternative != "greater":
        raise ValueError("only the one-sided 'greater' alternative is supported")
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    na, nb = a.size, b.size
    if na == 0 or nb == 0:
        raise ValueError("both samples must be non-empty")
    ranks = _midranks(np.concatenate([a, b]))
    base = na * (na + 1) / 2.0
    u_a = float(ranks[:na].sum() - base)
    u_b = na * nb - u_a
    n = na + nb
    if n <= EXACT_LIMIT:
        # doubled ranks are integers, so the comparison below is exact
        r2 = (2 * ranks).astype(np.int64).tolist()
        obs = int(round(2 * ranks[:na].sum()))
        hits = total = 0
        for combo in itertools.combinations(range(n), na):
            total += 1
            if sum(r2[i] for i in combo) >= obs:
                hits += 1
        return MannWhitneyResult(u_a, u_b, hits / total, "exact")
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie = float(np.sum(tie_counts**3 - tie_counts))
    var = na * nb / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    mu = na * nb / 2.0
    if var <= 0:
        return MannWhitneyResult(u_a, u_b, 1.0, "normal")
    z = (u_a - mu - 0.5) / math.sqrt(var)
    return MannWhitneyResult(u_a, u_b, 0.5 * math.erfc(z / math.sqrt(2.0)), "normal")


# ---------------------------------------------------------------------------
# per-case report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    case_id: str
    stage: str
    dice: float
    jaccard: float
    diameter: DiameterResult
    gt_diameter: DiameterResult
    diameter_abs_err_mm: float
    slice_deviation: Optional[int]
    volume_mm3: float
    gt_volume_mm3: float
    rel_vol_diff: Optional[float]
    both_empty: bool = False

    def as_row(self):
        return {
            "case_id": self.case_id,
            "stage": self.stage,
            "dice": self.dice,
            "jaccard": self.jaccard,
            "max_diameter_mm": self.diameter.max_diameter_mm,
            "gt_max_diameter_mm": self.gt_diameter.max_diameter_mm,
            "diameter_abs_err_mm": self.diameter_abs_err_mm,
            "slice_index": self.diameter.slice_index,
            "gt_slice_index": self.gt_diameter.slice_index,
            "volume_mm3": self.volume_mm3,
            "gt_volume_mm3": self.gt_volume_mm3,
            "rel_vol_diff": self.rel_vol_diff,
        }


def evaluate_case(pred, gt, case_id="", stage=""):
    d = dice(pred, gt)
    j = jaccard(pred, gt)
    dp, dg = max_axial_diameter(pred), max_axial_diameter(gt)
    vp, vg = mask_volume_mm3(pred), mask_volume_mm3(gt)
    dev = None if dp.empty or dg.empty else abs(dp.slice_index - dg.slice_index)
    return MetricsReport(
        case_id=case_id,
        stage=stage,
        dice=d,
        jaccard=j,
        diameter=dp,
        gt_diameter=dg,
        diameter_abs_err_mm=abs(dp.max_diameter_mm - dg.max_diameter_mm),
        slice_deviation=dev,
        volume_mm3=vp,
        gt_volume_mm3=vg,
        rel_vol_diff=abs(vp - vg) / vg if vg > 0 else None,
        both_empty=foreground_count(pred) == 0 and foreground_count(gt) == 0,
    )
