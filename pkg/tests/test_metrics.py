import math

import numpy as np
import pytest

from aaaseg.metrics import (
    dice,
    evaluate_case,
    jaccard,
    mann_whitney_u,
    max_axial_diameter,
    minimum_enclosing_circle,
    relative_volume_difference,
)
from aaaseg.volcore import BinaryMask3D

import oracles


def _masks_4x4():
    a = np.zeros((1, 4, 4), bool)
    b = np.zeros((1, 4, 4), bool)
    a[0, 0, :4] = True
    b[0, 0, 1:4] = True
    b[0, 1, :3] = True
    return BinaryMask3D(a), BinaryMask3D(b)


def test_dice_jaccard_hand_values():
    a, b = _masks_4x4()
    assert a.data.sum() == 4 and b.data.sum() == 6 and (a.data & b.data).sum() == 3
    assert dice(a, b) == pytest.approx(0.6)
    assert jaccard(a, b) == pytest.approx(3 / 7)


def test_dice_trivial_cases():
    a, _ = _masks_4x4()
    assert dice(a, a) == 1.0 and jaccard(a, a) == 1.0
    other = BinaryMask3D(~a.data)
    assert dice(a, other) == 0.0 and jaccard(a, other) == 0.0
    empty = BinaryMask3D(np.zeros((1, 4, 4), bool))
    assert dice(empty, empty) == 1.0 and jaccard(empty, empty) == 1.0
    with pytest.raises(ValueError):
        dice(a, BinaryMask3D(np.zeros((1, 4, 5), bool)))
    with pytest.raises(ValueError):
        jaccard(a, BinaryMask3D(a.data, spacing=(1, 1, 2)))


def test_dice_jaccard_identity_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = BinaryMask3D(rng.random((3, 4, 5)) < rng.random())
        b = BinaryMask3D(rng.random((3, 4, 5)) < rng.random())
        d, j = dice(a, b), jaccard(a, b)
        assert d == pytest.approx(oracles.dice_sets(a.data, b.data), abs=1e-15)
        assert j == pytest.approx(oracles.jaccard_sets(a.data, b.data), abs=1e-15)
        assert abs(d - 2 * j / (1 + j)) < 1e-12 and 0 <= j <= d <= 1
        assert d == dice(b, a) and j == jaccard(b, a)


# --- MEC --------------------------------------------------------------------------------

def test_mec_trivial():
    c = minimum_enclosing_circle([(3.0, -2.0)])
    assert (c.x, c.y, c.r) == (3.0, -2.0, 0.0)
    c = minimum_enclosing_circle([(0, 0), (2, 0)])
    assert (c.x, c.y) == (1.0, 0.0) and c.r == 1.0
    with pytest.raises(ValueError):
        minimum_enclosing_circle([])


def test_mec_equilateral_and_duplicates():
    pts = [(0, 0), (1, 0), (0.5, math.sqrt(3) / 2)] * 3
    assert minimum_enclosing_circle(pts).r == pytest.approx(1 / math.sqrt(3), rel=1e-12)


def test_mec_random_vs_bruteforce():
    rng = np.random.default_rng(1)
    for _ in range(30):
        n = int(rng.integers(1, 25))
        pts = rng.normal(size=(n, 2)) * rng.uniform(0.1, 50)
        c = minimum_enclosing_circle(pts, seed=int(rng.integers(1000)))
        ref = oracles.mec_bruteforce(pts)
        assert abs(c.r - ref) <= 1e-9 * max(ref, 1e-300) or c.r == ref
        d = np.hypot(pts[:, 0] - c.x, pts[:, 1] - c.y)
        assert np.all(d <= c.r + 1e-9)


def test_mec_integer_grid_collinear():
    pts = [(float(i), 0.0) for i in range(10)]
    assert minimum_enclosing_circle(pts).r == pytest.approx(4.5)


# --- diameter ----------------------------------------------------------------------------------

def test_diameter_single_voxel_and_empty():
    m = np.zeros((4, 5, 5), bool)
    m[2, 2, 2] = True
    r = max_axial_diameter(BinaryMask3D(m, (0.8, 0.8, 0.625)))
    assert r.max_diameter_mm == 0.0 and r.slice_index == 2
    e = max_axial_diameter(BinaryMask3D(np.zeros((3, 3, 3), bool)))
    assert e.max_diameter_mm == 0.0 and e.slice_index is None and e.empty


def test_diameter_line_is_center_to_center():
    m = np.zeros((3, 12, 12), bool)
    m[1, 5, 1:11] = True
    r = max_axial_diameter(BinaryMask3D(m))
    assert r.max_diameter_mm == pytest.approx(9.0) and r.slice_index == 1
    assert r.profile_mm == (0.0, pytest.approx(9.0), 0.0)


def test_diameter_disc():
    y, x = np.mgrid[:31, :31]
    disc = (x - 15) ** 2 + (y - 15) ** 2 <= 100
    m = np.zeros((3, 31, 31), bool)
    m[1] = disc
    r = max_axial_diameter(BinaryMask3D(m))
    assert abs(r.max_diameter_mm - 20.0) <= 1.0


def test_diameter_uses_in_plane_spacing():
    m = np.zeros((1, 5, 12), bool)
    m[0, 2, 1:11] = True
    assert max_axial_diameter(BinaryMask3D(m, (0.5, 0.8, 3.0))).max_diameter_mm == pytest.approx(4.5)
    m2 = np.zeros((1, 12, 5), bool)
    m2[0, 1:11, 2] = True
    assert max_axial_diameter(BinaryMask3D(m2, (0.5, 0.8, 3.0))).max_diameter_mm == pytest.approx(7.2)


def test_diameter_tie_lowest_slice_and_translation_invariance():
    m = np.zeros((6, 16, 16), bool)
    m[1, 3, 2:9] = True
    m[4, 8, 5:12] = True
    r = max_axial_diameter(BinaryMask3D(m))
    assert r.slice_index == 1
    rng = np.random.default_rng(2)
    blob = rng.random((6, 16, 16)) < 0.1
    base = max_axial_diameter(BinaryMask3D(blob))
    shifted = np.zeros((6, 24, 24), bool)
    shifted[:, 5:21, 3:19] = blob
    moved = max_axial_diameter(BinaryMask3D(shifted, origin=(10.0, -4.0, 7.0)))
    assert moved.max_diameter_mm == pytest.approx(base.max_diameter_mm, rel=1e-12)
    assert moved.slice_index == base.slice_index


def test_diameter_hull_points_match_all_points():
    rng = np.random.default_rng(3)
    for _ in range(5):
        sl = rng.random((14, 14)) < 0.3
        ys, xs = np.nonzero(sl)
        full = minimum_enclosing_circle(list(zip(xs * 0.7, ys * 0.7))).r
        m = BinaryMask3D(sl[None], (0.7, 0.7, 1.0))
        assert max_axial_diameter(m).max_diameter_mm == pytest.approx(2 * full, rel=1e-12)


# --- volumes -----------------------------------------------------------------------------------

def test_relative_volume_difference():
    assert relative_volume_difference([(5.0, 5.0)])[0] == 0.0
    assert relative_volume_difference([(110.0, 100.0), (11.0, 10.0)])[0] == pytest.approx(0.1)
    mean, per = relative_volume_difference([(110, 100), (95, 100)])
    assert mean == pytest.approx(0.075) and per == pytest.approx([0.1, 0.05])
    with pytest.raises(ValueError):
        relative_volume_difference([(1.0, 0.0)])


# --- Mann-Whitney --------------------------------------------------------------------------------

def test_mw_textbook_example():
    r = mann_whitney_u([4, 5, 6], [1, 2, 3])
    assert r.u_a == 9 and r.u_b == 0 and r.method == "exact"
    assert r.p == pytest.approx(1 / 20)


def test_mw_identical_samples_near_half():
    r = mann_whitney_u([1, 2, 3, 4], [1, 2, 3, 4])
    assert r.u_a == 8
    assert 0.5 <= r.p <= 0.65
    big = mann_whitney_u(np.arange(20), np.arange(20))
    assert big.method == "normal" and big.p == pytest.approx(0.5, abs=0.02)


def test_mw_u_identity_and_pairwise():
    rng = np.random.default_rng(4)
    for _ in range(30):
        a = rng.integers(0, 6, int(rng.integers(1, 15)))
        b = rng.integers(0, 6, int(rng.integers(1, 15)))
        r = mann_whitney_u(a, b)
        assert r.u_a + r.u_b == len(a) * len(b)
        assert r.u_a == oracles.u_statistic(a, b)


def test_mw_exact_matches_enumeration_small():
    rng = np.random.default_rng(5)
    for na in range(1, 7):
        for nb in range(1, 8 - na):
            a = rng.integers(0, 4, na).tolist()
            b = rng.integers(0, 4, nb).tolist()
            assert mann_whitney_u(a, b).p == pytest.approx(oracles.mw_exact_enumeration(a, b), abs=1e-12)


def test_mw_normal_large_effect():
    r = mann_whitney_u(np.arange(10, 30), np.arange(0, 20))
    assert r.method == "normal" and r.p < 0.01
    with pytest.raises(ValueError):
        mann_whitney_u([], [1])


# --- evaluate_case ---------------------------------------------------------------------------------

def test_self_evaluation():
    m = np.zeros((6, 10, 10), bool)
    m[1:5, 2:8, 3:9] = True
    mask = BinaryMask3D(m, (0.8, 0.8, 2.0))
    r = evaluate_case(mask, mask, "c", "pre")
    assert r.dice == 1 and r.jaccard == 1 and r.diameter_abs_err_mm == 0 and r.rel_vol_diff == 0
    assert r.slice_deviation == 0


def test_box_missing_one_layer():
    gt = np.zeros((8, 12, 12), bool)
    gt[1:7, 2:10, 2:10] = True  # 6 x 8 x 8 = 384 voxels
    pred = gt.copy()
    pred[:, :, 9] = False  # drop the x = 9 layer: 6 x 8 x 7 = 336 voxels
    r = evaluate_case(BinaryMask3D(pred), BinaryMask3D(gt))
    assert r.dice == pytest.approx(2 * 336 / (336 + 384))
    assert r.jaccard == pytest.approx(336 / 384)
    assert r.gt_diameter.max_diameter_mm == pytest.approx(math.hypot(7, 7))
    assert r.diameter.max_diameter_mm == pytest.approx(math.hypot(6, 7))
    assert r.diameter_abs_err_mm == pytest.approx(math.hypot(7, 7) - math.hypot(6, 7))
    assert r.volume_mm3 == 336 and r.gt_volume_mm3 == 384
    assert r.rel_vol_diff == pytest.approx(48 / 384)
    assert r.slice_deviation == 0
    row = r.as_row()
    assert row["slice_index"] == 1 and row["gt_slice_index"] == 1
