import numpy as np
import pytest

from aaaseg.prep import (
    AugmentPlan,
    RigidTransform,
    RoiBounds,
    apply_rigid,
    augment_item,
    build_augmented_set,
    crop_roi,
    crop_extent_range,
    mask_bbox,
    random_crop_containing,
    resample_nearest,
    resample_trilinear,
    window_level,
)
from aaaseg.volcore import BinaryMask3D, Volume3D


def ramp(dims=(6, 5, 4)):
    nx, ny, nz = dims
    return Volume3D(np.arange(nx * ny * nz, dtype=np.float32).reshape(nz, ny, nx), (0.5, 0.7, 2.0), (1.0, 2.0, 3.0))


# --- crop -------------------------------------------------------------------------------

def test_crop_full_is_identity():
    v = ramp()
    c = crop_roi(v, RoiBounds((0, 0, 0), (5, 4, 3)))
    np.testing.assert_array_equal(c.data, v.data)
    assert c.origin == v.origin and c.spacing == v.spacing


def test_crop_single_voxel():
    v = ramp()
    c = crop_roi(v, RoiBounds((2, 3, 1), (2, 3, 1)))
    assert c.dims == (1, 1, 1) and c.data[0, 0, 0] == v.data[1, 3, 2]


def test_crop_matches_index_arithmetic():
    v = ramp((8, 6, 4))
    c = crop_roi(v, RoiBounds((2, 0, 1), (5, 3, 2)))
    assert c.dims == (4, 4, 2)
    for z in range(2):
        for y in range(4):
            for x in range(4):
                gx, gy, gz = x + 2, y, z + 1
                assert c.data[z, y, x] == gx + 8 * (gy + 6 * gz)
    assert c.origin == pytest.approx((1.0 + 2 * 0.5, 2.0, 3.0 + 1 * 2.0))


@pytest.mark.parametrize("lo,hi", [((0, 0, 0), (6, 4, 3)), ((-1, 0, 0), (1, 1, 1))])
def test_crop_out_of_range(lo, hi):
    with pytest.raises(ValueError):
        crop_roi(ramp(), RoiBounds(lo, hi))


def test_roi_parse_and_order():
    assert RoiBounds.parse("1,2,3,4,5,6") == RoiBounds((1, 2, 3), (4, 5, 6))
    with pytest.raises(ValueError):
        RoiBounds((3, 0, 0), (2, 1, 1))


# --- window ---------------------------------------------------------------------------------

def test_window_level_points():
    v = Volume3D(np.array([150.0, -100.0, -500.0, 400.0, 1000.0, 40.0]).reshape(1, 1, 6))
    out = window_level(v, 150.0, 500.0).data.ravel()
    assert out[0] == pytest.approx(127.5)
    assert out[1] == 0 and out[2] == 0 and out[3] == 255 and out[4] == 255
    assert out[5] == pytest.approx(255 * (40 - (-100)) / 500, abs=1e-4)
    assert round(float(out[5]), 1) == 71.4


def test_window_level_monotone_and_bounded():
    vals = np.sort(np.random.default_rng(0).uniform(-2000, 3000, 500))
    out = window_level(Volume3D(vals.reshape(1, 1, -1))).data.ravel()
    assert np.all(np.diff(out) >= 0) and out.min() >= 0 and out.max() <= 255
    with pytest.raises(ValueError):
        window_level(Volume3D(vals.reshape(1, 1, -1)), 0, 0)


# --- resampling ---------------------------------------------------------------------------------

def test_resample_identity_bit_equal():
    v = Volume3D(np.random.default_rng(0).normal(size=(4, 5, 6)).astype(np.float32))
    r = resample_trilinear(v, v.dims)
    assert r.data.tobytes() == v.data.tobytes()


def test_resample_constant():
    v = Volume3D(np.full((4, 4, 4), 3.25, np.float32))
    for dims in [(2, 3, 7), (9, 1, 4)]:
        np.testing.assert_allclose(resample_trilinear(v, dims).data, 3.25, rtol=0, atol=1e-6)


def test_resample_ramp_8_to_4_exact():
    x = np.arange(8, dtype=np.float32)
    v = Volume3D(np.broadcast_to(2.0 * x + 1.0, (2, 3, 8)))
    r = resample_trilinear(v, (4, 3, 2))
    # sample points sit at source x = 0.5, 2.5, 4.5, 6.5
    np.testing.assert_allclose(r.data[0, 0], 2.0 * np.array([0.5, 2.5, 4.5, 6.5]) + 1.0, rtol=0, atol=1e-5)
    assert r.spacing[0] == pytest.approx(2.0)


def test_resample_affine_interior_exact():
    nz, ny, nx = 6, 7, 8
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    v = Volume3D((0.5 * x - 1.5 * y + 2.0 * z + 3.0).astype(np.float32))
    r = resample_trilinear(v, (4, 7, 3))  # downsampling keeps every sample interior
    cx = (np.arange(4) + 0.5) * 2 - 0.5
    cy = np.arange(7).astype(float)
    cz = (np.arange(3) + 0.5) * 2 - 0.5
    Z, Y, X = np.meshgrid(cz, cy, cx, indexing="ij")
    np.testing.assert_allclose(r.data, 0.5 * X - 1.5 * Y + 2.0 * Z + 3.0, rtol=0, atol=1e-5)


def test_resample_preserves_extent():
    v = Volume3D(np.zeros((64, 128, 128)), (0.8, 0.8, 0.625))
    r = resample_trilinear(v, (64, 64, 32))
    for n, s, m, t in zip(v.dims, v.spacing, r.dims, r.spacing):
        assert n * s == pytest.approx(m * t)


def test_resample_nearest_mask():
    m = BinaryMask3D(np.zeros((4, 8, 8), bool))
    assert resample_nearest(m, (4, 4, 2)).dims == (4, 4, 2)
    data = np.zeros((2, 2, 2), bool)
    data[1, 1, 1] = True
    up = resample_nearest(BinaryMask3D(data), (4, 4, 4))
    assert up.data[2:, 2:, 2:].all() and up.data.sum() == 8


# --- crops containing the aneurysm ------------------------------------------------------------

def _box_mask(shape, lo, hi):
    m = np.zeros(shape, bool)
    m[lo[2]:hi[2] + 1, lo[1]:hi[1] + 1, lo[0]:hi[0] + 1] = True
    return m


def test_crop_zero_slack_is_unique():
    shape = (10, 12, 14)
    m = BinaryMask3D(_box_mask(shape, (3, 2, 1), (8, 6, 4)))
    v = Volume3D(np.random.default_rng(0).random(shape))
    outs = {random_crop_containing(v, m, (6, 5, 4), np.random.default_rng(s))[0].origin for s in range(10)}
    assert outs == {(3.0, 2.0, 1.0)}


def test_crop_contains_single_voxel_over_many_draws():
    shape = (16, 16, 16)
    data = np.zeros(shape, bool)
    data[5, 9, 12] = True
    m = BinaryMask3D(data)
    v = Volume3D(np.zeros(shape))
    rng = np.random.default_rng(123)
    origins = set()
    for _ in range(100):
        cv, cm = random_crop_containing(v, m, (6, 6, 6), rng)
        assert cm.data.sum() == 1
        origins.add(cv.origin)
    assert len(origins) > 20


def test_crop_placement_uniform_over_feasible():
    data = np.zeros((1, 1, 10), bool)
    data[0, 0, 4] = True
    m = BinaryMask3D(data)
    v = Volume3D(np.zeros((1, 1, 10)))
    rng = np.random.default_rng(0)
    starts = [random_crop_containing(v, m, (3, 1, 1), rng)[0].origin[0] for _ in range(3000)]
    vals, counts = np.unique(starts, return_counts=True)
    assert vals.tolist() == [2.0, 3.0, 4.0]
    assert counts.min() > 900


def test_crop_too_small_errors():
    m = BinaryMask3D(_box_mask((10, 10, 10), (1, 1, 1), (7, 3, 3)))
    with pytest.raises(ValueError, match="axis x"):
        random_crop_containing(Volume3D(np.zeros((10, 10, 10))), m, (5, 5, 5), np.random.default_rng(0))


# --- rigid transforms ----------------------------------------------------------------------------

def test_identity_transform_returns_inputs():
    v = Volume3D(np.random.default_rng(0).random((3, 5, 5)))
    m = BinaryMask3D(v.data > 0.5)
    v2, m2 = apply_rigid(v, m, RigidTransform())
    assert v2.data.tobytes() == v.data.tobytes() and np.array_equal(m2.data, m.data)


def test_quarter_turn_is_permutation():
    shape = (3, 9, 9)
    data = np.zeros(shape, bool)
    data[1, 4, 1:8] = True  # bar along x through the centre row
    m = BinaryMask3D(data)
    img = Volume3D(np.random.default_rng(0).random(shape).astype(np.float32))
    v2, m2 = apply_rigid(img, m, RigidTransform(90.0))
    assert m2.data.sum() == data.sum()
    np.testing.assert_array_equal(m2.data[1, 1:8, 4], np.ones(7, bool))
    # positive angles turn +x towards +y: out[y, x] = in[n-1-x, y]
    np.testing.assert_allclose(v2.data, np.rot90(img.data, k=1, axes=(2, 1)), rtol=0, atol=1e-6)


def test_translation_moves_voxel_one_step():
    data = np.zeros((3, 5, 5), bool)
    data[1, 2, 2] = True
    img = Volume3D(data.astype(np.float32))
    v2, m2 = apply_rigid(img, BinaryMask3D(data), RigidTransform(0.0, (1, 0, 0)))
    assert np.argwhere(m2.data).tolist() == [[1, 2, 3]]
    assert v2.data[1, 2, 3] == 1.0 and v2.data.sum() == 1.0


def test_out_of_field_is_zero():
    img = Volume3D(np.ones((2, 4, 4), np.float32))
    v2, m2 = apply_rigid(img, BinaryMask3D(np.ones((2, 4, 4), bool)), RigidTransform(0.0, (2, 0, 0)))
    assert np.all(v2.data[:, :, :2] == 0) and not m2.data[:, :, :2].any()
    assert np.all(v2.data[:, :, 2:] == 1) and m2.data[:, :, 2:].all()


# --- augmentation --------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def scan():
    shape = (16, 32, 32)
    m = _box_mask(shape, (10, 12, 4), (20, 22, 11))
    rng = np.random.default_rng(5)
    img = np.where(m, 200.0, 20.0) + rng.normal(0, 5, shape)
    return Volume3D(img.astype(np.float32)), BinaryMask3D(m)


def test_default_plan_yields_140(scan):
    assert AugmentPlan().total == 140
    out = build_augmented_set(*scan, AugmentPlan())
    assert len(out) == 140
    assert all(mm.data.sum() > 0 for _, mm in out)


def test_single_item_plan_is_identity_crop(scan):
    plan = AugmentPlan(crops_per_scan=1, transforms_per_crop=1, seed=4)
    (v, m), = build_augmented_set(*scan, plan)
    rng = np.random.default_rng([4, 0, 0])
    lows = [max(b - a + 1, round(0.85 * n)) for n, a, b in zip(scan[0].dims, *mask_bbox(scan[1]))]
    crop_dims = tuple(int(rng.integers(lo, n + 1)) for lo, n in zip(lows, scan[0].dims))
    cv, cm = random_crop_containing(*scan, crop_dims, rng)
    ev, em = resample_trilinear(cv, scan[0].dims), resample_nearest(cm, scan[0].dims)
    assert v.data.tobytes() == ev.data.tobytes() and np.array_equal(m.data, em.data)


def test_first_transform_of_each_crop_is_identity(scan):
    plan = AugmentPlan(crops_per_scan=3, transforms_per_crop=4, seed=1)
    out = build_augmented_set(*scan, plan)
    for c in range(3):
        v0, _ = out[4 * c]
        v0b, _ = augment_item(*scan, plan, 0, c, 0)
        assert v0.data.tobytes() == v0b.data.tobytes()
        assert not np.array_equal(out[4 * c + 1][0].data, v0.data)


def test_augmentation_is_deterministic_and_order_free(scan):
    plan = AugmentPlan(crops_per_scan=2, transforms_per_crop=3, seed=9)
    a = build_augmented_set(*scan, plan, scan_index=2)
    b = build_augmented_set(*scan, plan, scan_index=2)
    assert all(x[0].data.tobytes() == y[0].data.tobytes() for x, y in zip(a, b))
    # any single item can be produced on its own (parallel workers see the same stream)
    v, m = augment_item(*scan, plan, 2, 1, 2)
    assert v.data.tobytes() == a[5][0].data.tobytes() and np.array_equal(m.data, a[5][1].data)


def test_plan_validation():
    with pytest.raises(ValueError):
        AugmentPlan(crops_per_scan=0)
    with pytest.raises(ValueError):
        AugmentPlan(rotation_deg=-1)


def test_crop_extents_span_fraction_to_full(scan):
    plan = AugmentPlan(crops_per_scan=40, transforms_per_crop=1, seed=2, crop_fraction=0.5)
    rng_dims = crop_extent_range(plan, *scan)
    assert rng_dims == ((16, 32), (16, 32), (8, 16))
    seen = set()
    for c in range(40):
        v, m = augment_item(*scan, plan, 0, c, 0)
        assert v.dims == scan[0].dims
        # the whole box survives, magnified by at least 1
        assert m.data.sum() >= scan[1].data.sum()
        seen.add(m.data.sum())
    assert len(seen) > 5
    fixed = AugmentPlan(crops_per_scan=1, transforms_per_crop=1, crop_dims=(32, 32, 16))
    (v, m), = build_augmented_set(*scan, fixed)
    assert np.array_equal(m.data, scan[1].data)
