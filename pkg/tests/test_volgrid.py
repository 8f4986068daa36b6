import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dentatlas.errors import DegenerateInput, EmptyForeground, InvalidArgument, MissingLabel
from dentatlas.volgrid import (
    FDI_LABELS,
    EnhancementConfig,
    Geometry,
    LabelGrid,
    VolumeGrid,
    VoxelBox,
    adjacent_pairs,
    ball_offsets,
    bounding_box_of_labels,
    crop_with_margin,
    default_reassignment_table,
    dice_coefficient,
    dilate_labels,
    enhance,
    mask_by_labels,
    normalize_intensity,
    reassign_label_intensities,
    resample_trilinear,
    union_geometry,
)


def vol(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    data = np.asarray(data, dtype=np.float32)
    return VolumeGrid(Geometry(data.shape, spacing, origin), data)


def lab(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    data = np.asarray(data, dtype=np.uint16)
    return LabelGrid(Geometry(data.shape, spacing, origin), data)


# geometry and types

def test_geometry_rejects_bad_fields():
    with pytest.raises(InvalidArgument):
        Geometry((0, 2, 2), (1, 1, 1), (0, 0, 0))
    with pytest.raises(InvalidArgument):
        Geometry((2, 2, 2), (1, -1, 1), (0, 0, 0))


def test_index_physical_roundtrip(rng):
    g = Geometry((4, 5, 6), (0.4, 0.5, 0.6), (1.0, -2.0, 3.0))
    idx = rng.uniform(0, 4, size=(3, 10))
    assert np.allclose(g.physical_to_index(g.index_to_physical(idx)), idx)
    assert np.allclose(g.index_to_physical(np.zeros((3, 1)))[:, 0], g.origin)


def test_volume_rejects_nonfinite():
    with pytest.raises((InvalidArgument, ValueError)):
        vol(np.full((2, 2, 2), np.nan))


def test_label_grid_rejects_third_molars():
    with pytest.raises((InvalidArgument, ValueError)):
        lab(np.full((2, 2, 2), 18))


# resampling

def test_resample_identity_is_bitwise(rng):
    v = vol(rng.normal(size=(5, 4, 3)), spacing=(0.5, 0.4, 0.3))
    out = resample_trilinear(v, v.spacing)
    assert out.dims == v.dims
    assert np.array_equal(out.data, v.data)


def test_resample_constant_interior():
    v = vol(np.full((6, 6, 6), 2.5), spacing=(0.7, 0.7, 0.7))
    out = resample_trilinear(v, (0.3, 0.45, 0.5))
    idx = v.geometry.physical_to_index(out.geometry.physical_grid())
    inside = np.all((idx >= 0) & (idx <= 5), axis=0)
    assert np.allclose(out.data[inside], 2.5)


def test_resample_two_cubed_matches_hand_weights():
    d = np.arange(8, dtype=float).reshape(2, 2, 2) ** 1.5
    v = vol(d, spacing=(0.8, 0.8, 0.8))
    out = resample_trilinear(v, 0.4)
    assert out.dims == (4, 4, 4)
    assert out.origin == v.origin
    # sample (i, j, k) at 0.4 mm sits at fractional index (i/2, j/2, k/2)
    for i, j, k in itertools.product(range(3), repeat=3):
        x, y, z = i / 2, j / 2, k / 2
        want = sum(
            d[a, b, c] * (x if a else 1 - x) * (y if b else 1 - y) * (z if c else 1 - z)
            for a, b, c in itertools.product((0, 1), repeat=3)
        )
        assert out.data[i, j, k] == pytest.approx(want, rel=1e-6)
    # index 1.5 lies past the last sample, so the outer slab reads 0
    assert np.all(out.data[3] == 0)


def test_resample_rejects_nonpositive_spacing():
    with pytest.raises(InvalidArgument):
        resample_trilinear(vol(np.ones((2, 2, 2))), (0.4, 0.0, 0.4))


@given(st.integers(1, 12), st.floats(0.2, 1.5), st.floats(0.2, 1.5))
def test_resample_output_dims(n, s, t):
    v = vol(np.zeros((n, 1, 1)), spacing=(s, 1, 1))
    out = resample_trilinear(v, (t, 1, 1))
    assert abs(out.dims[0] - n * s / t) < 1 + 1e-6
    assert out.dims[0] >= n * s / t - 1e-6


# normalisation

def test_normalize_three_values():
    out = normalize_intensity(vol(np.array([100, 300, 500]).reshape(3, 1, 1)))
    assert np.allclose(out.data.ravel(), [0, 0.5, 1])


def test_normalize_unit_range_unchanged():
    d = np.array([0, 0.25, 1.0]).reshape(3, 1, 1)
    assert np.allclose(normalize_intensity(vol(d)).data, d)


def test_normalize_constant_raises():
    with pytest.raises(DegenerateInput):
        normalize_intensity(vol(np.ones((2, 2, 2))))


@given(arrays(np.float32, (3, 3, 3), elements=st.floats(-1e3, 1e3, width=32), unique=True))
def test_normalize_preserves_order(d):
    out = normalize_intensity(vol(d)).data.ravel()
    assert out.min() == 0 and out.max() == 1
    assert np.all(np.diff(out[np.argsort(d.ravel())]) >= 0)


# bounding box and crop

def test_bbox_single_voxel():
    d = np.zeros((10, 10, 10))
    d[5, 6, 7] = 11
    assert bounding_box_of_labels(lab(d)) == VoxelBox((5, 6, 7), (5, 6, 7))


def test_bbox_full_grid():
    assert bounding_box_of_labels(lab(np.full((3, 4, 5), 21))) == VoxelBox((0, 0, 0), (2, 3, 4))


def test_bbox_empty_raises():
    with pytest.raises(EmptyForeground):
        bounding_box_of_labels(lab(np.zeros((3, 3, 3))))


@given(arrays(np.bool_, (6, 5, 4)).filter(lambda a: a.any()))
def test_bbox_matches_scan(fg):
    box = bounding_box_of_labels(lab(fg * 31))
    pts = np.argwhere(fg)
    assert box.lo == tuple(pts.min(axis=0)) and box.hi == tuple(pts.max(axis=0))


def test_crop_margin_zero_is_exact_box(rng):
    v = vol(rng.normal(size=(8, 8, 8)))
    out = crop_with_margin(v, VoxelBox((1, 2, 3), (4, 5, 6)), 0)
    assert np.array_equal(out.data, v.data[1:5, 2:6, 3:7])


def test_crop_large_grid_arithmetic():
    g = Geometry((400, 400, 400), (0.4, 0.4, 0.4), (0, 0, 0))
    # only geometry matters here, so use a lightweight stand-in array
    d = np.zeros(g.dims, dtype=np.uint16)
    d[40:61, 40:61, 40:61] = 11
    l = LabelGrid(g, d)
    box = bounding_box_of_labels(l)
    assert box == VoxelBox((40,) * 3, (60,) * 3)
    out = crop_with_margin(l, box, 30)
    assert out.dims == (81, 81, 81)
    assert np.allclose(out.origin, (10 * 0.4,) * 3)


def test_crop_clamps_at_corner():
    out = crop_with_margin(vol(np.ones((20, 20, 20))), VoxelBox((0, 1, 2), (3, 3, 3)), 30)
    assert out.dims == (20, 20, 20)
    assert out.origin == (0.0, 0.0, 0.0)


@given(st.tuples(*[st.integers(0, 7)] * 3), st.tuples(*[st.integers(0, 7)] * 3), st.integers(0, 4))
def test_crop_preserves_physical_coordinates(a, b, margin):
    g = Geometry((8, 8, 8), (0.3, 0.5, 0.7), (1.0, 2.0, -3.0))
    v = VolumeGrid(g, np.arange(512, dtype=np.float32).reshape(8, 8, 8))
    box = VoxelBox(tuple(map(min, a, b)), tuple(map(max, a, b)))
    out = crop_with_margin(v, box, margin)
    # every retained voxel sits at the same physical position and keeps its value
    src = g.physical_to_index(out.geometry.physical_grid().reshape(3, -1))
    src = np.rint(src).astype(int)
    assert np.array_equal(v.data[tuple(src)], out.data.reshape(-1))
    assert np.allclose(out.geometry.index_to_physical(np.zeros((3, 1))),
                       g.index_to_physical(np.array(box.lo)[:, None] - np.minimum(box.lo, margin)[:, None]))


def test_crop_rejects_box_outside():
    with pytest.raises(InvalidArgument):
        crop_with_margin(vol(np.ones((4, 4, 4))), VoxelBox((0, 0, 0), (4, 1, 1)), 0)


# dilation

def brute_dilate(fg, radius):
    out = np.zeros_like(fg)
    offs = [o for o in itertools.product(range(-radius, radius + 1), repeat=3)
            if o[0] ** 2 + o[1] ** 2 + o[2] ** 2 <= radius ** 2]
    for p in np.argwhere(fg):
        for o in offs:
            q = p + o
            if np.all(q >= 0) and np.all(q < fg.shape):
                out[tuple(q)] = True
    return out


def test_dilate_radius_zero_identity():
    d = np.zeros((5, 5, 5))
    d[1, 2, 3] = 12
    assert np.array_equal(dilate_labels(lab(d), 0).data, (d > 0).astype(np.uint16))


def test_dilate_single_voxel_radius_one():
    d = np.zeros((5, 5, 5))
    d[2, 2, 2] = 11
    out = dilate_labels(lab(d), 1).data
    assert out.sum() == 7
    assert len(ball_offsets(1)) == 7


@pytest.mark.parametrize("radius", [1, 2, 3, 4, 5, 7])
def test_dilate_matches_brute_force(radius, rng):
    fg = rng.random((14, 13, 12)) < 0.01
    fg[0, 0, 0] = True
    out = dilate_labels(lab(fg * 11), radius).data.astype(bool)
    assert np.array_equal(out, brute_dilate(fg, radius))


def test_ball_offsets_radius_fifteen_count():
    o = ball_offsets(15)
    r = np.arange(-15, 16)
    x, y, z = np.meshgrid(r, r, r, indexing="ij")
    assert len(o) == int(((x ** 2 + y ** 2 + z ** 2) <= 225).sum())


@given(arrays(np.bool_, (6, 6, 6)), st.integers(0, 4), st.integers(0, 4))
def test_dilate_monotone_and_nested(fg, r1, r2):
    r1, r2 = sorted((r1, r2))
    l = lab(fg * 41)
    a = dilate_labels(l, r1).data.astype(bool)
    b = dilate_labels(l, r2).data.astype(bool)
    assert np.all(a[fg])
    assert np.all(b[a])


def test_dilate_negative_radius():
    with pytest.raises(InvalidArgument):
        dilate_labels(lab(np.zeros((2, 2, 2))), -1)


# mask and reassignment

def test_mask_cases(rng):
    v = vol(rng.normal(size=(4, 4, 4)))
    assert np.array_equal(mask_by_labels(v, lab(np.ones((4, 4, 4)))).data, v.data)
    assert not mask_by_labels(v, lab(np.zeros((4, 4, 4)))).data.any()
    m = rng.random((4, 4, 4)) < 0.5
    assert np.array_equal(mask_by_labels(v, lab(m)).data, v.data * m)


def test_mask_geometry_mismatch():
    with pytest.raises(InvalidArgument):
        mask_by_labels(vol(np.ones((2, 2, 2))), lab(np.ones((2, 2, 3))))


def test_default_table_contrast():
    table = default_reassignment_table()
    pairs = adjacent_pairs()
    assert len(pairs) == 26
    assert all(abs(table[a] - table[b]) >= 0.4 for a, b in pairs)
    assert table[0] == 0 and set(table) == {0, *FDI_LABELS}


def test_reassign_two_teeth():
    d = np.zeros((4, 4, 4), dtype=np.uint16)
    d[:2] = 11
    d[2, :2] = 12
    out = reassign_label_intensities(lab(d)).data
    table = default_reassignment_table()
    want = np.vectorize(lambda x: table[int(x)])(d)
    assert np.array_equal(out, want.astype(np.float32))
    assert not reassign_label_intensities(lab(np.zeros((2, 2, 2)))).data.any()


def test_reassign_missing_label_named():
    d = np.full((2, 2, 2), 11)
    with pytest.raises(MissingLabel) as exc:
        reassign_label_intensities(lab(d), {0: 0.0, 12: 1.0})
    assert "11" in str(exc.value)


def test_enhancement_config_validation():
    with pytest.raises(InvalidArgument):
        EnhancementConfig(margin_voxels=-1)
    with pytest.raises(InvalidArgument):
        EnhancementConfig(reassignment_table={0: 0.0, 11: 1.5})


# dice

def test_dice_cases():
    a = np.zeros((6, 6, 6), bool)
    a[1:3, 1:3, 1:3] = True
    b = np.roll(a, 1, axis=0)
    assert dice_coefficient(a, a) == 1.0
    assert dice_coefficient(a, np.roll(a, 3, axis=0)) == 0.0
    assert dice_coefficient(a, b) == 0.5
    with pytest.raises(DegenerateInput):
        dice_coefficient(np.zeros(3, bool), np.zeros(3, bool))


@given(arrays(np.bool_, (4, 3, 3)), arrays(np.bool_, (4, 3, 3)))
def test_dice_brute_force_and_symmetric(a, b):
    if not (a.any() or b.any()):
        return
    inter = sum(1 for p in itertools.product(range(4), range(3), range(3)) if a[p] and b[p])
    want = 2 * inter / (int(a.sum()) + int(b.sum()))
    assert dice_coefficient(a, b) == want == dice_coefficient(b, a)


# enhancement pipeline

def test_enhance_deterministic_and_consistent(rng):
    d = np.zeros((30, 30, 30), dtype=np.uint16)
    d[10:14, 12:16, 11:13] = 11
    d[14:18, 12:16, 11:13] = 12
    v = vol(rng.random((30, 30, 30)))
    l = lab(d)
    cfg = EnhancementConfig(margin_voxels=5, dilation_radius_voxels=2)
    a, b = enhance(v, l, cfg), enhance(v, l, cfg)
    assert np.array_equal(a.intensity.data, b.intensity.data)
    assert np.array_equal(a.guidance.data, b.guidance.data)
    assert a.box == VoxelBox((10, 12, 11), (17, 15, 12))
    assert a.labels.dims == (18, 14, 12)
    assert np.allclose(a.labels.origin, (5, 7, 6))
    assert np.all(a.intensity.data[a.mask.data == 0] == 0)


def test_union_geometry_covers_inputs():
    g1 = Geometry((4, 4, 4), (1, 1, 1), (0, 0, 0))
    g2 = Geometry((2, 2, 2), (1, 1, 1), (5, -1, 0))
    u = union_geometry([g1, g2], 0.5)
    lo, hi = u.bounds()
    assert np.allclose(lo, (0, -1, 0)) and np.all(hi >= (6, 3, 3) - np.array(1e-9))
