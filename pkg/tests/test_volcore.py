import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dosepred.volcore import (CaseBundle, Geometry, GeometryError, Grid3, StructureSet,
                              clip_dose, clip_rescale_ct, crop_resample, crop_window,
                              normalize_ptv_mean, one_hot, output_geometry, override_ptv_dose,
                              resample)


def grid(values, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    values = np.asarray(values, dtype=np.float64)
    return Grid3(Geometry(values.shape, spacing, origin), values)


def test_geometry_validation():
    with pytest.raises(GeometryError):
        Geometry((0, 2, 2), (1, 1, 1), (0, 0, 0))
    with pytest.raises(GeometryError):
        Geometry((2, 2, 2), (1, -1, 1), (0, 0, 0))


def test_grid_flat_values_are_x_fastest():
    g = Geometry((2, 3, 4), (1, 1, 1), (0, 0, 0))
    flat = np.arange(24.0)
    a = Grid3(g, flat)
    assert a.values[1, 0, 0] == 1.0
    assert a.values[0, 1, 0] == 2.0
    assert a.values[0, 0, 1] == 6.0


def test_grid_rejects_nonfinite_with_index():
    v = np.zeros((2, 2, 2))
    v[1, 0, 1] = np.nan
    with pytest.raises(ValueError, match=r"\(1, 0, 1\)"):
        grid(v)


@pytest.mark.parametrize("hu, expected", [(-1000, 0.0), (3071, 1.0), (1035.5, 0.5),
                                          (-5000, 0.0), (9000, 1.0)])
def test_clip_rescale_ct_points(hu, expected):
    out = clip_rescale_ct(grid(np.full((1, 1, 1), hu)))
    assert out.values[0, 0, 0] == pytest.approx(expected, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 2), elements=st.floats(-1e6, 1e6)))
def test_clip_rescale_ct_range(v):
    out = clip_rescale_ct(grid(v)).values
    assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.parametrize("d, expected", [(80, 70), (-3, 0), (42, 42)])
def test_clip_dose(d, expected):
    assert clip_dose(grid(np.full((1, 1, 1), d))).values[0, 0, 0] == expected


def test_clip_dose_bad_bounds():
    with pytest.raises(ValueError):
        clip_dose(grid(np.zeros((1, 1, 1))), lo=5, hi=5)


def test_normalize_ptv_mean(rng):
    d = grid(np.full((4, 4, 4), 30.0))
    ptv = np.zeros((4, 4, 4), bool)
    ptv[1:3, 1:3, 1:3] = True
    out, scale = normalize_ptv_mean(d, ptv)
    assert scale == 2.0
    assert np.all(out.values == 60.0)
    same, s1 = normalize_ptv_mean(grid(np.full((4, 4, 4), 60.0)), ptv)
    assert s1 == 1.0 and np.all(same.values == 60.0)
    rnd = grid(rng.uniform(1, 70, (6, 5, 4)))
    m = rng.random((6, 5, 4)) < 0.3
    out, s = normalize_ptv_mean(rnd, m)
    assert out.values[m].mean() == pytest.approx(60.0, rel=1e-6)
    assert s == pytest.approx(60.0 / rnd.values[m].mean(), rel=1e-15)


def test_normalize_ptv_mean_errors():
    d = grid(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError, match="case 7"):
        normalize_ptv_mean(d, np.ones((2, 2, 2), bool), case_id="7")
    with pytest.raises(ValueError, match="empty"):
        normalize_ptv_mean(grid(np.ones((2, 2, 2))), np.zeros((2, 2, 2), bool))


def test_override_ptv_dose():
    d = grid(np.full((2, 1, 1), 48.0))
    ptv = np.array([True, False]).reshape(2, 1, 1)
    out = override_ptv_dose(d, ptv)
    assert out.values.ravel().tolist() == [60.0, 48.0]
    full = override_ptv_dose(grid(np.zeros((2, 2, 2))), np.ones((2, 2, 2), bool))
    assert np.all(full.values == 60.0)
    with pytest.raises(GeometryError):
        override_ptv_dose(d, np.ones((3, 1, 1), bool))


def test_resample_identity_bitwise(rng):
    g = grid(rng.normal(size=(5, 6, 7)), spacing=(1.5, 2.0, 2.5), origin=(-3, 4, 1))
    assert np.array_equal(resample(g, g.geometry).values, g.values)


def test_resample_constant(rng):
    g = grid(np.full((5, 6, 7), 3.25))
    tgt = Geometry((9, 4, 11), (0.37, 1.9, 0.8), (-2.0, 0.3, 1.1))
    assert np.allclose(resample(g, tgt).values, 3.25, rtol=0, atol=1e-14)


def test_resample_affine_exact():
    geo = Geometry((10, 12, 9), (2.0, 1.5, 3.0), (-5.0, 2.0, 1.0))
    c = geo.voxel_centers()
    f = lambda p: 2 * p[..., 0] + 3 * p[..., 1] - p[..., 2]
    src = Grid3(geo, f(c))
    tgt = Geometry((7, 8, 6), (2.3, 1.7, 3.1), (-3.9, 3.1, 2.5))  # interior of the source
    out = resample(src, tgt)
    ref = f(tgt.voxel_centers())
    assert np.max(np.abs(out.values - ref) / np.maximum(np.abs(ref), 1.0)) < 1e-5


def test_resample_clamps_outside():
    src = grid(np.arange(4.0).reshape(4, 1, 1))
    tgt = Geometry((3, 1, 1), (1.0, 1.0, 1.0), (-5.0, 0.0, 0.0))
    assert np.all(resample(src, tgt).values == 0.0)


def _structs(shape=(6, 6, 6)):
    geo = Geometry(shape, (1, 1, 1), (0, 0, 0))
    masks = {n: np.zeros(shape, bool) for n in
             ("ptv", "esophagus", "cord", "heart", "lung_l", "lung_r")}
    masks["heart"][1, 1, 1] = True
    masks["ptv"][3, 3, 3] = True
    masks["lung_l"][3, 3, 3] = True
    masks["ptv"][4, 4, 4] = True
    return StructureSet(geo, masks)


def test_one_hot_channels():
    s = _structs()
    oh = one_hot(s)
    assert oh.shape == (6, 6, 6, 6)
    assert set(np.unique(oh)) <= {0.0, 1.0}
    assert oh[:, 1, 1, 1].tolist() == [0, 0, 1, 0, 0, 0]   # heart only
    assert oh[:, 0, 0, 0].sum() == 0                        # outside all
    assert oh[:, 3, 3, 3].tolist() == [0, 0, 0, 1, 0, 1]   # lung_l and ptv overlap


def test_one_hot_missing_structure():
    s = StructureSet(Geometry((2, 2, 2), (1, 1, 1), (0, 0, 0)), {"ptv": np.ones((2, 2, 2))})
    with pytest.raises(KeyError, match="heart"):
        one_hot(s, ("heart",))


def test_structureset_rules():
    geo = Geometry((2, 2, 2), (1, 1, 1), (0, 0, 0))
    with pytest.raises(ValueError):
        StructureSet(geo, {"ptv": np.zeros((2, 2, 2))})
    with pytest.raises(ValueError):
        StructureSet(geo, {"ptv": np.ones((2, 2, 2)), "liver": np.ones((2, 2, 2))})
    with pytest.raises(ValueError):
        StructureSet(geo, {"ptv": np.full((2, 2, 2), 0.5)})


def test_crop_window_oracle():
    union = np.zeros((512, 512, 128), bool)
    union[200, 180, 64] = True
    assert crop_window(union, (300, 300, 128)) == ((50, 349), (30, 329), (0, 127))


def test_crop_window_overflow_listed():
    union = np.zeros((20, 20, 20), bool)
    union[2:18, 5, 5] = True
    with pytest.raises(ValueError, match="'x': 6"):
        crop_window(union, (10, 10, 10))


def test_crop_resample_identity_and_pure_crop(small_case):
    case, _ = small_case
    same = crop_resample(case, case.ct.dims, case.ct.dims)
    assert np.array_equal(same.ct.values, case.ct.values)
    assert same.ct.geometry == case.ct.geometry
    cropped = crop_resample(case, (28, 28, 32), (28, 28, 32))
    w = crop_window(case.structures.union(), (28, 28, 32))
    sl = tuple(slice(a, b + 1) for a, b in w)
    assert np.array_equal(cropped.reference_dose.values, case.reference_dose.values[sl])
    assert np.array_equal(cropped.beam_dose.values, case.beam_dose.values[sl])
    assert np.array_equal(cropped.structures["heart"], case.structures["heart"][sl])


def test_crop_resample_preserves_mask_fraction(small_case):
    case, _ = small_case
    out = crop_resample(case, (32, 32, 32), (16, 16, 16))
    for name, m in case.structures.masks.items():
        if m.sum() >= 100:
            before = m.mean()
            after = out.structures[name].mean()
            assert abs(after - before) / before < 0.10, name
    assert out.ct.geometry.dims == (16, 16, 16)


def test_output_geometry_extent():
    g = Geometry((30, 30, 12), (1.0, 1.0, 2.5), (10.0, -4.0, 0.0))
    o = output_geometry(g, (16, 16, 16))
    for a in range(3):
        lo_in = g.origin[a] - 0.5 * g.spacing[a]
        lo_out = o.origin[a] - 0.5 * o.spacing[a]
        assert lo_out == pytest.approx(lo_in)
        assert o.dims[a] * o.spacing[a] == pytest.approx(g.dims[a] * g.spacing[a])


def test_casebundle_geometry_mismatch(small_case):
    case, _ = small_case
    other = grid(np.zeros((4, 4, 4)))
    with pytest.raises(GeometryError):
        CaseBundle(case.ct, case.structures, case.beams, other)
