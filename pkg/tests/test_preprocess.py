import numpy as np
import pytest
from scipy import ndimage

from longsiam import preprocess as P
from longsiam.nifti import Volume


def _vol(data, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(data, dtype=np.float64), spacing)


def test_apply_mask():
    rng = np.random.default_rng(0)
    v = _vol(rng.normal(size=(4, 5, 3)))
    assert np.array_equal(P.apply_mask(v, np.ones(v.shape)).data, v.data)
    assert not P.apply_mask(v, np.zeros(v.shape)).data.any()
    m = rng.integers(0, 2, size=v.shape)
    out = P.apply_mask(v, m).data
    for idx in np.ndindex(v.shape):
        assert out[idx] == v.data[idx] * m[idx]
    with pytest.raises(ValueError):
        P.apply_mask(v, np.full(v.shape, 0.5))
    with pytest.raises(ValueError):
        P.apply_mask(v, np.ones((4, 5, 4)))


def test_scale_unit():
    out = P.scale_unit(_vol(np.array([0.0, 5.0, 10.0]).reshape(3, 1, 1))).data.ravel()
    assert out.tolist() == [0.0, 0.5, 1.0]
    assert not P.scale_unit(_vol(np.full((3, 3, 3), 7.0))).data.any()
    v = P.scale_unit(_vol(np.random.default_rng(1).normal(size=(6, 5, 4))))
    assert v.data.min() == 0.0 and v.data.max() == 1.0
    assert np.array_equal(P.scale_unit(v).data, v.data)


def test_zero_pad():
    v = _vol(np.arange(1.0, 9.0).reshape(2, 2, 2))
    out = P.zero_pad(v, (4, 4, 4)).data
    assert np.array_equal(out[1:3, 1:3, 1:3], v.data)
    assert out.sum() == v.data.sum()
    assert np.array_equal(P.zero_pad(v, (2, 2, 2)).data, v.data)
    # odd slack: extra voxel on the high side
    odd = P.zero_pad(v, (5, 2, 2)).data
    assert np.array_equal(odd[1:3], v.data) and not odd[[0, 3, 4]].any()
    with pytest.raises(ValueError):
        P.zero_pad(v, (1, 4, 4))


def test_spline_coefficients_interpolate_knots():
    s = np.random.default_rng(2).normal(size=17)
    c = P.spline_coefficients_1d(s)
    k = np.arange(17)
    recon = sum(P._bspline3(j) * c[P._mirror_index(k + j, 17)] for j in (-1, 0, 1))
    assert np.max(np.abs(recon - s)) < 1e-12


@pytest.mark.parametrize("shape", [(12, 9, 7), (8, 8, 8), (5, 6, 4)])
def test_downscale_matches_scipy_mirror_spline(shape):
    rng = np.random.default_rng(3)
    v = _vol(rng.normal(size=shape), (1.0, 2.0, 3.0))
    out = P.downscale_spline(v)
    grids = [2.0 * np.arange(-(-n // 2)) + 0.5 for n in shape]
    coords = np.meshgrid(*grids, indexing="ij")
    ref = ndimage.map_coordinates(v.data, coords, order=3, mode="mirror")
    assert out.shape == tuple(-(-n // 2) for n in shape)
    assert np.max(np.abs(out.data - ref)) < 1e-10
    assert out.spacing == (2.0, 4.0, 6.0)


def test_corner_alignment_is_decimation():
    v = _vol(np.random.default_rng(4).normal(size=(9, 8, 6)))
    out = P.downscale_spline(v, align="corner").data
    assert np.max(np.abs(out - v.data[::2, ::2, ::2])) < 1e-10


def test_downscale_shapes_and_constants():
    assert P.downscale_spline(_vol(np.zeros((204, 216, 150)))).shape == (102, 108, 75)
    for value in (0.375, 0.1, 1.0, -2.7):
        assert np.all(P.downscale_spline(_vol(np.full((9, 6, 5), value))).data == value)
    with pytest.raises(ValueError):
        P.downscale_spline(_vol(np.zeros((3, 8, 8))))


def test_downscale_linear_in_intensity():
    v = _vol(np.random.default_rng(5).uniform(size=(10, 8, 6)))
    a = P.downscale_spline(_vol(3.7 * v.data)).data
    b = 3.7 * P.downscale_spline(v).data
    assert np.max(np.abs(a - b)) < 1e-6


def test_cubic_polynomial_reproduced_in_interior():
    shape = (48, 44, 40)
    axes = [np.arange(n, dtype=np.float64) / n for n in shape]
    polys = [lambda u: 1 + 0.5 * u - 0.3 * u**2 + 0.2 * u**3,
             lambda u: 0.7 - u + 0.4 * u**3,
             lambda u: 2 + 0.1 * u**2 - 0.6 * u**3]
    fx, fy, fz = (p(a) for p, a in zip(polys, axes))
    v = _vol(fx[:, None, None] * fy[None, :, None] * fz[None, None, :])
    out = P.downscale_spline(v).data
    worst = 0.0
    margin = 16
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            for k in range(out.shape[2]):
                pos = np.array([2 * i + 0.5, 2 * j + 0.5, 2 * k + 0.5])
                if np.any(pos < margin) or np.any(pos > np.array(shape) - 1 - margin):
                    continue
                exact = np.prod([p(x / n) for p, x, n in zip(polys, pos, shape)])
                worst = max(worst, abs(out[i, j, k] - exact))
    assert worst < 1e-6


def test_preprocess_pair():
    rng = np.random.default_rng(6)
    b = _vol(rng.uniform(0, 500, size=(30, 34, 20)))
    f = _vol(rng.uniform(0, 400, size=(28, 30, 22)))
    pb, pf = P.preprocess_pair(b, f, target=(16, 18, 12))
    assert pb.shape == pf.shape == (16, 18, 12)
    for v in (pb, pf):
        assert v.data.min() == 0.0 and v.data.max() == 1.0
    again = P.preprocess_pair(b, f, target=(16, 18, 12))
    assert np.array_equal(again[0].data, pb.data) and np.array_equal(again[1].data, pf.data)
    same = P.preprocess_pair(b, b, target=(16, 18, 12))
    assert np.array_equal(same[0].data, same[1].data)
    # a second pass over processed data changes nothing
    twice = P.preprocess_volume(pb, target=(16, 18, 12))
    assert np.array_equal(twice.data, pb.data)


def test_preprocess_with_mask():
    rng = np.random.default_rng(7)
    v = _vol(rng.uniform(1, 2, size=(12, 12, 12)))
    mask = np.zeros(v.shape)
    mask[3:9, 3:9, 3:9] = 1
    out = P.preprocess_volume(v, target=(6, 6, 6), mask=mask)
    ref = P.preprocess_volume(_vol(v.data * mask), target=(6, 6, 6))
    assert out.shape == (6, 6, 6)
    assert np.array_equal(out.data, ref.data)


def test_default_target():
    v = _vol(np.random.default_rng(8).uniform(size=(180, 200, 140)).astype(np.float32))
    assert P.preprocess_volume(v).shape == (102, 108, 75)
