import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dentatlas import _pykernels, kernels

BACKENDS = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])

shapes = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))


@st.composite
def volume_and_points(draw):
    shape = draw(shapes)
    data = draw(arrays(np.float64, (2,) + shape, elements=st.floats(-10, 10)))
    n = draw(st.integers(1, 30))
    pts = draw(arrays(np.float64, (3, n), elements=st.floats(-2, 8)))
    return data, pts


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
@given(volume_and_points(), st.booleans())
def test_backends_agree_bitwise(vp, clamp):
    data, pts = vp
    for fn in (kernels.trilinear, kernels.nearest):
        a = fn(data, pts, clamp, backend="cython")
        b = fn(data, pts, clamp, backend="python")
        assert np.array_equal(a, b)


@pytest.mark.parametrize("backend", BACKENDS)
def test_trilinear_reproduces_affine_functions(backend, rng):
    g = np.indices((5, 6, 7)).astype(float)
    f = 1.5 * g[0] - 2.0 * g[1] + 0.25 * g[2] + 3.0
    pts = rng.uniform(0, 4, size=(3, 200))
    out = kernels.trilinear(f, pts, backend=backend)
    assert np.allclose(out, 1.5 * pts[0] - 2.0 * pts[1] + 0.25 * pts[2] + 3.0, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_grid_points_are_exact(backend, rng):
    d = rng.normal(size=(4, 5, 6))
    idx = np.indices(d.shape).reshape(3, -1).astype(float)
    assert np.array_equal(kernels.trilinear(d, idx, backend=backend), d.reshape(-1))
    assert np.array_equal(kernels.nearest(d, idx, backend=backend), d.reshape(-1))


@pytest.mark.parametrize("backend", BACKENDS)
def test_outside_reads_zero_unless_clamped(backend):
    d = np.arange(27, dtype=float).reshape(3, 3, 3) + 1
    pts = np.array([[-0.5, 2.5, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 3.0]])
    assert np.all(kernels.trilinear(d, pts, backend=backend) == 0)
    clamped = kernels.trilinear(d, pts, clamp=True, backend=backend)
    expect = kernels.trilinear(d, np.clip(pts, 0, 2), backend=backend)
    assert np.array_equal(clamped, expect)


@pytest.mark.parametrize("backend", BACKENDS)
def test_rounding_outside_the_last_voxel_still_reads_the_edge(backend):
    d = np.ones((4, 4, 4))
    pts = np.array([[3 + 1e-12, -1e-12], [0.0, 3.0], [1.0, 2.0]])
    assert np.array_equal(kernels.trilinear(d, pts, backend=backend), [1.0, 1.0])


def test_channel_and_shape_handling(rng):
    d = rng.normal(size=(3, 4, 5, 6))
    pts = rng.uniform(0, 3, size=(3, 2, 7))
    out = kernels.trilinear(d, pts)
    assert out.shape == (3, 2, 7)
    assert np.array_equal(out[1], kernels.trilinear(d[1], pts))


def test_pure_python_module_is_importable_alone():
    assert callable(_pykernels.trilinear_sample)
    with pytest.raises(ValueError):
        kernels.trilinear(np.zeros((2, 2, 2)), np.zeros((3, 1)), backend="fortran")
