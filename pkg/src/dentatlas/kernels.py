"""Backend selection for the sampling kernels.

The compiled extension ``dentatlas._ckernels`` is used when it was built;
otherwise, or when ``DENTATLAS_PURE_PYTHON=1`` is set, the numpy versions in
``dentatlas._pykernels`` are used. Both accept the same arguments and return
the same values.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if not os.environ.get("DENTATLAS_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _prepare(data, coords):
    data = np.asarray(data, dtype=np.float64)
    squeeze = data.ndim == 3
    if squeeze:
        data = data[np.newaxis]
    coords = np.asarray(coords, dtype=np.float64)
    shape = coords.shape[1:]
    coords = np.ascontiguousarray(coords.reshape(3, -1))
    return np.ascontiguousarray(data), coords, shape, squeeze


def trilinear(data, coords, clamp=False, backend=None):
    """Trilinear interpolation of ``data`` at voxel-index ``coords``.

    ``data`` is (nx, ny, nz) or (C, nx, ny, nz); ``coords`` is (3, ...). Samples
    outside ``[0, n-1]`` on any axis (beyond a 1e-6 voxel rounding allowance)
    read 0 unless ``clamp`` is set, in which case the coordinates are clipped
    to the grid first.
    """
    impl = _select(backend)
    data, flat, shape, squeeze = _prepare(data, coords)
    out = impl.trilinear_sample(data, flat, bool(clamp))
    out = np.asarray(out).reshape((data.shape[0],) + shape)
    return out[0] if squeeze else out


def nearest(data, coords, clamp=False, backend=None):
    """Nearest-neighbour sampling with the same conventions as :func:`trilinear`."""
    impl = _select(backend)
    data, flat, shape, squeeze = _prepare(data, coords)
    out = impl.nearest_sample(data, flat, bool(clamp))
    out = np.asarray(out).reshape((data.shape[0],) + shape)
    return out[0] if squeeze else out


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pykernels
    if backend == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {backend!r}")
