import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dentatlas.errors import DegenerateInput, InvalidArgument, InversionFailure
from dentatlas.register import (
    AffineTransform,
    ChannelPair,
    DisplacementField,
    RegistrationSchedule,
    RigidTransform,
    compose_fields,
    exp_field,
    global_correlation,
    invert_field,
    jacobian_determinant,
    local_cc,
    local_cc_symmetric,
    register_linear,
    register_syn,
    warp_volume,
)
from dentatlas.register.fields import composition_residual, min_interior_jacobian, roundtrip_residual
from dentatlas.register.transforms import identity_affine, transform_from_dict
from dentatlas.volgrid import Geometry, VolumeGrid

from helpers import blob_volume, local_cc_fd_relative_error, smooth_field, smooth_random

G = Geometry((16, 17, 18), (0.5, 0.5, 0.5), (1.0, -2.0, 0.5))


# transforms

rotvecs = st.tuples(*[st.floats(-1.5, 1.5)] * 3)
vecs = st.tuples(*[st.floats(-10, 10)] * 3)


@given(rotvecs, vecs, vecs)
def test_rigid_matrix_is_rotation(r, t, c):
    T = RigidTransform.from_rotvec(r, t, c)
    R = T.matrix
    assert abs(np.linalg.norm(T.quaternion) - 1) < 1e-9
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-6


@given(rotvecs, vecs, vecs)
def test_rigid_inverse_and_compose(r, t, c):
    T = RigidTransform.from_rotvec(r, t, c)
    pts = np.random.default_rng(0).normal(size=(3, 20)) * 5
    assert np.allclose(T.inverse().apply(T.apply(pts)), pts, atol=1e-9)
    S = RigidTransform.from_rotvec((0.1, -0.2, 0.3), (1, 2, 3), (0, 1, 0))
    assert np.allclose(S.compose(T).apply(pts), S.apply(T.apply(pts)), atol=1e-9)


def test_affine_validation_and_roundtrip():
    with pytest.raises(InvalidArgument):
        AffineTransform(np.diag([1.0, 1.0, -1.0]))
    A = AffineTransform(np.array([[1.1, 0.1, 0], [0, 0.9, 0.05], [0.02, 0, 1.0]]), (1, 2, 3), (4, 5, 6))
    pts = np.random.default_rng(1).normal(size=(3, 10))
    assert np.allclose(A.inverse().apply(A.apply(pts)), pts)
    assert np.allclose(A.recentered((0, 0, 0)).apply(pts), A.apply(pts))
    assert np.allclose(transform_from_dict(A.to_dict()).apply(pts), A.apply(pts))
    R = RigidTransform.from_rotvec((0, 0, 0.3), (1, 0, 0), (2, 2, 2))
    assert np.allclose(transform_from_dict(R.to_dict()).apply(pts), R.apply(pts))


# global correlation

def test_global_correlation_cases(rng):
    a = rng.normal(size=(5, 5, 5))
    b = rng.normal(size=(5, 5, 5))
    assert global_correlation(a, a) == pytest.approx(1.0)
    assert global_correlation(a, 3.0 - a) == pytest.approx(-1.0)
    x, y = a.ravel(), b.ravel()
    mx, my = sum(x) / len(x), sum(y) / len(y)
    num = sum((p - mx) * (q - my) for p, q in zip(x, y))
    den = (sum((p - mx) ** 2 for p in x) * sum((q - my) ** 2 for q in y)) ** 0.5
    assert global_correlation(a, b) == pytest.approx(num / den, abs=1e-12)
    with pytest.raises(DegenerateInput):
        global_correlation(np.ones((3, 3, 3)), a[:3, :3, :3])


# local CC

def test_local_cc_self_and_affine_invariance(rng):
    a = smooth_random(rng, (14, 14, 14))
    m, g = local_cc(a, a, 2)
    assert m == pytest.approx(1.0, abs=1e-12)
    assert np.abs(g).max() < 1e-6
    m2, _ = local_cc(a, 2 * a + 5, 2)
    assert m2 == pytest.approx(1.0, abs=1e-9)


def test_local_cc_symmetric_matches_two_calls(rng):
    a, b = smooth_random(rng, (12, 12, 12)), smooth_random(rng, (12, 12, 12))
    sp = (0.5, 0.6, 0.7)
    m, ga, gb = local_cc_symmetric(a, b, 2, sp)
    m1, gb1 = local_cc(a, b, 2, sp)
    m2, ga2 = local_cc(b, a, 2, sp)
    assert m == pytest.approx(m1) == pytest.approx(m2)
    assert np.allclose(ga, ga2) and np.allclose(gb, gb1)


def test_local_cc_gradient_finite_differences(rng):
    for _ in range(3):
        assert local_cc_fd_relative_error(rng) < 1e-3


# fields

def test_compose_identities_and_constants(rng):
    phi = DisplacementField(G, smooth_field(rng, G.dims, 0.4))
    zero = DisplacementField.zeros(G)
    assert np.allclose(compose_fields(zero, phi).vectors, phi.vectors)
    assert np.allclose(compose_fields(phi, zero).vectors, phi.vectors)
    c1 = DisplacementField.constant(G, (0.2, -0.1, 0.3))
    c2 = DisplacementField.constant(G, (-0.4, 0.5, 0.1))
    assert np.allclose(compose_fields(c1, c2).vectors, c1.vectors + c2.vectors)


def test_compose_analytic_oracle():
    # u1 is multilinear, so trilinear sampling of it is exact
    u1 = lambda p: np.stack([0.01 * p[0] * p[1], 0.05 * p[0] - 0.02 * p[2], 0.02 * p[2] * p[1]])
    u2 = lambda p: np.stack([0.03 * p[2], -0.1 * np.cos(p[0]), 0.04 * p[0]])
    x = G.physical_grid()
    f1 = DisplacementField(G, u1(x))
    f2 = DisplacementField(G, u2(x))
    want = u2(x) + u1(x + u2(x))
    got = compose_fields(f1, f2).vectors
    idx = G.physical_to_index(x + u2(x))
    inside = np.all((idx >= 0) & (idx <= np.array(G.dims).reshape(3, 1, 1, 1) - 1), axis=0)
    assert np.abs(got - want)[:, inside].max() < 1e-6


def test_invert_cases(rng):
    assert not invert_field(DisplacementField.zeros(G)).vectors.any()
    c = DisplacementField.constant(G, (0.3, -0.2, 0.1))
    assert np.allclose(invert_field(c).vectors, -c.vectors)
    x = G.index_grid()
    sp = G.spacing_array.reshape(3, 1, 1, 1)
    u = np.stack([np.sin(2 * np.pi * x[1] / 16), np.cos(2 * np.pi * x[2] / 16), np.sin(2 * np.pi * x[0] / 16)]) * sp * 0.9
    f = DisplacementField(G, u)
    inv = invert_field(f)
    assert composition_residual(f, inv) < 0.05


def test_invert_strong_local_expansion():
    # centre gradient 1.5: the plain fixed point diverges there, yet the map is a diffeomorphism
    g = Geometry((24, 24, 24), (1.0, 1.0, 1.0), (0, 0, 0))
    x = g.index_grid() - 11.5
    u = 1.5 * x * np.exp(-(x ** 2).sum(axis=0) / 32.0)
    f = DisplacementField(g, u)
    assert jacobian_determinant(f).data.min() > 0.5
    inv = invert_field(f)
    assert composition_residual(f, inv) < 0.05


def test_invert_failure_carries_residual():
    x = G.index_grid()
    u = np.stack([6 * np.sin(2 * np.pi * x[0] / 6), 0 * x[0], 0 * x[0]]) * 0.5
    with pytest.raises(InversionFailure) as exc:
        invert_field(DisplacementField(G, u), max_iter=3)
    assert exc.value.residual > 0.5


def test_jacobian_cases():
    assert np.allclose(jacobian_determinant(DisplacementField.zeros(G)).data, 1.0)
    lin = DisplacementField(G, 0.1 * G.physical_grid())
    j = jacobian_determinant(lin).data
    assert np.allclose(j[1:-1, 1:-1, 1:-1], 1.331, atol=1e-5)


def test_warp_shift_by_one_voxel(rng):
    v = VolumeGrid(G, rng.normal(size=G.dims))
    assert np.array_equal(warp_volume(v, DisplacementField.zeros(G)).data, v.data)
    out = warp_volume(v, DisplacementField.constant(G, (G.spacing[0], 0, 0)))
    assert np.allclose(out.data[:-1], v.data[1:], atol=1e-6)
    assert not out.data[-1].any()


def test_exp_of_small_field_is_close_to_field(rng):
    v = DisplacementField(G, smooth_field(rng, G.dims, 0.02))
    e = exp_field(v)
    assert np.abs(e.vectors - v.vectors).max() < 1e-3
    # exp(v) and exp(-v) are mutual inverses
    assert composition_residual(e, exp_field(-v)) < 1e-3


# linear registration

def _pair(v, guide=None):
    return ChannelPair(v, guide if guide is not None else v.with_data(v.data > 0.5))


SMALL = RegistrationSchedule(shrink_factors=(2, 1), smoothing_sigmas_voxels=(1.0, 0.0),
                             max_iterations=(40, 20))


@pytest.fixture(scope="module")
def blob():
    return blob_volume(Geometry((32, 32, 32), (1.0, 1.0, 1.0), (0, 0, 0)))


def test_linear_self_registration_is_identity(blob):
    p = _pair(blob)
    for mode in ("rigid", "affine"):
        T = register_linear(p, p, mode, SMALL)
        assert np.abs(T.translation).max() < 0.05
        assert np.allclose(T.matrix, np.eye(3), atol=2e-3)


def test_linear_recovers_translation_and_monotone_trace(blob):
    truth = RigidTransform.from_rotvec((0, 0, 0), (1.3, -0.7, 0.4))
    moved = warp_volume(blob, truth.inverse())
    trace = []
    T = register_linear(_pair(blob), _pair(moved), "rigid", SMALL, trace=trace)
    assert np.linalg.norm(T.translation - truth.translation) < 0.2
    for level in {lv for lv, _ in trace}:
        vals = [m for lv, m in trace if lv == level]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_linear_intensity_rescale_invariance(blob):
    truth = RigidTransform.from_rotvec((0, 0, 0.05), (0.8, 0.0, -0.5), (16, 16, 16))
    moved = warp_volume(blob, truth.inverse())
    g = moved.with_data(moved.data > 0.5)
    a = register_linear(_pair(blob), ChannelPair(moved, g), "rigid", SMALL)
    b = register_linear(_pair(blob), ChannelPair(moved.with_data(3 * moved.data + 2), g), "rigid", SMALL)
    assert np.allclose(a.homogeneous(), b.homogeneous(), atol=1e-6)


def test_linear_is_deterministic(blob):
    moved = warp_volume(blob, RigidTransform.from_rotvec((0, 0.03, 0), (0.5, 0.5, 0), (16, 16, 16)))
    a = register_linear(_pair(blob), _pair(moved), "affine", SMALL)
    b = register_linear(_pair(blob), _pair(moved), "affine", SMALL)
    assert np.array_equal(a.homogeneous(), b.homogeneous())


# SyN

SYN_SMALL = RegistrationSchedule(shrink_factors=(2, 1), smoothing_sigmas_voxels=(1.0, 0.0),
                                 max_iterations=(30, 15), cc_window_radius=2)


def assert_diffeo(pair):
    assert min_interior_jacobian(pair.forward) > 0
    assert min_interior_jacobian(pair.inverse) > 0
    assert roundtrip_residual(pair) < 0.5


def test_syn_self_registration(blob):
    p = _pair(blob)
    res = register_syn(p, p, schedule=SYN_SMALL)
    assert res.pair.forward.norm_voxels().max() < 0.1
    assert_diffeo(res.pair)


def test_syn_recovers_smooth_warp(blob, rng):
    g = blob.geometry
    # textured image: every region constrains the field
    blob = VolumeGrid(g, smooth_random(rng, g.dims, sigma=1.5) * (blob.data > 0.3))
    x = g.index_grid()
    u = 1.5 * np.stack([np.sin(2 * np.pi * x[1] / 16), np.sin(2 * np.pi * x[2] / 16), np.sin(2 * np.pi * x[0] / 16)])
    truth = DisplacementField(g, u)
    moved = warp_volume(blob, invert_field(truth))
    res = register_syn(_pair(blob), _pair(moved), schedule=SYN_SMALL)
    assert_diffeo(res.pair)
    fg = blob.data > 0
    err = np.sqrt(((res.pair.forward.vectors - u) ** 2).sum(axis=0))[fg].mean()
    before = np.sqrt((u ** 2).sum(axis=0))[fg].mean()
    assert err < 1.0 and err < before


def test_syn_deterministic(blob):
    moved = warp_volume(blob, DisplacementField.constant(blob.geometry, (0.6, 0, 0)))
    a = register_syn(_pair(blob), _pair(moved), schedule=SYN_SMALL)
    b = register_syn(_pair(blob), _pair(moved), schedule=SYN_SMALL)
    assert np.array_equal(a.pair.forward.vectors, b.pair.forward.vectors)


def test_schedule_validation():
    with pytest.raises(InvalidArgument):
        RegistrationSchedule(shrink_factors=(4, 2))
    with pytest.raises(InvalidArgument):
        RegistrationSchedule(shrink_factors=(2, 4, 1), smoothing_sigmas_voxels=(1, 1, 1), max_iterations=(1, 1, 1))
    with pytest.raises(InvalidArgument):
        ChannelPair(VolumeGrid(G, np.zeros(G.dims)), VolumeGrid(G, np.zeros(G.dims)), (0.7, 0.7))


def test_identity_affine_maps_points_to_themselves(rng):
    pts = rng.normal(size=(3, 5))
    assert np.array_equal(identity_affine((1, 2, 3)).apply(pts), pts)
