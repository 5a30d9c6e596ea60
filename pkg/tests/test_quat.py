import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from lrloe import quat

finite = st.floats(-1.0, 1.0, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)
vec4 = arrays(np.float64, 4, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


def to_scipy(q):
    return Rotation.from_quat(np.roll(q, -1, axis=-1))


def random_quats(rng, n):
    return quat.normalize(rng.standard_normal((n, 4)))


def test_identity_product():
    q = quat.normalize(np.array([0.3, -0.2, 0.5, 0.1]))
    assert np.allclose(quat.hamilton(quat.IDENTITY, q), q, atol=1e-15)


def test_inverse_product():
    q = quat.normalize(np.array([0.3, -0.2, 0.5, 0.1]))
    assert np.allclose(quat.hamilton(q, quat.conj(q)), quat.IDENTITY, atol=1e-15)


def test_basis_product_i_times_j():
    out = quat.hamilton(np.array([0.0, 1, 0, 0]), np.array([0.0, 0, 1, 0]))
    assert np.array_equal(out, [0.0, 0, 0, 1])


def test_hamilton_matches_scipy_composition():
    rng = np.random.default_rng(0)
    a, b = random_quats(rng, 200), random_quats(rng, 200)
    ref = (to_scipy(a) * to_scipy(b)).as_matrix()
    assert np.allclose(quat.to_rotation(quat.hamilton(a, b)), ref, atol=1e-12)


def test_conj_cases():
    assert np.array_equal(quat.conj(quat.IDENTITY), quat.IDENTITY)
    assert np.array_equal(quat.conj(np.array([0.0, 1, 0, 0])), [0.0, -1, 0, 0])
    q = quat.normalize(np.array([0.1, 0.2, 0.3, 0.4]))
    assert np.array_equal(quat.conj(quat.conj(q)), q)


def test_exp_closed_forms():
    assert np.array_equal(quat.exp_q(np.zeros(3)), quat.IDENTITY)
    assert np.allclose(quat.exp_q(np.array([math.pi / 2, 0, 0])), [0, 1, 0, 0], atol=1e-16)
    step = quat.exp_q(0.5 * 0.01 * np.array([1.0, 0, 0]))
    assert np.allclose(step, [math.cos(0.005), math.sin(0.005), 0, 0], atol=1e-17)


def test_log_closed_forms():
    assert np.array_equal(quat.log_q(quat.IDENTITY), np.zeros(3))
    assert np.allclose(quat.log_q(np.array([0.0, 1, 0, 0])), [math.pi / 2, 0, 0], atol=1e-15)


def test_exp_log_round_trip_1000():
    rng = np.random.default_rng(1)
    v = rng.uniform(-1, 1, (3000, 3))
    v = v[np.linalg.norm(v, axis=1) < 1][:1000]
    assert np.max(np.abs(quat.log_q(quat.exp_q(v)) - v)) < 1e-10


def test_log_small_angle_series():
    v = np.array([1e-9, -2e-9, 3e-10])
    assert np.allclose(quat.log_q(quat.exp_q(v)), v, rtol=1e-12, atol=0)


@given(vec4)
def test_log_double_cover(q):
    q = quat.normalize(q)
    assert np.allclose(quat.log_q(q), quat.log_q(-q), atol=1e-12)


def test_rotation_matrix_closed_forms():
    assert np.array_equal(quat.to_rotation(quat.IDENTITY), np.eye(3))
    assert np.allclose(quat.to_rotation(np.array([0.0, 0, 0, 1])), np.diag([-1.0, -1, 1]), atol=1e-15)


def test_rotation_matches_scipy_and_is_orthogonal():
    q = random_quats(np.random.default_rng(2), 500)
    R = quat.to_rotation(q)
    assert np.allclose(R, to_scipy(q).as_matrix(), atol=1e-12)
    assert np.allclose(np.swapaxes(R, -1, -2) @ R, np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_homomorphism():
    rng = np.random.default_rng(3)
    a, b = random_quats(rng, 1000), random_quats(rng, 1000)
    lhs = quat.to_rotation(quat.hamilton(a, b))
    rhs = quat.to_rotation(a) @ quat.to_rotation(b)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_euler_closed_forms():
    assert np.allclose(quat.to_euler_zyx(quat.IDENTITY), 0.0)
    assert np.allclose(quat.to_euler_zyx(np.array([0.0, 0, 0, 1])), [math.pi, 0, 0], atol=1e-15)


def test_euler_matches_scipy_intrinsic_zyx():
    q = random_quats(np.random.default_rng(4), 300)
    ref = to_scipy(q).as_euler("ZYX")
    ours = quat.to_euler_zyx(q)
    d = (ours - ref + math.pi) % (2 * math.pi) - math.pi
    assert np.max(np.abs(d)) < 1e-9


def test_euler_round_trip_1000():
    rng = np.random.default_rng(5)
    ypr = np.column_stack(
        [rng.uniform(-3.1, 3.1, 1000), rng.uniform(-1.5, 1.5, 1000), rng.uniform(-3.1, 3.1, 1000)]
    )
    back = quat.to_euler_zyx(quat.from_euler_zyx(ypr))
    assert np.max(np.abs(back - ypr)) < 1e-9


def test_euler_gimbal_lock_sets_roll_zero_and_reconstructs():
    q = quat.from_euler_zyx(np.array([0.4, math.pi / 2, 0.3]))
    ypr = quat.to_euler_zyx(q)
    assert ypr[2] == 0.0
    assert quat.geodesic(quat.from_euler_zyx(ypr), q) < 1e-7


def test_rotvec_closed_forms():
    assert np.array_equal(quat.rotvec_quat(np.zeros(3)), quat.IDENTITY)
    assert np.allclose(quat.rotvec_quat(np.array([math.pi, 0, 0])), [0, 1, 0, 0], atol=1e-16)


def test_rotvec_round_trip_and_scipy():
    rng = np.random.default_rng(6)
    phi = rng.standard_normal((2000, 3))
    phi = phi / np.linalg.norm(phi, axis=1, keepdims=True) * rng.uniform(0, math.pi - 1e-6, (2000, 1))
    q = quat.rotvec_quat(phi)
    assert np.max(np.abs(quat.quat_rotvec(q) - phi)) < 1e-10
    assert np.allclose(quat.to_rotation(q), Rotation.from_rotvec(phi).as_matrix(), atol=1e-12)


def test_norm_preserved_over_long_chain():
    rng = np.random.default_rng(7)
    steps = quat.exp_q(rng.uniform(-0.5, 0.5, (20000, 3)))
    q = quat.IDENTITY.copy()
    worst = 0.0
    for s in steps:
        q = quat.hamilton(q, s)
        worst = max(worst, abs(np.linalg.norm(q) - 1.0))
    assert worst < 1e-7


@given(vec3, vec3)
@settings(max_examples=200)
def test_rotate_inverse_pair(v, phi):
    q = quat.rotvec_quat(phi)
    assert np.allclose(quat.rotate_inv(q, quat.rotate(q, v)), v, atol=1e-12)


@given(vec4, vec4)
@settings(max_examples=200)
def test_geodesic_symmetric_and_matches_scipy(a, b):
    a, b = quat.normalize(a), quat.normalize(b)
    ref = (to_scipy(a) * to_scipy(b).inv()).magnitude()
    assert quat.geodesic(a, b) == pytest.approx(quat.geodesic(b, a), abs=1e-12)
    assert quat.geodesic(a, b) == pytest.approx(ref, abs=1e-7)


def test_skew_is_cross_product():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal((2, 50, 3))
    assert np.allclose(np.einsum("...ij,...j->...i", quat.skew(a), b), np.cross(a, b))


@given(vec3.filter(lambda v: np.linalg.norm(v) > 1e-3), vec3.filter(lambda v: np.linalg.norm(v) > 1e-3))
@settings(max_examples=200)
def test_from_two_vectors_aligns_directions(a, b):
    phi = quat.from_two_vectors(a, b)
    out = quat.rotate(quat.rotvec_quat(phi), a / np.linalg.norm(a))
    cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    if cos > -1 + 1e-6:
        assert np.allclose(out, b / np.linalg.norm(b), atol=1e-6)
