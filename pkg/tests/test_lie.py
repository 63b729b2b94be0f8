import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import expm, logm
from scipy.spatial.transform import Rotation

from cord.lie import (NearSingularLogError, Pose, SERIES_EPS, adjoint, coadjoint_apply, exp_se3,
                      exp_so3, hat, left_jacobian, left_jacobian_inv, little_ad, log_se3, log_so3,
                      orthonormalize, right_jacobian_inv, vee)

finite = st.floats(-3, 3, allow_nan=False)
twist = arrays(np.float64, 6, elements=finite)
# rotation part kept below pi so log is well defined
small_twist = arrays(np.float64, 6, elements=st.floats(-1.7, 1.7, allow_nan=False))


def test_exp_matches_matrix_exponential_frozen():
    x = np.array([0.1, -0.2, 0.3, 1.0, 2.0, -0.5])
    # scipy.linalg.expm(hat(x)), top 3 rows
    expected = np.array([
        [0.9357548032779189, -0.30293271340263705, -0.18054007669439773, 0.7222848714831539],
        [0.28316496056507373, 0.9505806179060915, -0.12733457491763028, 2.141522099874692],
        [0.2101917059507428, 0.06803131640494, 0.9752903089530457, -0.3130802239112563]])
    np.testing.assert_allclose(exp_se3(x).matrix()[:3], expected, atol=1e-14)


@given(twist)
def test_hat_vee_roundtrip_exact(x):
    assert np.array_equal(vee(hat(x)), x)


@given(twist)
def test_exp_agrees_with_expm(x):
    np.testing.assert_allclose(exp_se3(x).matrix(), expm(hat(x)), atol=1e-11)


@given(arrays(np.float64, 3, elements=finite))
def test_exp_so3_matches_rotvec(w):
    np.testing.assert_allclose(exp_so3(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-13)


@given(small_twist)
def test_log_inverts_exp(x):
    if np.linalg.norm(x[:3]) > np.pi - 1e-3:
        return
    np.testing.assert_allclose(log_se3(exp_se3(x)), x, atol=1e-9)


def test_log_matches_logm():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=6)
        X = exp_se3(x)
        np.testing.assert_allclose(hat(log_se3(X)), np.real(logm(X.matrix())), atol=1e-9)


def test_series_branch_is_continuous():
    # straddle the series / closed-form switch
    d = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
    for th in (SERIES_EPS * (1 - 1e-9), SERIES_EPS * (1 + 1e-9), 1e-7, 1e-12, 0.0):
        x = np.concatenate([th * d, [0.4, -1.0, 2.0]])
        np.testing.assert_allclose(exp_se3(x).matrix(), expm(hat(x)), atol=1e-15)
        np.testing.assert_allclose(log_se3(exp_se3(x)), x, atol=1e-14)


def test_log_refuses_near_half_turn():
    R = exp_so3(np.array([np.pi - 1e-9, 0.0, 0.0]))
    with pytest.raises(NearSingularLogError):
        log_so3(R)


def test_vee_rejects_non_algebra_input():
    A = hat(np.ones(6))
    A[0, 0] = 1e-3
    with pytest.raises(ValueError):
        vee(A)


@given(twist, twist)
def test_adjoint_conjugation(x, eta):
    X = exp_se3(x)
    lhs = (X @ exp_se3(eta) @ X.inverse()).matrix()
    np.testing.assert_allclose(lhs, exp_se3(adjoint(X) @ eta).matrix(), atol=1e-9)


@given(twist, twist)
def test_little_ad_is_bracket(xi, eta):
    A, B = hat(xi), hat(eta)
    np.testing.assert_allclose(hat(little_ad(xi) @ eta), A @ B - B @ A, atol=1e-12)


@given(twist, twist, twist)
def test_coadjoint_duality(xi, mu, eta):
    lhs = coadjoint_apply(xi, mu) @ eta
    rhs = mu @ (little_ad(xi) @ eta)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))


@given(twist, arrays(np.float64, (6, 6), elements=st.floats(-2, 2, allow_nan=False)))
def test_coadjoint_does_no_work(xi, B):
    M = B @ B.T + np.eye(6)
    assert abs(xi @ coadjoint_apply(xi, M @ xi)) <= 1e-10 * max(1.0, xi @ M @ xi)


def test_batched_matches_loop(rng):
    x = rng.normal(size=(7, 6))
    X = exp_se3(x)
    for k in range(7):
        np.testing.assert_allclose(X.matrix()[k], exp_se3(x[k]).matrix(), atol=0)
    np.testing.assert_allclose(log_se3(X), np.stack([log_se3(X[k]) for k in range(7)]), atol=0)


@given(arrays(np.float64, 6, elements=st.floats(-1.5, 1.5, allow_nan=False)))
def test_left_jacobian_by_differences(x):
    h = 1e-6
    J = left_jacobian(x)
    Jn = np.zeros((6, 6))
    for i in range(6):
        d = np.zeros(6)
        d[i] = h
        P = exp_se3(x + d) @ exp_se3(x).inverse()
        Q = exp_se3(x - d) @ exp_se3(x).inverse()
        Jn[:, i] = (log_se3(P) - log_se3(Q)) / (2 * h)
    np.testing.assert_allclose(J, Jn, atol=1e-6)
    np.testing.assert_allclose(left_jacobian_inv(x) @ J, np.eye(6), atol=1e-10)


def test_right_jacobian_inverse_first_order(rng):
    for _ in range(10):
        x = rng.normal(scale=0.8, size=6)
        d = 1e-7 * rng.normal(size=6)
        exact = log_se3(exp_se3(x) @ exp_se3(d))
        np.testing.assert_allclose(exact, x + right_jacobian_inv(x) @ d, atol=1e-12)


def test_pose_algebra(rng):
    X = exp_se3(rng.normal(size=(5, 6)))
    I = X @ X.inverse()
    np.testing.assert_allclose(I.matrix(), np.tile(np.eye(4), (5, 1, 1)), atol=1e-12)
    assert X.is_valid()
    assert Pose.from_matrix(X.matrix()).is_valid()
    assert not Pose(2 * X.R, X.t).is_valid()


def test_orthonormalize_projects_to_rotation(rng):
    R = exp_so3(rng.normal(size=(4, 3))) + 1e-3 * rng.normal(size=(4, 3, 3))
    Q = orthonormalize(R)
    np.testing.assert_allclose(np.swapaxes(Q, -1, -2) @ Q, np.tile(np.eye(3), (4, 1, 1)), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(Q), 1.0)
