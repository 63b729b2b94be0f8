"""SE(3) kernel.

Twists are flat 6-vectors ordered ``(omega, v)``: rotational part first,
translational part second. Every function accepts arbitrary leading batch
dimensions, so ``x`` may be ``(6,)`` or ``(n, 6)`` and a :class:`Pose` may hold
``R`` of shape ``(3, 3)`` or ``(n, 3, 3)``.

Increments are applied on the right (body frame): ``X * exp(eta^)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# below this angle the sinc-type coefficients switch to truncated series
SERIES_EPS = 1e-2
# log is refused within this distance of a half-turn
PI_MARGIN = 1e-6
SKEW_TOL = 1e-9


class NearSingularLogError(ValueError):
    """Rotation angle too close to pi for a stable logarithm."""


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t``; may be batched."""

    R: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls, n: int | None = None) -> "Pose":
        if n is None:
            return cls(np.eye(3), np.zeros(3))
        return cls(np.tile(np.eye(3), (n, 1, 1)), np.zeros((n, 3)))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[..., :3, :3].copy(), T[..., :3, 3].copy())

    def matrix(self) -> np.ndarray:
        shape = self.t.shape[:-1]
        T = np.zeros(shape + (4, 4))
        T[..., :3, :3] = self.R
        T[..., :3, 3] = self.t
        T[..., 3, 3] = 1.0
        return T

    def __len__(self) -> int:
        return self.t.shape[0]

    def __getitem__(self, idx) -> "Pose":
        return Pose(self.R[idx], self.t[idx])

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return inverse(self)

    def copy(self) -> "Pose":
        return Pose(self.R.copy(), self.t.copy())

    def is_valid(self, tol: float = 1e-9) -> bool:
        RtR = np.swapaxes(self.R, -1, -2) @ self.R
        orth = np.linalg.norm(RtR - np.eye(3), axis=(-2, -1))
        det = np.linalg.det(self.R)
        return bool(np.all(orth <= tol) and np.all(np.abs(det - 1.0) <= tol)
                    and np.all(np.isfinite(self.t)))


def compose(A: Pose, B: Pose) -> Pose:
    return Pose(A.R @ B.R, (A.R @ B.t[..., None])[..., 0] + A.t)


def inverse(A: Pose) -> Pose:
    Rt = np.swapaxes(A.R, -1, -2)
    return Pose(Rt, -(Rt @ A.t[..., None])[..., 0])


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in Frobenius norm (SVD projection)."""
    U, _, Vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(U @ Vt))
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    return U @ Vt


def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    S = np.zeros(w.shape[:-1] + (3, 3))
    S[..., 0, 1] = -w[..., 2]
    S[..., 0, 2] = w[..., 1]
    S[..., 1, 0] = w[..., 2]
    S[..., 1, 2] = -w[..., 0]
    S[..., 2, 0] = -w[..., 1]
    S[..., 2, 1] = w[..., 0]
    return S


def hat(x: np.ndarray) -> np.ndarray:
    """6-vector ``(omega, v)`` to a 4x4 se(3) matrix."""
    x = np.asarray(x, dtype=float)
    A = np.zeros(x.shape[:-1] + (4, 4))
    A[..., :3, :3] = skew(x[..., :3])
    A[..., :3, 3] = x[..., 3:]
    return A


def vee(A: np.ndarray, tol: float = SKEW_TOL) -> np.ndarray:
    """Inverse of :func:`hat`.

    The rotational block is projected onto its skew part; inputs whose
    symmetric part or bottom row exceed ``tol`` are rejected.
    """
    A = np.asarray(A, dtype=float)
    W = A[..., :3, :3]
    sym = 0.5 * (W + np.swapaxes(W, -1, -2))
    if np.any(np.abs(sym) > tol) or np.any(np.abs(A[..., 3, :]) > tol):
        raise ValueError("matrix is not in se(3) within tolerance")
    W = 0.5 * (W - np.swapaxes(W, -1, -2))
    out = np.empty(A.shape[:-2] + (6,))
    out[..., 0] = W[..., 2, 1]
    out[..., 1] = W[..., 0, 2]
    out[..., 2] = W[..., 1, 0]
    out[..., 3:] = A[..., :3, 3]
    return out


def _series(theta, big, coeffs):
    """Evaluate ``big(theta)`` away from zero and a series in theta^2 near it."""
    theta = np.asarray(theta, dtype=float)
    small = theta < SERIES_EPS
    if not small.any():
        return big(theta)
    safe = np.where(small, 1.0, theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = big(safe)
    th2 = theta * theta
    ser = np.zeros_like(theta)
    for c in reversed(coeffs):
        ser = ser * th2 + c
    return np.where(small, ser, val)


def _coef_a(th):  # sin(th)/th
    return _series(th, lambda s: np.sin(s) / s,
                   [1.0, -1 / 6, 1 / 120, -1 / 5040, 1 / 362880])


def _coef_b(th):  # (1 - cos th)/th^2
    return _series(th, lambda s: (1 - np.cos(s)) / s**2,
                   [0.5, -1 / 24, 1 / 720, -1 / 40320, 1 / 3628800])


def _coef_c(th):  # (th - sin th)/th^3
    return _series(th, lambda s: (s - np.sin(s)) / s**3,
                   [1 / 6, -1 / 120, 1 / 5040, -1 / 362880, 1 / 39916800])


def _coef_jinv(th):  # 1/th^2 - (1 + cos th)/(2 th sin th)
    return _series(th, lambda s: 1 / s**2 - (1 + np.cos(s)) / (2 * s * np.sin(s)),
                   [1 / 12, 1 / 720, 1 / 30240, 1 / 1209600, 1 / 47900160])


def _coef_q2(th):  # (th^2 + 2 cos th - 2)/(2 th^4)
    return _series(th, lambda s: (s**2 + 2 * np.cos(s) - 2) / (2 * s**4),
                   [1 / 24, -1 / 720, 1 / 40320, -1 / 3628800, 1 / 479001600])


def _coef_q3(th):  # (2 th - 3 sin th + th cos th)/(2 th^5)
    return _series(th, lambda s: (2 * s - 3 * np.sin(s) + s * np.cos(s)) / (2 * s**5),
                   [1 / 120, -1 / 2520, 1 / 120960, -1 / 9979200, 1 / 1245404160])


def exp_so3(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    th = np.linalg.norm(w, axis=-1)
    W = skew(w)
    a = _coef_a(th)[..., None, None]
    b = _coef_b(th)[..., None, None]
    return np.eye(3) + a * W + b * (W @ W)


def log_so3(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos = np.clip(0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    th = np.arccos(cos)
    if np.any(th > np.pi - PI_MARGIN):
        raise NearSingularLogError(
            f"rotation angle {float(np.max(th)):.9f} is within {PI_MARGIN} of pi")
    skew_part = np.stack([R[..., 2, 1] - R[..., 1, 2],
                          R[..., 0, 2] - R[..., 2, 0],
                          R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    # sin(th)/th, so w = skew_part / (2 * sinc)
    return skew_part / (2.0 * _coef_a(th))[..., None]


def left_jacobian_so3(w: np.ndarray) -> np.ndarray:
    th = np.linalg.norm(w, axis=-1)
    W = skew(w)
    return np.eye(3) + _coef_b(th)[..., None, None] * W + _coef_c(th)[..., None, None] * (W @ W)


def left_jacobian_so3_inv(w: np.ndarray) -> np.ndarray:
    th = np.linalg.norm(w, axis=-1)
    W = skew(w)
    return np.eye(3) - 0.5 * W + _coef_jinv(th)[..., None, None] * (W @ W)


def exp_se3(x: np.ndarray) -> Pose:
    x = np.asarray(x, dtype=float)
    w, v = x[..., :3], x[..., 3:]
    th = np.sqrt(np.sum(w * w, axis=-1))
    W = skew(w)
    W2 = W @ W
    b = _coef_b(th)[..., None, None]
    R = np.eye(3) + _coef_a(th)[..., None, None] * W + b * W2
    V = np.eye(3) + b * W + _coef_c(th)[..., None, None] * W2
    return Pose(R, (V @ v[..., None])[..., 0])


def log_se3(X: Pose) -> np.ndarray:
    w = log_so3(X.R)
    Vinv = left_jacobian_so3_inv(w)
    return np.concatenate([w, (Vinv @ X.t[..., None])[..., 0]], axis=-1)


def adjoint(X: Pose) -> np.ndarray:
    """Matrix of ``eta -> vee(X hat(eta) X^-1)``."""
    shape = X.t.shape[:-1]
    Ad = np.zeros(shape + (6, 6))
    Ad[..., :3, :3] = X.R
    Ad[..., 3:, 3:] = X.R
    Ad[..., 3:, :3] = skew(X.t) @ X.R
    return Ad


def little_ad(xi: np.ndarray) -> np.ndarray:
    """Matrix of ``eta -> [xi, eta]``."""
    xi = np.asarray(xi, dtype=float)
    Wx = skew(xi[..., :3])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Wx
    out[..., 3:, 3:] = Wx
    out[..., 3:, :3] = skew(xi[..., 3:])
    return out


def coadjoint_apply(xi: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """``ad*_xi mu = little_ad(xi)^T mu``, computed without forming the matrix."""
    xi = np.asarray(xi, dtype=float)
    mu = np.asarray(mu, dtype=float)
    w, v = xi[..., :3], xi[..., 3:]
    m_w, m_v = mu[..., :3], mu[..., 3:]
    # transpose of [[W, 0], [V, W]] with W^T = -W
    return -np.concatenate([_cross(w, m_w) + _cross(v, m_v), _cross(w, m_v)], axis=-1)


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross carries a lot of per-call overhead for short stacks
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def _q_block(x: np.ndarray) -> np.ndarray:
    w, v = x[..., :3], x[..., 3:]
    th = np.linalg.norm(w, axis=-1)
    P = skew(w)
    Rh = skew(v)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    c1 = _coef_c(th)[..., None, None]
    c2 = _coef_q2(th)[..., None, None]
    c3 = _coef_q3(th)[..., None, None]
    return (0.5 * Rh
            + c1 * (PR + RP + PRP)
            + c2 * (P @ PR + RP @ P - 3.0 * PRP)
            + c3 * (PRP @ P + P @ PRP))


def left_jacobian(x: np.ndarray) -> np.ndarray:
    """SE(3) left Jacobian: ``exp((x + dx)^) ~ exp((J dx)^) exp(x^)``."""
    x = np.asarray(x, dtype=float)
    J = left_jacobian_so3(x[..., :3])
    out = np.zeros(x.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., 3:, :3] = _q_block(x)
    return out


def left_jacobian_inv(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    Ji = left_jacobian_so3_inv(x[..., :3])
    out = np.zeros(x.shape[:-1] + (6, 6))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., 3:, :3] = -Ji @ _q_block(x) @ Ji
    return out


def right_jacobian_inv(x: np.ndarray) -> np.ndarray:
    """``log(exp(x^) exp(d^)) ~ x + Jr^-1(x) d`` for small ``d``."""
    return left_jacobian_inv(-np.asarray(x, dtype=float))
