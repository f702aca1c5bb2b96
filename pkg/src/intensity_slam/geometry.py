"""Rigid-body transforms, tangent-space maps and closed-form weighted alignment.

Conventions
-----------
* Quaternions are stored ``(x, y, z, w)`` and kept at unit norm.
* A pose maps points from its own frame into the parent frame:
  ``x_parent = R @ x + t``.
* Tangent vectors ("twists") are 6-vectors ``[phi, rho]``: a rotation vector
  (radians) followed by a translation (meters). ``exp`` is the decoupled
  SO(3) x R^3 map, so ``log(pose) == [rotvec(R), t]``.
* Optimizers perturb on the left: ``retract(p, d) = exp(d) @ p``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateConfiguration, InvalidInput

_EPS = 1e-12


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def quat_multiply(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = math.sqrt(float(q @ q))
    if n < _EPS or not math.isfinite(n):
        raise InvalidInput(f"cannot normalize quaternion {q!r}")
    q = q / n
    # canonical hemisphere keeps log() continuous and comparisons stable
    if q[3] < 0.0:
        q = -q
    return q


def quat_to_matrix(q):
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def quat_from_matrix(R):
    """Shepperd's method; robust for every rotation including 180 degrees."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return quat_normalize(q)


def quat_from_rotvec(phi):
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(float(phi @ phi))
    half = 0.5 * theta
    if theta < 1e-8:
        # second-order Taylor of sin(half)/theta
        k = 0.5 - theta * theta / 48.0
    else:
        k = math.sin(half) / theta
    return quat_normalize([phi[0] * k, phi[1] * k, phi[2] * k, math.cos(half)])


def quat_to_rotvec(q):
    q = quat_normalize(q)
    v = q[:3]
    s = math.sqrt(float(v @ v))
    if s < 1e-8:
        return 2.0 * v / q[3]
    theta = 2.0 * math.atan2(s, q[3])
    return v * (theta / s)


def so3_exp(phi):
    return quat_to_matrix(quat_from_rotvec(phi))


def so3_log(R):
    return quat_to_rotvec(quat_from_matrix(R))


def so3_right_jacobian_inv(phi):
    """Inverse right Jacobian of SO(3): Log(Exp(phi) Exp(d)) ~ phi + Jr^-1(phi) d."""
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(float(phi @ phi))
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    c = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + c * (K @ K)


def so3_left_jacobian_inv(phi):
    return so3_right_jacobian_inv(-np.asarray(phi, dtype=float))


class Se3Pose:
    """Rigid transform stored as a unit quaternion plus a translation."""

    __slots__ = ("_q", "_t", "_R")

    def __init__(self, rotation=(0.0, 0.0, 0.0, 1.0), translation=(0.0, 0.0, 0.0)):
        self._q = quat_normalize(rotation)
        self._t = np.array(translation, dtype=float).reshape(3)
        self._R = None
        if not np.all(np.isfinite(self._t)):
            raise InvalidInput("pose translation must be finite")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rt(cls, R, t):
        return cls(quat_from_matrix(R), t)

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @property
    def quaternion(self):
        return self._q.copy()

    @property
    def translation(self):
        return self._t.copy()

    @property
    def R(self):
        if self._R is None:
            self._R = quat_to_matrix(self._q)
        return self._R

    @property
    def t(self):
        return self._t

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self._t
        return T

    def inverse(self):
        qi = np.array([-self._q[0], -self._q[1], -self._q[2], self._q[3]])
        return Se3Pose(qi, -(self.R.T @ self._t))

    def compose(self, other):
        """``self @ other``: apply ``other`` first, then ``self``."""
        return Se3Pose(quat_multiply(self._q, other._q), self.R @ other._t + self._t)

    __matmul__ = compose

    def transform_point(self, x):
        return self.R @ np.asarray(x, dtype=float) + self._t

    def transform_points(self, pts):
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        return pts @ self.R.T + self._t

    def log(self):
        return np.concatenate([quat_to_rotvec(self._q), self._t])

    @classmethod
    def exp(cls, twist):
        twist = np.asarray(twist, dtype=float).reshape(6)
        return cls(quat_from_rotvec(twist[:3]), twist[3:])

    def retract(self, delta):
        """Left-multiplicative update ``exp(delta) @ self``."""
        return Se3Pose.exp(delta).compose(self)

    def rotation_angle(self):
        return float(np.linalg.norm(quat_to_rotvec(self._q)))

    def is_finite(self):
        return bool(np.all(np.isfinite(self._q)) and np.all(np.isfinite(self._t)))

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self._q)
        t = ", ".join(f"{v:.6g}" for v in self._t)
        return f"Se3Pose(q=[{q}], t=[{t}])"


def compose(a, b):
    return a.compose(b)


def inverse(p):
    return p.inverse()


def transform_point(p, x):
    return p.transform_point(x)


def exp(twist):
    return Se3Pose.exp(twist)


def log(p):
    return p.log()


def rotz(angle):
    return Se3Pose(quat_from_rotvec([0.0, 0.0, angle]))


def rotation_error(a, b):
    """Angle (rad) of ``a^-1 b``'s rotation."""
    return a.inverse().compose(b).rotation_angle()


def translation_error(a, b):
    return float(np.linalg.norm(a.t - b.t))


def transform_point_jacobian(p, x):
    """d(exp(d) @ p)(x) / dd at d = 0, a 3x6 matrix ``[-[y]x, I]``."""
    y = p.transform_point(x)
    J = np.empty((3, 6))
    J[:, :3] = -skew(y)
    J[:, 3:] = np.eye(3)
    return J


def weighted_rigid_align(src, dst, weights=None, allow_degenerate=False):
    """Closed-form (R, T) minimizing ``sum w_n |dst_n - (R src_n + T)|^2``.

    Weighted centroids are removed, the cross-covariance is decomposed by SVD
    and the smallest singular direction is flipped when the orthogonal factor
    is a reflection.

    Raises:
        DegenerateConfiguration: the weighted source points are collinear or
            coincident, so the rotation is not determined. With
            ``allow_degenerate`` one of the equally good minimizers is
            returned instead (trajectory alignment of straight paths).
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise InvalidInput(f"src {src.shape} and dst {dst.shape} differ in shape")
    n = len(src)
    if n < 3:
        raise InvalidInput(f"need at least 3 correspondences, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(n)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidInput("weights must be finite and nonnegative")
    wsum = w.sum()
    if wsum <= 0.0:
        raise DegenerateConfiguration("all weights are zero")
    wn = w / wsum
    mu_s = wn @ src
    mu_d = wn @ dst
    sc = src - mu_s
    dc = dst - mu_d
    cov_s = (sc * wn[:, None]).T @ sc
    sv = np.linalg.svd(cov_s, compute_uv=False)
    if not allow_degenerate and (sv[0] <= 1e-24 or sv[1] <= 1e-12 * sv[0]):
        raise DegenerateConfiguration("weighted source points are collinear or coincident")
    H = (sc * wn[:, None]).T @ dc
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0.0:
        D[2, 2] = -1.0
    R = Vt.T @ D @ U.T
    T = mu_d - R @ mu_s
    return Se3Pose.from_rt(R, T)
