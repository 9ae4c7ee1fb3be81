"""Manifold arithmetic for rotations, rigid-body poses and unit bearings.

Rotations are plain 3x3 orthonormal numpy arrays.  Increments use the
left convention throughout the package: a rotation R incremented by a
3-vector xi becomes Exp(xi) @ R, and the difference of two rotations is
Log(R1 @ R2.T).  Translations, velocities and biases increment by plain
addition, bearing parameters increment in their 2D chart coordinates,
and inverse distances add as scalars.

Also provides the central-difference Jacobian used as the reference for
every analytic Jacobian in the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Switch to 4th-order series below this angle to avoid dividing by ~0.
SMALL_ANGLE = 1e-8


class LayoutError(ValueError):
    """Increment block does not match the variable it is applied to."""


class EvaluationError(RuntimeError):
    """A residual function returned non-finite values while probing."""


def hat(w):
    """Skew-symmetric matrix of a 3-vector: hat(w) @ v == cross(w, v)."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy],
                     [wz, 0.0, -wx],
                     [-wy, wx, 0.0]])


def vee(S):
    """Inverse of hat for a skew-symmetric matrix."""
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def so3_exp(w):
    """Rotation matrix for a rotation vector (Rodrigues, series near 0)."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    S = hat(w)
    if theta2 < SMALL_ANGLE ** 2:
        # sin(t)/t and (1-cos(t))/t^2 expanded to 4th order
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * S + b * (S @ S)


def so3_log(R):
    """Rotation vector of a rotation matrix, with norm <= pi.

    At half-turns the axis sign is fixed deterministically: the axis is
    taken from the largest diagonal entry of (R + I) and flipped so its
    first nonzero component is positive.
    """
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    w = vee((R - R.T) / 2.0)  # sin(theta) * axis
    sin_theta = np.linalg.norm(w)
    theta = np.arctan2(sin_theta, cos_theta)
    if theta < SMALL_ANGLE:
        return w * (1.0 + theta * theta / 6.0)
    if np.pi - theta > 1e-6:
        return w * (theta / sin_theta)
    # Near pi the antisymmetric part is too small; recover the axis from
    # the diagonal of the symmetric part.
    B = (R + np.eye(3)) / 2.0  # = axis axis^T near theta = pi
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.sqrt(B[k, k])
    if sin_theta > 1e-12:
        if axis @ w < 0.0:
            axis = -axis
    else:
        for c in axis:
            if abs(c) > 1e-12:
                if c < 0.0:
                    axis = -axis
                break
    return theta * axis


def so3_right_jacobian(w):
    """Right Jacobian of Exp: Exp(w + dw) ~= Exp(w) Exp(Jr(w) dw)."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    S = hat(w)
    if theta2 < SMALL_ANGLE ** 2:
        return np.eye(3) - 0.5 * S + S @ S / 6.0
    theta = np.sqrt(theta2)
    a = (1.0 - np.cos(theta)) / theta2
    b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) - a * S + b * (S @ S)


def so3_right_jacobian_inv(w):
    """Inverse of the right Jacobian of Exp."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    S = hat(w)
    if theta2 < SMALL_ANGLE ** 2:
        return np.eye(3) + 0.5 * S + S @ S / 12.0
    theta = np.sqrt(theta2)
    c = (1.0 / theta2
         - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta)))
    return np.eye(3) + 0.5 * S + c * (S @ S)


def rot_to_quat(R):
    """Quaternion (x, y, z, w) of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    q = np.empty(4)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q[3] = 0.25 * s
        q[0] = (R[2, 1] - R[1, 2]) / s
        q[1] = (R[0, 2] - R[2, 0]) / s
        q[2] = (R[1, 0] - R[0, 1]) / s
    else:
        k = int(np.argmax(np.diag(R)))
        i, j = (k + 1) % 3, (k + 2) % 3
        s = np.sqrt(R[k, k] - R[i, i] - R[j, j] + 1.0) * 2.0
        q[k] = 0.25 * s
        q[i] = (R[i, k] + R[k, i]) / s
        q[j] = (R[j, k] + R[k, j]) / s
        q[3] = (R[j, i] - R[i, j]) / s
    if q[3] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rot(q):
    """Rotation matrix of a quaternion (x, y, z, w)."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def is_rotation(R, tol=1e-9):
    R = np.asarray(R)
    return (np.abs(R @ R.T - np.eye(3)).max() < tol
            and abs(np.linalg.det(R) - 1.0) < tol)


@dataclass(frozen=True)
class Pose3:
    """Rigid-body pose: rotation matrix R and translation t (meters)."""

    R: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "Pose3":
        return Pose3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(T) -> "Pose3":
        T = np.asarray(T, dtype=float)
        return Pose3(T[:3, :3].copy(), T[:3, 3].copy())

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose3":
        Rt = self.R.T
        return Pose3(Rt, -Rt @ self.t)

    def transform(self, pts):
        pts = np.asarray(pts, dtype=float)
        return pts @ self.R.T + self.t


# --- bearing parametrization ------------------------------------------------
#
# A unit direction is encoded by two chart coordinates (u, v); decoding is
# (eta*u, eta*v, eta - 1) with eta = 2 / (1 + u^2 + v^2).  Every finite (u, v)
# maps onto the unit sphere with z > -1; (0, 0, -1) is the only direction
# without finite coordinates.

def bearing_decode(u, v):
    """Unit 3-vector for chart coordinates (u, v)."""
    eta = 2.0 / (1.0 + u * u + v * v)
    return np.array([eta * u, eta * v, eta - 1.0])


def bearing_encode(n):
    """Chart coordinates of a unit 3-vector; undefined at z = -1."""
    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n)
    denom = 1.0 + n[2]
    if denom <= 1e-12:
        raise ValueError("bearing_encode undefined for the -z direction")
    return n[0] / denom, n[1] / denom


def bearing_jacobian(u, v):
    """3x2 Jacobian of bearing_decode with respect to (u, v)."""
    s = 1.0 + u * u + v * v
    eta = 2.0 / s
    # d eta / du = -2 eta u / s, and similarly for v
    deta_du = -2.0 * eta * u / s
    deta_dv = -2.0 * eta * v / s
    return np.array([
        [eta + deta_du * u, deta_dv * u],
        [deta_du * v, eta + deta_dv * v],
        [deta_du, deta_dv],
    ])


# --- block increments ---------------------------------------------------------

ROTATION = "rotation"
TRANSLATION = "translation"
VELOCITY = "velocity"
BIAS = "bias"
BEARING = "bearing"
INV_DIST = "inv_dist"

BLOCK_DIMS = {
    ROTATION: 3,
    TRANSLATION: 3,
    VELOCITY: 3,
    BIAS: 3,
    BEARING: 2,
    INV_DIST: 1,
}


def _check_dim(kind, xi):
    dim = BLOCK_DIMS.get(kind)
    if dim is None:
        raise LayoutError(f"unknown block kind {kind!r}")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.shape != (dim,):
        raise LayoutError(f"{kind} expects a {dim}-vector, got shape {xi.shape}")
    return xi


def boxplus(kind, value, xi):
    """Apply an increment block to one state component."""
    xi = _check_dim(kind, xi)
    if kind == ROTATION:
        return so3_exp(xi) @ value
    if kind == INV_DIST:
        return float(value) + xi[0]
    return np.asarray(value, dtype=float) + xi


def boxminus(kind, a, b):
    """Increment block taking component b to component a."""
    if kind == ROTATION:
        return so3_log(np.asarray(a) @ np.asarray(b).T)
    if kind == INV_DIST:
        return np.array([float(a) - float(b)])
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.shape != (BLOCK_DIMS[kind],):
        raise LayoutError(f"{kind} components have shapes {a.shape}, {b.shape}")
    return a - b


class BlockLayout:
    """Ordered variable blocks of a stacked increment vector.

    Each block is (variable id, kind); offsets are assigned in order.
    """

    def __init__(self, blocks):
        self.blocks = []  # (var_id, kind, offset, dim)
        self._index = {}
        off = 0
        for var_id, kind in blocks:
            if kind not in BLOCK_DIMS:
                raise LayoutError(f"unknown block kind {kind!r}")
            if var_id in self._index:
                raise LayoutError(f"duplicate variable id {var_id!r}")
            dim = BLOCK_DIMS[kind]
            self._index[var_id] = len(self.blocks)
            self.blocks.append((var_id, kind, off, dim))
            off += dim
        self.dim = off

    def __contains__(self, var_id):
        return var_id in self._index

    def __len__(self):
        return len(self.blocks)

    def block(self, var_id):
        return self.blocks[self._index[var_id]]

    def slice_of(self, var_id):
        _, _, off, dim = self.block(var_id)
        return slice(off, off + dim)

    def ids(self):
        return [b[0] for b in self.blocks]

    def indices_of(self, var_ids):
        """Flat index array covering the given variables, in layout order."""
        idx = []
        for var_id in var_ids:
            _, _, off, dim = self.block(var_id)
            idx.extend(range(off, off + dim))
        return np.array(idx, dtype=int)


def numeric_jacobian(f, x, oplus, dim, h=1e-6, ominus=None):
    """Central-difference Jacobian of f at x under a retraction.

    f maps a state to a residual vector, oplus(x, xi) applies a stacked
    increment of length dim.  If the residual lives on a manifold, pass
    ominus(a, b) to evaluate differences; the default is subtraction.
    Raises EvaluationError naming the increment index if a probe returns
    non-finite values.
    """
    if ominus is None:
        def ominus(a, b):
            return np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    cols = []
    for k in range(dim):
        xi = np.zeros(dim)
        xi[k] = h
        fp = f(oplus(x, xi))
        xi[k] = -h
        fm = f(oplus(x, xi))
        col = ominus(fp, fm) / (2.0 * h)
        if not np.all(np.isfinite(col)):
            raise EvaluationError(f"non-finite residual probing increment {k}")
        cols.append(np.atleast_1d(col))
    return np.column_stack(cols)
