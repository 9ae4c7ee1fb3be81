"""Inertial preintegration between two frames.

Consecutive gyro/accel samples are compressed into a pseudo-measurement
(dR, dv, dp) with a propagated 9x9 covariance (block order: rotation,
velocity, position), first-order bias Jacobians, and the bias values the
integration was linearized at.  The weighted residual couples the delta
to the navigation states at both ends.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom
from ._kernels import imu_propagate_batch


class NumericalError(RuntimeError):
    """A covariance or information matrix could not be inverted."""


@dataclass
class ImuNoise:
    """Discrete per-sample noise variances and the world gravity vector."""

    accel_var: np.ndarray  # (3,) diagonal of the accel white noise, (m/s^2)^2
    gyro_var: np.ndarray   # (3,) diagonal of the gyro white noise, (rad/s)^2
    gravity: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        self.accel_var = np.asarray(self.accel_var, dtype=float)
        self.gyro_var = np.asarray(self.gyro_var, dtype=float)
        self.gravity = np.asarray(self.gravity, dtype=float)
        if np.any(self.accel_var <= 0) or np.any(self.gyro_var <= 0):
            raise ValueError("noise variances must be strictly positive")


@dataclass
class NavState:
    """IMU pose (world from body), world velocity and the two biases."""

    pose: geom.Pose3
    velocity: np.ndarray
    bias_a: np.ndarray
    bias_g: np.ndarray

    @staticmethod
    def identity() -> "NavState":
        return NavState(geom.Pose3.identity(), np.zeros(3), np.zeros(3),
                        np.zeros(3))

    def copy(self) -> "NavState":
        return NavState(geom.Pose3(self.pose.R.copy(), self.pose.t.copy()),
                        self.velocity.copy(), self.bias_a.copy(),
                        self.bias_g.copy())

    def retract(self, xi) -> "NavState":
        """Apply a 15-dim increment (rot, trans, vel, bias_a, bias_g)."""
        xi = np.asarray(xi, dtype=float)
        return NavState(
            geom.Pose3(geom.so3_exp(xi[0:3]) @ self.pose.R,
                       self.pose.t + xi[3:6]),
            self.velocity + xi[6:9],
            self.bias_a + xi[9:12],
            self.bias_g + xi[12:15],
        )


class PreintegratedImu:
    """Running delta over one inter-frame span.

    Integration is sequential; the object is treated as immutable once the
    owning factor is built.  A fresh instance is the identity delta with
    zero covariance and zero bias Jacobians.
    """

    def __init__(self, bias_lin_a, bias_lin_g):
        self.dR = np.eye(3)
        self.dv = np.zeros(3)
        self.dp = np.zeros(3)
        self.cov = np.zeros((9, 9))
        self.J_a = np.zeros((9, 3))
        self.J_g = np.zeros((9, 3))
        self.bias_lin_a = np.asarray(bias_lin_a, dtype=float).copy()
        self.bias_lin_g = np.asarray(bias_lin_g, dtype=float).copy()
        self.dt_total = 0.0

    def integrate(self, w_raw, a_raw, dt, noise: ImuNoise):
        """Absorb one or more samples; rows of w_raw/a_raw pair with dt."""
        w_raw = np.atleast_2d(np.asarray(w_raw, dtype=float))
        a_raw = np.atleast_2d(np.asarray(a_raw, dtype=float))
        dt = np.atleast_1d(np.asarray(dt, dtype=float))
        if np.any(dt <= 0.0):
            raise ValueError("sample spacing must be positive")
        if not (np.all(np.isfinite(w_raw)) and np.all(np.isfinite(a_raw))):
            raise ValueError("non-finite IMU sample")
        w = w_raw - self.bias_lin_g
        a = a_raw - self.bias_lin_a
        imu_propagate_batch(self.dR, self.dv, self.dp, self.cov,
                            self.J_a, self.J_g,
                            np.ascontiguousarray(w),
                            np.ascontiguousarray(a),
                            np.ascontiguousarray(dt),
                            noise.gyro_var, noise.accel_var)
        self.cov = (self.cov + self.cov.T) / 2.0
        self.dt_total += float(dt.sum())
        return self

    def bias_corrected(self, bias_a, bias_g):
        """First-order corrected delta (dR, dv, dp) at the given biases."""
        eps = self.J_a @ (np.asarray(bias_a) - self.bias_lin_a) \
            + self.J_g @ (np.asarray(bias_g) - self.bias_lin_g)
        return (geom.so3_exp(eps[0:3]) @ self.dR,
                self.dv + eps[3:6],
                self.dp + eps[6:9])


def preintegrate(times, w_raw, a_raw, t_i, t_j, bias_a, bias_g,
                 noise: ImuNoise) -> PreintegratedImu:
    """Integrate the stream samples with t_i < t <= t_j.

    Frame times must coincide with sample times; each selected sample uses
    its spacing to the previous stream sample.
    """
    times = np.asarray(times, dtype=float)
    sel = np.nonzero((times > t_i + 1e-12) & (times <= t_j + 1e-12))[0]
    p = PreintegratedImu(bias_a, bias_g)
    if len(sel) == 0:
        return p
    if sel[0] == 0:
        raise ValueError("no predecessor sample for the first selected one")
    prev = np.concatenate([[times[sel[0] - 1]], times[sel[:-1]]])
    p.integrate(w_raw[sel], a_raw[sel], times[sel] - prev, noise)
    return p


def spd_inverse(M, floor=1e-12):
    """Inverse of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues are floored before inversion so near-zero directions get a
    large, finite weight.
    """
    M = (np.asarray(M, dtype=float) + np.asarray(M, dtype=float).T) / 2.0
    if not np.all(np.isfinite(M)):
        raise NumericalError("non-finite matrix in spd_inverse")
    vals, vecs = np.linalg.eigh(M)
    vals = np.maximum(vals, floor)
    return (vecs / vals) @ vecs.T


# residual rows (rot, vel, pos) carry the delta perturbation with the
# velocity/position sign flipped; conjugating by this matrix moves the
# propagated covariance into residual coordinates.
_SIGN = np.diag([1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0])


def residual_cov(p: PreintegratedImu):
    """Covariance of the 9-dim residual at ground truth."""
    return _SIGN @ p.cov @ _SIGN


def imu_residual(p: PreintegratedImu, state_i: NavState, state_j: NavState,
                 noise: ImuNoise, with_jacobians=True):
    """Residual, Jacobians and weight of a preintegrated factor.

    Returns (r, jac, W): r is the 9-vector (rotation, velocity, position),
    jac maps block names ('rot_i', 'pos_i', 'vel_i', 'bias_a_i', 'bias_g_i',
    'rot_j', 'pos_j', 'vel_j') to 9x3 arrays, and W is the 9x9 weight.
    """
    R_i = state_i.pose.R
    R_j = state_j.pose.R
    dt = p.dt_total
    g = noise.gravity

    eps_a = state_i.bias_a - p.bias_lin_a
    eps_g = state_i.bias_g - p.bias_lin_g
    eps = p.J_a @ eps_a + p.J_g @ eps_g
    dR_c = geom.so3_exp(eps[0:3]) @ p.dR
    dv_c = p.dv + eps[3:6]
    dp_c = p.dp + eps[6:9]

    u_v = state_j.velocity - state_i.velocity - g * dt
    u_p = (state_j.pose.t - state_i.pose.t - state_i.velocity * dt
           - 0.5 * g * dt * dt)

    r = np.empty(9)
    r[0:3] = geom.so3_log(dR_c @ R_j.T @ R_i)
    r[3:6] = R_i.T @ u_v - dv_c
    r[6:9] = R_i.T @ u_p - dp_c

    W = spd_inverse(p.cov + 1e-12 * np.eye(9))
    W = _SIGN @ W @ _SIGN

    if not with_jacobians:
        return r, None, W

    A = geom.so3_right_jacobian_inv(r[0:3])
    RiT = R_i.T
    jac = {k: np.zeros((9, 3)) for k in
           ("rot_i", "pos_i", "vel_i", "bias_a_i", "bias_g_i",
            "rot_j", "pos_j", "vel_j")}

    jac["rot_i"][0:3] = A @ RiT
    jac["rot_j"][0:3] = -A @ RiT
    # rotation rows wrt the gyro bias: the correction enters on the left of
    # the delta, so it is transported through the rest of the product.
    B = p.dR @ R_j.T @ R_i
    Jr_w0 = geom.so3_right_jacobian(eps[0:3])
    jac["bias_g_i"][0:3] = A @ B.T @ Jr_w0 @ p.J_g[0:3]
    jac["bias_a_i"][0:3] = A @ B.T @ Jr_w0 @ p.J_a[0:3]

    jac["rot_i"][3:6] = RiT @ geom.hat(u_v)
    jac["vel_i"][3:6] = -RiT
    jac["vel_j"][3:6] = RiT
    jac["bias_a_i"][3:6] += -p.J_a[3:6]
    jac["bias_g_i"][3:6] += -p.J_g[3:6]

    jac["rot_i"][6:9] = RiT @ geom.hat(u_p)
    jac["pos_i"][6:9] = -RiT
    jac["pos_j"][6:9] = RiT
    jac["vel_i"][6:9] = -RiT * dt
    jac["bias_a_i"][6:9] += -p.J_a[6:9]
    jac["bias_g_i"][6:9] += -p.J_g[6:9]

    return r, jac, W


def predict(state_i: NavState, p: PreintegratedImu, noise: ImuNoise) -> NavState:
    """Propagate state_i through the delta (biases carried over)."""
    dR_c, dv_c, dp_c = p.bias_corrected(state_i.bias_a, state_i.bias_g)
    R_i = state_i.pose.R
    dt = p.dt_total
    g = noise.gravity
    return NavState(
        geom.Pose3(R_i @ dR_c, state_i.pose.t + state_i.velocity * dt
                   + 0.5 * g * dt * dt + R_i @ dp_c),
        state_i.velocity + g * dt + R_i @ dv_c,
        state_i.bias_a.copy(),
        state_i.bias_g.copy(),
    )
