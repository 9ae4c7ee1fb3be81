"""Pure numpy reference implementation of the hot kernels.

Mirrors the compiled extension step for step so both backends agree to
rounding error.  Used as the import-time fallback and as the baseline in
the kernel benchmark.
"""

import numpy as np


def _hat(w):
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def _exp(w):
    theta2 = w @ w
    S = _hat(w)
    if theta2 < 1e-16:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * S + b * (S @ S)


def _right_jacobian(w):
    theta2 = w @ w
    S = _hat(w)
    if theta2 < 1e-16:
        return np.eye(3) - 0.5 * S + (S @ S) / 6.0
    theta = np.sqrt(theta2)
    a = (1.0 - np.cos(theta)) / theta2
    b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) - a * S + b * (S @ S)


def imu_propagate_batch(dR, dv, dp, cov, Ja, Jg, w, a, dt, sg, sa):
    """Absorb K bias-corrected gyro/accel samples into the running delta.

    dR (3,3), dv (3,), dp (3,), cov (9,9), Ja (9,3), Jg (9,3) are updated
    in place; cov block order is (rotation, velocity, position).  w, a are
    (K,3); dt is (K,); sg, sa are per-axis discrete noise variances.
    """
    for k in range(len(dt)):
        h = dt[k]
        wk = w[k]
        ak = a[k]
        Ra = dR @ ak

        # one-step transition Jacobian wrt the current delta
        F = np.eye(9)
        F[3:6, 0:3] = -_hat(Ra) * h
        F[6:9, 3:6] = np.eye(3) * h

        dR_new = dR @ _exp(wk * h)
        G_rot = dR_new @ _right_jacobian(wk * h) * h  # gyro -> rotation rows
        G_vel = dR * h                                # accel -> velocity rows

        cov[:] = F @ cov @ F.T
        cov[0:3, 0:3] += G_rot * sg @ G_rot.T
        cov[3:6, 3:6] += G_vel * sa @ G_vel.T

        Ja[:] = F @ Ja
        Ja[3:6] -= G_vel
        Jg[:] = F @ Jg
        Jg[0:3] -= G_rot

        dp += dv * h
        dv += Ra * h
        dR[:] = dR_new


def _bilinear(img, x, y):
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    wx = x - x0
    wy = y - y0
    return ((1.0 - wy) * ((1.0 - wx) * img[y0, x0] + wx * img[y0, x0 + 1])
            + wy * ((1.0 - wx) * img[y0 + 1, x0] + wx * img[y0 + 1, x0 + 1]))


STATUS_CONVERGED = 0
STATUS_MAX_ITERS = 1
STATUS_DIVERGED = 2


def iclk_level(img, px, py, tnorm, J, Hinv, theta, tx, ty, rho,
               max_iters, tol, margin):
    """Inverse-compositional iteration for one pyramid level.

    img is the target level, (px, py) the pattern offsets, tnorm the
    mean-normalized template values, J the (N,3) template Jacobian rows
    wrt (tx, ty, theta) and Hinv the inverse of J^T J.  Returns
    (theta, tx, ty, status, iterations).
    """
    h, w_img = img.shape
    n = len(px)
    xmax = w_img - 1.0 - margin
    ymax = h - 1.0 - margin
    vals = np.empty(n)
    for it in range(1, max_iters + 1):
        c = np.cos(theta)
        s = np.sin(theta)
        for i in range(n):
            x = c * px[i] - s * py[i] + tx
            y = s * px[i] + c * py[i] + ty
            if x < margin or x > xmax or y < margin or y > ymax:
                return theta, tx, ty, STATUS_DIVERGED, it
            vals[i] = _bilinear(img, x, y)
        mean = vals.sum() / n
        if mean <= 0.0:
            return theta, tx, ty, STATUS_DIVERGED, it
        r = vals / mean - tnorm
        delta = Hinv @ (J.T @ r)
        # compose with the inverse of the template-side increment
        theta = theta - delta[2]
        c = np.cos(theta)
        s = np.sin(theta)
        tx = tx - (c * delta[0] - s * delta[1])
        ty = ty - (s * delta[0] + c * delta[1])
        step = np.sqrt(delta[0] ** 2 + delta[1] ** 2 + (rho * delta[2]) ** 2)
        if step < tol:
            return theta, tx, ty, STATUS_CONVERGED, it
    return theta, tx, ty, STATUS_MAX_ITERS, max_iters
