"""Pinhole stereo rig: intrinsics and fixed body-to-camera extrinsics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Pose3

# camera axes in the body frame: x right = -body y, y down = -body z,
# z forward = +body x
R_CAM_FORWARD = np.array([[0.0, 0.0, 1.0],
                          [-1.0, 0.0, 0.0],
                          [0.0, -1.0, 0.0]])


@dataclass
class CameraModel:
    """Pinhole intrinsics plus per-camera body-frame extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    T_IC: list = field(default_factory=list)  # Pose3 per camera

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def n_cams(self) -> int:
        return len(self.T_IC)

    def project(self, X):
        """Pixel coordinates of camera-frame points (..., 3); scale-free."""
        X = np.asarray(X, dtype=float)
        z = X[..., 2]
        return np.stack([self.fx * X[..., 0] / z + self.cx,
                         self.fy * X[..., 1] / z + self.cy], axis=-1)

    def project_jacobian(self, X):
        """(..., 2, 3) Jacobian of project wrt the camera-frame point."""
        X = np.asarray(X, dtype=float)
        x, y, z = X[..., 0], X[..., 1], X[..., 2]
        J = np.zeros(X.shape[:-1] + (2, 3))
        J[..., 0, 0] = self.fx / z
        J[..., 0, 2] = -self.fx * x / (z * z)
        J[..., 1, 1] = self.fy / z
        J[..., 1, 2] = -self.fy * y / (z * z)
        return J

    def backproject(self, uv):
        """Unit bearing in the camera frame for pixel coordinates (..., 2)."""
        uv = np.asarray(uv, dtype=float)
        d = np.stack([(uv[..., 0] - self.cx) / self.fx,
                      (uv[..., 1] - self.cy) / self.fy,
                      np.ones(uv.shape[:-1])], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def in_bounds(self, uv, margin=0.0):
        uv = np.asarray(uv)
        return ((uv[..., 0] >= margin) & (uv[..., 0] <= self.width - 1 - margin)
                & (uv[..., 1] >= margin) & (uv[..., 1] <= self.height - 1 - margin))


def default_stereo(baseline=0.11) -> CameraModel:
    """Forward-looking stereo rig; cam 0 left, cam 1 right of the body."""
    half = baseline / 2.0
    return CameraModel(
        fx=350.0, fy=350.0, cx=319.5, cy=239.5, width=640, height=480,
        T_IC=[Pose3(R_CAM_FORWARD.copy(), np.array([0.0, half, 0.0])),
              Pose3(R_CAM_FORWARD.copy(), np.array([0.0, -half, 0.0]))],
    )
