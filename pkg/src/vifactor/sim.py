"""Deterministic synthetic scenarios: trajectories, worlds, IMU and images.

The analytic trajectory (sinusoidal circle with yaw sweep and small
pitch/roll/elevation wobbles) provides closed-form pose, velocity and
body-rate functions.  Datasets contain an IMU-consistent discrete twin of
the trajectory: gyro and accelerometer samples are closed-form finite
differences of the analytic rotations and velocities, and ground-truth
positions accumulate through the same first-order update the estimator
assumes.  Integrating the noiseless samples therefore reproduces the
stored ground truth to rounding error.

All randomness flows from the scenario seed through named substreams, so
identical scenarios yield identical datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import geom
from .camera import CameraModel, default_stereo
from .imu import ImuNoise, NavState

_EX = np.array([1.0, 0.0, 0.0])
_EY = np.array([0.0, 1.0, 0.0])
_EZ = np.array([0.0, 0.0, 1.0])

GRAVITY = np.array([0.0, 0.0, -9.81])


def _rot_axis(axis, angle):
    return geom.so3_exp(axis * angle)


@dataclass(frozen=True)
class TrajectorySpec:
    """Circle of given radius with sinusoidal 6-DoF excitation.

    Yaw follows the tangent so a forward-looking camera sees the outer
    wall; the wobble terms keep all axes of the gyro and accelerometer
    exercised.
    """

    radius: float = 5.0
    period: float = 40.0
    z_amp: float = 0.4
    z_freq: float = 0.3
    yaw_amp: float = 0.15
    yaw_freq: float = 0.17
    pitch_amp: float = 0.10
    pitch_freq: float = 0.23
    roll_amp: float = 0.08
    roll_freq: float = 0.29

    def position(self, t):
        t = np.asarray(t, dtype=float)
        a = 2.0 * np.pi * t / self.period
        wz = 2.0 * np.pi * self.z_freq
        return np.stack([self.radius * np.cos(a),
                         self.radius * np.sin(a),
                         self.z_amp * np.sin(wz * t)], axis=-1)

    def velocity(self, t):
        t = np.asarray(t, dtype=float)
        da = 2.0 * np.pi / self.period
        a = da * t
        wz = 2.0 * np.pi * self.z_freq
        return np.stack([-self.radius * da * np.sin(a),
                         self.radius * da * np.cos(a),
                         self.z_amp * wz * np.cos(wz * t)], axis=-1)

    def acceleration(self, t):
        t = np.asarray(t, dtype=float)
        da = 2.0 * np.pi / self.period
        a = da * t
        wz = 2.0 * np.pi * self.z_freq
        return np.stack([-self.radius * da * da * np.cos(a),
                         -self.radius * da * da * np.sin(a),
                         -self.z_amp * wz * wz * np.sin(wz * t)], axis=-1)

    def _angles(self, t):
        a = 2.0 * np.pi * t / self.period
        wy = 2.0 * np.pi * self.yaw_freq
        wp = 2.0 * np.pi * self.pitch_freq
        wr = 2.0 * np.pi * self.roll_freq
        yaw = a + np.pi / 2.0 + self.yaw_amp * np.sin(wy * t)
        pitch = self.pitch_amp * np.sin(wp * t)
        roll = self.roll_amp * np.sin(wr * t)
        dyaw = 2.0 * np.pi / self.period + self.yaw_amp * wy * np.cos(wy * t)
        dpitch = self.pitch_amp * wp * np.cos(wp * t)
        droll = self.roll_amp * wr * np.cos(wr * t)
        return (yaw, pitch, roll), (dyaw, dpitch, droll)

    def rotation(self, t):
        (yaw, pitch, roll), _ = self._angles(float(t))
        return (_rot_axis(_EZ, yaw) @ _rot_axis(_EY, pitch)
                @ _rot_axis(_EX, roll))

    def body_rate(self, t):
        """Angular velocity in the body frame, from the analytic chain rule."""
        (yaw, pitch, roll), (dyaw, dpitch, droll) = self._angles(float(t))
        Ry = _rot_axis(_EY, pitch)
        Rx = _rot_axis(_EX, roll)
        # conjugate each Euler rate axis into the body frame
        w = (dyaw * (Rx.T @ (Ry.T @ _EZ)) + dpitch * (Rx.T @ _EY)
             + droll * _EX)
        return w

    def state(self, t, duration=None) -> NavState:
        """Closed-form navigation state at time t."""
        if duration is not None and not (0.0 <= t <= duration):
            raise ValueError(f"t={t} outside [0, {duration}]")
        return NavState(geom.Pose3(self.rotation(t), self.position(float(t))),
                        self.velocity(float(t)), np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class Scenario:
    """Full description of one synthetic dataset."""

    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    duration: float = 20.0
    imu_rate: float = 200.0
    cam_rate: float = 10.0
    n_landmarks: int = 400
    wall_radius: float = 10.0
    wall_z: tuple = (-2.5, 3.5)
    gap_arc: tuple = ()          # optional (start, end) azimuth without points
    max_obs_dist: float = 20.0
    min_depth: float = 0.25
    accel_noise_density: float = 0.0   # m/s^2/sqrt(Hz), continuous
    gyro_noise_density: float = 0.0    # rad/s/sqrt(Hz), continuous
    pixel_sigma: float = 0.0
    outlier_frac: float = 0.0
    accel_walk: float = 0.0      # m/s^2/sqrt(s)
    gyro_walk: float = 0.0       # rad/s/sqrt(s)
    init_bias_a: tuple = (0.0, 0.0, 0.0)
    init_bias_g: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.imu_rate < 4.0 * self.cam_rate:
            raise ValueError("imu rate must be at least 4x the camera rate")
        if self.imu_rate % self.cam_rate != 0:
            raise ValueError("camera timestamps must land on IMU samples")

    def imu_noise(self) -> ImuNoise:
        """Discrete per-sample noise model at the scenario's IMU rate."""
        av = max(self.accel_noise_density, 1e-8) ** 2 * self.imu_rate
        gv = max(self.gyro_noise_density, 1e-9) ** 2 * self.imu_rate
        return ImuNoise(np.full(3, av), np.full(3, gv), GRAVITY.copy())


@dataclass
class SimDataset:
    """In-memory dataset; the datasets module handles the on-disk format."""

    scenario: Scenario
    camera: CameraModel
    imu_times: np.ndarray      # (K,)
    gyro: np.ndarray           # (K, 3) raw measurements
    accel: np.ndarray          # (K, 3)
    frame_times: np.ndarray    # (F,)
    frame_ids: np.ndarray      # (F,)
    gt_states: list            # NavState per frame (discrete twin)
    landmarks: np.ndarray      # (L, 3) world points
    obs: np.ndarray            # structured (frame, cam, lm, u, v)
    images: list | None = None # optional (frame_id, array) grayscale in [0,1]

    def noise_model(self) -> ImuNoise:
        return self.scenario.imu_noise()

    def obs_for_frame(self, frame_id):
        return self.obs[self.obs["frame"] == frame_id]


OBS_DTYPE = np.dtype([("frame", np.int64), ("cam", np.int64),
                      ("lm", np.int64), ("u", np.float64), ("v", np.float64)])


def _streams(seed):
    """Named child generators derived from one seed (documented split rule)."""
    root = np.random.SeedSequence(seed)
    names = ["imu", "bias", "landmarks", "obs", "texture"]
    children = root.spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def discrete_states(traj: TrajectorySpec, times):
    """IMU-consistent twin of the analytic trajectory at the given times.

    Rotations and velocities are the analytic values; positions accumulate
    through p[k+1] = p[k] + v[k] dt + 0.5 g dt^2 so that the first-order
    propagation model reproduces them exactly.
    """
    times = np.asarray(times, dtype=float)
    K = len(times)
    R = np.empty((K, 3, 3))
    for k in range(K):
        R[k] = traj.rotation(times[k])
    v = traj.velocity(times)
    p = np.empty((K, 3))
    p[0] = traj.position(float(times[0]))
    for k in range(K - 1):
        dt = times[k + 1] - times[k]
        p[k + 1] = p[k] + v[k] * dt + 0.5 * GRAVITY * dt * dt
    return R, v, p


def synthesize_imu(traj: TrajectorySpec, times, R=None, v=None):
    """Noise-free gyro/accel samples consistent with the discrete twin.

    Sample k covers (t[k-1], t[k]]; its values are closed-form finite
    differences, so propagating them reproduces R and v exactly.  Sample 0
    only anchors the time grid and duplicates sample 1.
    """
    times = np.asarray(times, dtype=float)
    if R is None or v is None:
        R, v, _ = discrete_states(traj, times)
    K = len(times)
    w = np.zeros((K, 3))
    a = np.zeros((K, 3))
    for k in range(1, K):
        dt = times[k] - times[k - 1]
        w[k] = geom.so3_log(R[k - 1].T @ R[k]) / dt
        a[k] = R[k - 1].T @ ((v[k] - v[k - 1]) / dt - GRAVITY)
    if K > 1:
        w[0] = w[1]
        a[0] = a[1]
    return w, a


def _sample_landmarks(sc: Scenario, rng):
    pts = np.empty((sc.n_landmarks, 3))
    count = 0
    while count < sc.n_landmarks:
        az = rng.uniform(0.0, 2.0 * np.pi)
        if sc.gap_arc:
            lo, hi = sc.gap_arc
            if lo <= az <= hi:
                continue
        r = sc.wall_radius * rng.uniform(0.97, 1.03)
        z = rng.uniform(*sc.wall_z)
        pts[count] = (r * np.cos(az), r * np.sin(az), z)
        count += 1
    return pts


def _observe(sc: Scenario, cam: CameraModel, states, frame_ids, landmarks,
             rng):
    rows = []
    margin = 1.0
    for fi, st in zip(frame_ids, states):
        for ci in range(cam.n_cams):
            T_WC = st.pose.compose(cam.T_IC[ci])
            Xc = (landmarks - T_WC.t) @ T_WC.R
            depth = Xc[:, 2]
            dist = np.linalg.norm(Xc, axis=1)
            ok = (depth > sc.min_depth) & (dist < sc.max_obs_dist)
            uv = np.full((len(landmarks), 2), np.nan)
            uv[ok] = cam.project(Xc[ok])
            ok &= cam.in_bounds(np.nan_to_num(uv, nan=-1.0), margin)
            idx = np.nonzero(ok)[0]
            if len(idx) == 0:
                continue
            puv = uv[idx]
            if sc.pixel_sigma > 0:
                puv = puv + rng.normal(0.0, sc.pixel_sigma, size=puv.shape)
            if sc.outlier_frac > 0:
                bad = rng.random(len(idx)) < sc.outlier_frac
                n_bad = int(bad.sum())
                if n_bad:
                    puv[bad, 0] = rng.uniform(0, cam.width - 1, n_bad)
                    puv[bad, 1] = rng.uniform(0, cam.height - 1, n_bad)
            for j, li in enumerate(idx):
                rows.append((fi, ci, li, puv[j, 0], puv[j, 1]))
    return np.array(rows, dtype=OBS_DTYPE)


def generate(sc: Scenario, cam: CameraModel | None = None,
             images: bool = False) -> SimDataset:
    """Build the full dataset for a scenario."""
    if cam is None:
        cam = default_stereo()
    streams = _streams(sc.seed)

    n_imu = int(round(sc.duration * sc.imu_rate))
    times = np.arange(n_imu + 1) / sc.imu_rate
    R, v, p = discrete_states(sc.trajectory, times)
    w_clean, a_clean = synthesize_imu(sc.trajectory, times, R, v)

    # bias random walk on top of the configured initial biases
    rng_b = streams["bias"]
    dt = 1.0 / sc.imu_rate
    ba = np.cumsum(
        rng_b.normal(0.0, sc.accel_walk * np.sqrt(dt), (n_imu + 1, 3)), axis=0)
    bg = np.cumsum(
        rng_b.normal(0.0, sc.gyro_walk * np.sqrt(dt), (n_imu + 1, 3)), axis=0)
    if sc.accel_walk == 0.0:
        ba[:] = 0.0
    if sc.gyro_walk == 0.0:
        bg[:] = 0.0
    ba += np.asarray(sc.init_bias_a)
    bg += np.asarray(sc.init_bias_g)

    rng_i = streams["imu"]
    noise = sc.imu_noise()
    gyro = w_clean + bg
    accel = a_clean + ba
    if sc.gyro_noise_density > 0:
        gyro = gyro + rng_i.normal(0, np.sqrt(noise.gyro_var), (n_imu + 1, 3))
    if sc.accel_noise_density > 0:
        accel = accel + rng_i.normal(0, np.sqrt(noise.accel_var),
                                     (n_imu + 1, 3))

    step = int(round(sc.imu_rate / sc.cam_rate))
    frame_samples = np.arange(0, n_imu + 1, step)
    frame_times = times[frame_samples]
    frame_ids = np.arange(len(frame_samples))
    gt_states = [
        NavState(geom.Pose3(R[k], p[k]), v[k].copy(), ba[k].copy(),
                 bg[k].copy())
        for k in frame_samples
    ]

    landmarks = _sample_landmarks(sc, streams["landmarks"])
    obs = _observe(sc, cam, gt_states, frame_ids, landmarks, streams["obs"])

    rendered = None
    if images:
        tex_seed = int(streams["texture"].integers(0, 2**31 - 1))
        rendered = [
            (int(fi), render_wall_view(cam, st.pose, sc.wall_radius, tex_seed))
            for fi, st in zip(frame_ids, gt_states)
        ]

    return SimDataset(sc, cam, times, gyro, accel, frame_times, frame_ids,
                      gt_states, landmarks, obs, rendered)


# --- procedural textures and image rendering ---------------------------------

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def _lattice(ix, iy, seed):
    """Deterministic pseudo-random value in [0, 1) per integer lattice node."""
    h = (ix.astype(np.uint64) * _M1) ^ (iy.astype(np.uint64) * _M2) \
        ^ (np.uint64(seed) * _M3)
    h ^= h >> np.uint64(30)
    h *= _M2
    h ^= h >> np.uint64(27)
    h *= _M3
    h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def value_noise(x, y, seed, octaves=4):
    """Smooth multi-octave noise in (0, 1); x, y in texture units."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    total = np.zeros(np.broadcast(x, y).shape)
    norm = 0.0
    for o in range(octaves):
        f = float(2 ** o)
        amp = 0.55 ** o
        xf = x * f
        yf = y * f
        x0 = np.floor(xf)
        y0 = np.floor(yf)
        tx = xf - x0
        ty = yf - y0
        ix = x0.astype(np.int64)
        iy = y0.astype(np.int64)
        s = seed + o * 101
        v00 = _lattice(ix, iy, s)
        v10 = _lattice(ix + 1, iy, s)
        v01 = _lattice(ix, iy + 1, s)
        v11 = _lattice(ix + 1, iy + 1, s)
        top = v00 * (1 - tx) + v10 * tx
        bot = v01 * (1 - tx) + v11 * tx
        total += amp * (top * (1 - ty) + bot * ty)
        norm += amp
    return 0.08 + 0.84 * total / norm


def render_se2(shape, warp, seed, scale=0.11):
    """Image of the base texture moved by an SE(2) warp.

    warp is (angle, tx, ty) in pixels: a texture feature at pixel x in the
    identity view appears at R(angle) x + t here.
    """
    h, w = shape
    angle, tx, ty = warp
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    c, s = np.cos(angle), np.sin(angle)
    # inverse warp into the identity view
    xr = c * (xs - tx) + s * (ys - ty)
    yr = -s * (xs - tx) + c * (ys - ty)
    return value_noise(xr * scale, yr * scale, seed)


def occlude_disks(img, centers, radius, seed):
    """Replace disk regions with an unrelated texture (simulated occluder)."""
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    out = img.copy()
    other = value_noise(xs * 0.13, ys * 0.13, seed + 77777)
    for cx, cy in centers:
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 < radius ** 2
        out[mask] = other[mask]
    return out


def render_wall_view(cam: CameraModel, pose_WI: geom.Pose3, wall_radius,
                     seed, tex_scale=0.8):
    """Camera-0 view of the textured cylindrical wall from a body pose."""
    T_WC = pose_WI.compose(cam.T_IC[0])
    ys, xs = np.mgrid[0:cam.height, 0:cam.width].astype(float)
    d_c = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy,
                    np.ones_like(xs)], axis=-1)
    d_w = d_c @ T_WC.R.T
    o = T_WC.t
    # |o_xy + s d_xy|^2 = wall_radius^2, take the far (positive) root
    aq = d_w[..., 0] ** 2 + d_w[..., 1] ** 2
    bq = 2.0 * (o[0] * d_w[..., 0] + o[1] * d_w[..., 1])
    cq = o[0] ** 2 + o[1] ** 2 - wall_radius ** 2
    disc = np.maximum(bq * bq - 4.0 * aq * cq, 0.0)
    s_hit = (-bq + np.sqrt(disc)) / (2.0 * np.maximum(aq, 1e-12))
    hit = s_hit > 0
    px = o[0] + s_hit * d_w[..., 0]
    py = o[1] + s_hit * d_w[..., 1]
    pz = o[2] + s_hit * d_w[..., 2]
    tex_u = np.arctan2(py, px) * wall_radius * tex_scale
    tex_v = pz * tex_scale
    img = np.full(xs.shape, 0.5)
    img[hit] = value_noise(tex_u[hit], tex_v[hit], seed)
    return img
