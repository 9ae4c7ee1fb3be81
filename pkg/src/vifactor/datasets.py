"""Dataset directory format, trajectory files and ATE evaluation.

A dataset directory contains:

    imu.csv     t,wx,wy,wz,ax,ay,az
    frames.csv  t,frame_id
    obs.csv     frame_id,cam,landmark_id,u_px,v_px
    gt.csv      t,tx,ty,tz,qx,qy,qz,qw,vx,vy,vz,bax,bay,baz,bgx,bgy,bgz
    world.csv   landmark_id,x,y,z            (true points, for simulated
                                              keypoint matching)
    calib.txt   key=value lines (intrinsics, extrinsics, noise, gravity)
    images/     optional 8-bit PGM frames

Floats are written with 17 significant digits so read(write(x)) is exact.
Trajectories use the TUM format: "t tx ty tz qx qy qz qw" per line with
'#' comments.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import geom
from .camera import CameraModel
from .imu import ImuNoise, NavState
from .sim import OBS_DTYPE

FMT = "%.17g"


class DatasetError(ValueError):
    """Malformed dataset or trajectory file."""


def _fmt_row(vals):
    return ",".join(FMT % v for v in vals)


def _parse_floats(line, n, path, lineno):
    parts = line.split(",")
    if len(parts) != n:
        raise DatasetError(f"{path}:{lineno}: expected {n} fields, "
                           f"got {len(parts)}")
    try:
        return [float(x) for x in parts]
    except ValueError as exc:
        raise DatasetError(f"{path}:{lineno}: {exc}") from None


def _read_csv(path, n_fields):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if lineno == 1 and any(c.isalpha() for c in line.split(",")[0]):
                continue  # header row
            rows.append(_parse_floats(line, n_fields, path, lineno))
    return np.array(rows) if rows else np.zeros((0, n_fields))


# --- trajectories -------------------------------------------------------------

@dataclass
class Trajectory:
    """Timestamped poses: positions and unit quaternions (x, y, z, w)."""

    t: np.ndarray   # (N,)
    p: np.ndarray   # (N, 3)
    q: np.ndarray   # (N, 4)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 4)
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise DatasetError("trajectory timestamps must strictly increase")
        if len(self.q) and np.abs(
                np.linalg.norm(self.q, axis=1) - 1.0).max() > 1e-6:
            raise DatasetError("trajectory quaternions must be unit norm")

    def __len__(self):
        return len(self.t)

    @staticmethod
    def from_poses(times, poses) -> "Trajectory":
        times = np.asarray(times, dtype=float)
        p = np.array([pose.t for pose in poses]).reshape(-1, 3)
        q = np.array([geom.rot_to_quat(pose.R) for pose in poses]).reshape(-1, 4)
        return Trajectory(times, p, q)

    def pose(self, i) -> geom.Pose3:
        return geom.Pose3(geom.quat_to_rot(self.q[i]), self.p[i].copy())


def write_trajectory(path, traj: Trajectory):
    with open(path, "w") as fh:
        fh.write("# t tx ty tz qx qy qz qw\n")
        for i in range(len(traj)):
            vals = [traj.t[i], *traj.p[i], *traj.q[i]]
            fh.write(" ".join(FMT % v for v in vals) + "\n")


def read_trajectory(path) -> Trajectory:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DatasetError(f"{path}:{lineno}: expected 8 fields, "
                                   f"got {len(parts)}")
            try:
                rows.append([float(x) for x in parts])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    arr = np.array(rows) if rows else np.zeros((0, 8))
    return Trajectory(arr[:, 0], arr[:, 1:4], arr[:, 4:8])


# --- dataset directories ------------------------------------------------------

@dataclass
class Dataset:
    """In-memory view of a dataset directory."""

    camera: CameraModel
    noise: ImuNoise
    pixel_sigma: float
    imu_times: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    frame_times: np.ndarray
    frame_ids: np.ndarray
    gt_states: list | None
    landmarks: np.ndarray | None
    obs: np.ndarray
    # raw encodings kept so write(read(dir)) is byte-identical
    gt_rows: np.ndarray | None = None
    calib_text: str | None = None

    def obs_for_frame(self, frame_id):
        return self.obs[self.obs["frame"] == frame_id]

    def gt_trajectory(self) -> Trajectory:
        return Trajectory.from_poses(self.frame_times,
                                     [s.pose for s in self.gt_states])


def _pose_to7(pose: geom.Pose3):
    return [*pose.t, *geom.rot_to_quat(pose.R)]


def _pose_from7(vals):
    vals = np.asarray(vals, dtype=float)
    return geom.Pose3(geom.quat_to_rot(vals[3:7]), vals[0:3].copy())


def write_dataset(path, ds):
    """Write a dataset-like object (e.g. sim.SimDataset) to a directory."""
    os.makedirs(path, exist_ok=True)

    with open(os.path.join(path, "imu.csv"), "w") as fh:
        fh.write("t,wx,wy,wz,ax,ay,az\n")
        for i in range(len(ds.imu_times)):
            fh.write(_fmt_row([ds.imu_times[i], *ds.gyro[i], *ds.accel[i]])
                     + "\n")

    with open(os.path.join(path, "frames.csv"), "w") as fh:
        fh.write("t,frame_id\n")
        for t, fi in zip(ds.frame_times, ds.frame_ids):
            fh.write(_fmt_row([t, fi]) + "\n")

    with open(os.path.join(path, "obs.csv"), "w") as fh:
        fh.write("frame_id,cam,landmark_id,u_px,v_px\n")
        for row in ds.obs:
            fh.write(_fmt_row([row["frame"], row["cam"], row["lm"],
                               row["u"], row["v"]]) + "\n")

    if getattr(ds, "gt_states", None) is not None:
        with open(os.path.join(path, "gt.csv"), "w") as fh:
            fh.write("t,tx,ty,tz,qx,qy,qz,qw,vx,vy,vz,"
                     "bax,bay,baz,bgx,bgy,bgz\n")
            raw = getattr(ds, "gt_rows", None)
            if raw is not None:
                for row in raw:
                    fh.write(_fmt_row(row) + "\n")
            else:
                for t, st in zip(ds.frame_times, ds.gt_states):
                    fh.write(_fmt_row([t, *_pose_to7(st.pose), *st.velocity,
                                       *st.bias_a, *st.bias_g]) + "\n")

    if getattr(ds, "landmarks", None) is not None:
        with open(os.path.join(path, "world.csv"), "w") as fh:
            fh.write("landmark_id,x,y,z\n")
            for i, pt in enumerate(ds.landmarks):
                fh.write(_fmt_row([i, *pt]) + "\n")

    calib_text = getattr(ds, "calib_text", None)
    if calib_text is None:
        cam = ds.camera
        noise = ds.noise_model() if hasattr(ds, "noise_model") else ds.noise
        pixel_sigma = getattr(getattr(ds, "scenario", None), "pixel_sigma",
                              None)
        if pixel_sigma is None:
            pixel_sigma = getattr(ds, "pixel_sigma", 1.0)
        lines = [f"fx={FMT % cam.fx}", f"fy={FMT % cam.fy}",
                 f"cx={FMT % cam.cx}", f"cy={FMT % cam.cy}",
                 f"width={cam.width}", f"height={cam.height}"]
        for i, T in enumerate(cam.T_IC):
            lines.append(f"cam{i}_pose="
                         + " ".join(FMT % v for v in _pose_to7(T)))
        lines.append("accel_var="
                     + " ".join(FMT % v for v in noise.accel_var))
        lines.append("gyro_var=" + " ".join(FMT % v for v in noise.gyro_var))
        lines.append("gravity=" + " ".join(FMT % v for v in noise.gravity))
        lines.append(f"pixel_sigma={FMT % pixel_sigma}")
        calib_text = "\n".join(lines) + "\n"
    with open(os.path.join(path, "calib.txt"), "w") as fh:
        fh.write(calib_text)

    if getattr(ds, "images", None):
        from .flow import write_pgm
        img_dir = os.path.join(path, "images")
        os.makedirs(img_dir, exist_ok=True)
        for fi, img in ds.images:
            write_pgm(os.path.join(img_dir, f"frame_{fi:06d}.pgm"), img)


def read_calib(path):
    vals = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetError(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            vals[key.strip()] = raw.strip()
    try:
        poses = []
        i = 0
        while f"cam{i}_pose" in vals:
            poses.append(_pose_from7([float(x)
                                      for x in vals[f"cam{i}_pose"].split()]))
            i += 1
        cam = CameraModel(
            fx=float(vals["fx"]), fy=float(vals["fy"]),
            cx=float(vals["cx"]), cy=float(vals["cy"]),
            width=int(vals["width"]), height=int(vals["height"]), T_IC=poses)
        noise = ImuNoise(
            np.array([float(x) for x in vals["accel_var"].split()]),
            np.array([float(x) for x in vals["gyro_var"].split()]),
            np.array([float(x) for x in vals["gravity"].split()]))
        pixel_sigma = float(vals.get("pixel_sigma", 1.0))
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{path}: {exc}") from None
    return cam, noise, pixel_sigma


def read_dataset(path, imu_format="default") -> Dataset:
    cam, noise, pixel_sigma = read_calib(os.path.join(path, "calib.txt"))

    imu = read_imu_csv(os.path.join(path, "imu.csv"), imu_format)
    frames = _read_csv(os.path.join(path, "frames.csv"), 2)

    obs_raw = _read_csv(os.path.join(path, "obs.csv"), 5)
    obs = np.zeros(len(obs_raw), dtype=OBS_DTYPE)
    if len(obs_raw):
        obs["frame"] = obs_raw[:, 0].astype(np.int64)
        obs["cam"] = obs_raw[:, 1].astype(np.int64)
        obs["lm"] = obs_raw[:, 2].astype(np.int64)
        obs["u"] = obs_raw[:, 3]
        obs["v"] = obs_raw[:, 4]

    gt_states = None
    gt_rows = None
    gt_path = os.path.join(path, "gt.csv")
    if os.path.exists(gt_path):
        gt_rows = _read_csv(gt_path, 17)
        gt_states = read_gt_csv(gt_path, imu_format)[1]

    landmarks = None
    world_path = os.path.join(path, "world.csv")
    if os.path.exists(world_path):
        world = _read_csv(world_path, 4)
        if len(world):
            order = np.argsort(world[:, 0])
            landmarks = world[order, 1:4]

    with open(os.path.join(path, "calib.txt")) as fh:
        calib_text = fh.read()
    return Dataset(cam, noise, pixel_sigma, imu[:, 0], imu[:, 1:4],
                   imu[:, 4:7], frames[:, 0],
                   frames[:, 1].astype(np.int64), gt_states, landmarks, obs,
                   gt_rows=gt_rows, calib_text=calib_text)


def read_imu_csv(path, fmt="default"):
    """IMU stream as an (N, 7) array of t, gyro, accel.

    fmt="euroc" maps nanosecond timestamps and the
    (timestamp, w_xyz, a_xyz) column layout of EuRoC-style files.
    """
    rows = _read_csv(path, 7)
    if fmt == "euroc":
        rows = rows.copy()
        rows[:, 0] *= 1e-9
    elif fmt != "default":
        raise ValueError(f"unknown IMU format {fmt!r}")
    if len(rows) > 1 and np.any(np.diff(rows[:, 0]) <= 0):
        raise DatasetError(f"{path}: timestamps must strictly increase")
    return rows


def read_gt_csv(path, fmt="default"):
    """Ground-truth states: (times, [NavState, ...]).

    fmt="euroc" accepts nanosecond timestamps and quaternion-first
    (w, x, y, z) pose columns.
    """
    rows = _read_csv(path, 17)
    times = rows[:, 0].copy()
    states = []
    for r in rows:
        if fmt == "euroc":
            p = r[1:4]
            qw, qx, qy, qz = r[4:8]
            q = np.array([qx, qy, qz, qw])
            vel, bg, ba = r[8:11], r[11:14], r[14:17]
        elif fmt == "default":
            p = r[1:4]
            q = r[4:8]
            vel, ba, bg = r[8:11], r[11:14], r[14:17]
        else:
            raise ValueError(f"unknown ground-truth format {fmt!r}")
        states.append(NavState(geom.Pose3(geom.quat_to_rot(q), p.copy()),
                               vel.copy(), ba.copy(), bg.copy()))
    if fmt == "euroc":
        times *= 1e-9
    return times, states


# --- alignment and ATE --------------------------------------------------------

def associate(t_est, t_ref, max_gap=0.010):
    """Nearest-neighbor timestamp pairs (i_est, i_ref) within max_gap."""
    t_est = np.asarray(t_est)
    t_ref = np.asarray(t_ref)
    j = np.searchsorted(t_ref, t_est)
    pairs = []
    for i, tq in enumerate(t_est):
        best, best_dt = -1, max_gap + 1.0
        for cand in (j[i] - 1, j[i]):
            if 0 <= cand < len(t_ref):
                dt = abs(t_ref[cand] - tq)
                if dt < best_dt:
                    best, best_dt = cand, dt
        if best >= 0 and best_dt <= max_gap:
            pairs.append((i, best))
    return pairs


def rigid_align(src, dst):
    """Least-squares rotation/translation taking src points onto dst."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_d - R @ mu_s
    return geom.Pose3(R, t)


def align_ate(est: Trajectory, gt: Trajectory, mode="se3", max_gap=0.010):
    """Align est to gt and return (aligned est, RMS position error).

    mode "se3" is the rigid alignment; "sim3-off" is an explicit alias
    stating that scale alignment is unavailable.
    """
    if mode not in ("se3", "sim3-off"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    pairs = associate(est.t, gt.t, max_gap)
    if len(pairs) < 3:
        raise DatasetError(
            f"need at least 3 matched poses, found {len(pairs)}")
    ie = [i for i, _ in pairs]
    ig = [j for _, j in pairs]
    G = rigid_align(est.p[ie], gt.p[ig])
    p_new = est.p @ G.R.T + G.t
    q_new = np.array([geom.rot_to_quat(G.R @ geom.quat_to_rot(q))
                      for q in est.q]) if len(est.q) else est.q
    aligned = Trajectory(est.t, p_new, q_new)
    err = aligned.p[ie] - gt.p[ig]
    rms = float(np.sqrt(np.mean(np.sum(err * err, axis=1))))
    return aligned, rms
