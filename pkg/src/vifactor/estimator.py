"""Fixed-lag visual-inertial smoother.

The window holds up to n long-term keyframe poses, the m most recent full
navigation states, and landmarks parametrized relative to their host
keyframe (2D bearing chart plus inverse distance).  Each frame the energy
(robust reprojection + preintegrated inertial factors + bias walk + prior)
is minimized by damped Gauss-Newton with landmark elimination, then the
window is reduced by partial marginalization.

Marginalization keeps first-estimate discipline: once a variable enters
the prior its linearization point is frozen, and every factor absorbed
into the prior evaluates its Jacobian at those frozen points (residuals
stay at current estimates).  This preserves the prior's null directions
(global translation, rotation about gravity) exactly.

When a long-term keyframe is evicted, the full blanket linearization is
emitted as a KeyframeMarginalizationEvent for the factor-recovery layer
before the pose and its hosted landmarks are folded into the prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom
from .camera import CameraModel
from .imu import ImuNoise, NavState, PreintegratedImu, imu_residual
from .optim import Accumulator, huber, marginalize_dense, run_damped_gn

# variable block kinds, keyed by the short names used in variable ids
BLOCK_KINDS = {
    "rot": geom.ROTATION,
    "pos": geom.TRANSLATION,
    "vel": geom.VELOCITY,
    "ba": geom.BIAS,
    "bg": geom.BIAS,
    "uv": geom.BEARING,
    "d": geom.INV_DIST,
}
POSE_BLOCKS = ("rot", "pos")
NAV_BLOCKS = ("rot", "pos", "vel", "ba", "bg")
LM_BLOCKS = ("uv", "d")


class WindowError(RuntimeError):
    """Internal inconsistency in window or prior bookkeeping."""


def keyframe_decision(n_live, n_connected, threshold=0.70):
    """New frames become keyframes when the map covers too few tracks."""
    if n_live < 0 or n_connected < 0:
        raise ValueError("counts must be nonnegative")
    if n_live == 0:
        return True
    return n_connected / n_live < threshold


@dataclass
class Landmark:
    lm_id: int
    host: int          # host keyframe id; bearing lives in its camera 0
    u: float
    v: float
    d: float           # inverse distance, >= 0


@dataclass(frozen=True)
class Obs:
    lm_id: int
    frame: int
    cam: int
    z: tuple           # pixel coordinates


@dataclass
class MargPrior:
    """Quadratic energy over the increments of the listed variables.

    b is referenced at ref_points (the estimates when the prior was last
    updated); lin_points are the frozen first-estimate values used for
    every Jacobian that enters H.
    """

    var_ids: list
    H: np.ndarray
    b: np.ndarray
    lin_points: dict
    ref_points: dict

    def dim(self):
        return self.H.shape[0]


@dataclass
class KeyframeMarginalizationEvent:
    """Blanket linearization saved when a keyframe pose leaves the window."""

    evicted: int
    var_ids: list
    H: np.ndarray
    b: np.ndarray
    lin_points: dict      # first-estimate values per variable id
    estimates: dict       # current estimates per variable id (the mean)
    kf_frames: list       # frames whose poses are keyframe poses here
    timestamps: dict


# --- reprojection -------------------------------------------------------------

def _hat_batch(v):
    n = len(v)
    S = np.zeros((n, 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


def _bearing_batch(u, v):
    s = 1.0 + u * u + v * v
    eta = 2.0 / s
    xyz = np.stack([eta * u, eta * v, eta - 1.0], axis=-1)
    deta_du = -2.0 * eta * u / s
    deta_dv = -2.0 * eta * v / s
    J = np.empty((len(u), 3, 2))
    J[:, 0, 0] = eta + deta_du * u
    J[:, 0, 1] = deta_dv * u
    J[:, 1, 0] = deta_du * v
    J[:, 1, 1] = eta + deta_dv * v
    J[:, 2, 0] = deta_du
    J[:, 2, 1] = deta_dv
    return xyz, J


def _mv(A, v):
    return (A @ v[:, :, None])[:, :, 0]


def _mtv(A, v):
    return (v[:, None, :] @ A)[:, 0, :]


def reprojection_batch(cam: CameraModel, R_h, p_h, R_t, p_t, cam_idx,
                       uv, d, z, min_depth=1e-8, with_jacobians=True):
    """Residuals and Jacobians for a batch of observations.

    R_h, p_h, R_t, p_t are body poses (world from IMU) per observation;
    the host camera is camera 0, cam_idx selects the target camera.
    Returns (r, Jh, Jt, Jl, valid) with pose Jacobians ordered
    (rotation, translation).
    """
    R_IC = np.stack([T.R for T in cam.T_IC])
    p_IC = np.stack([T.t for T in cam.T_IC])

    R_hc = R_h @ R_IC[0]
    p_hc = R_h @ p_IC[0] + p_h
    R_tc = R_t @ R_IC[cam_idx]
    p_tc = _mv(R_t, p_IC[cam_idx]) + p_t

    xyz, Jb = _bearing_batch(uv[:, 0], uv[:, 1])
    dn = d[:, None]
    Xw = _mv(R_hc, xyz) + dn * p_hc
    Xc = _mtv(R_tc, Xw - dn * p_tc)

    valid = Xc[:, 2] > min_depth
    Xc_safe = Xc.copy()
    Xc_safe[~valid, 2] = 1.0

    r = z - cam.project(Xc_safe)
    if not with_jacobians:
        return r, None, None, None, valid
    Jpi = cam.project_jacobian(Xc_safe)
    R_tcT = R_tc.transpose(0, 2, 1)

    # body-pose perturbations (left rotation increments, additive translation)
    dX_rot_h = -R_tcT @ _hat_batch(_mv(R_hc, xyz) + dn * (R_h @ p_IC[0]))
    dX_pos_h = d[:, None, None] * R_tcT
    dX_rot_t = R_tcT @ _hat_batch(Xw - dn * p_t)
    dX_pos_t = -dX_pos_h

    dX_uv = R_tcT @ R_hc @ Jb
    dX_d = _mtv(R_tc, p_hc - p_tc)

    Jh = -Jpi @ np.concatenate([dX_rot_h, dX_pos_h], axis=2)
    Jt = -Jpi @ np.concatenate([dX_rot_t, dX_pos_t], axis=2)
    Jl = -Jpi @ np.concatenate([dX_uv, dX_d[:, :, None]], axis=2)
    return r, Jh, Jt, Jl, valid


def reprojection_residual(lm, z, host_pose: geom.Pose3,
                          target_pose: geom.Pose3, cam: CameraModel,
                          cam_idx=0):
    """Single-observation residual; lm is (u, v, inverse_distance).

    Returns (r, jac, valid) with jac keyed rot_h/pos_h/rot_t/pos_t/uv/d.
    Invalid observations (nonpositive depth in the target camera) return
    valid=False and must be excluded by the caller.
    """
    u, v, d = lm
    r, Jh, Jt, Jl, valid = reprojection_batch(
        cam, host_pose.R[None], host_pose.t[None], target_pose.R[None],
        target_pose.t[None], np.array([cam_idx]),
        np.array([[u, v]]), np.array([d]), np.asarray(z, dtype=float)[None])
    jac = {
        "rot_h": Jh[0, :, 0:3], "pos_h": Jh[0, :, 3:6],
        "rot_t": Jt[0, :, 0:3], "pos_t": Jt[0, :, 3:6],
        "uv": Jl[0, :, 0:2], "d": Jl[0, :, 2:3],
    }
    return r[0], jac, bool(valid[0])


def triangulate_stereo(cam: CameraModel, z0, z1):
    """Inverse distance along the camera-0 bearing from a stereo pair."""
    n0 = cam.backproject(np.asarray(z0, dtype=float))
    n1 = cam.backproject(np.asarray(z1, dtype=float))
    T_10 = cam.T_IC[1].inverse().compose(cam.T_IC[0])
    a = np.cross(n1, T_10.R @ n0)
    rhs = -np.cross(n1, T_10.t)
    denom = a @ a
    if denom < 1e-12:
        return 0.0
    rng = (a @ rhs) / denom
    if rng <= 0.0:
        return 0.0
    return float(np.clip(1.0 / rng, 0.0, 10.0))


# --- window state and configuration -------------------------------------------

@dataclass
class EstimatorConfig:
    n_keyframes: int = 7
    m_recent: int = 3
    kf_threshold: float = 0.70
    pixel_sigma: float = 1.0
    huber_px: float = 1.0
    max_iters: int = 8
    step_tol: float = 1e-8
    max_new_landmarks: int = 50
    min_obs_keep: int = 2
    bias_walk_a: float = 1e-2     # m/s^2 / sqrt(s)
    bias_walk_g: float = 1e-4     # rad/s / sqrt(s)
    gauge_prior: str = "first_pose"   # "first_pose" pins position+yaw, "none"
    gauge_info: float = 1e8
    record_linearization_points: bool = False


@dataclass
class WindowValues:
    """Current estimates: long-term keyframe poses, recent full states,
    landmark chart coordinates (u, v, inverse distance)."""

    kf: dict = field(default_factory=dict)       # fid -> Pose3
    recent: dict = field(default_factory=dict)   # fid -> NavState
    lms: dict = field(default_factory=dict)      # lm_id -> array([u, v, d])

    def copy(self):
        return WindowValues(
            {f: geom.Pose3(p.R.copy(), p.t.copy())
             for f, p in self.kf.items()},
            {f: s.copy() for f, s in self.recent.items()},
            {l: v.copy() for l, v in self.lms.items()})

    def frame_pose(self, fid) -> geom.Pose3:
        if fid in self.recent:
            return self.recent[fid].pose
        return self.kf[fid]

    def block(self, vid):
        """Current value of one variable block id (fid_or_lm, name)."""
        owner, name = vid
        if name in ("uv",):
            return self.lms[owner][0:2]
        if name == "d":
            return self.lms[owner][2]
        if owner in self.recent:
            s = self.recent[owner]
            return {"rot": s.pose.R, "pos": s.pose.t, "vel": s.velocity,
                    "ba": s.bias_a, "bg": s.bias_g}[name]
        pose = self.kf[owner]
        return {"rot": pose.R, "pos": pose.t}[name]


def _copy_value(val):
    return np.array(val, dtype=float, copy=True) if np.ndim(val) else float(val)


@dataclass
class _Layout:
    """Flat ordering: keyframe poses, then recent states, then landmarks."""

    frame_off: dict
    frame_is_nav: dict
    dim_pose: int
    lm_ids: list
    lm_index: dict

    @staticmethod
    def build(values: WindowValues):
        frame_off = {}
        frame_is_nav = {}
        off = 0
        for fid in sorted(values.kf):
            frame_off[fid] = off
            frame_is_nav[fid] = False
            off += 6
        for fid in sorted(values.recent):
            frame_off[fid] = off
            frame_is_nav[fid] = True
            off += 15
        lm_ids = sorted(values.lms)
        return _Layout(frame_off, frame_is_nav, off, lm_ids,
                       {l: i for i, l in enumerate(lm_ids)})

    def block_index(self, vid):
        """Flat pose-space offset of a frame-block variable id."""
        owner, name = vid
        base = self.frame_off[owner]
        off = {"rot": 0, "pos": 3, "vel": 6, "ba": 9, "bg": 12}[name]
        if not self.frame_is_nav[owner] and name not in ("rot", "pos"):
            raise WindowError(f"{vid} no longer has {name} in the window")
        return base + off


class _WindowProblem:
    """Adapter exposing the window energy to the damped GN driver."""

    def __init__(self, est, layout):
        self.est = est
        self.lay = layout
        self.obs_arrays = est._obs_arrays(layout)

    def energy(self, values):
        return self.est._energy(values, self.lay, self.obs_arrays)

    def linearize(self, values):
        return self.est._linearize(values, self.lay, self.obs_arrays)

    def retract(self, values, xi_p, xi_l):
        return self.est._retract(values, self.lay, xi_p, xi_l)


class SlidingWindowEstimator:
    """Single-writer sliding-window smoother fed with tracked observations."""

    def __init__(self, cam: CameraModel, noise: ImuNoise,
                 cfg: EstimatorConfig | None = None):
        self.cam = cam
        self.noise = noise
        self.cfg = cfg or EstimatorConfig()
        self.values = WindowValues()
        self.timestamps = {}
        self.kf_flag = set()          # frames selected as keyframes
        self.host_of = {}             # lm_id -> host frame
        self.obs: list[Obs] = []
        self.imu_factors = {}         # (i, j) -> PreintegratedImu
        self.prior: MargPrior | None = None
        self.fej = {}                 # var id -> frozen linearization value
        self.track_map = {}           # external track id -> lm_id
        self.lm_track = {}            # lm_id -> external track id
        self.next_lm = 0
        self.events = []
        self.reports = []
        self.traj = {}                # fid -> (t, Pose3) latest estimate
        self.gauge_anchor = None      # (fid, p_ref, z_yaw)
        self.last_marg_eval = {}

    # -- frame ingestion -------------------------------------------------

    def initialize(self, fid, t, nav: NavState, obs_rows):
        self.values.recent[fid] = nav.copy()
        self.timestamps[fid] = t
        if self.cfg.gauge_prior == "first_pose":
            self.gauge_anchor = (fid, nav.pose.t.copy(),
                                 nav.pose.R.T @ np.array([1.0, 0.0, 0.0]))
        live, connected, candidates = self._attach_obs(fid, obs_rows)
        if keyframe_decision(live, connected, self.cfg.kf_threshold):
            self.kf_flag.add(fid)
            self._host_new_landmarks(fid, candidates)
        self._snapshot()

    def process_frame(self, fid, t, obs_rows, preint: PreintegratedImu):
        from .imu import predict
        prev = max(self.values.recent)
        self.values.recent[fid] = predict(self.values.recent[prev], preint,
                                          self.noise)
        self.timestamps[fid] = t
        self.imu_factors[(prev, fid)] = preint
        live, connected, candidates = self._attach_obs(fid, obs_rows)
        if keyframe_decision(live, connected, self.cfg.kf_threshold):
            self.kf_flag.add(fid)
            self._host_new_landmarks(fid, candidates)
        report = self.optimize()
        self.reports.append(report)
        if len(self.values.recent) > self.cfg.m_recent:
            self._marginalize()
        self._snapshot()

    def _attach_obs(self, fid, obs_rows):
        live_tracks = set()
        connected = set()
        candidates = {}
        for row in obs_rows:
            track = int(row["lm"])
            cam_idx = int(row["cam"])
            z = (float(row["u"]), float(row["v"]))
            if cam_idx == 0:
                live_tracks.add(track)
            lm_id = self.track_map.get(track)
            if lm_id is not None and lm_id in self.values.lms:
                if cam_idx == 0:
                    connected.add(track)
                self.obs.append(Obs(lm_id, fid, cam_idx, z))
            else:
                candidates.setdefault(track, {})[cam_idx] = z
        return len(live_tracks), len(connected), candidates

    def _host_new_landmarks(self, fid, candidates):
        pose = self.values.frame_pose(fid)
        added = 0
        for track in sorted(candidates):
            if added >= self.cfg.max_new_landmarks:
                break
            zs = candidates[track]
            if 0 not in zs or 1 not in zs:
                continue
            d = triangulate_stereo(self.cam, zs[0], zs[1])
            n0 = self.cam.backproject(np.asarray(zs[0]))
            try:
                u, v = geom.bearing_encode(n0)
            except ValueError:
                continue
            lm_id = self.next_lm
            self.next_lm += 1
            self.values.lms[lm_id] = np.array([u, v, d])
            self.host_of[lm_id] = fid
            self.track_map[track] = lm_id
            self.lm_track[lm_id] = track
            self.obs.append(Obs(lm_id, fid, 0, zs[0]))
            self.obs.append(Obs(lm_id, fid, 1, zs[1]))
            added += 1

    def _snapshot(self):
        for fid in self.values.kf:
            self.traj[fid] = (self.timestamps[fid], self.values.kf[fid])
        for fid, s in self.values.recent.items():
            self.traj[fid] = (self.timestamps[fid], s.pose)

    # -- energy / linearization -------------------------------------------

    def _obs_arrays(self, lay: _Layout):
        rows = [o for o in self.obs
                if o.lm_id in lay.lm_index
                and self.host_of[o.lm_id] in lay.frame_off
                and o.frame in lay.frame_off]
        if len(rows) != len(self.obs):
            raise WindowError("observation references a missing variable")
        n = len(rows)
        frames = sorted(lay.frame_off)
        slot = {fid: i for i, fid in enumerate(frames)}
        arr = {
            "frames": frames,
            "host_off": np.array([lay.frame_off[self.host_of[o.lm_id]]
                                  for o in rows], dtype=int),
            "targ_off": np.array([lay.frame_off[o.frame] for o in rows],
                                 dtype=int),
            "host_slot": np.array([slot[self.host_of[o.lm_id]]
                                   for o in rows], dtype=int),
            "targ_slot": np.array([slot[o.frame] for o in rows], dtype=int),
            "lm_idx": np.array([lay.lm_index[o.lm_id] for o in rows],
                               dtype=int),
            "lm_ids": lay.lm_ids,
            "cam": np.array([o.cam for o in rows], dtype=int),
            "z": np.array([o.z for o in rows], dtype=float).reshape(n, 2),
        }
        return arr

    def _reproj_terms(self, values, arr, with_jacobians=True):
        n = len(arr["cam"])
        if n == 0:
            z = np.zeros((0, 2))
            return (z, None, None, None, np.zeros(0, dtype=bool),
                    (np.zeros(0), np.zeros(0)))
        F = len(arr["frames"])
        Rf = np.empty((F, 3, 3))
        pf = np.empty((F, 3))
        for i, fid in enumerate(arr["frames"]):
            pose = values.frame_pose(fid)
            Rf[i] = pose.R
            pf[i] = pose.t
        lm_arr = np.array([values.lms[l] for l in arr["lm_ids"]]).reshape(-1, 3)
        uv = lm_arr[arr["lm_idx"], 0:2]
        d = lm_arr[arr["lm_idx"], 2]
        r, Jh, Jt, Jl, valid = reprojection_batch(
            self.cam, Rf[arr["host_slot"]], pf[arr["host_slot"]],
            Rf[arr["targ_slot"]], pf[arr["targ_slot"]], arr["cam"], uv, d,
            arr["z"], with_jacobians=with_jacobians)
        wq = 1.0 / self.cfg.pixel_sigma ** 2
        e = np.sqrt(wq) * np.linalg.norm(r, axis=1)
        rho, w_rob = huber(e, self.cfg.huber_px / self.cfg.pixel_sigma)
        return r, Jh, Jt, Jl, valid, (rho, w_rob * wq)

    def _energy(self, values, lay, arr):
        r, _, _, _, valid, rw = self._reproj_terms(values, arr,
                                                   with_jacobians=False)
        total = 0.5 * rw[0][valid].sum() if len(r) else 0.0
        for (i, j), p in self.imu_factors.items():
            rr, _, W = imu_residual(p, values.recent[i], values.recent[j],
                                    self.noise, with_jacobians=False)
            total += 0.5 * rr @ W @ rr
        total += 0.5 * self._walk_energy(values)
        total += self._prior_energy(values)
        total += 0.5 * self._gauge_energy(values)
        return total

    def _walk_terms(self, i, j):
        dt = max(self.timestamps[j] - self.timestamps[i], 1e-6)
        wa = 1.0 / (self.cfg.bias_walk_a ** 2 * dt)
        wg = 1.0 / (self.cfg.bias_walk_g ** 2 * dt)
        return wa, wg

    def _walk_energy(self, values):
        total = 0.0
        for (i, j) in self.imu_factors:
            wa, wg = self._walk_terms(i, j)
            si, sj = values.recent[i], values.recent[j]
            total += wa * np.sum((sj.bias_a - si.bias_a) ** 2)
            total += wg * np.sum((sj.bias_g - si.bias_g) ** 2)
        return total

    def _prior_delta(self, values):
        prior = self.prior
        delta = np.empty(prior.dim())
        off = 0
        for vid in prior.var_ids:
            kind = BLOCK_KINDS[vid[1]]
            xi = geom.boxminus(kind, values.block(vid), prior.ref_points[vid])
            delta[off:off + len(xi)] = xi
            off += len(xi)
        return delta

    def _prior_energy(self, values):
        if self.prior is None:
            return 0.0
        delta = self._prior_delta(values)
        return float(delta @ self.prior.b + 0.5 * delta @ self.prior.H @ delta)

    def _gauge_energy(self, values):
        if self.gauge_anchor is None:
            return 0.0
        fid, p_ref, z_yaw = self.gauge_anchor
        if fid not in self.timestamps or \
                (fid not in values.kf and fid not in values.recent):
            return 0.0
        pose = values.frame_pose(fid)
        r_p = pose.t - p_ref
        r_y = (pose.R @ z_yaw)[1]
        return self.cfg.gauge_info * (r_p @ r_p + r_y * r_y)

    def _linearize(self, values, lay, arr):
        acc = Accumulator(lay.dim_pose, len(lay.lm_ids))
        r, Jh, Jt, Jl, valid, rw = self._reproj_terms(values, arr)
        if len(r):
            v = valid
            acc.add_reprojection(arr["host_off"][v], arr["targ_off"][v],
                                 arr["lm_idx"][v], Jh[v], Jt[v], Jl[v],
                                 r[v], rw[1][v])
        for (i, j), p in self.imu_factors.items():
            rr, jac, W = imu_residual(p, values.recent[i], values.recent[j],
                                      self.noise)
            blocks = [((i, "rot"), jac["rot_i"]), ((i, "pos"), jac["pos_i"]),
                      ((i, "vel"), jac["vel_i"]), ((i, "ba"), jac["bias_a_i"]),
                      ((i, "bg"), jac["bias_g_i"]), ((j, "rot"), jac["rot_j"]),
                      ((j, "pos"), jac["pos_j"]), ((j, "vel"), jac["vel_j"])]
            self._add_dense_factor(acc, lay, blocks, rr, W)
            wa, wg = self._walk_terms(i, j)
            si, sj = values.recent[i], values.recent[j]
            self._add_dense_factor(
                acc, lay,
                [((i, "ba"), -np.eye(3)), ((j, "ba"), np.eye(3))],
                sj.bias_a - si.bias_a, wa * np.eye(3))
            self._add_dense_factor(
                acc, lay,
                [((i, "bg"), -np.eye(3)), ((j, "bg"), np.eye(3))],
                sj.bias_g - si.bias_g, wg * np.eye(3))
        if self.prior is not None:
            idx = np.concatenate(
                [np.arange(lay.block_index(vid), lay.block_index(vid)
                           + geom.BLOCK_DIMS[BLOCK_KINDS[vid[1]]])
                 for vid in self.prior.var_ids])
            delta = self._prior_delta(values)
            acc.H[np.ix_(idx, idx)] += self.prior.H
            acc.b[idx] += self.prior.b + self.prior.H @ delta
        self._add_gauge(acc, lay, values)
        return acc

    def _add_gauge(self, acc, lay, values):
        if self.gauge_anchor is None:
            return
        fid, p_ref, z_yaw = self.gauge_anchor
        if fid not in lay.frame_off:
            return
        pose = values.frame_pose(fid)
        info = self.cfg.gauge_info
        off = lay.block_index((fid, "pos"))
        acc.H[off:off + 3, off:off + 3] += info * np.eye(3)
        acc.b[off:off + 3] += info * (pose.t - p_ref)
        # yaw: y-component of R z_yaw, Jacobian -hat(R z_yaw) row 1
        off_r = lay.block_index((fid, "rot"))
        w = pose.R @ z_yaw
        J = -geom.hat(w)[1]
        acc.H[off_r:off_r + 3, off_r:off_r + 3] += info * np.outer(J, J)
        acc.b[off_r:off_r + 3] += info * J * w[1]

    @staticmethod
    def _add_dense_factor(acc, lay, blocks, r, W):
        """blocks: [(var id, Jacobian block)] for a small dense factor."""
        Wr = W @ r
        idx = [(lay.block_index(vid), J) for vid, J in blocks]
        for oi, Ji in idx:
            acc.add_grad(oi, Ji.T @ Wr)
            JiW = Ji.T @ W
            for oj, Jj in idx:
                acc.add_block(oi, oj, JiW @ Jj)

    def _retract(self, values, lay, xi_p, xi_l):
        out = values.copy()
        for fid, off in lay.frame_off.items():
            if lay.frame_is_nav[fid]:
                out.recent[fid] = out.recent[fid].retract(xi_p[off:off + 15])
            else:
                pose = out.kf[fid]
                out.kf[fid] = geom.Pose3(
                    geom.so3_exp(xi_p[off:off + 3]) @ pose.R,
                    pose.t + xi_p[off + 3:off + 6])
        for i, lm in enumerate(lay.lm_ids):
            val = out.lms[lm]
            val[0:2] += xi_l[i, 0:2]
            val[2] = min(max(val[2] + xi_l[i, 2], 0.0), 10.0)
        return out

    def optimize(self):
        lay = _Layout.build(self.values)
        problem = _WindowProblem(self, lay)
        self.values, report = run_damped_gn(
            problem, self.values, self.cfg.max_iters, self.cfg.step_tol)
        return report

    # -- marginalization ----------------------------------------------------

    def _fej_pose(self, fid) -> geom.Pose3:
        return geom.Pose3(np.asarray(self.fej[(fid, "rot")]),
                          np.asarray(self.fej[(fid, "pos")]))

    def _fej_nav(self, fid) -> NavState:
        return NavState(self._fej_pose(fid),
                        np.asarray(self.fej[(fid, "vel")]),
                        np.asarray(self.fej[(fid, "ba")]),
                        np.asarray(self.fej[(fid, "bg")]))

    def _build_marg_system(self, factors):
        """Assemble the blanket linearization for a marginalization step.

        Residuals are evaluated at current estimates, Jacobians at the
        frozen first-estimate values (new variables freeze here).
        Returns (var_ids, layout, H, b).
        """
        var_ids = list(self.prior.var_ids) if self.prior else []
        seen = set(var_ids)

        def add(vid):
            if vid not in seen:
                seen.add(vid)
                var_ids.append(vid)

        for f in factors:
            kind = f[0]
            if kind == "imu":
                _, i, j, _p = f
                for blk in NAV_BLOCKS:
                    add((i, blk))
                for blk in ("rot", "pos", "vel"):
                    add((j, blk))
                for blk in ("ba", "bg"):
                    add((j, blk))
            elif kind == "walk":
                _, i, j = f
                for blk in ("ba", "bg"):
                    add((i, blk))
                    add((j, blk))
            elif kind == "reproj":
                for o in f[1]:
                    add((self.host_of[o.lm_id], "rot"))
                    add((self.host_of[o.lm_id], "pos"))
                    add((o.frame, "rot"))
                    add((o.frame, "pos"))
                    add((o.lm_id, "uv"))
                    add((o.lm_id, "d"))
            elif kind == "gauge":
                _, fid = f
                add((fid, "rot"))
                add((fid, "pos"))
            else:
                raise WindowError(f"unknown factor kind {kind!r}")

        for vid in var_ids:
            if vid not in self.fej:
                self.fej[vid] = _copy_value(self.values.block(vid))

        layout = geom.BlockLayout(
            [(vid, BLOCK_KINDS[vid[1]]) for vid in var_ids])
        H = np.zeros((layout.dim, layout.dim))
        b = np.zeros(layout.dim)
        eval_record = {}

        if self.prior is not None:
            delta = self._prior_delta(self.values)
            idx = layout.indices_of(self.prior.var_ids)
            H[np.ix_(idx, idx)] += self.prior.H
            b[idx] += self.prior.b + self.prior.H @ delta

        def add_factor(blocks, r, W):
            Wr = W @ r
            items = [(layout.slice_of(vid), J) for vid, J in blocks]
            for sl_i, Ji in items:
                b[sl_i] += Ji.T @ Wr
                JiW = Ji.T @ W
                for sl_j, Jj in items:
                    H[sl_i, sl_j] += JiW @ Jj

        for f in factors:
            kind = f[0]
            if kind == "imu":
                _, i, j, p = f
                r, _, W = imu_residual(p, self.values.recent[i],
                                       self.values.recent[j], self.noise,
                                       with_jacobians=False)
                _, jac, _ = imu_residual(p, self._fej_nav(i),
                                         self._fej_nav(j), self.noise)
                add_factor(
                    [((i, "rot"), jac["rot_i"]), ((i, "pos"), jac["pos_i"]),
                     ((i, "vel"), jac["vel_i"]),
                     ((i, "ba"), jac["bias_a_i"]),
                     ((i, "bg"), jac["bias_g_i"]),
                     ((j, "rot"), jac["rot_j"]), ((j, "pos"), jac["pos_j"]),
                     ((j, "vel"), jac["vel_j"])], r, W)
                eval_record[(i, "rot")] = self.fej[(i, "rot")]
                eval_record[(j, "rot")] = self.fej[(j, "rot")]
            elif kind == "walk":
                _, i, j = f
                wa, wg = self._walk_terms(i, j)
                si = self.values.recent[i]
                sj = self.values.recent[j]
                add_factor([((i, "ba"), -np.eye(3)), ((j, "ba"), np.eye(3))],
                           sj.bias_a - si.bias_a, wa * np.eye(3))
                add_factor([((i, "bg"), -np.eye(3)), ((j, "bg"), np.eye(3))],
                           sj.bias_g - si.bias_g, wg * np.eye(3))
            elif kind == "reproj":
                wq = 1.0 / self.cfg.pixel_sigma ** 2
                for o in f[1]:
                    host = self.host_of[o.lm_id]
                    lm_cur = self.values.lms[o.lm_id]
                    r, _, valid = reprojection_residual(
                        lm_cur, o.z, self.values.frame_pose(host),
                        self.values.frame_pose(o.frame), self.cam, o.cam)
                    lm_fej = np.concatenate(
                        [np.atleast_1d(self.fej[(o.lm_id, "uv")]),
                         np.atleast_1d(self.fej[(o.lm_id, "d")])])
                    _, jac, valid_f = reprojection_residual(
                        lm_fej, o.z, self._fej_pose(host),
                        self._fej_pose(o.frame), self.cam, o.cam)
                    if not (valid and valid_f):
                        continue
                    e = np.linalg.norm(r) / self.cfg.pixel_sigma
                    _, w_rob = huber(np.array([e]),
                                     self.cfg.huber_px / self.cfg.pixel_sigma)
                    W = float(w_rob[0]) * wq * np.eye(2)
                    add_factor(
                        [((host, "rot"), jac["rot_h"]),
                         ((host, "pos"), jac["pos_h"]),
                         ((o.frame, "rot"), jac["rot_t"]),
                         ((o.frame, "pos"), jac["pos_t"]),
                         ((o.lm_id, "uv"), jac["uv"]),
                         ((o.lm_id, "d"), jac["d"])], r, W)
                    eval_record[(o.lm_id, "uv")] = self.fej[(o.lm_id, "uv")]
            elif kind == "gauge":
                _, fid = f
                _, p_ref, z_yaw = self.gauge_anchor
                pose_cur = self.values.frame_pose(fid)
                pose_fej = self._fej_pose(fid)
                info = self.cfg.gauge_info
                add_factor([((fid, "pos"), np.eye(3))], pose_cur.t - p_ref,
                           info * np.eye(3))
                w_fej = pose_fej.R @ z_yaw
                Jy = -geom.hat(w_fej)[1:2]
                r_y = np.array([(pose_cur.R @ z_yaw)[1]])
                add_factor([((fid, "rot"), Jy)], r_y,
                           info * np.eye(1))

        if self.cfg.record_linearization_points:
            self.last_marg_eval = eval_record
        return var_ids, layout, H, b

    def _finish_marginalization(self, var_ids, layout, H, b, elim_ids):
        keep_ids = [vid for vid in var_ids if vid not in elim_ids]
        keep_idx = layout.indices_of(keep_ids)
        drop_idx = layout.indices_of([vid for vid in var_ids
                                      if vid in elim_ids])
        Hm, bm = marginalize_dense(H, b, keep_idx, drop_idx)
        self.prior = MargPrior(
            keep_ids, Hm, bm,
            lin_points={vid: self.fej[vid] for vid in keep_ids},
            ref_points={vid: _copy_value(self.values.block(vid))
                        for vid in keep_ids})
        for vid in elim_ids:
            self.fej.pop(vid, None)

    def _select_eviction(self):
        """Old keyframe with the smallest fraction of still-observed
        landmarks; ties broken toward the oldest id."""
        recent_set = set(self.values.recent)
        best = None
        for fid in sorted(self.values.kf):
            hosted = [l for l, h in self.host_of.items()
                      if h == fid and l in self.values.lms]
            if hosted:
                active = {o.lm_id for o in self.obs
                          if o.frame in recent_set and o.lm_id in
                          self.values.lms}
                frac = sum(1 for l in hosted if l in active) / len(hosted)
            else:
                frac = 0.0
            if best is None or frac < best[0] - 1e-12:
                best = (frac, fid)
        return best[1]

    def _drop_lm(self, lm_id):
        self.values.lms.pop(lm_id, None)
        self.host_of.pop(lm_id, None)
        track = self.lm_track.pop(lm_id, None)
        if track is not None:
            self.track_map.pop(track, None)

    def _cleanup_landmarks(self):
        counts = {}
        for o in self.obs:
            counts[o.lm_id] = counts.get(o.lm_id, 0) + 1
        weak = [l for l in list(self.values.lms)
                if counts.get(l, 0) < self.cfg.min_obs_keep]
        for l in weak:
            self._drop_lm(l)
        keep = set(self.values.lms)
        self.obs = [o for o in self.obs if o.lm_id in keep]

    def _marginalize(self):
        recent_ids = sorted(self.values.recent)
        leaving, nxt = recent_ids[0], recent_ids[1]
        factors = [("imu", leaving, nxt, self.imu_factors.pop((leaving, nxt))),
                   ("walk", leaving, nxt)]
        evicted = None

        if leaving not in self.kf_flag:
            # the whole frame goes: its targeted factors are dropped first
            self.obs = [o for o in self.obs if o.frame != leaving]
            elim = {(leaving, blk) for blk in NAV_BLOCKS}
        else:
            elim = {(leaving, blk) for blk in ("vel", "ba", "bg")}
            if len(self.values.kf) + 1 > self.cfg.n_keyframes:
                evicted = self._select_eviction()
                # factors targeting the evicted frame are dropped
                self.obs = [o for o in self.obs
                            if not (o.frame == evicted
                                    and self.host_of[o.lm_id] != evicted)]
                hosted = [l for l, h in self.host_of.items()
                          if h == evicted and l in self.values.lms]
                kf_poses = set(self.values.kf) | {leaving}
                absorbed = []
                for lm in hosted:
                    obs_lm = [o for o in self.obs if o.lm_id == lm]
                    keepable = [o for o in obs_lm if o.frame in kf_poses]
                    if len(keepable) >= 2:
                        absorbed.extend(keepable)
                        elim.add((lm, "uv"))
                        elim.add((lm, "d"))
                if absorbed:
                    factors.append(("reproj", absorbed))
                elim.add((evicted, "rot"))
                elim.add((evicted, "pos"))
                if self.gauge_anchor is not None \
                        and self.gauge_anchor[0] == evicted:
                    factors.append(("gauge", evicted))

        var_ids, layout, H, b = self._build_marg_system(factors)

        if evicted is not None:
            kf_frames = sorted(set(self.values.kf) | {leaving})
            self.events.append(KeyframeMarginalizationEvent(
                evicted=evicted,
                var_ids=list(var_ids),
                H=H.copy(),
                b=b.copy(),
                lin_points={vid: _copy_value(self.fej[vid])
                            for vid in var_ids},
                estimates={vid: _copy_value(self.values.block(vid))
                           for vid in var_ids},
                kf_frames=kf_frames,
                timestamps={fid: self.timestamps[fid] for fid in kf_frames},
            ))

        # window mutation before the prior is rebuilt on kept variables
        if leaving in self.kf_flag:
            self.values.kf[leaving] = self.values.recent.pop(leaving).pose
        else:
            self.values.recent.pop(leaving)
        if evicted is not None:
            self.traj[evicted] = (self.timestamps[evicted],
                                  self.values.kf.pop(evicted))
            for lm in [l for l, h in self.host_of.items() if h == evicted]:
                self._drop_lm(lm)
            if self.gauge_anchor is not None \
                    and self.gauge_anchor[0] == evicted:
                self.gauge_anchor = None
        keep = set(self.values.lms)
        self.obs = [o for o in self.obs if o.lm_id in keep]
        self._cleanup_landmarks()

        self._finish_marginalization(var_ids, layout, H, b, elim)


# --- dataset-driven odometry ---------------------------------------------------

@dataclass
class VioResult:
    frame_ids: list
    times: list
    poses: list            # Pose3 per frame, final estimates
    keyframe_ids: list
    events: list
    reports: list

    def to_trajectory(self):
        from .datasets import Trajectory
        return Trajectory.from_poses(np.asarray(self.times), self.poses)

    def keyframe_trajectory(self):
        from .datasets import Trajectory
        idx = [self.frame_ids.index(k) for k in self.keyframe_ids]
        return Trajectory.from_poses(
            np.asarray([self.times[i] for i in idx]),
            [self.poses[i] for i in idx])


def run_vio(ds, cfg: EstimatorConfig | None = None,
            init_state: NavState | None = None,
            init_perturbation=None) -> VioResult:
    """Run the smoother over a dataset (see datasets.Dataset).

    The initial state defaults to the first ground-truth row; an optional
    15-dim perturbation is applied to it.
    """
    from .imu import preintegrate

    cfg = cfg or EstimatorConfig()
    if getattr(ds, "pixel_sigma", 0.0) > 0:
        cfg = replace_pixel_sigma(cfg, ds.pixel_sigma)
    est = SlidingWindowEstimator(ds.camera, ds.noise, cfg)

    if init_state is None:
        if ds.gt_states is None:
            raise ValueError("need ground truth or an explicit initial state")
        init_state = ds.gt_states[0]
    init_state = init_state.copy()
    if init_perturbation is not None:
        init_state = init_state.retract(np.asarray(init_perturbation))

    frame_ids = [int(f) for f in ds.frame_ids]
    for k, fid in enumerate(frame_ids):
        t = float(ds.frame_times[k])
        rows = ds.obs_for_frame(fid)
        if k == 0:
            est.initialize(fid, t, init_state, rows)
            continue
        prev_state = est.values.recent[max(est.values.recent)]
        p = preintegrate(ds.imu_times, ds.gyro, ds.accel,
                         float(ds.frame_times[k - 1]), t,
                         prev_state.bias_a, prev_state.bias_g, ds.noise)
        est.process_frame(fid, t, rows, p)

    times = [est.traj[f][0] for f in frame_ids]
    poses = [est.traj[f][1] for f in frame_ids]
    kf_ids = sorted(f for f in est.kf_flag if f in est.traj)
    return VioResult(frame_ids, times, poses, kf_ids, est.events,
                     est.reports)


def replace_pixel_sigma(cfg: EstimatorConfig, sigma) -> EstimatorConfig:
    from dataclasses import replace
    return replace(cfg, pixel_sigma=float(sigma))
