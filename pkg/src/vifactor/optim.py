"""Damped Gauss-Newton with landmark elimination, shared by the sliding
window smoother and the global mapper.

Problems expose `energy(state)`, `linearize(state)` and
`retract(state, xi_pose, xi_lm)`; the solver keeps a Levenberg-style
damping parameter so accepted steps never increase the energy.
Landmark blocks are 3-dim and eliminated before the dense solve over the
pose-space variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .imu import NumericalError


def huber(e, delta):
    """Robust cost and IRLS weight for whitened residual norms e >= 0."""
    e = np.asarray(e, dtype=float)
    w = np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-300))
    rho = np.where(e <= delta, e * e, delta * (2.0 * e - delta))
    return rho, w


def stable_spd_solve(A, B):
    """Solve A X = B for symmetric positive (semi)definite A.

    Uses Cholesky when possible and falls back to an eigenvalue-floored
    inverse for degenerate blocks.
    """
    A = (A + A.T) / 2.0
    try:
        c, low = scipy.linalg.cho_factor(A, check_finite=False)
        return scipy.linalg.cho_solve((c, low), B, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError):
        vals, vecs = np.linalg.eigh(A)
        if not np.all(np.isfinite(vals)):
            raise NumericalError("non-finite matrix in stable_spd_solve")
        vals = np.maximum(vals, 1e-12 * max(vals.max(), 1.0))
        return vecs @ ((vecs.T @ B).T / vals).T


def marginalize_dense(H, b, keep_idx, drop_idx):
    """Schur complement onto the kept variables of a quadratic (H, b)."""
    keep_idx = np.asarray(keep_idx, dtype=int)
    drop_idx = np.asarray(drop_idx, dtype=int)
    Haa = H[np.ix_(keep_idx, keep_idx)]
    Hab = H[np.ix_(keep_idx, drop_idx)]
    Hbb = H[np.ix_(drop_idx, drop_idx)]
    ba = b[keep_idx]
    bb = b[drop_idx]
    X = stable_spd_solve(Hbb, np.column_stack([Hab.T, bb]))
    Hm = Haa - Hab @ X[:, :-1]
    bm = ba - Hab @ X[:, -1]
    return (Hm + Hm.T) / 2.0, bm


@dataclass
class Accumulator:
    """Normal equations with pose-space variables plus 3-dim landmarks."""

    dim_pose: int
    n_landmarks: int
    H: np.ndarray = field(init=False)
    b: np.ndarray = field(init=False)
    Wl: np.ndarray = field(init=False)   # (L, dim_pose, 3) cross blocks
    Hll: np.ndarray = field(init=False)  # (L, 3, 3)
    bl: np.ndarray = field(init=False)   # (L, 3)

    def __post_init__(self):
        self.H = np.zeros((self.dim_pose, self.dim_pose))
        self.b = np.zeros(self.dim_pose)
        self.Wl = np.zeros((self.n_landmarks, self.dim_pose, 3))
        self.Hll = np.zeros((self.n_landmarks, 3, 3))
        self.bl = np.zeros((self.n_landmarks, 3))

    def add_block(self, off_r, off_c, block):
        dr, dc = block.shape
        self.H[off_r:off_r + dr, off_c:off_c + dc] += block

    def add_grad(self, off, g):
        self.b[off:off + len(g)] += g

    def add_reprojection(self, oh, ot, ol, Jh, Jt, Jl, r, w):
        """Batched 2-dim residuals with host/target 6-dim pose blocks.

        oh, ot are the flat offsets of the host/target pose blocks, ol the
        landmark indices; w is the per-residual scalar weight (robust times
        measurement information).
        """
        n = len(r)
        if n == 0:
            return
        Jh_w = Jh * w[:, None, None]
        Jt_w = Jt * w[:, None, None]
        D = self.dim_pose
        r6 = np.arange(6)
        rows_h = oh[:, None] + r6
        rows_t = ot[:, None] + r6

        def scatter(rows, cols, val):
            idx = rows[:, :, None] * D + cols[:, None, :]
            np.add.at(self.H.ravel(), idx.ravel(), val.ravel())

        scatter(rows_h, rows_h, np.einsum("nia,nib->nab", Jh_w, Jh))
        scatter(rows_t, rows_t, np.einsum("nia,nib->nab", Jt_w, Jt))
        ht = np.einsum("nia,nib->nab", Jh_w, Jt)
        scatter(rows_h, rows_t, ht)
        scatter(rows_t, rows_h, ht.transpose(0, 2, 1))

        np.add.at(self.b, rows_h.ravel(),
                  np.einsum("nia,ni->na", Jh_w, r).ravel())
        np.add.at(self.b, rows_t.ravel(),
                  np.einsum("nia,ni->na", Jt_w, r).ravel())

        np.add.at(self.Hll, ol, np.einsum("nia,n,nib->nab", Jl, w, Jl))
        np.add.at(self.bl, ol, np.einsum("nia,n,ni->na", Jl, w, r))
        np.add.at(self.Wl, (ol[:, None], rows_h),
                  np.einsum("nia,nib->nab", Jh_w, Jl))
        np.add.at(self.Wl, (ol[:, None], rows_t),
                  np.einsum("nia,nib->nab", Jt_w, Jl))

    def solve(self, lam):
        """Damped step (xi_pose, xi_lm) and the reduced system diagnostics."""
        Hll_d = self.Hll + lam * np.eye(3)
        L = self.n_landmarks
        D = self.dim_pose
        if L:
            Hll_inv = np.linalg.inv(Hll_d)
            # fold W Hll^-1 W^T and W Hll^-1 bl into the reduced system
            M = self.Wl @ Hll_inv
            Mf = M.transpose(1, 0, 2).reshape(D, 3 * L)
            Wf = self.Wl.transpose(1, 0, 2).reshape(D, 3 * L)
            S = self.H - Mf @ Wf.T
            rhs = self.b - Mf @ self.bl.reshape(3 * L)
        else:
            S = self.H.copy()
            rhs = self.b.copy()
        S[np.diag_indices_from(S)] += lam
        S = (S + S.T) / 2.0
        diag = {}
        try:
            c, low = scipy.linalg.cho_factor(S, check_finite=False)
            xi_p = -scipy.linalg.cho_solve((c, low), rhs, check_finite=False)
        except (scipy.linalg.LinAlgError, ValueError):
            diag["singular"] = True
            diag["condition"] = float(np.linalg.cond(S))
            xi_p = -np.linalg.lstsq(S, rhs, rcond=None)[0]
        if L:
            rhs_l = self.bl + (Wf.T @ xi_p).reshape(L, 3)
            xi_l = -(Hll_inv @ rhs_l[:, :, None])[:, :, 0]
        else:
            xi_l = np.zeros((0, 3))
        return xi_p, xi_l, diag


@dataclass
class GNReport:
    iterations: int = 0
    energies: list = field(default_factory=list)
    final_step: float = np.inf
    reason: str = ""
    diagnostics: dict = field(default_factory=dict)


def run_damped_gn(problem, state, max_iters, step_tol=1e-8,
                  lam0=1e-6, lam_max=1e8, energy_tol=1e-12):
    """Iterate damped Gauss-Newton steps; the energy never increases."""
    report = GNReport()
    energy = problem.energy(state)
    report.energies.append(energy)
    lam = lam0
    for _ in range(max_iters):
        acc = problem.linearize(state)
        report.iterations += 1
        accepted = False
        while lam <= lam_max:
            xi_p, xi_l, diag = acc.solve(lam)
            report.diagnostics.update(diag)
            candidate = problem.retract(state, xi_p, xi_l)
            e_new = problem.energy(candidate)
            if np.isfinite(e_new) and e_new <= energy + 1e-15 * abs(energy):
                state = candidate
                decrease = energy - e_new
                energy = e_new
                report.energies.append(energy)
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            report.reason = "no acceptable step"
            return state, report
        step = max(np.abs(xi_p).max() if len(xi_p) else 0.0,
                   np.abs(xi_l).max() if len(xi_l) else 0.0)
        report.final_step = step
        if step < step_tol:
            report.reason = "converged"
            return state, report
        if decrease <= energy_tol * max(1.0, abs(energy)):
            report.reason = "energy plateau"
            return state, report
    report.reason = "max iterations"
    return state, report
