import numpy as np
import pytest

from vifactor import geom, sim
from vifactor import imu as vimu
from vifactor._kernels import _ref


def quiet_noise():
    return vimu.ImuNoise(np.full(3, 1e-4), np.full(3, 1e-6),
                         np.zeros(3))


def default_noise():
    return vimu.ImuNoise(np.full(3, 8e-4), np.full(3, 6e-6))


def random_state(rng, speed=1.0):
    axis = rng.standard_normal(3)
    R = geom.so3_exp(axis)
    return vimu.NavState(geom.Pose3(R, rng.standard_normal(3) * 2.0),
                         rng.standard_normal(3) * speed,
                         rng.standard_normal(3) * 0.05,
                         rng.standard_normal(3) * 0.01)


def integrate_stream(rng, n=40, dt=0.005, bias_a=None, bias_g=None,
                     noise=None):
    bias_a = np.zeros(3) if bias_a is None else bias_a
    bias_g = np.zeros(3) if bias_g is None else bias_g
    w = rng.standard_normal((n, 3)) * 0.4
    a = rng.standard_normal((n, 3)) * 1.5
    p = vimu.PreintegratedImu(bias_a, bias_g)
    p.integrate(w, a, np.full(n, dt), noise or default_noise())
    return p, w, a, dt


class TestFreshDelta:
    def test_identity_delta(self):
        p = vimu.PreintegratedImu(np.zeros(3), np.zeros(3))
        assert np.allclose(p.dR, np.eye(3))
        assert np.allclose(p.dv, 0) and np.allclose(p.dp, 0)
        assert np.allclose(p.cov, 0)
        assert np.allclose(p.J_a, 0) and np.allclose(p.J_g, 0)
        assert p.dt_total == 0.0

    def test_bias_lin_stored(self):
        p = vimu.PreintegratedImu([1, 2, 3], [4, 5, 6])
        assert np.allclose(p.bias_lin_a, [1, 2, 3])
        assert np.allclose(p.bias_lin_g, [4, 5, 6])

    def test_zero_residual_between_equal_states(self):
        p = vimu.PreintegratedImu(np.zeros(3), np.zeros(3))
        st = vimu.NavState.identity()
        r, _, _ = vimu.imu_residual(p, st, st, quiet_noise())
        assert np.allclose(r, 0.0, atol=1e-15)


class TestIntegration:
    def test_single_sample_uses_previous_velocity(self):
        p = vimu.PreintegratedImu(np.zeros(3), np.zeros(3))
        p.integrate([0, 0, 0], [0, 0, 1], 0.01, default_noise())
        assert np.allclose(p.dR, np.eye(3))
        assert np.allclose(p.dv, [0, 0, 0.01])
        assert np.allclose(p.dp, [0, 0, 0])

    def test_two_samples_hand_unrolled(self):
        p = vimu.PreintegratedImu(np.zeros(3), np.zeros(3))
        for _ in range(2):
            p.integrate([0, 0, 0], [0, 0, 1], 0.01, default_noise())
        assert np.allclose(p.dp, [0, 0, 1e-4])
        assert np.allclose(p.dv, [0, 0, 0.02])
        assert p.dt_total == pytest.approx(0.02)

    def test_rejects_nonpositive_dt(self):
        p = vimu.PreintegratedImu(np.zeros(3), np.zeros(3))
        with pytest.raises(ValueError):
            p.integrate([0, 0, 0], [0, 0, 1], 0.0, default_noise())

    def test_transition_jacobian_matches_finite_differences(self):
        # one propagation step, perturbing the running delta
        rng = np.random.default_rng(3)
        for _ in range(10):
            p0, w, a, dt = integrate_stream(rng, n=5)
            wk = rng.standard_normal(3) * 0.3
            ak = rng.standard_normal(3) * 2.0
            Ra = p0.dR @ ak
            F = np.eye(9)
            F[3:6, 0:3] = -geom.hat(Ra) * dt
            F[6:9, 3:6] = np.eye(3) * dt

            def step(delta):
                dR = geom.so3_exp(delta[0:3]) @ p0.dR
                dv = p0.dv + delta[3:6]
                dp = p0.dp + delta[6:9]
                dp = dp + dv * dt
                dv = dv + dR @ ak * dt
                dR = dR @ geom.so3_exp(wk * dt)
                return dR, dv, dp

            base = step(np.zeros(9))

            def f(delta):
                dR, dv, dp = step(delta)
                return np.concatenate([geom.so3_log(dR @ base[0].T),
                                       dv - base[1], dp - base[2]])

            num = geom.numeric_jacobian(f, np.zeros(9),
                                        oplus=lambda x, xi: x + xi, dim=9)
            scale = 1.0 + np.abs(F).max()
            assert np.abs(num - F).max() < 1e-5 * scale

    def test_covariance_symmetric_psd(self):
        rng = np.random.default_rng(4)
        p, *_ = integrate_stream(rng, n=200)
        assert np.abs(p.cov - p.cov.T).max() < 1e-12
        assert np.linalg.eigvalsh(p.cov).min() > -1e-12


class TestBiasCorrection:
    def test_identity_at_linearization_point(self):
        rng = np.random.default_rng(5)
        ba = np.array([0.02, -0.01, 0.03])
        bg = np.array([0.001, 0.002, -0.001])
        p, *_ = integrate_stream(rng, bias_a=ba, bias_g=bg)
        dR, dv, dp = p.bias_corrected(ba, bg)
        assert np.allclose(dR, p.dR) and np.allclose(dv, p.dv)
        assert np.allclose(dp, p.dp)

    def test_second_order_error_vs_reintegration(self):
        rng = np.random.default_rng(6)
        n, dt = 60, 0.005
        w = rng.standard_normal((n, 3)) * 0.4
        a = rng.standard_normal((n, 3)) * 1.5
        base = vimu.PreintegratedImu(np.zeros(3), np.zeros(3))
        base.integrate(w, a, np.full(n, dt), default_noise())

        direction = rng.standard_normal(6)
        direction /= np.linalg.norm(direction)
        mags = np.logspace(-3.2, -1.8, 6)
        errs = []
        for m in mags:
            eps = direction * m
            dR_c, dv_c, dp_c = base.bias_corrected(eps[:3], eps[3:])
            exact = vimu.PreintegratedImu(eps[:3], eps[3:])
            exact.integrate(w, a, np.full(n, dt), default_noise())
            err = np.concatenate([geom.so3_log(dR_c @ exact.dR.T),
                                  dv_c - exact.dv, dp_c - exact.dp])
            errs.append(np.linalg.norm(err))
        slope = np.polyfit(np.log(mags), np.log(errs), 1)[0]
        assert 1.8 <= slope <= 2.2

    def test_accel_bias_leaves_rotation_unchanged(self):
        rng = np.random.default_rng(7)
        p, *_ = integrate_stream(rng)
        dR, dv, dp = p.bias_corrected(np.array([0.1, -0.1, 0.2]), np.zeros(3))
        assert np.allclose(dR, p.dR)
        assert not np.allclose(dv, p.dv)

    def test_gyro_bias_touches_all_blocks(self):
        rng = np.random.default_rng(8)
        p, *_ = integrate_stream(rng)
        dR, dv, dp = p.bias_corrected(np.zeros(3), np.array([0.01, 0.02, -0.01]))
        assert not np.allclose(dR, p.dR)
        assert not np.allclose(dv, p.dv)
        assert not np.allclose(dp, p.dp)


def residual_stacked(p, si, sj, noise):
    """Residual as a function of the 24-dim stacked state increment."""

    def oplus(states, xi):
        a, b = states
        return (a.retract(xi[0:15]), b.retract(np.concatenate(
            [xi[15:21], xi[21:24], np.zeros(6)])))

    def f(states):
        r, _, _ = vimu.imu_residual(*([p] + list(states)), noise,
                                    with_jacobians=False)
        return r

    return f, oplus


class TestResidual:
    def test_zero_at_simulated_ground_truth(self):
        sc = sim.Scenario(duration=3.0, cam_rate=10.0)
        ds = sim.generate(sc)
        noise = ds.noise_model()
        for k in range(len(ds.frame_ids) - 1):
            p = vimu.preintegrate(ds.imu_times, ds.gyro, ds.accel,
                                  ds.frame_times[k], ds.frame_times[k + 1],
                                  np.zeros(3), np.zeros(3), noise)
            r, _, _ = vimu.imu_residual(p, ds.gt_states[k],
                                        ds.gt_states[k + 1], noise)
            assert np.linalg.norm(r) < 1e-8

    def test_jacobians_match_numeric(self):
        rng = np.random.default_rng(9)
        noise = default_noise()
        for _ in range(20):
            p, *_ = integrate_stream(rng, n=30)
            si = random_state(rng)
            sj = random_state(rng)
            r, jac, _ = vimu.imu_residual(p, si, sj, noise)
            J = np.hstack([jac["rot_i"], jac["pos_i"], jac["vel_i"],
                           jac["bias_a_i"], jac["bias_g_i"],
                           jac["rot_j"], jac["pos_j"], jac["vel_j"]])
            f, oplus = residual_stacked(p, si, sj, noise)
            num = geom.numeric_jacobian(f, (si, sj), oplus, dim=24)
            scale = 1.0 + np.abs(num).max()
            assert np.abs(J - num).max() < 1e-5 * scale

    def test_world_frame_invariance(self):
        rng = np.random.default_rng(10)
        p, *_ = integrate_stream(rng, n=50)
        noise = vimu.ImuNoise(np.full(3, 8e-4), np.full(3, 6e-6),
                              np.array([0.0, 0.0, -9.81]))
        si = random_state(rng)
        sj = random_state(rng)
        r0, _, _ = vimu.imu_residual(p, si, sj, noise)

        G = geom.Pose3(geom.so3_exp(rng.standard_normal(3)),
                       rng.standard_normal(3) * 5.0)

        def moved(s):
            return vimu.NavState(G.compose(s.pose), G.R @ s.velocity,
                                 s.bias_a, s.bias_g)

        noise_g = vimu.ImuNoise(noise.accel_var, noise.gyro_var,
                                G.R @ noise.gravity)
        r1, _, _ = vimu.imu_residual(p, moved(si), moved(sj), noise_g)
        assert np.allclose(r0, r1, atol=1e-9)

    def test_stream_split_chaining(self):
        rng = np.random.default_rng(11)
        n, dt = 80, 0.005
        w = rng.standard_normal((n, 3)) * 0.5
        a = rng.standard_normal((n, 3)) * 1.5
        noise = default_noise()
        full = vimu.PreintegratedImu(np.zeros(3), np.zeros(3))
        full.integrate(w, a, np.full(n, dt), noise)
        for cut in (1, 13, 40, 79):
            p1 = vimu.PreintegratedImu(np.zeros(3), np.zeros(3))
            p1.integrate(w[:cut], a[:cut], np.full(cut, dt), noise)
            p2 = vimu.PreintegratedImu(np.zeros(3), np.zeros(3))
            p2.integrate(w[cut:], a[cut:], np.full(n - cut, dt), noise)
            chained = p1.dR @ p2.dR
            assert np.abs(chained - full.dR).max() < 1e-12

    def test_weight_is_regularized_inverse(self):
        rng = np.random.default_rng(12)
        p, *_ = integrate_stream(rng, n=100)
        _, _, W = vimu.imu_residual(p, random_state(rng), random_state(rng),
                                    default_noise())
        cov_r = vimu.residual_cov(p)
        assert np.allclose(W @ (cov_r + 1e-12 * np.eye(9)), np.eye(9),
                           atol=1e-6)

    def test_prediction_closes_residual(self):
        rng = np.random.default_rng(13)
        noise = vimu.ImuNoise(np.full(3, 8e-4), np.full(3, 6e-6))
        p, *_ = integrate_stream(rng, n=40, noise=noise)
        si = random_state(rng)
        sj = vimu.predict(si, p, noise)
        r, _, _ = vimu.imu_residual(p, si, sj, noise)
        assert np.linalg.norm(r) < 1e-10


class TestMonteCarloConsistency:
    def test_sample_covariance_matches_propagated(self):
        traj = sim.TrajectorySpec()
        times = np.arange(201) / 200.0
        R, v, p = sim.discrete_states(traj, times)
        w_clean, a_clean = sim.synthesize_imu(traj, times, R, v)
        noise = vimu.ImuNoise(np.full(3, 4e-4), np.full(3, 4e-6),
                              sim.GRAVITY.copy())
        st_i = vimu.NavState(geom.Pose3(R[0], p[0]), v[0], np.zeros(3),
                             np.zeros(3))
        st_j = vimu.NavState(geom.Pose3(R[-1], p[-1]), v[-1], np.zeros(3),
                             np.zeros(3))

        clean = vimu.PreintegratedImu(np.zeros(3), np.zeros(3))
        clean.integrate(w_clean[1:], a_clean[1:], np.diff(times), noise)
        r0, _, _ = vimu.imu_residual(clean, st_i, st_j, noise)
        assert np.linalg.norm(r0) < 1e-9

        rng = np.random.default_rng(99)
        draws = 1200
        dts = np.diff(times)
        rs = np.empty((draws, 9))
        sg = np.sqrt(noise.gyro_var)
        sa = np.sqrt(noise.accel_var)
        for d in range(draws):
            wn = w_clean[1:] + rng.normal(0, sg, (200, 3))
            an = a_clean[1:] + rng.normal(0, sa, (200, 3))
            pi = vimu.PreintegratedImu(np.zeros(3), np.zeros(3))
            pi.integrate(wn, an, dts, noise)
            r, _, _ = vimu.imu_residual(pi, st_i, st_j, noise,
                                        with_jacobians=False)
            rs[d] = r
        sample_cov = np.cov(rs.T)
        expected = vimu.residual_cov(clean)
        rel = (np.linalg.norm(sample_cov - expected, "fro")
               / np.linalg.norm(expected, "fro"))
        assert rel < 0.20
