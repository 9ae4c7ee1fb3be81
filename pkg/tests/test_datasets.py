import numpy as np
import pytest
from scipy.optimize import minimize

from vifactor import datasets, geom, sim


@pytest.fixture(scope="module")
def small_dataset():
    sc = sim.Scenario(duration=2.0, cam_rate=10.0, pixel_sigma=0.3,
                      outlier_frac=0.02, accel_noise_density=2e-3,
                      gyro_noise_density=1.7e-4, seed=5)
    return sim.generate(sc)


def random_trajectory(rng, n=40):
    t = np.cumsum(rng.uniform(0.05, 0.15, n))
    p = rng.standard_normal((n, 3)) * 3.0
    q = np.array([geom.rot_to_quat(geom.so3_exp(rng.standard_normal(3)))
                  for _ in range(n)])
    return datasets.Trajectory(t, p, q)


class TestRoundTrips:
    def test_empty_trajectory(self, tmp_path):
        path = tmp_path / "empty.txt"
        datasets.write_trajectory(path, datasets.Trajectory(
            np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4))))
        out = datasets.read_trajectory(path)
        assert len(out) == 0

    def test_trajectory_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        traj = random_trajectory(rng)
        path = tmp_path / "traj.txt"
        datasets.write_trajectory(path, traj)
        out = datasets.read_trajectory(path)
        assert np.array_equal(out.t, traj.t)
        assert np.array_equal(out.p, traj.p)
        assert np.array_equal(out.q, traj.q)

    def test_dataset_round_trip_byte_identical(self, tmp_path, small_dataset):
        d1 = tmp_path / "a"
        d2 = tmp_path / "b"
        datasets.write_dataset(d1, small_dataset)
        loaded = datasets.read_dataset(d1)
        datasets.write_dataset(d2, loaded)
        for name in ("imu.csv", "frames.csv", "obs.csv", "gt.csv",
                     "world.csv", "calib.txt"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name

    def test_loaded_fields_match(self, tmp_path, small_dataset):
        d = tmp_path / "ds"
        datasets.write_dataset(d, small_dataset)
        loaded = datasets.read_dataset(d)
        assert np.array_equal(loaded.imu_times, small_dataset.imu_times)
        assert np.array_equal(loaded.gyro, small_dataset.gyro)
        assert np.array_equal(loaded.obs["u"], small_dataset.obs["u"])
        assert np.array_equal(loaded.landmarks, small_dataset.landmarks)
        for a, b in zip(loaded.gt_states, small_dataset.gt_states):
            assert np.allclose(a.pose.t, b.pose.t)
            assert np.allclose(a.pose.R, b.pose.R, atol=1e-12)
            assert np.array_equal(a.velocity, b.velocity)

    def test_corrupt_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("t,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,0\n1,2,nope,0,0,0,0\n")
        with pytest.raises(datasets.DatasetError, match="bad.csv:3"):
            datasets.read_imu_csv(path)

    def test_wrong_field_count_names_line(self, tmp_path):
        path = tmp_path / "short.txt"
        path.write_text("# c\n0 1 2 3\n")
        with pytest.raises(datasets.DatasetError, match="short.txt:2"):
            datasets.read_trajectory(path)

    def test_euroc_style_columns(self, tmp_path):
        path = tmp_path / "imu.csv"
        path.write_text("#ts,wx,wy,wz,ax,ay,az\n"
                        "1403636579758555392,0.1,0.2,0.3,9.0,0.1,-0.2\n")
        rows = datasets.read_imu_csv(path, fmt="euroc")
        assert rows[0, 0] == pytest.approx(1403636579.758555392)
        assert rows[0, 1] == 0.1


class TestAlignAte:
    def test_identical_gives_zero(self):
        rng = np.random.default_rng(1)
        traj = random_trajectory(rng)
        _, ate = datasets.align_ate(traj, traj)
        assert ate < 1e-12

    def test_rigid_transform_removed(self):
        rng = np.random.default_rng(2)
        gt = random_trajectory(rng)
        G = geom.Pose3(geom.so3_exp(rng.standard_normal(3)),
                       rng.standard_normal(3) * 10.0)
        est = datasets.Trajectory(
            gt.t, gt.p @ G.R.T + G.t,
            np.array([geom.rot_to_quat(G.R @ geom.quat_to_rot(q))
                      for q in gt.q]))
        aligned, ate = datasets.align_ate(est, gt)
        assert ate < 1e-9
        assert np.allclose(aligned.p, gt.p, atol=1e-9)

    def test_invariant_under_pre_transform(self):
        rng = np.random.default_rng(3)
        gt = random_trajectory(rng)
        est = datasets.Trajectory(gt.t, gt.p + rng.normal(0, 0.2, gt.p.shape),
                                  gt.q)
        _, ate0 = datasets.align_ate(est, gt)
        G = geom.Pose3(geom.so3_exp(rng.standard_normal(3)),
                       rng.standard_normal(3) * 4.0)
        est2 = datasets.Trajectory(est.t, est.p @ G.R.T + G.t, est.q)
        _, ate1 = datasets.align_ate(est2, gt)
        assert abs(ate0 - ate1) < 1e-9

    def test_noisy_ate_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        gt = random_trajectory(rng, n=120)
        est = datasets.Trajectory(gt.t, gt.p + rng.normal(0, 0.1, gt.p.shape),
                                  gt.q)
        _, ate = datasets.align_ate(est, gt)

        def cost(x):
            R = geom.so3_exp(x[:3])
            moved = est.p @ R.T + x[3:]
            return float(np.mean(np.sum((moved - gt.p) ** 2, axis=1)))

        res = minimize(cost, np.zeros(6), method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-14,
                                "maxiter": 20000})
        oracle = np.sqrt(res.fun)
        assert ate <= oracle + 1e-6
        assert abs(ate - oracle) < 1e-4
        # sanity: the RMS is near sigma * sqrt(3) for isotropic noise
        assert 0.8 * 0.1 * np.sqrt(3) < ate < 1.2 * 0.1 * np.sqrt(3)

    def test_too_few_matches(self):
        rng = np.random.default_rng(5)
        t1 = random_trajectory(rng, n=5)
        t2 = datasets.Trajectory(t1.t + 0.5, t1.p, t1.q)
        with pytest.raises(datasets.DatasetError, match="at least 3"):
            datasets.align_ate(t1, t2)

    def test_unknown_mode_rejected(self):
        rng = np.random.default_rng(6)
        traj = random_trajectory(rng)
        with pytest.raises(ValueError):
            datasets.align_ate(traj, traj, mode="sim3")
        datasets.align_ate(traj, traj, mode="sim3-off")
