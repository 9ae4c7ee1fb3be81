import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vifactor import geom


def exp_series(w, terms=20):
    """Term-by-term matrix exponential of hat(w), independent oracle."""
    S = geom.hat(w)
    R = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms + 1):
        term = term @ S / k
        R = R + term
    return R


def random_rotation(rng, max_angle=3.0):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return geom.so3_exp(axis * rng.uniform(0, max_angle))


class TestSo3Exp:
    def test_zero(self):
        assert np.allclose(geom.so3_exp([0, 0, 0]), np.eye(3), atol=1e-15)

    def test_half_turn_x(self):
        R = geom.so3_exp([np.pi, 0, 0])
        assert np.allclose(R, np.diag([1.0, -1.0, -1.0]), atol=1e-12)

    def test_matches_series_oracle(self):
        w = np.array([0.1, 0.2, 0.3])
        assert np.allclose(geom.so3_exp(w), exp_series(w), atol=1e-14)

    def test_small_angle_branch(self):
        w = np.array([1e-9, -2e-9, 0.5e-9])
        assert np.allclose(geom.so3_exp(w), exp_series(w), atol=1e-16)

    def test_orthonormal(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            R = random_rotation(rng)
            assert geom.is_rotation(R)


class TestSo3Log:
    def test_identity(self):
        assert np.allclose(geom.so3_log(np.eye(3)), 0.0, atol=1e-15)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            w = rng.standard_normal(3)
            w *= rng.uniform(0, 3.0) / np.linalg.norm(w)
            assert np.allclose(geom.so3_log(geom.so3_exp(w)), w, atol=1e-9)

    def test_half_turn_convention(self):
        w = geom.so3_log(np.diag([1.0, -1.0, -1.0]))
        assert np.allclose(w, [np.pi, 0, 0], atol=1e-9)

    def test_near_pi(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            for theta in (np.pi - 1e-3, np.pi - 1e-7, np.pi):
                R = geom.so3_exp(axis * theta)
                w = geom.so3_log(R)
                assert np.linalg.norm(w) <= np.pi + 1e-12
                assert np.allclose(geom.so3_exp(w), R, atol=1e-9)

    def test_norm_bounded_by_pi(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            w = geom.so3_log(random_rotation(rng, max_angle=np.pi))
            assert np.linalg.norm(w) <= np.pi + 1e-12


class TestRightJacobian:
    def test_against_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            w = rng.standard_normal(3)
            Jr = geom.so3_right_jacobian(w)
            # Exp(w + dw) == Exp(w) Exp(Jr(w) dw) up to first order
            num = geom.numeric_jacobian(
                lambda dw: geom.so3_log(geom.so3_exp(w).T @ geom.so3_exp(w + dw)),
                np.zeros(3),
                oplus=lambda x, xi: x + xi,
                dim=3,
            )
            assert np.allclose(num, Jr, atol=1e-5)

    def test_inverse_consistent(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            w = rng.standard_normal(3) * 2.0
            J = geom.so3_right_jacobian(w)
            Jinv = geom.so3_right_jacobian_inv(w)
            assert np.allclose(J @ Jinv, np.eye(3), atol=1e-10)


class TestQuaternion:
    def test_round_trip(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            R = random_rotation(rng, max_angle=np.pi)
            assert np.allclose(geom.quat_to_rot(geom.rot_to_quat(R)), R, atol=1e-12)

    def test_unit_norm(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            q = geom.rot_to_quat(random_rotation(rng))
            assert abs(np.linalg.norm(q) - 1.0) < 1e-12


class TestBoxplus:
    def test_rotation_zero(self):
        R = geom.so3_exp([0.3, -0.2, 0.1])
        assert np.allclose(geom.boxplus(geom.ROTATION, R, np.zeros(3)), R)

    def test_translation_is_addition(self):
        p = np.array([1.0, 2.0, 3.0])
        xi = np.array([0.1, -0.2, 0.3])
        assert np.allclose(geom.boxplus(geom.TRANSLATION, p, xi), p + xi)

    def test_rotation_round_trip_many_seeds(self):
        # (x [+] xi) [-] x == xi, sampled over 1000 draws at norm 0.5
        rng = np.random.default_rng(8)
        for _ in range(1000):
            R = random_rotation(rng)
            xi = rng.standard_normal(3)
            xi *= 0.5 / np.linalg.norm(xi)
            R2 = geom.boxplus(geom.ROTATION, R, xi)
            assert np.allclose(geom.boxminus(geom.ROTATION, R2, R), xi, atol=1e-9)

    @given(st.lists(st.floats(-1.0, 1.0), min_size=2, max_size=2))
    @settings(max_examples=50, deadline=None)
    def test_bearing_round_trip(self, xi):
        xi = np.array(xi) * 0.4
        b = np.array([0.3, -0.7])
        b2 = geom.boxplus(geom.BEARING, b, xi)
        assert np.allclose(geom.boxminus(geom.BEARING, b2, b), xi, atol=1e-12)

    def test_dimension_mismatch_raises(self):
        with pytest.raises(geom.LayoutError):
            geom.boxplus(geom.ROTATION, np.eye(3), np.zeros(2))
        with pytest.raises(geom.LayoutError):
            geom.boxplus(geom.BEARING, np.zeros(2), np.zeros(3))


class TestBearing:
    def test_origin_maps_to_z(self):
        assert np.allclose(geom.bearing_decode(0.0, 0.0), [0, 0, 1])

    def test_unit_circle_maps_to_equator(self):
        assert np.allclose(geom.bearing_decode(1.0, 0.0), [1, 0, 0])
        assert np.allclose(geom.bearing_decode(0.0, -1.0), [0, -1, 0])

    def test_unit_norm_everywhere(self):
        rng = np.random.default_rng(9)
        for _ in range(500):
            u, v = rng.uniform(-50, 50, size=2)
            n = geom.bearing_decode(u, v)
            assert abs(np.linalg.norm(n) - 1.0) < 1e-12
            assert n[2] > -1.0

    def test_formula_value(self):
        u, v = 0.3, -0.7
        eta = 2.0 / (1.0 + u * u + v * v)
        assert np.allclose(geom.bearing_decode(u, v), [eta * u, eta * v, eta - 1])

    def test_jacobian_matches_central_differences(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            u, v = rng.uniform(-2, 2, size=2)
            J = geom.bearing_jacobian(u, v)
            num = geom.numeric_jacobian(
                lambda x: geom.bearing_decode(x[0], x[1]),
                np.array([u, v]),
                oplus=lambda x, xi: x + xi,
                dim=2,
            )
            assert np.allclose(J, num, atol=1e-6)

    def test_encode_decode_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = rng.standard_normal(3)
            n /= np.linalg.norm(n)
            if n[2] < -0.99:
                continue
            u, v = geom.bearing_encode(n)
            assert np.allclose(geom.bearing_decode(u, v), n, atol=1e-12)

    def test_encode_rejects_south_pole(self):
        with pytest.raises(ValueError):
            geom.bearing_encode([0.0, 0.0, -1.0])


class TestNumericJacobian:
    def test_identity_on_translation(self):
        J = geom.numeric_jacobian(
            lambda x: x, np.zeros(3), oplus=lambda x, xi: x + xi, dim=3)
        assert np.allclose(J, np.eye(3), atol=1e-9)

    def test_rotation_chart_compatibility(self):
        # f(R) = Log(R Z^-1) has identity Jacobian at R = Z
        Z = geom.so3_exp([0.4, -0.1, 0.2])
        J = geom.numeric_jacobian(
            lambda R: geom.so3_log(R @ Z.T),
            Z,
            oplus=lambda R, xi: geom.so3_exp(xi) @ R,
            dim=3,
        )
        assert np.allclose(J, np.eye(3), atol=1e-8)

    def test_nonfinite_residual_reports_block(self):
        def f(x):
            with np.errstate(invalid="ignore"):
                return np.sqrt(x)

        with pytest.raises(geom.EvaluationError, match="increment 0"):
            geom.numeric_jacobian(
                f, np.zeros(1), oplus=lambda x, xi: x + xi, dim=1)


class TestBlockLayout:
    def test_offsets(self):
        lay = geom.BlockLayout([("a", geom.ROTATION), ("b", geom.BEARING),
                                ("c", geom.INV_DIST)])
        assert lay.dim == 6
        assert lay.slice_of("b") == slice(3, 5)
        assert lay.indices_of(["c", "a"]).tolist() == [5, 0, 1, 2]

    def test_duplicate_rejected(self):
        with pytest.raises(geom.LayoutError):
            geom.BlockLayout([("a", geom.ROTATION), ("a", geom.BEARING)])


class TestPose3:
    def test_compose_inverse(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            T1 = geom.Pose3(random_rotation(rng), rng.standard_normal(3))
            T2 = geom.Pose3(random_rotation(rng), rng.standard_normal(3))
            T = T1.compose(T2)
            assert np.allclose(T.matrix(), T1.matrix() @ T2.matrix(), atol=1e-12)
            I = T.compose(T.inverse())
            assert np.allclose(I.matrix(), np.eye(4), atol=1e-12)

    def test_associativity(self):
        rng = np.random.default_rng(13)
        A = geom.Pose3(random_rotation(rng), rng.standard_normal(3))
        B = geom.Pose3(random_rotation(rng), rng.standard_normal(3))
        C = geom.Pose3(random_rotation(rng), rng.standard_normal(3))
        left = A.compose(B).compose(C).matrix()
        right = A.compose(B.compose(C)).matrix()
        assert np.allclose(left, right, atol=1e-9)
