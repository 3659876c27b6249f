import warnings

import numpy as np
import pytest

from otfs_isac.locator import (
    CoarseEstimate, IllConditionedWarning, LocalizationError, brute_force_locate, build_system,
    coarse_wls, estimate_velocity, initial_guess, locate, locate_dfp, locate_lm, range_loss,
    refine_wls, resolve_sign,
)
from otfs_isac.scene import (
    Scene, SceneParams, SensingMeasurement, sample_scene, synthesize_measurements,
    true_measurements,
)


def scenes(n, seed=0):
    rng = np.random.default_rng(seed)
    return [sample_scene(rng, SceneParams()) for _ in range(n)]


def rotate(meas, angle):
    R = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    return [SensingMeasurement(m.r_hat, m.r_dot_hat, m.d_dot_hat, R @ m.s, m.sigma_r) for m in meas], R


class TestSystem:
    def test_hand_example(self):
        meas = [SensingMeasurement(r, 0.0, 0.0, s) for r, s in
                [(10.0, [2.0, 0.0]), (12.0, [0.0, 4.0]), (14.0, [-3.0, -3.0])]]
        alpha, A = build_system(meas)
        np.testing.assert_allclose(alpha, [48.0, 64.0, 89.0])
        np.testing.assert_allclose(A, [[-2, 0, 10], [0, -4, 12], [3, 3, 14]])

    def test_truth_satisfies_system(self):
        sc = scenes(1)[0]
        alpha, A = build_system(true_measurements(sc))
        z = np.r_[sc.target, np.linalg.norm(sc.target)]
        np.testing.assert_allclose(A @ z, alpha, rtol=1e-12)

    def test_too_few(self):
        meas = true_measurements(scenes(1)[0])[:2]
        with pytest.raises(LocalizationError):
            build_system(meas)

    def test_rank_deficient(self):
        meas = [SensingMeasurement(30.0, 0.0, 0.0, [x, 0.0]) for x in (5.0, 10.0, 15.0)]
        with pytest.raises(LocalizationError):
            build_system(meas)


class TestDoubleWls:
    @pytest.mark.parametrize("sc", scenes(10, seed=1))
    def test_noiseless_exact(self, sc):
        res = locate(true_measurements(sc))
        np.testing.assert_allclose(res.p_hat, sc.target, atol=1e-6)
        np.testing.assert_allclose(res.velocities, sc.tx_velocities, atol=1e-9)
        assert res.loss_L < 1e-12

    def test_weight_scale_invariance(self):
        sc = scenes(1, seed=2)[0]
        meas = synthesize_measurements(sc, (0.1, 0.0, 0.0), seed=0)
        Q = np.diag(np.linspace(0.5, 2.0, len(meas)))
        a = locate(meas, Q=Q).p_hat
        b = locate(meas, Q=1e4 * Q).p_hat
        np.testing.assert_allclose(a, b, atol=1e-9)

    @pytest.mark.parametrize("angle", [0.3, 2.0, -1.2])
    def test_rotation_covariance(self, angle):
        sc = scenes(1, seed=3)[0]
        meas = synthesize_measurements(sc, (0.05, 0.0, 0.0), seed=1)
        rotated, R = rotate(meas, angle)
        np.testing.assert_allclose(coarse_wls(*build_system(rotated), np.eye(len(meas))).z_hat[:2],
                                   R @ coarse_wls(*build_system(meas), np.eye(len(meas))).z_hat[:2],
                                   atol=1e-8)

    def test_coarse_converges(self):
        meas = synthesize_measurements(scenes(1, seed=4)[0], (0.1, 0.0, 0.0), seed=2)
        est = coarse_wls(*build_system(meas), np.eye(len(meas)))
        assert est.converged and est.iterations <= 50

    def test_refine_recovers_squares(self):
        z = np.array([3.0, -4.0, 5.0])
        ups, flags = refine_wls(CoarseEstimate(z, 0.01 * np.eye(3), 1, True))
        np.testing.assert_allclose(ups, [9.0, 16.0], atol=1e-9)
        assert flags == []

    def test_refine_zero_coordinate(self):
        ups, flags = refine_wls(CoarseEstimate(np.array([0.0, 4.0, 4.0]), np.eye(3), 1, True))
        assert "omega_regularized" in flags
        np.testing.assert_allclose(ups, [0.0, 16.0], atol=1e-6)

    def test_refine_clamps_negative(self):
        ups, flags = refine_wls(CoarseEstimate(np.array([1.0, 4.0, 3.0]), np.eye(3), 1, True))
        assert np.all(ups >= 0)

    @pytest.mark.parametrize("quadrant", [(1, 1), (1, -1), (-1, 1), (-1, -1)])
    def test_resolve_sign(self, quadrant):
        target = np.array([12.0, 7.0]) * quadrant
        pos = np.array([[30.0, 5.0], [25.0, 20.0], [10.0, 30.0], [-5.0, 28.0]])
        meas = true_measurements(Scene(pos, np.zeros_like(pos), target))
        p, loss, signs = resolve_sign(target**2, meas)
        np.testing.assert_allclose(p, target)
        assert signs == quadrant and loss < 1e-20


class TestVelocity:
    def test_exact(self):
        sc = scenes(1, seed=5)[0]
        for m, v in zip(true_measurements(sc), sc.tx_velocities):
            est, cond = estimate_velocity(sc.target, m)
            np.testing.assert_allclose(est, v, atol=1e-9)
            assert np.isfinite(cond)

    def test_collinear_warns(self):
        m = SensingMeasurement(50.0, 1.0, 1.0, [20.0, 0.0])
        with pytest.warns(IllConditionedWarning):
            estimate_velocity([30.0, 0.0], m)


class TestBaselines:
    @pytest.mark.parametrize("residual", ["algebraic", "geometric"])
    @pytest.mark.parametrize("sc", scenes(5, seed=6))
    def test_lm_noiseless(self, sc, residual):
        meas = true_measurements(sc)
        p = locate_lm(meas, init=initial_guess(meas, "grid"), residual=residual)
        np.testing.assert_allclose(p, sc.target, atol=1e-4)

    @pytest.mark.parametrize("sc", scenes(5, seed=7))
    def test_dfp_noiseless(self, sc):
        meas = true_measurements(sc)
        np.testing.assert_allclose(locate_dfp(meas, init="linear"), sc.target, atol=1e-4)
        start = sc.target + np.array([0.6, -0.4])
        # narrow valleys need many quasi-Newton steps
        p = locate_dfp(meas, init=start, fd_step=1e-7, max_iter=2000)
        np.testing.assert_allclose(p, sc.target, atol=1e-4)

    def test_dfp_stall_scales_with_fd_step(self):
        sc = scenes(1, seed=8)[0]
        meas = true_measurements(sc)
        start = sc.target + np.array([0.6, -0.4])
        err = [np.linalg.norm(locate_dfp(meas, init=start, fd_step=h, max_iter=2000) - sc.target)
               for h in (1e-7, 0.25)]
        assert err[0] < 1e-4 < err[1]

    def test_zero_iterations_return_start(self):
        meas = true_measurements(scenes(1)[0])
        np.testing.assert_array_equal(locate_lm(meas, init=[1.0, 2.0], max_iter=0), [1.0, 2.0])
        np.testing.assert_array_equal(locate_dfp(meas, init=[1.0, 2.0], max_iter=0), [1.0, 2.0])

    def test_unknown_residual(self):
        with pytest.raises(ValueError):
            locate_lm(true_measurements(scenes(1)[0]), residual="nope")


class TestStartingPoints:
    @pytest.mark.parametrize("sc", scenes(5, seed=9))
    def test_brute_force_is_lattice_argmin(self, sc):
        meas = true_measurements(sc)
        p = brute_force_locate(meas, (-60, 60, -60, 60), 0.25)
        nearest = np.round(sc.target / 0.25) * 0.25
        assert range_loss(p, meas) <= range_loss(nearest, meas)
        assert np.linalg.norm(p - sc.target) < 2.0

    def test_grid_start_in_basin(self):
        for sc in scenes(10, seed=10):
            meas = true_measurements(sc)
            start = initial_guess(meas, "grid")
            assert np.linalg.norm(start - sc.target) < 2.0
            np.testing.assert_allclose(locate_lm(meas, init=start), sc.target, atol=1e-4)

    def test_centroid_and_linear(self):
        sc = scenes(1, seed=11)[0]
        meas = true_measurements(sc)
        np.testing.assert_allclose(initial_guess(meas, "centroid"), sc.tx_positions.mean(axis=0))
        np.testing.assert_allclose(initial_guess(meas, "linear"), sc.target, atol=1e-8)
        with pytest.raises(ValueError):
            initial_guess(meas, "nope")

    def test_brute_force_invalid(self):
        meas = true_measurements(scenes(1)[0])
        with pytest.raises(ValueError):
            brute_force_locate(meas, (0, 1, 0, 1), 0.0)
        with pytest.raises(ValueError):
            brute_force_locate(meas, (1, 0, 0, 1), 0.1)

    def test_range_loss_zero_at_truth(self):
        sc = scenes(1)[0]
        assert range_loss(sc.target, true_measurements(sc)) < 1e-20
