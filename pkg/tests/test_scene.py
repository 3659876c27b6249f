import numpy as np
import pytest

from otfs_isac.scene import (
    C, Scene, SceneParams, arc_trajectory, linear_trajectory, load_scene, los_range_rate,
    measurements_from_paths, nlos_range, nlos_range_rate, path_coupling_angle,
    read_measurements_csv, sample_scene, synthesize_measurements, true_measurements,
    write_measurements_csv,
)
from otfs_isac.estimator import PathEstimate


def simple_scene():
    pos, vel = arc_trajectory([0.0, 0.0], 30.0, 0.2, np.pi / 2, 5, 25.0)
    return Scene(pos, vel, target=[12.0, -9.0])


class TestGeometry:
    def test_three_four_five(self):
        assert nlos_range([3.0, 0.0], [3.0, 4.0]) == pytest.approx(7.0)
        assert los_range_rate([3.0, 4.0], [3.0, 4.0]) == pytest.approx(5.0)
        assert nlos_range_rate([3.0, 0.0], [3.0, 4.0], [0.0, 2.0]) == pytest.approx(2.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_rates_match_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        p, s, v = rng.uniform(-30, 30, 2), rng.uniform(-30, 30, 2), rng.uniform(-20, 20, 2)
        h = 1e-6
        fd_nlos = (nlos_range(p, s + h * v) - nlos_range(p, s - h * v)) / (2 * h)
        fd_los = (np.linalg.norm(s + h * v) - np.linalg.norm(s - h * v)) / (2 * h)
        assert nlos_range_rate(p, s, v) == pytest.approx(fd_nlos, abs=1e-6)
        assert los_range_rate(s, v) == pytest.approx(fd_los, abs=1e-6)

    def test_coincident_points(self):
        with pytest.raises(ValueError):
            nlos_range_rate([1.0, 1.0], [1.0, 1.0], [1.0, 0.0])
        with pytest.raises(ValueError):
            los_range_rate([0.0, 0.0], [1.0, 0.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_coupling_angle_matches_dot_product(self, seed):
        rng = np.random.default_rng(seed)
        s, p = rng.uniform(-30, 30, 2), rng.uniform(-30, 30, 2)
        u, w = -s, p - s
        cos = abs(u @ w) / (np.linalg.norm(u) * np.linalg.norm(w))
        assert np.cos(path_coupling_angle(s, p)) == pytest.approx(cos, abs=1e-12)

    def test_coupling_angle_right_and_folded(self):
        assert path_coupling_angle([0.0, 10.0], [5.0, 10.0]) == pytest.approx(np.pi / 2)
        # target behind the transmitter folds to zero
        assert path_coupling_angle([0.0, 10.0], [0.0, 20.0]) == pytest.approx(0.0, abs=1e-7)
        with pytest.raises(ValueError):
            path_coupling_angle([0.0, 0.0], [1.0, 1.0])


class TestTrajectories:
    def test_linear(self):
        pos, vel = linear_trajectory([1.0, 2.0], [3.0, -1.0], 4, 0.5)
        np.testing.assert_allclose(pos[-1], [5.5, 0.5])
        np.testing.assert_allclose(vel, np.tile([3.0, -1.0], (4, 1)))

    @pytest.mark.parametrize("sweep", [np.pi / 3, -np.pi / 3])
    def test_arc_tangent_and_speed(self, sweep):
        center = np.array([2.0, -1.0])
        pos, vel = arc_trajectory(center, 10.0, 0.4, sweep, 7, 15.0)
        np.testing.assert_allclose(np.linalg.norm(pos - center, axis=1), 10.0)
        np.testing.assert_allclose(np.linalg.norm(vel, axis=1), 15.0)
        np.testing.assert_allclose(np.sum((pos - center) * vel, axis=1), 0.0, atol=1e-12)
        # velocity points towards the next sample
        assert np.all(np.sum(np.diff(pos, axis=0) * vel[:-1], axis=1) > 0)

    def test_arc_invalid_radius(self):
        with pytest.raises(ValueError):
            arc_trajectory([0, 0], 0.0, 0.0, 1.0, 3, 1.0)


class TestScene:
    def test_target_on_segment(self):
        with pytest.raises(ValueError):
            Scene([[10.0, 0.0]], [[0.0, 1.0]], target=[5.0, 0.0])

    def test_target_at_origin_and_shapes(self):
        with pytest.raises(ValueError):
            Scene([[10.0, 0.0]], [[0.0, 1.0]], target=[0.0, 0.0])
        with pytest.raises(ValueError):
            Scene([[10.0, 0.0]], [[0.0, 1.0], [1.0, 0.0]], target=[3.0, 3.0])

    def test_true_measurements(self):
        scene = simple_scene()
        meas = true_measurements(scene)
        for m, s, v in zip(meas, scene.tx_positions, scene.tx_velocities):
            assert m.r_hat == pytest.approx(np.linalg.norm(scene.target - s)
                                            + np.linalg.norm(scene.target))
            assert m.d_dot_hat == pytest.approx(s @ v / np.linalg.norm(s))

    def test_synthesized_noise_statistics(self):
        scene = simple_scene()
        truth = true_measurements(scene)
        sig = (0.2, 0.05, 0.01)
        draws = np.array([[[m.r_hat - t.r_hat, m.r_dot_hat - t.r_dot_hat, m.d_dot_hat - t.d_dot_hat]
                           for m, t in zip(synthesize_measurements(scene, sig, seed=i), truth)]
                          for i in range(2000)]).reshape(-1, 3)
        # 10^4 draws: the sample mean has standard deviation sigma / 100
        assert np.all(np.abs(draws.mean(axis=0)) <= 4 * np.array(sig) / 100)
        np.testing.assert_allclose(draws.std(axis=0), sig, rtol=0.03)

    def test_synthesized_seeded(self):
        a = synthesize_measurements(simple_scene(), (1.0, 1.0, 1.0), seed=3)
        b = synthesize_measurements(simple_scene(), (1.0, 1.0, 1.0), seed=3)
        assert [m.r_hat for m in a] == [m.r_hat for m in b]


class TestMeasurementsFromPaths:
    def test_mapping(self):
        f_c = 5.6e9
        los = PathEstimate(l=1, k=2, iota=0.0, kappa=0.0, tau_hat=20e-9, nu_hat=300.0, peak_magnitude=1.0)
        nlos = PathEstimate(l=5, k=-1, iota=0.0, kappa=0.0, tau_hat=150e-9, nu_hat=-200.0, peak_magnitude=0.5)
        m = measurements_from_paths([nlos, los], [3.0, 4.0], f_c)
        assert m.r_hat == pytest.approx(C * 150e-9)
        assert m.r_dot_hat == pytest.approx(C * 200.0 / f_c)
        assert m.d_dot_hat == pytest.approx(-C * 300.0 / f_c)

    def test_single_path(self):
        with pytest.raises(ValueError):
            measurements_from_paths([PathEstimate(0, 0, 0.0, 0.0, 1e-9, 0.0, 1.0)], [1.0, 1.0], 5.6e9)


class TestSampleScene:
    def test_deterministic(self):
        a = sample_scene(np.random.default_rng(4))
        b = sample_scene(np.random.default_rng(4))
        np.testing.assert_array_equal(a.tx_positions, b.tx_positions)
        np.testing.assert_array_equal(a.target, b.target)

    def test_constraints(self):
        params = SceneParams()
        rng = np.random.default_rng(5)
        for _ in range(30):
            sc = sample_scene(rng, params)
            d = np.linalg.norm(sc.tx_positions, axis=1)
            assert params.tx_range[0] <= d.min() and d.max() <= params.tx_range[1]
            assert np.linalg.norm(sc.tx_positions - sc.target, axis=1).min() >= params.clearance
            cos = [np.cos(path_coupling_angle(s, sc.target)) for s in sc.tx_positions]
            assert max(cos) <= params.max_cos_theta

    @pytest.mark.parametrize("cos_theta", [0.1, 0.5, 0.9])
    def test_constant_coupling_angle(self, cos_theta):
        params = SceneParams(cos_theta=cos_theta)
        rng = np.random.default_rng(6)
        for _ in range(10):
            sc = sample_scene(rng, params)
            cos = [np.cos(path_coupling_angle(s, sc.target)) for s in sc.tx_positions]
            np.testing.assert_allclose(cos, cos_theta, atol=1e-9)
            np.testing.assert_allclose(np.linalg.norm(sc.tx_velocities, axis=1),
                                       np.linalg.norm(sc.tx_velocities[0]))

    def test_rejection_exhausted(self):
        with pytest.raises(RuntimeError):
            sample_scene(np.random.default_rng(0), accept=lambda s: False, max_tries=5)

    @pytest.mark.parametrize("kw", [dict(n_instants=2), dict(cos_theta=1.0), dict(max_cos_theta=0.0)])
    def test_invalid_params(self, kw):
        with pytest.raises(ValueError):
            SceneParams(**kw)


class TestFiles:
    def test_measurement_csv_round_trip(self, tmp_path):
        meas = synthesize_measurements(simple_scene(), (0.1, 0.2, 0.3), seed=1)
        write_measurements_csv(tmp_path / "m.csv", meas)
        back = read_measurements_csv(tmp_path / "m.csv")
        for a, b in zip(meas, back):
            assert (a.r_hat, a.r_dot_hat, a.d_dot_hat, a.sigma_r) == \
                (b.r_hat, b.r_dot_hat, b.d_dot_hat, b.sigma_r)
            np.testing.assert_array_equal(a.s, b.s)

    def test_measurement_csv_missing_column(self, tmp_path):
        (tmp_path / "m.csv").write_text("s_x,s_y,r_hat\n1,2,3\n")
        with pytest.raises(ValueError):
            read_measurements_csv(tmp_path / "m.csv")

    def test_load_scene(self, tmp_path):
        (tmp_path / "s.yaml").write_text(
            "target: [10, 5]\n"
            "tx:\n  - {position: [30, 0], velocity: [0, 20]}\n  - {position: [28, 10]}\n"
            "sigmas: {r: 0.1}\n")
        scene, sig = load_scene(tmp_path / "s.yaml")
        assert len(scene) == 2
        np.testing.assert_array_equal(scene.tx_velocities[1], [0.0, 0.0])
        assert sig == (0.1, 0.0, 0.0)

    def test_load_scene_missing_key(self, tmp_path):
        (tmp_path / "s.yaml").write_text("tx: []\n")
        with pytest.raises(ValueError):
            load_scene(tmp_path / "s.yaml")
