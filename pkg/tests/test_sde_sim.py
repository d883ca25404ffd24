import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbms_sde.bench_systems import RvdpParams, gbm_model, grazing_model, GrazingParams, rvdp_model
from rbms_sde.errors import NonFiniteState
from rbms_sde.sde_sim import (ImpactRule, MomentSeries, SdeModel, SimConfig, compute_moments,
                              euler_milstein_step, moment_header, moments_of, read_ensemble_csv,
                              read_moments_csv, simulate_ensemble, write_ensemble_csv, write_moments_csv)


def zero_model(n=1, m=1):
    return SdeModel(n, m, lambda x: np.zeros_like(x), lambda x: np.zeros(x.shape + (m,)))


def linear_model(a=1.0):
    return SdeModel(1, 1, lambda x: a * x, lambda x: np.zeros(x.shape + (1,)))


class TestStep:
    def test_zero_dynamics(self):
        out = euler_milstein_step(zero_model(), np.array([1.0]), 0.01, np.array([0.3]))
        np.testing.assert_array_equal(out, [1.0])

    def test_linear_drift_euler(self):
        out = euler_milstein_step(linear_model(), np.array([1.0]), 0.01, np.array([0.0]))
        np.testing.assert_allclose(out, [1.01], rtol=0, atol=1e-15)

    def test_batch_matches_single(self):
        model = gbm_model(0.05, 0.2)
        x = np.array([[1.0], [2.0], [0.5]])
        dw = np.array([[0.1], [-0.05], [0.02]])
        batch = euler_milstein_step(model, x, 0.01, dw)
        for i in range(3):
            np.testing.assert_array_equal(batch[i], euler_milstein_step(model, x[i], 0.01, dw[i]))

    def test_milstein_term_gbm(self):
        # for GBM the correction is 0.5 sigma^2 x (dW^2 - dt)
        mu, s, x, dt, dw = 0.05, 0.2, 1.5, 0.01, 0.07
        out = euler_milstein_step(gbm_model(mu, s), np.array([x]), dt, np.array([dw]), milstein_correction=True)
        expected = x + mu * x * dt + s * x * dw + 0.5 * s * s * x * (dw * dw - dt)
        np.testing.assert_allclose(out, [expected], rtol=1e-9)

    def test_non_finite_raises(self):
        model = SdeModel(1, 1, lambda x: x * np.inf, lambda x: np.zeros(x.shape + (1,)))
        with pytest.raises(NonFiniteState):
            with np.errstate(all="ignore"):
                euler_milstein_step(model, np.array([1.0]), 0.01, np.array([0.0]))

    def test_impact_reset(self):
        # free flight towards the wall: x1 = 0.01, v = -2, no forces
        model = SdeModel(2, 1, lambda x: np.stack([x[..., 1], np.zeros_like(x[..., 1])], -1),
                         lambda x: np.zeros(x.shape + (1,)), ImpactRule(0, 1, 0.5))
        out = euler_milstein_step(model, np.array([0.01, -2.0]), 0.01, np.array([0.0]))
        # crossing after 0.005, velocity becomes 1.0, remaining 0.005 of flight
        np.testing.assert_allclose(out, [0.005, 1.0], atol=1e-14)

    def test_impact_incoming_state_maps_to_rebound(self):
        p = RvdpParams(D=0.0, r=0.8)
        model = rvdp_model(p)
        x = np.array([1e-12, -1.0])
        out = euler_milstein_step(model, x, 1e-6, np.array([0.0]))
        assert out[0] >= 0
        np.testing.assert_allclose(out[1], 0.8, rtol=1e-4)


class TestEnsemble:
    def test_zero_dynamics_constant(self):
        ens = simulate_ensemble(zero_model(2, 1), [0.3, -1.0], SimConfig(steps=25, ensemble_size=100))
        np.testing.assert_array_equal(ens.states, np.broadcast_to([0.3, -1.0], (100, 26, 2)))

    def test_deterministic(self):
        cfg = SimConfig(ensemble_size=200, seed=7)
        model = grazing_model(GrazingParams())
        a = simulate_ensemble(model, [3.0], cfg, stream=(5,))
        b = simulate_ensemble(model, [3.0], cfg, stream=(5,))
        np.testing.assert_array_equal(a.states, b.states)
        c = simulate_ensemble(model, [3.0], cfg, stream=(6,))
        assert not np.array_equal(a.states, c.states)

    def test_trajectory_noise_independent_of_ensemble_size(self):
        model = gbm_model(0.05, 0.2)
        small = simulate_ensemble(model, [1.0], SimConfig(ensemble_size=10, seed=3))
        large = simulate_ensemble(model, [1.0], SimConfig(ensemble_size=50, seed=3))
        # trajectory i consumes block i of the stream
        np.testing.assert_array_equal(small.states, large.states[:10])

    def test_initial_state_stored(self):
        ens = simulate_ensemble(gbm_model(0.05, 0.2), [1.0], SimConfig(ensemble_size=50))
        np.testing.assert_array_equal(ens.states[:, 0], 1.0)

    def test_initial_perturbation(self):
        ens = simulate_ensemble(zero_model(), [1.0], SimConfig(ensemble_size=20000), initial_std=0.25)
        np.testing.assert_allclose(ens.states[:, 0, 0].std(), 0.25, rtol=0.03)

    def test_blow_up_policy(self):
        model = SdeModel(1, 1, lambda x: np.where(x > 0, x**40, 0.0), lambda x: np.ones(x.shape + (1,)))
        with pytest.raises(NonFiniteState) as err:
            simulate_ensemble(model, [3.0], SimConfig(ensemble_size=100, steps=50))
        assert err.value.discarded > 1

    def test_gbm_weak_accuracy(self):
        mu, s = 0.05, 0.2
        cfg = SimConfig(dt=0.01, steps=25, ensemble_size=100_000, seed=11)
        ens = simulate_ensemble(gbm_model(mu, s), [1.0], cfg)
        ms = compute_moments(ens)
        t = ms.times
        mean = np.exp(mu * t)
        var = np.exp(2 * mu * t) * (np.exp(s * s * t) - 1)
        x = ens.states[:, :, 0]
        se_mean = x.std(axis=0) / np.sqrt(cfg.ensemble_size)
        se_var = np.sqrt(np.var((x - x.mean(0)) ** 2, axis=0) / cfg.ensemble_size)
        assert np.all(np.abs(ms.means[:, 0] - mean) <= 3 * se_mean + 1e-15)
        assert np.all(np.abs(ms.covariances[1:, 0, 0] - var[1:]) <= 3 * se_var[1:])
        np.testing.assert_allclose(mean[-1], 1.012578, atol=5e-7)

    def test_grazing_moments_converge(self):
        model = grazing_model(GrazingParams())
        cfg = SimConfig(ensemble_size=10_000, seed=1)
        a = simulate_ensemble(model, [4.0], cfg)
        b = simulate_ensemble(model, [4.0], SimConfig(ensemble_size=20_000, seed=2))
        se = a.states[:, -1, 0].std() / np.sqrt(10_000)
        assert abs(a.states[:, -1, 0].mean() - b.states[:, -1, 0].mean()) < 2 * np.sqrt(1.5) * se

    def test_rvdp_keeps_wall(self):
        model = rvdp_model(RvdpParams(D=0.1))
        ens = simulate_ensemble(model, [0.05, -1.5], SimConfig(ensemble_size=500, steps=200, dt=0.005))
        assert ens.states[..., 0].min() >= 0.0


class TestMoments:
    def test_hand_example(self):
        states = np.array([[[0.0]], [[2.0]]])
        mu, cov = moments_of(states)
        np.testing.assert_array_equal(mu, [[1.0]])
        np.testing.assert_array_equal(cov, [[[1.0]]])

    def test_identical_trajectories(self):
        traj = np.linspace(0, 1, 6).reshape(3, 2)
        mu, cov = moments_of(np.stack([traj] * 4))
        np.testing.assert_array_equal(mu, traj)
        np.testing.assert_array_equal(cov, 0.0)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            moments_of(np.zeros((0, 3, 1)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 40), st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_covariance_symmetric_psd(self, N, n, seed):
        x = np.random.default_rng(seed).normal(size=(N, 4, n)) * 10
        _, cov = moments_of(x)
        np.testing.assert_array_equal(cov, np.swapaxes(cov, -1, -2))
        tr = np.trace(cov, axis1=-2, axis2=-1)
        assert np.all(np.linalg.eigvalsh(cov)[:, 0] >= -1e-10 * tr)

    def test_point_mass_start(self):
        ms = compute_moments(simulate_ensemble(gbm_model(0.1, 0.3), [2.0], SimConfig(ensemble_size=300)))
        np.testing.assert_array_equal(ms.means[0], [2.0])
        np.testing.assert_array_equal(ms.covariances[0], [[0.0]])


class TestPersistence:
    def test_moment_header(self):
        assert moment_header(2) == ["t", "mu_1", "mu_2", "sigma_11", "sigma_12", "sigma_21", "sigma_22"]

    def test_moments_round_trip(self, tmp_path):
        ms = compute_moments(simulate_ensemble(rvdp_model(), [1.5, -2.0], SimConfig(ensemble_size=50, steps=5)))
        write_moments_csv(tmp_path / "m.csv", ms)
        back = read_moments_csv(tmp_path / "m.csv")
        np.testing.assert_array_equal(back.means, ms.means)
        np.testing.assert_array_equal(back.covariances, ms.covariances)
        np.testing.assert_array_equal(back.times, ms.times)

    def test_ensemble_round_trip(self, tmp_path):
        ens = simulate_ensemble(rvdp_model(), [1.5, -2.0], SimConfig(ensemble_size=7, steps=4))
        write_ensemble_csv(tmp_path / "e.csv", ens)
        np.testing.assert_array_equal(read_ensemble_csv(tmp_path / "e.csv"), ens.states)
