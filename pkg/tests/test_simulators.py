"""
Tests for the Task Simulators
"""

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from errors import ConfigError, DomainError, UnknownNameError
from simulators import (
    DarcyTask, LinearGaussianTask, SirdTask, add_lognormal_noise, add_observation_noise, darcy_prior_sample,
    darcy_prior_variance, darcy_solve, gaussian_posterior, get_task, lg_analytic_posterior, list_tasks,
    sird_integrate, sird_simulate,
)


class TestRegistry:
    """Test task lookup"""

    def test_registered_tasks(self):
        """All three benchmark tasks are registered"""
        assert list_tasks() == ["darcy", "linear_gaussian", "sird"]

    def test_unknown_task(self):
        """Test an unregistered name"""
        with pytest.raises(UnknownNameError) as exc:
            get_task("lotka_volterra")
        assert exc.value.kind == "task"

    def test_unknown_option(self):
        """Test an option that is not a task field"""
        with pytest.raises(ConfigError):
            get_task("linear_gaussian", grid_size=10)

    def test_options_applied(self):
        """Options become task fields"""
        task = get_task("sird", n_points=30, t_max=20.0)
        assert task.theta_discretization().n_points == 30
        assert task.manifest()["eta_dim"] == 2


class TestLinearGaussian:
    """Test the conjugate Gaussian task"""

    def test_posterior_matches_precision_form(self):
        """K - K (K + s2 I)^-1 K equals (K^-1 + I / s2)^-1"""
        task = LinearGaussianTask(n_points=20, lengthscale=0.05, noise_var=0.1)
        K = task.prior_covariance()
        x_o = np.random.default_rng(0).standard_normal(20)
        post = lg_analytic_posterior(x_o, task)
        cov = np.linalg.inv(np.linalg.inv(K) + np.eye(20) / 0.1)
        assert np.allclose(post.covariance, cov, atol=1e-8)
        assert np.allclose(post.mean, cov @ x_o / 0.1, atol=1e-8)

    def test_posterior_samples(self):
        """Posterior draws have the posterior mean"""
        task = LinearGaussianTask(n_points=10, lengthscale=0.1)
        post = lg_analytic_posterior(np.ones(10), task)
        draws = post.sample(20000, np.random.default_rng(1))
        assert draws.shape == (20000, 10, 1)
        assert np.allclose(draws[..., 0].mean(axis=0), post.mean, atol=0.05)

    def test_noise_level(self):
        """x - theta has variance noise_var"""
        task = LinearGaussianTask(n_points=50, noise_var=0.1)
        data = task.simulate_set(400, np.random.default_rng(2))
        assert data.x.shape == (400, 50, 1)
        assert np.var(data.x - data.theta) == pytest.approx(0.1, rel=0.05)

    def test_invalid_noise(self):
        """Test a nonpositive noise variance"""
        with pytest.raises(DomainError):
            LinearGaussianTask(noise_var=0.0)
        with pytest.raises(DomainError):
            gaussian_posterior(np.zeros(3), np.eye(3), -1.0)


class TestSird:
    """Test the SIRD epidemic simulator"""

    def test_population_conserved(self, rng):
        """S + I + R + D stays at 1"""
        task = SirdTask(n_points=20, t_max=30.0)
        beta, eta = task.sample_prior(5, rng)
        states = task.trajectories(beta, eta)
        assert np.allclose(states.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(states >= -1e-9)

    def test_matches_reference_integrator(self):
        """Constant contact rate against an adaptive integrator"""
        beta, gamma, mu = 0.3, 0.1, 0.02

        def rhs(t, y):
            s, i = y[0], y[1]
            return [-beta * s * i, beta * s * i - (gamma + mu) * i, gamma * i, mu * i]

        times = np.array([5.0, 20.0, 50.0])
        ref = solve_ivp(rhs, (0, 50), [0.99, 0.01, 0, 0], t_eval=times, rtol=1e-11, atol=1e-13).y.T
        out = sird_integrate(np.full((1, 5), beta), np.linspace(0, 50, 5), np.array([gamma]), np.array([mu]), times)
        assert np.allclose(out[0], ref, atol=1e-6)

    def test_no_contact_decay(self):
        """With b = 0, I decays as exp(-(g + m) t)"""
        times = np.array([1.0, 10.0])
        out = sird_integrate(np.zeros((1, 3)), np.array([0.0, 5.0, 10.0]), np.array([0.2]), np.array([0.1]), times)
        assert np.allclose(out[0, :, 0], 0.99)
        assert np.allclose(out[0, :, 1], 0.01 * np.exp(-0.3 * times), rtol=1e-8)

    def test_unsorted_times(self):
        """States come back in the order the times were given"""
        knots = np.linspace(0, 20, 4)
        beta = np.full((2, 4), 0.4)
        rates = np.array([0.1, 0.2])
        forward = sird_integrate(beta, knots, rates, rates, np.array([2.0, 8.0, 15.0]))
        shuffled = sird_integrate(beta, knots, rates, rates, np.array([15.0, 2.0, 8.0]))
        assert np.allclose(shuffled, forward[:, [2, 0, 1]], atol=1e-12)

    def test_negative_time(self):
        """Test an output time before the start"""
        with pytest.raises(DomainError):
            sird_integrate(np.zeros((1, 2)), np.array([0.0, 1.0]), np.zeros(1), np.zeros(1), np.array([-1.0]))

    def test_prior_ranges(self, rng):
        """b(t) lies in (0, 1) and rates in [0, 0.5)"""
        beta, eta = SirdTask(n_points=25).sample_prior(50, rng)
        assert beta.shape == (50, 25, 1)
        assert np.all((beta > 0) & (beta < 1))
        assert np.all((eta >= 0) & (eta < 0.5))

    def test_random_evaluation_points(self, rng):
        """Test records carry their own sorted time points"""
        data = SirdTask(n_points=20, t_max=20.0, n_eval_points=12).test_set(3, rng)
        assert data.pos_theta.shape == (3, 12, 1)
        assert data.x.shape == (3, 12, 3)
        assert np.all(np.diff(data.pos_x[..., 0], axis=1) >= 0)
        assert not np.array_equal(data.pos_x[0], data.pos_x[1])

    def test_evaluation_points_inside_training_window(self, rng):
        """Random test times never pass the last training time point"""
        task = SirdTask(n_points=20, t_max=20.0, n_eval_points=30)
        data = task.test_set(20, rng)
        days = data.pos_x[..., 0] * task.time_scale
        assert np.all(days >= 0.0)
        assert np.all(days <= task.t_max + 1e-12)
        assert task.grid_end * task.time_scale == pytest.approx(task.t_max)

    def test_simulate_from_rates(self, rng):
        """Rates given separately match the task forward model"""
        task = SirdTask(n_points=15, t_max=15.0)
        beta, eta = task.sample_prior(2, rng)
        a = sird_simulate(beta, eta[:, 0], eta[:, 1], task, np.random.default_rng(4))
        b = task.simulate(beta, eta, np.random.default_rng(4))
        assert a.shape == (2, 15, 3)
        assert np.array_equal(a, b)

    def test_lognormal_noise(self, rng):
        """Noise is multiplicative with the configured log std"""
        values = np.full((200, 50), 0.3)
        noisy = add_lognormal_noise(values, 0.05, rng)
        assert np.all(noisy > 0)
        assert np.std(np.log(noisy / values)) == pytest.approx(0.05, rel=0.05)

    def test_lognormal_noise_mean(self):
        """Noisy values average to the noise-free value"""
        values = np.full((400, 500), 0.3)
        noisy = add_lognormal_noise(values, 0.05, np.random.default_rng(11))
        assert np.mean(noisy) == pytest.approx(0.3, rel=1e-3)
        assert np.mean(np.log(noisy / values)) == pytest.approx(-0.5 * 0.05 ** 2, abs=5e-4)


class TestDarcy:
    """Test the Darcy flow solver and prior"""

    def test_unit_permeability_matches_dense_solve(self):
        """a = 1 reduces to the five-point Poisson problem"""
        size = 12
        n, h = size - 2, 1.0 / (size - 1)
        T = 2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
        A = np.kron(np.eye(n), T) + np.kron(T, np.eye(n))
        expected = np.linalg.solve(A, np.full(n * n, h * h)).reshape(n, n)
        u = darcy_solve(np.ones((size, size)), DarcyTask(grid_size=size))
        assert np.allclose(u[1:-1, 1:-1], expected, rtol=1e-7, atol=1e-12)
        assert np.all(u[0] == 0) and np.all(u[:, -1] == 0)
        assert np.allclose(u, u.T, atol=1e-8)

    def test_scaling(self, rng):
        """Scaling a by c scales u by 1/c"""
        task = DarcyTask(grid_size=10)
        a = np.exp(0.3 * rng.standard_normal((10, 10)))
        assert np.allclose(darcy_solve(4.0 * a, task), darcy_solve(a, task) / 4.0, rtol=1e-6, atol=1e-14)

    def test_invalid_permeability(self):
        """Test nonpositive permeability"""
        a = np.ones((5, 5))
        a[2, 2] = 0.0
        with pytest.raises(DomainError):
            darcy_solve(a, DarcyTask(grid_size=5))

    def test_prior_variance(self):
        """Empirical variance of b matches the eigen-sum"""
        task = DarcyTask(grid_size=8)
        b, a = darcy_prior_sample(task, np.random.default_rng(3), 4000)
        expected = darcy_prior_variance(task)
        empirical = b.var(axis=0)
        assert b.shape == a.shape == (4000, 8, 8)
        assert np.mean(empirical) == pytest.approx(np.mean(expected), rel=0.05)
        assert np.allclose(empirical, expected, rtol=0.2)

    def test_simulate_shapes(self, rng):
        """Observations share the 2-D parameter grid"""
        task = DarcyTask(grid_size=8, log_scale=1.0)
        theta, eta = task.sample_prior(2, rng)
        x = task.simulate(theta, eta, rng)
        assert theta.shape == x.shape == (2, 64, 1)
        assert eta.shape == (2, 0)

    def test_grid_is_fixed(self, rng):
        """Test positions other than the solver grid"""
        task = DarcyTask(grid_size=6)
        with pytest.raises(DomainError):
            task.sample_prior(1, rng, rng.uniform(size=(36, 2)))
        with pytest.raises(DomainError):
            DarcyTask(grid_size=2)

    def test_observation_noise(self, rng):
        """Infinite SNR is noise free"""
        u = rng.standard_normal((3, 4, 4))
        assert np.array_equal(add_observation_noise(u, np.inf, rng), u)
        with pytest.raises(DomainError):
            add_observation_noise(u, 0.0, rng)


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
