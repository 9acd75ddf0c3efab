import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from invfam.certificates import find_minorization
from invfam.diffusion import (
    Grid,
    SDEModel,
    apply_generator,
    check_nondegeneracy,
    coefficient_shift_defects,
    empirical_kernel_family,
    estimate_kernel,
    euler_maruyama,
    generator_lattice_check,
    kernel_csv,
    mc_drift_check,
    ou_preset,
    release_rate,
    storage_preset,
    trajectory_csv,
)
from invfam.errors import BlowUpError, GridTooSmallError, ModelDefinitionError, ParameterError

STILL = SDEModel(1, lambda t, X: np.zeros_like(X), lambda t, X: 0.0)


def ou_mean(x0, t=1.0):
    forced, _ = quad(lambda u: math.exp(-(t - u)) * 0.5 * math.sin(2 * math.pi * u), 0, t)
    return x0 * math.exp(-t) + forced


def ou_var(t=1.0):
    v, _ = quad(lambda u: math.exp(-2 * (t - u)) * (1 + 0.5 * math.cos(2 * math.pi * u)) ** 2, 0, t)
    return v


class TestEulerMaruyama:
    def test_degenerate_is_constant(self):
        traj = euler_maruyama(STILL, [2.5], 0, 1, 0.1, batch=3)
        assert np.all(traj.paths == 2.5)
        assert traj.times.size == 11

    def test_ode_decay(self):
        model = SDEModel(1, lambda t, X: -X, lambda t, X: 0.0)
        traj = euler_maruyama(model, [1.0], 0, 1, 1e-4, record="final")
        assert abs(traj.final[0, 0] - math.exp(-1)) < 1e-3

    def test_last_step_is_shortened(self):
        model = SDEModel(1, lambda t, X: np.ones_like(X), lambda t, X: 0.0)
        traj = euler_maruyama(model, [0.0], 0, 1, 0.3)
        assert traj.times[-1] == pytest.approx(1.0)
        assert traj.final[0, 0] == pytest.approx(1.0)

    def test_reproducible_and_batch_independent(self):
        model = ou_preset()
        a = euler_maruyama(model, [1.0], 0, 0.5, 0.01, batch=3000, seed=11)
        b = euler_maruyama(model, [1.0], 0, 0.5, 0.01, batch=3000, seed=11)
        c = euler_maruyama(model, [1.0], 0, 0.5, 0.01, batch=5, seed=11)
        d = euler_maruyama(model, [1.0], 0, 0.5, 0.01, batch=5, seed=12)
        assert np.array_equal(a.paths, b.paths)
        assert np.array_equal(a.paths[:5], c.paths)
        assert not np.array_equal(c.paths, d.paths)

    def test_reflection_keeps_nonnegative(self):
        traj = euler_maruyama(storage_preset(), [0.1], 0, 1, 0.01, batch=500, seed=3)
        assert traj.paths.min() >= 0

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_blow_up(self):
        model = SDEModel(1, lambda t, X: X ** 3, lambda t, X: 0.0)
        with pytest.raises(BlowUpError) as err:
            euler_maruyama(model, [10.0], 0, 10, 0.5)
        assert err.value.path == 0

    def test_bad_callback(self):
        model = SDEModel(1, lambda t, X: 1 / 0, lambda t, X: 0.0)
        with pytest.raises(ModelDefinitionError):
            euler_maruyama(model, [0.0], 0, 1, 0.1)

    def test_parameters(self):
        with pytest.raises(ParameterError):
            euler_maruyama(STILL, [0.0], 1, 0, 0.1)
        with pytest.raises(ParameterError):
            euler_maruyama(STILL, [0.0], 0, 1, -0.1)

    def test_ou_moments_against_quadrature(self):
        traj = euler_maruyama(ou_preset(), [1.0], 0, 1, 1e-3, batch=20000, seed=5, record="final")
        x = traj.final[:, 0]
        se = x.std(ddof=1) / math.sqrt(x.size)
        assert abs(x.mean() - ou_mean(1.0)) <= 4 * se
        var_se = ou_var() * math.sqrt(2 / (x.size - 1))
        assert abs(x.var(ddof=1) - ou_var()) <= 4 * var_se

    def test_two_dimensional_matrix_diffusion(self):
        G = np.array([[1.0, 0.5], [0.5, 2.0]])
        model = SDEModel(2, lambda t, X: np.zeros_like(X), lambda t, X: G)
        x = euler_maruyama(model, [0.0, 0.0], 0, 1, 0.05, batch=20000, seed=2, record="final").final
        cov = np.cov(x.T)
        assert np.allclose(cov, G @ G.T, rtol=0.05)

    def test_trajectory_csv(self):
        traj = euler_maruyama(STILL, [0.1], 0, 0.2, 0.1, batch=2)
        lines = trajectory_csv(traj).splitlines()
        assert lines[0] == "path,time,x0"
        assert lines[1] == "0,0.0,0.1"
        assert len(lines) == 1 + 2 * 3


class TestKernelEstimation:
    def test_still_model_gives_point_masses(self):
        grid = Grid([0.0], [1.0], [5])
        kern = estimate_kernel(STILL, grid, 0, 1, 0.1, samples_per_cell=100)
        assert np.array_equal(kern.matrix, np.eye(5))
        assert kern.overflow_fraction.max() == 0.0

    def test_overflow_detected(self):
        drift_out = SDEModel(1, lambda t, X: np.full_like(X, 10.0), lambda t, X: 0.0)
        with pytest.raises(GridTooSmallError):
            estimate_kernel(drift_out, Grid([0.0], [1.0], [4]), 0, 1, 0.1, samples_per_cell=100)

    def test_grid_locate(self):
        grid = Grid([0.0, 0.0], [1.0, 2.0], [2, 4])
        assert grid.cell_count == 8
        assert grid.locate(np.array([[0.1, 0.1], [0.9, 1.9], [1.5, 0.0]])).tolist() == [0, 7, -1]

    def test_rows_match_direct_simulation(self):
        model = ou_preset()
        grid = Grid([-4.0], [4.0], [8])
        kern = estimate_kernel(model, grid, 0, 0.5, 0.01, samples_per_cell=4000, seed=1)
        assert np.allclose(kern.matrix.sum(axis=1), 1.0)
        # mean of the destination cell centers approximates the conditional mean
        centers = grid.centers()[:, 0]
        for i in (2, 5):
            est = kern.matrix[i] @ centers
            x0 = centers[i]
            forced, _ = quad(lambda u: math.exp(-(0.5 - u)) * 0.5 * math.sin(2 * math.pi * u), 0, 0.5)
            exact = x0 * math.exp(-0.5) + forced
            assert abs(est - exact) < 0.1
        assert np.all(kern.halfwidths <= 0.02)
        assert kernel_csv(kern).splitlines()[0] == "from,to,probability,halfwidth"

    def test_storage_kernel_minorizes_at_every_level(self):
        grid = Grid([0.0], [8.0], [16])
        K, _ = empirical_kernel_family(storage_preset(), grid, 0.0, 1.0, 2, 0.01, samples_per_cell=1000, seed=4)
        V = grid.centers()[:, 0]
        for R in (1.0, 4.0, 16.0):
            cert = find_minorization(K, V, R, 0.05, 8, window=range(0, 3))
            assert cert.ok
            assert cert.n0 <= 2


class TestGenerator:
    def test_storage_value(self):
        model = storage_preset()
        assert apply_generator(model, None, 0.0, [1.0]) == pytest.approx(-5.0)
        assert apply_generator(model, lambda x: x[0], 0.0, [1.0]) == pytest.approx(-5.0, abs=1e-8)

    def test_storage_coefficients(self):
        model = storage_preset()
        assert model.drift_at(0.0, np.array([[1.0]]))[0, 0] == pytest.approx(-5.0)
        assert math.cos(math.sqrt(2) * math.pi) == pytest.approx(-0.26625, abs=1e-5)
        assert model.drift_at(1.0, np.array([[0.0]]))[0, 0] == pytest.approx(-2.73375, abs=1e-5)
        ts = np.linspace(0, 20, 2001)
        xs = np.linspace(0, 10, 11)
        assert min(release_rate(t, x) for t in ts for x in xs) >= 1.0
        ok, lowest = check_nondegeneracy(model, ts[:50], xs)
        assert ok and lowest == pytest.approx(1.0)

    def test_null_generator(self):
        assert apply_generator(STILL, lambda x: float(np.sin(x[0])), 0.3, [0.7]) == pytest.approx(0.0, abs=1e-8)

    def test_ou_square(self):
        model = SDEModel(1, lambda t, X: -X, lambda t, X: 1.0, V=lambda x: float(x[0] ** 2),
                         dV=lambda x: 2 * x, d2V=lambda x: np.array([[2.0]]))
        assert apply_generator(model, None, 0.0, [1.0]) == pytest.approx(-1.0)
        assert apply_generator(model, lambda x: float(x[0] ** 2), 0.0, [1.0]) == pytest.approx(-1.0, abs=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 5))
    def test_fd_matches_analytic(self, a, b, t):
        model = SDEModel(2, lambda t, X: np.stack([-X[:, 0] + np.sin(t), -0.5 * X[:, 1]], axis=1),
                         lambda t, X: np.array([[1.0, 0.2], [0.2, 0.7 + 0.1 * np.cos(t)]]))

        def V(x):
            return float(np.exp(0.3 * x[0]) + x[0] * x[1] ** 2 + np.cos(x[1]))

        def dV(x):
            return np.array([0.3 * np.exp(0.3 * x[0]) + x[1] ** 2, 2 * x[0] * x[1] - np.sin(x[1])])

        def d2V(x):
            return np.array([[0.09 * np.exp(0.3 * x[0]), 2 * x[1]], [2 * x[1], 2 * x[0] - np.cos(x[1])]])

        x = [a, b]
        exact = apply_generator(model, V, t, x, dV, d2V)
        approx = apply_generator(model, V, t, x)
        assert approx == pytest.approx(exact, rel=1e-6, abs=1e-6)

    def test_callback_failure(self):
        with pytest.raises(ModelDefinitionError):
            apply_generator(STILL, lambda x: 0.0, 0, [0.0], dV=lambda x: 1 / 0)

    def test_storage_lattice(self):
        ok, slack = generator_lattice_check(storage_preset(), 1.0, np.linspace(0, 4, 21), np.linspace(0, 10, 21))
        assert ok and slack >= 1.0 - 1e-12


class TestMonteCarloDrift:
    def test_deterministic_decay_passes(self):
        c = 0.7
        model = SDEModel(1, lambda t, X: -c * X, lambda t, X: 0.0)
        rep = mc_drift_check(model, lambda x: abs(float(x[0])), c, [(0, 1, 2.0)], 1e-3, 4)
        assert rep.ok
        row = rep.rows[0]
        assert row.stderr == 0.0
        assert row.bound - row.estimate == pytest.approx(0.0, abs=2e-3)

    def test_storage_passes(self):
        rep = mc_drift_check(storage_preset(), None, 1.0, [(0, 2, 5)], 1e-3, 4000, seed=1)
        assert rep.ok
        assert rep.to_dict()["scope"] == "window-verified"

    def test_too_fast_rate_fails(self):
        model = ou_preset(forcing=0.0)
        rep = mc_drift_check(model, lambda x: float(x[0]), 10.0, [(0, 1, 5.0)], 1e-2, 2000)
        assert not rep.ok


def test_almost_periodic_coefficients():
    model = storage_preset()
    ts = np.linspace(0, 2, 41)
    xs = np.linspace(0, 5, 6)
    sin_only = SDEModel(1, lambda t, X: -(np.sin(np.pi * t) + X + 3), lambda t, X: 1.0)
    assert coefficient_shift_defects(sin_only, [2.0], ts, xs)[2.0] == pytest.approx(0.0, abs=1e-12)
    defects = coefficient_shift_defects(model, [10.0, 1.3], ts, xs)
    assert defects[10.0] < defects[1.3]
