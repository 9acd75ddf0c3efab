import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import drift_pair, random_periodic
from invfam.certificates import DELTA_CAP, verify_drift
from invfam.contraction import (
    ContractionConstants,
    constants_from,
    derive_constants,
    empirical_prefactor,
    fit_log_slope,
    level_for,
    sweep_gamma_star,
    tv_rate_check,
    verify_oscillation_contraction,
)
from invfam.ergodic import backward_limit_family
from invfam.errors import ConstantsError, ParameterError
from invfam.kernels import KernelFamily, backward_product
from invfam.measures import beta_oscillation

HALF = np.array([[0.5, 0.5], [0.5, 0.5]])


def oscillation_oracle(phi, V, beta):
    d = len(phi)
    return max(abs(phi[i] - phi[j]) / (2 + beta * V[i] + beta * V[j]) for i in range(d) for j in range(d))


class TestConstants:
    def test_worked_example(self):
        cc = constants_from(0.5, 1.0, 0.1, 2)
        assert cc.gamma_star == 0.75
        assert cc.R == 16.0
        assert cc.beta == pytest.approx(1 / 120, rel=1e-15)
        assert cc.alpha1 == pytest.approx(2.1 / (2 + 16 / 120), rel=1e-15)
        assert cc.alpha1 == pytest.approx(0.984375, rel=1e-15)
        assert cc.eta == cc.alpha1
        assert cc.alpha == pytest.approx(math.sqrt(0.984375), rel=1e-15)
        assert cc.check() == []

    def test_capped_delta_drift_branch_dominates(self):
        cc = constants_from(0.5, 1.0, DELTA_CAP, 1)
        assert 1 - DELTA_CAP / 2 == pytest.approx(0.5)
        assert cc.eta == cc.alpha1
        assert cc.eta > 0.5

    def test_gamma_star_must_exceed_gamma(self):
        with pytest.raises(ParameterError):
            level_for(0.5, 1.0, 0.5)
        with pytest.raises(ParameterError):
            constants_from(0.5, 1.0, 0.1, 1, gamma_star=0.4)

    def test_prefactors(self):
        cc = constants_from(0.5, 1.0, 0.1, 2)
        assert cc.M3 == 3.0
        assert cc.M1 == max(3 + cc.beta * 2, cc.beta)
        assert cc.M2 == cc.M1 / cc.beta
        assert cc.M_tilde == 2 * cc.M2 * cc.M3 / cc.eta

    def test_bit_reproducible(self):
        a = constants_from(0.3, 2.5, 0.27, 3)
        b = constants_from(0.3, 2.5, 0.27, 3)
        assert a.as_dict() == b.as_dict()
        assert ContractionConstants(**a.as_dict()).check() == []

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.01, 100), st.floats(1e-6, 0.999),
           st.floats(1e-6, 0.999), st.integers(1, 10))
    def test_eta_monotone_in_delta(self, gamma, C, d1, d2, n0):
        lo, hi = sorted((d1, d2))
        a, b = constants_from(gamma, C, lo, n0), constants_from(gamma, C, hi, n0)
        assert b.eta <= a.eta
        assert a.check() == [] and b.check() == []
        assert 0 < a.alpha < 1

    def test_derive_failure_carries_profile(self):
        K = KernelFamily.constant(np.eye(2))
        drift = verify_drift(K, [0.0, 0.0], 0.5, 0.1, range(1))
        with pytest.raises(ConstantsError) as err:
            derive_constants(drift, K, n0_max=3)
        assert len(err.value.profile) == 3
        assert err.value.R == pytest.approx(level_for(0.5, 0.1, 0.75))

    def test_sweep(self, periodic):
        drift = verify_drift(periodic, [0.0, 1.0], 0.5, 1.0, range(2))
        rows = sweep_gamma_star(drift, periodic, [0.6, 0.75, 0.9])
        assert [g for g, _ in rows] == [0.6, 0.75, 0.9]
        assert all(a is not None and 0 < a < 1 for _, a in rows)


class TestOscillationContraction:
    def test_identical_rows_contract_to_zero(self):
        K = KernelFamily.constant(HALF)
        drift = verify_drift(K, [0.0, 1.0], 0.5, 1.0, range(1))
        cc, _ = derive_constants(drift, K)
        rep = verify_oscillation_contraction(K, cc, [0.0, 1.0], trials=20)
        assert rep.max_ratio == pytest.approx(0.0, abs=1e-15)

    def test_constant_functions_are_skipped(self):
        K = KernelFamily.constant(np.ones((1, 1)))
        cc = constants_from(0.5, 1.0, 0.5, 1)
        rep = verify_oscillation_contraction(K, cc, [0.0], trials=10)
        assert rep.skipped == 10
        assert rep.max_ratio == 0.0

    def test_periodic_fixture_against_independent_seminorm(self, periodic):
        V = np.array([0.0, 1.0])
        drift = verify_drift(periodic, V, 0.5, 1.0, range(2))
        cc, mino = derive_constants(drift, periodic)
        rep = verify_oscillation_contraction(periodic, cc, V, trials=100, window=range(2))
        assert rep.ok
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            phi = rng.normal(size=2)
            for n in range(2):
                B = backward_product(periodic, n, cc.n0)
                worst = max(worst, oscillation_oracle(B @ phi, V, cc.beta) / oscillation_oracle(phi, V, cc.beta))
        assert worst <= cc.eta + 1e-9
        # On two states every phi gives the same ratio, so both searches see the same maximum.
        assert rep.max_ratio == pytest.approx(worst, rel=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_dual_pairing_contracts(self, seed):
        rng = np.random.default_rng(seed)
        K = random_periodic(rng)
        V = rng.uniform(0, 4, K.state_count)
        gamma, C = drift_pair(K, V)
        drift = verify_drift(K, V, gamma, C, range(K.period))
        cc, _ = derive_constants(drift, K, window=range(K.period))
        w = 1 + cc.beta * V
        for n in range(K.period):
            B = backward_product(K, n, cc.n0)
            p, q = rng.dirichlet(np.ones(K.state_count), size=2)
            phi = rng.normal(size=K.state_count)
            lhs = abs((p - q) @ (B @ phi))
            rhs = cc.eta * beta_oscillation(phi, V, cc.beta) * (np.abs(p - q) * w).sum()
            assert lhs <= rhs + 1e-12


class TestRates:
    def _setup(self, K, V, window):
        drift = verify_drift(K, V, 0.5, 1.0, window)
        cc, _ = derive_constants(drift, K, window=window)
        fam, _ = backward_limit_family(K, 0, range(0, 4), V=V)
        return cc, fam

    def test_base_case_and_mixing_kernel(self):
        K = KernelFamily.constant(HALF)
        cc, fam = self._setup(K, np.zeros(2), range(1))
        rep = tv_rate_check(K, fam, cc, np.zeros(2), 0, 2, m_max=10)
        assert rep.rows[0][1] == pytest.approx(1.0)
        assert rep.rows[0][2] == pytest.approx(cc.M_tilde)
        assert cc.M_tilde >= 2
        assert all(r[1] == pytest.approx(0.0, abs=1e-15) for r in rep.rows[1:])
        assert rep.slope is None
        assert rep.ok

    def test_periodic_fixture_rate(self, periodic):
        V = np.zeros(2)
        cc, fam = self._setup(periodic, V, range(2))
        rep = tv_rate_check(periodic, fam, cc, V, 0, 2, m_max=200)
        assert rep.ok
        lam2 = np.trace(periodic.matrix(0) @ periodic.matrix(1)) - 1
        assert lam2 == pytest.approx(0.14)
        per_period = math.exp(2 * rep.slope)
        assert per_period == pytest.approx(0.14, rel=0.05)
        assert per_period <= cc.alpha ** 2

    def test_infinite_weight_rejected(self, periodic):
        cc = constants_from(0.5, 1.0, 0.3, 1)
        fam, _ = backward_limit_family(periodic, 0, range(0, 4))
        with pytest.raises(ParameterError):
            tv_rate_check(periodic, fam, cc, [0.0, np.inf], 1, 2)

    def test_csv_header(self, periodic):
        V = np.zeros(2)
        cc, fam = self._setup(periodic, V, range(2))
        text = tv_rate_check(periodic, fam, cc, V, 0, 2, m_max=3).to_csv()
        lines = text.splitlines()
        assert lines[0] == "m,observed_tv,theoretical_bound,V_x"
        assert len(lines) == 5
        m, obs, bound, vx = lines[1].split(",")
        assert float(obs) == pytest.approx(1 - 17 / 43 + 26 / 43)
        assert float(bound) == cc.M_tilde

    def test_fit_log_slope(self):
        ms = np.arange(30)
        assert fit_log_slope(ms, 0.5 ** ms) == pytest.approx(math.log(0.5))
        assert fit_log_slope([0, 1], [1.0, 0.0]) is None

    def test_empirical_prefactor(self, periodic):
        V = np.zeros(2)
        cc, fam = self._setup(periodic, V, range(2))
        M = empirical_prefactor(periodic, fam, cc, V, 2, m_max=30)
        assert 0 < M <= cc.M4 * 2
