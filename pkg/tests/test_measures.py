import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from invfam.errors import DimensionError, EmptyDomainError, NormalizationError, ParameterError
from invfam.measures import (
    ProbabilityVector,
    WeightFunction,
    beta_oscillation,
    min_shifted_beta_sup,
    norm_identity_gap,
    shifted_beta_sup,
    tv_distance,
    weighted_norms,
)


def prob_vectors(d):
    return st.lists(st.floats(0.01, 1.0), min_size=d, max_size=d).map(lambda w: np.array(w) / sum(w))


def subset_tv(p, q):
    """2 sup_A (p(A) - q(A)) by enumerating every subset."""
    d = len(p)
    best = 0.0
    for mask in itertools.product([0, 1], repeat=d):
        m = np.array(mask, bool)
        best = max(best, p[m].sum() - q[m].sum())
    return 2 * best


def pair_oscillation(phi, V, beta):
    """Independent oscillation oracle: plain double loop."""
    best = 0.0
    for i in range(len(phi)):
        for j in range(len(phi)):
            if i != j:
                best = max(best, abs(phi[i] - phi[j]) / (2 + beta * V[i] + beta * V[j]))
    return best


class TestProbabilityVector:
    def test_rejects_negative(self):
        with pytest.raises(NormalizationError):
            ProbabilityVector([1.2, -0.2])

    def test_rejects_bad_sum(self):
        with pytest.raises(NormalizationError):
            ProbabilityVector([0.5, 0.6])

    def test_read_only(self):
        p = ProbabilityVector([0.5, 0.5])
        with pytest.raises(ValueError):
            p.weights[0] = 1.0

    def test_point_mass_and_uniform(self):
        assert ProbabilityVector.point_mass(1, 3).weights.tolist() == [0, 1, 0]
        assert np.allclose(ProbabilityVector.uniform(4).weights, 0.25)

    def test_weight_accepts_infinity(self):
        V = WeightFunction([0.0, np.inf, 2.0])
        assert V.finite_set.tolist() == [0, 2]

    def test_weight_rejects_negative(self):
        with pytest.raises(ParameterError):
            WeightFunction([-1.0, 0.0])


class TestTV:
    def test_identical(self):
        assert tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0

    def test_disjoint(self):
        assert tv_distance([1, 0], [0, 1]) == 2.0

    def test_subset_oracle_example(self):
        p, q = np.array([0.6, 0.4]), np.array([0.4, 0.6])
        assert tv_distance(p, q) == pytest.approx(subset_tv(p, q), abs=1e-15)
        assert tv_distance(p, q) == pytest.approx(0.4, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            tv_distance([1.0], [0.5, 0.5])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 12).flatmap(lambda d: st.tuples(prob_vectors(d), prob_vectors(d))))
    def test_matches_subset_enumeration(self, pq):
        p, q = pq
        assert tv_distance(p, q) == pytest.approx(subset_tv(p, q), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 8).flatmap(lambda d: st.tuples(prob_vectors(d), prob_vectors(d), prob_vectors(d))))
    def test_metric_axioms(self, pqr):
        p, q, r = pqr
        assert tv_distance(p, q) == tv_distance(q, p)
        assert tv_distance(p, p) == 0.0
        assert tv_distance(p, r) <= tv_distance(p, q) + tv_distance(q, r) + 1e-15
        assert 0.0 <= tv_distance(p, q) <= 2.0


class TestNorms:
    def test_constant_has_zero_oscillation(self):
        assert beta_oscillation([3.0, 3.0, 3.0], [0, 5, 1], 0.7) == 0.0

    def test_three_state_example(self):
        ws, bs, osc = weighted_norms([1, 2, 3], [0, 1, 2], 0.5)
        assert ws == pytest.approx(1.0)
        assert bs == pytest.approx(1.5)
        assert osc == pytest.approx(2 / 3)
        assert osc == pytest.approx(pair_oscillation([1, 2, 3], [0, 1, 2], 0.5))

    def test_two_state_example(self):
        assert beta_oscillation([1, 0], [0, 0], 1.0) == pytest.approx(0.5)

    def test_infinite_weight_states_are_ignored(self):
        assert beta_oscillation([1, 100, 0], [0, np.inf, 0], 1.0) == pytest.approx(0.5)

    def test_beta_must_be_positive(self):
        with pytest.raises(ParameterError):
            beta_oscillation([1, 0], [0, 0], 0.0)

    def test_all_infinite(self):
        with pytest.raises(EmptyDomainError):
            beta_oscillation([1, 0], [np.inf, np.inf], 1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 10).flatmap(lambda d: st.tuples(
        st.lists(st.floats(-50, 50), min_size=d, max_size=d),
        st.lists(st.floats(0, 100), min_size=d, max_size=d))),
        st.floats(1e-3, 10))
    def test_oscillation_below_beta_sup(self, data, beta):
        phi, V = data
        _, bs, osc = weighted_norms(phi, V, beta)
        assert osc <= bs * (1 + 1e-12) + 1e-300
        assert osc == pytest.approx(pair_oscillation(phi, V, beta), rel=1e-12, abs=1e-300)


class TestNormIdentity:
    def test_three_state_minimizer(self):
        c, val = min_shifted_beta_sup([1, 2, 3], [0, 1, 2], 0.5)
        assert c == pytest.approx(-5 / 3)
        assert val == pytest.approx(2 / 3)
        assert norm_identity_gap([1, 2, 3], [0, 1, 2], 0.5) <= 1e-10

    def test_two_state_minimizer(self):
        c, val = min_shifted_beta_sup([1, 0], [0, 0], 1.0)
        assert c == pytest.approx(-0.5)
        assert val == pytest.approx(0.5)

    def test_constant(self):
        assert norm_identity_gap([2.0, 2.0], [1.0, 3.0], 0.3) == 0.0

    @settings(max_examples=80, deadline=None)
    @given(st.integers(2, 10).flatmap(lambda d: st.tuples(
        st.lists(st.floats(-10, 10), min_size=d, max_size=d),
        st.lists(st.floats(0, 20), min_size=d, max_size=d))),
        st.floats(1e-2, 5))
    def test_exact_minimum_beats_numeric_search(self, data, beta):
        phi, V = data
        _, exact = min_shifted_beta_sup(phi, V, beta)
        lo, hi = -max(phi) - 1, -min(phi) + 1
        res = minimize_scalar(lambda c: shifted_beta_sup(phi, V, beta, c), bounds=(lo, hi),
                              method="bounded", options={"xatol": 1e-12})
        assert exact <= res.fun + 1e-12
        assert exact >= res.fun - 1e-6
