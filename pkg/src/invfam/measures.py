"""Probability vectors, weight functions and the norms used to measure convergence.

Total variation follows the sup-minus-inf convention: for probability vectors
``p`` and ``q`` it is the L1 distance ``sum |p - q|`` and ranges over
``[0, 2]``.  Libraries that report the halved quantity differ by a factor 2.

Weight functions may take the value ``+inf``.  Every supremum in this module
is restricted to the states where the weight is finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EmptyDomainError, NormalizationError, ParameterError

PROB_ATOL = 1e-12
RENORMALIZE_ATOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ProbabilityVector:
    """A probability distribution on ``{0, ..., state_count - 1}``."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise NormalizationError("probability vector must be a nonempty 1-d array")
        if not np.all(np.isfinite(w)):
            raise NormalizationError("probability vector has non-finite entries")
        if w.min() < -PROB_ATOL:
            raise NormalizationError(f"negative probability {w.min():.3e}")
        w = np.clip(w, 0.0, None)
        total = w.sum()
        if abs(total - 1.0) > RENORMALIZE_ATOL:
            raise NormalizationError(f"weights sum to {total!r}, not 1")
        if abs(total - 1.0) > 0.0:
            w = w / total
        object.__setattr__(self, "weights", _readonly(w))

    @property
    def state_count(self) -> int:
        return self.weights.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.weights, dtype=dtype)

    def __len__(self):
        return self.weights.size

    @classmethod
    def point_mass(cls, state: int, state_count: int) -> "ProbabilityVector":
        w = np.zeros(state_count)
        w[state] = 1.0
        return cls(w)

    @classmethod
    def uniform(cls, state_count: int) -> "ProbabilityVector":
        return cls(np.full(state_count, 1.0 / state_count))


@dataclass(frozen=True, eq=False)
class SignedVector:
    """A finite real function (or signed measure) on a finite state space."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise DimensionError("signed vector must be 1-d")
        if not np.all(np.isfinite(v)):
            raise ParameterError("signed vector has non-finite entries")
        object.__setattr__(self, "values", _readonly(v))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True, eq=False)
class WeightFunction:
    """An extended nonnegative weight ``V: states -> [0, inf]``.

    ``math.inf`` (or ``np.inf``) marks states outside the effective domain.
    ``finite`` is the boolean mask of states with ``V(x) < inf``.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise DimensionError("weight function must be a nonempty 1-d array")
        if np.any(np.isnan(v)) or np.any(v < 0) or np.any(v == -np.inf):
            raise ParameterError("weight function must take values in [0, inf]")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def finite(self) -> np.ndarray:
        return np.isfinite(self.values)

    @property
    def finite_set(self) -> np.ndarray:
        return np.flatnonzero(self.finite)

    @property
    def state_count(self) -> int:
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self):
        return self.values.size

    @classmethod
    def zeros(cls, state_count: int) -> "WeightFunction":
        return cls(np.zeros(state_count))


def as_probability(p) -> np.ndarray:
    if isinstance(p, ProbabilityVector):
        return p.weights
    return ProbabilityVector(p).weights


def as_weight(V) -> WeightFunction:
    return V if isinstance(V, WeightFunction) else WeightFunction(V)


def as_values(phi) -> np.ndarray:
    if isinstance(phi, SignedVector):
        return phi.values
    return np.asarray(phi, dtype=float)


def tv_distance(p, q) -> float:
    """Total variation distance ``sum |p - q|`` (range ``[0, 2]``)."""
    a = as_probability(p)
    b = as_probability(q)
    if a.shape != b.shape:
        raise DimensionError(f"state counts differ: {a.size} vs {b.size}")
    return float(np.abs(a - b).sum())


def _restricted(phi, V: WeightFunction, beta: float):
    if beta <= 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    values = as_values(phi)
    if values.shape != V.values.shape:
        raise DimensionError(f"phi has {values.size} states, V has {V.state_count}")
    mask = V.finite
    if not mask.any():
        raise EmptyDomainError("V is infinite on every state")
    phi_f = values[mask]
    if not np.all(np.isfinite(phi_f)):
        raise ParameterError("phi must be finite where V is finite")
    return phi_f, V.values[mask]


def beta_oscillation(phi, V, beta: float) -> float:
    """Exact ``max_{x != y} |phi(x) - phi(y)| / (2 + beta V(x) + beta V(y))``."""
    V = as_weight(V)
    phi_f, v_f = _restricted(phi, V, beta)
    if phi_f.size < 2:
        return 0.0
    w = 1.0 + beta * v_f
    best = 0.0
    # Row chunks keep memory at O(chunk * d) for large state spaces.
    chunk = max(1, 2_000_000 // phi_f.size)
    for start in range(0, phi_f.size, chunk):
        diff = np.abs(phi_f[start:start + chunk, None] - phi_f[None, :])
        den = w[start:start + chunk, None] + w[None, :]
        best = max(best, float((diff / den).max()))
    return best


def weighted_norms(phi, V, beta: float) -> tuple[float, float, float]:
    """Return ``(||phi||, ||phi||_beta, |||phi|||_beta)`` over the finite-V states.

    ``||phi|| = sup |phi| / (1 + V)``, ``||phi||_beta = sup |phi| / (1 + beta V)``
    and the last entry is the pairwise oscillation seminorm.
    """
    V = as_weight(V)
    phi_f, v_f = _restricted(phi, V, beta)
    weighted_sup = float(np.max(np.abs(phi_f) / (1.0 + v_f)))
    beta_sup = float(np.max(np.abs(phi_f) / (1.0 + beta * v_f)))
    return weighted_sup, beta_sup, beta_oscillation(phi, V, beta)


def shifted_beta_sup(phi, V, beta: float, c: float) -> float:
    """``||phi + c||_beta`` restricted to finite-V states."""
    V = as_weight(V)
    phi_f, v_f = _restricted(phi, V, beta)
    return float(np.max(np.abs(phi_f + c) / (1.0 + beta * v_f)))


def min_shifted_beta_sup(phi, V, beta: float) -> tuple[float, float]:
    """Minimize ``c -> ||phi + c||_beta`` exactly.

    The objective is a maximum of functions ``|phi(x) + c| / w(x)``, so it is
    convex and piecewise linear in ``c``.  Its minimum sits at a root
    ``c = -phi(x)`` or where an increasing piece meets a decreasing one,
    ``c = -(phi(x) w(y) + phi(y) w(x)) / (w(x) + w(y))``.  Every candidate is
    evaluated.  Returns ``(argmin, min)``.
    """
    V = as_weight(V)
    phi_f, v_f = _restricted(phi, V, beta)
    w = 1.0 + beta * v_f
    cross = -(phi_f[:, None] * w[None, :] + phi_f[None, :] * w[:, None]) / (w[:, None] + w[None, :])
    candidates = np.unique(np.concatenate([cross.ravel(), -phi_f]))
    best_c, best_val = 0.0, np.inf
    chunk = max(1, 2_000_000 // phi_f.size)
    for start in range(0, candidates.size, chunk):
        cs = candidates[start:start + chunk]
        vals = np.max(np.abs(phi_f[None, :] + cs[:, None]) / w[None, :], axis=1)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_c, best_val = float(cs[i]), float(vals[i])
    return best_c, best_val


def norm_identity_gap(phi, V, beta: float) -> float:
    """``| |||phi|||_beta - min_c ||phi + c||_beta |``; zero up to rounding."""
    _, minimum = min_shifted_beta_sup(phi, V, beta)
    return abs(beta_oscillation(phi, V, beta) - minimum)
