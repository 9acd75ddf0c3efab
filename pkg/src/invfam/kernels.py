"""Time-indexed one-step kernels on a finite state space.

Time is discrete.  ``KernelFamily.matrix(n)`` is the one-step kernel from time
``n`` to ``n + 1``; row ``x`` is the law of the state at ``n + 1`` given state
``x`` at ``n``.  Every bounded function on a finite space is continuous, so the
Feller property holds automatically and is never checked at runtime.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DimensionError,
    ModelDefinitionError,
    NormalizationError,
    ParameterError,
    RangeError,
    TimeOrderError,
)
from .measures import PROB_ATOL, RENORMALIZE_ATOL, ProbabilityVector, as_probability, as_values

log = logging.getLogger(__name__)

MAX_STATES = 4096


def stochastic_matrix(rows, *, max_states: int = MAX_STATES) -> np.ndarray:
    """Validate ``rows`` as a row-stochastic matrix and return a read-only copy.

    Rows off by less than 1e-9 are renormalized; larger deviations are rejected.
    """
    P = np.array(rows, dtype=float, copy=True)
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
        raise DimensionError(f"kernel must be a nonempty square matrix, got shape {P.shape}")
    if P.shape[0] > max_states:
        raise DimensionError(f"{P.shape[0]} states exceeds the cap of {max_states}")
    if not np.all(np.isfinite(P)):
        raise NormalizationError("kernel has non-finite entries")
    if P.min() < -PROB_ATOL:
        raise NormalizationError(f"kernel has negative entry {P.min():.3e}")
    P = np.clip(P, 0.0, None)
    sums = P.sum(axis=1)
    bad = np.abs(sums - 1.0) > RENORMALIZE_ATOL
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NormalizationError(f"row {i} sums to {sums[i]!r}")
    P /= sums[:, None]
    P.setflags(write=False)
    return P


@dataclass(frozen=True, eq=False)
class KernelFamily:
    """A rule ``n -> P_n`` producing one-step stochastic matrices for every integer ``n``.

    Build one with :meth:`constant`, :meth:`periodic`, :meth:`window` or
    :meth:`from_callback`.  Window schedules reuse their boundary matrices
    outside ``[start, start + len(matrices))``.
    """

    kind: str
    state_count: int
    matrices: tuple = ()
    start: int = 0
    rule: Callable[[int], np.ndarray] | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def constant(cls, P) -> "KernelFamily":
        P = stochastic_matrix(P)
        return cls("constant", P.shape[0], (P,))

    @classmethod
    def periodic(cls, matrices: Sequence) -> "KernelFamily":
        mats = tuple(stochastic_matrix(P) for P in matrices)
        if not mats:
            raise ParameterError("periodic schedule needs at least one matrix")
        _same_size(mats)
        return cls("periodic", mats[0].shape[0], mats)

    @classmethod
    def window(cls, matrices: Sequence, start: int = 0) -> "KernelFamily":
        mats = tuple(stochastic_matrix(P) for P in matrices)
        if not mats:
            raise ParameterError("window schedule needs at least one matrix")
        _same_size(mats)
        log.info("window schedule on [%d, %d) is clamped to its boundary matrices outside",
                 start, start + len(mats))
        return cls("window", mats[0].shape[0], mats, start=int(start))

    @classmethod
    def from_callback(cls, rule: Callable[[int], np.ndarray], state_count: int) -> "KernelFamily":
        return cls("callback", int(state_count), rule=rule)

    @property
    def period(self) -> int | None:
        """Exact period of the schedule, or ``None`` when none is known."""
        if self.kind == "constant":
            return 1
        if self.kind == "periodic":
            return len(self.matrices)
        return None

    def matrix(self, n: int) -> np.ndarray:
        n = int(n)
        if self.kind == "constant":
            return self.matrices[0]
        if self.kind == "periodic":
            return self.matrices[n % len(self.matrices)]
        if self.kind == "window":
            i = min(max(n - self.start, 0), len(self.matrices) - 1)
            return self.matrices[i]
        if n in self._cache:
            return self._cache[n]
        try:
            P = stochastic_matrix(self.rule(n))
        except Exception as exc:
            raise ModelDefinitionError(f"schedule callback failed at n={n}: {exc}") from exc
        if P.shape[0] != self.state_count:
            raise ModelDefinitionError(f"callback returned {P.shape[0]} states at n={n}, "
                                       f"expected {self.state_count}")
        self._cache[n] = P
        return P

    def exhaustive(self, window: Iterable[int], steps: int = 1) -> bool:
        """True when the ``steps``-step kernels ending at times in ``window`` are
        all the distinct ones the schedule can produce at any integer time."""
        times = set(window)
        if not times:
            return False
        if self.kind == "constant":
            return True
        if self.kind == "periodic":
            p = len(self.matrices)
            return len({n % p for n in times}) == p
        if self.kind == "window":
            lo, hi = self.start, self.start + len(self.matrices)
            return times.issuperset(range(lo, hi + steps))
        return False


def _same_size(mats):
    sizes = {P.shape[0] for P in mats}
    if len(sizes) != 1:
        raise DimensionError(f"matrices in one schedule have different sizes: {sorted(sizes)}")


def backward_product(K: KernelFamily, n: int, m: int) -> np.ndarray:
    """Return the ``m``-step kernel ``P_{n-m} P_{n-m+1} ... P_{n-1}`` ending at time ``n``."""
    if m < 0:
        raise ParameterError(f"number of steps must be nonnegative, got {m}")
    B = np.eye(K.state_count)
    for k in range(n - m, n):
        B = B @ K.matrix(k)
    return B


def push_measure(K: KernelFamily, nu, s: int, t: int) -> ProbabilityVector:
    """Push the law ``nu`` at time ``s`` forward to time ``t``."""
    if t < s:
        raise TimeOrderError(f"cannot push from s={s} back to t={t}")
    v = as_probability(nu)
    if v.size != K.state_count:
        raise DimensionError(f"measure has {v.size} states, kernel has {K.state_count}")
    v = v.copy()
    for k in range(s, t):
        v = v @ K.matrix(k)
    return ProbabilityVector(v)


def pull_function(K: KernelFamily, phi, s: int, t: int) -> np.ndarray:
    """Return ``x -> E[phi(X_t) | X_s = x]``."""
    if t < s:
        raise TimeOrderError(f"cannot pull from t={t} back past s={s}")
    f = as_values(phi).astype(float, copy=True)
    if f.size != K.state_count:
        raise DimensionError(f"function has {f.size} states, kernel has {K.state_count}")
    for k in range(t - 1, s - 1, -1):
        f = K.matrix(k) @ f
    return f


@dataclass(frozen=True, eq=False)
class InvariantFamily:
    """Measures ``mu_n`` stored for ``n`` in ``range(start, start + len(weights))``.

    ``residual`` is the worst one-step defect ``tv(mu_n P_n, mu_{n+1})`` over the
    stored window, as computed by :func:`invariance_residual`.
    """

    start: int
    weights: np.ndarray
    method: str
    residual: float = float("nan")

    def __post_init__(self):
        w = np.array(self.weights, dtype=float, copy=True)
        if w.ndim != 2:
            raise DimensionError("family weights must be a (times, states) array")
        for row in w:
            ProbabilityVector(row)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def build(cls, K: KernelFamily, start: int, weights, method: str) -> "InvariantFamily":
        """Create a family and record its residual against ``K``."""
        fam = cls(start, weights, method)
        res = invariance_residual(K, fam) if len(fam) > 1 else 0.0
        object.__setattr__(fam, "residual", res)
        return fam

    @property
    def times(self) -> range:
        return range(self.start, self.start + self.weights.shape[0])

    @property
    def state_count(self) -> int:
        return self.weights.shape[1]

    def __len__(self):
        return self.weights.shape[0]

    def __contains__(self, n):
        return n in self.times

    def measure(self, n: int) -> ProbabilityVector:
        if n not in self.times:
            raise RangeError(f"time {n} outside stored window [{self.times.start}, {self.times.stop})")
        return ProbabilityVector(self.weights[n - self.start])

    def restrict(self, times: Iterable[int]) -> dict[int, np.ndarray]:
        return {n: self.weights[n - self.start] for n in times}


def invariance_residual(K: KernelFamily, F: InvariantFamily, window: Iterable[int] | None = None) -> float:
    """Worst ``tv(mu_n P_n, mu_{n+1})`` over ``n`` in ``window``.

    ``window`` defaults to every stored ``n`` whose successor is also stored.
    """
    if window is None:
        window = range(F.times.start, F.times.stop - 1)
    worst = 0.0
    for n in window:
        if n not in F.times or n + 1 not in F.times:
            raise RangeError(f"time {n} or {n + 1} not stored in the family")
        pushed = F.weights[n - F.start] @ K.matrix(n)
        worst = max(worst, float(np.abs(pushed - F.weights[n + 1 - F.start]).sum()))
    return worst
