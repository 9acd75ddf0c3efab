"""Constructing invariant measure families and scanning them for periodicity.

Two routes build a family ``{mu_n}``:

* :func:`krylov_bogolyubov_family` averages the push-forwards of a fixed
  initial law launched at times ``n, n-1, ..., n-s+1``.
* :func:`backward_limit_family` follows ``P(n-m, x, n, .)`` as ``m`` doubles.

On a finite space weak and total-variation convergence coincide, so no
subsequence extraction is needed; non-convergence is reported through
:class:`ConvergenceDiagnostics` instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import InconsistentFamilyError, NonUniqueFamilyError, ParameterError, RangeError
from .kernels import InvariantFamily, KernelFamily, backward_product, invariance_residual
from .measures import as_probability, as_weight

log = logging.getLogger(__name__)


@dataclass
class ConvergenceDiagnostics:
    method: str
    status: str  # "converged" | "budget_exhausted"
    iterations: int
    final_gap: float
    residuals: dict = field(default_factory=dict)  # n -> tv(mu_n P_n, mu_{n+1})
    gap_history: list = field(default_factory=list)  # (iterations, gap)
    notes: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "status": self.status,
            "iterations": self.iterations,
            "final_gap": self.final_gap,
            "residuals": {str(k): v for k, v in sorted(self.residuals.items())},
            "gap_history": [[int(s), float(g)] for s, g in self.gap_history],
            "notes": list(self.notes),
        }


def _times(times: Iterable[int]) -> range:
    ts = sorted(set(int(t) for t in times))
    if not ts:
        raise ParameterError("need at least one time")
    if ts != list(range(ts[0], ts[-1] + 1)):
        raise ParameterError("times must form a contiguous integer interval")
    return range(ts[0], ts[-1] + 1)


def _per_time_residuals(K: KernelFamily, fam: InvariantFamily) -> dict:
    out = {}
    for n in range(fam.start, fam.start + len(fam) - 1):
        out[n] = invariance_residual(K, fam, [n])
    return out


def _to_probability(v: np.ndarray) -> np.ndarray:
    v = np.clip(v, 0.0, None)
    return v / v.sum()


def krylov_bogolyubov_family(K: KernelFamily, mu, times: Iterable[int], s_max: int = 2 ** 16,
                             tol: float = 1e-9, accelerate: bool = True,
                             tail_mass: float | None = None):
    """Cesaro averages ``mu_{n,s} = (1/s) sum_{i<s} mu P(n-i, n)`` over doubling ``s``.

    The average is accumulated in a streaming fashion with
    ``B_i = P_{n-i} B_{i-1}``.  Convergence compares ``s`` with ``2s``.  Cesaro
    averages approach their limit like ``A / s``; with ``accelerate`` the
    returned measure is the extrapolant ``2 mu_{n,2s} - mu_{n,s}``, which removes
    that term and leaves a geometrically small remainder when the chain mixes.

    ``tail_mass`` is the caller's bound on mass lost by truncating a countable
    space; it must not exceed ``tol``.

    Returns ``(family, diagnostics)``.
    """
    times = _times(times)
    mu = as_probability(mu)
    if mu.size != K.state_count:
        raise ParameterError("initial law has the wrong number of states")
    if s_max < 4:
        raise ParameterError("s_max must be at least 4")
    notes = []
    if tail_mass is not None:
        if tail_mass > tol:
            raise ParameterError(f"truncation tail mass {tail_mass} exceeds tol {tol}")
        notes.append(f"tightness: truncation tail mass {tail_mass} <= tol")
    d = K.state_count
    W = len(times)
    B = np.broadcast_to(np.eye(d), (W, d, d)).copy()
    running = np.zeros((W, d))
    cesaro = {}  # s -> (W, d)
    history = []
    best = None
    s = 0
    next_check = 1
    status = "budget_exhausted"
    gap = np.inf
    while s < s_max:
        # term i = s uses B_s = P(n - s, n)
        if s > 0:
            for j, n in enumerate(times):
                B[j] = K.matrix(n - s) @ B[j]
        running += mu @ B
        s += 1
        if s != next_check:
            continue
        next_check *= 2
        cesaro[s] = running / s
        if accelerate:
            if s // 2 not in cesaro:
                continue
            est = 2.0 * cesaro[s] - cesaro[s // 2]
            prev = None
            if s // 4 in cesaro:
                prev = 2.0 * cesaro[s // 2] - cesaro[s // 4]
        else:
            est = cesaro[s]
            prev = cesaro.get(s // 2)
        best = (s, est)
        if prev is None:
            continue
        gap = float(np.abs(est - prev).sum(axis=1).max())
        history.append((s, gap))
        if gap <= tol:
            status = "converged"
            break
    if best is None:
        best = (s, running / s)
    weights = np.array([_to_probability(v) for v in best[1]])
    method = "cesaro"
    fam = InvariantFamily.build(K, times.start, weights, method)
    diag = ConvergenceDiagnostics(method, status, best[0], gap, _per_time_residuals(K, fam), history, notes)
    if accelerate:
        diag.notes.append("extrapolated 2*mu_{n,2s} - mu_{n,s}")
    if status != "converged":
        log.warning("Cesaro averages did not settle within s_max=%d (gap %.3e)", s_max, gap)
    return fam, diag


def backward_limit_family(K: KernelFamily, x: int, times: Iterable[int], m_max: int = 2 ** 20,
                          tol: float = 1e-9, V=None, check_uniqueness: bool = True):
    """Limits of ``P(n-m, x, n, .)`` as ``m`` runs through ``1, 2, 4, ...``.

    All start states are propagated together, so the same pass measures the
    spread between the row of ``x`` and every other finite-``V`` row.  If
    every row has stopped moving but rows still disagree, the kernel admits
    several invariant families and :class:`NonUniqueFamilyError` is raised
    instead of returning one of them.

    ``V`` (if given) restricts the comparison to states with ``V < inf`` and
    marks the run as certified; without it the result is a heuristic.

    Returns ``(family, diagnostics)``.
    """
    times = _times(times)
    notes = []
    if V is None:
        rows = np.arange(K.state_count)
        notes.append("no drift weight supplied: backward limit used heuristically")
    else:
        V = as_weight(V)
        if not np.isfinite(V.values[x]):
            raise ParameterError(f"start state {x} has V = inf")
        rows = V.finite_set
    weights = []
    history = []
    worst_gap, worst_iter, status = 0.0, 0, "converged"
    for n in times:
        m = 1
        B = backward_product(K, n, 1)
        gap = np.inf
        while True:
            if 2 * m > m_max:
                status = "budget_exhausted"
                break
            B2 = backward_product(K, n - m, m) @ B
            gap = float(np.abs(B2[x] - B[x]).sum())
            moved = float(np.abs(B2[rows] - B[rows]).sum(axis=1).max())
            spread = float(np.abs(B2[rows] - B2[x]).sum(axis=1).max()) if check_uniqueness else 0.0
            B, m = B2, 2 * m
            history.append((m, gap))
            if gap <= tol and spread <= tol:
                break
            if check_uniqueness and moved <= tol and spread > 10 * tol:
                raise NonUniqueFamilyError(
                    f"backward limits from different start states disagree at n={n} "
                    f"(spread {spread:.3g} after m={m})", spread=spread, time=n)
        weights.append(_to_probability(B[x]))
        if gap >= worst_gap:
            worst_gap, worst_iter = gap, m
    fam = InvariantFamily.build(K, times.start, np.array(weights), "backward_limit")
    diag = ConvergenceDiagnostics("backward_limit", status, worst_iter, worst_gap,
                                  _per_time_residuals(K, fam), history, notes)
    return fam, diag


def extend_family(K: KernelFamily, sub: Mapping[int, object], n0: int, times: Iterable[int],
                  tol: float = 1e-9) -> InvariantFamily:
    """Fill in every time of ``times`` from measures given on multiples of ``n0``.

    ``mu_t`` is pushed from the nearest stored multiple at or below ``t``.  When
    the next lower multiple is also stored, pushing from it must agree within
    ``tol``; otherwise the sub-grid family was not invariant.
    """
    if n0 < 1:
        raise ParameterError("n0 must be positive")
    if isinstance(sub, InvariantFamily):
        sub = {n: sub.weights[n - sub.start] for n in sub.times if n % n0 == 0}
    grid = {int(k): as_probability(v) for k, v in sub.items()}
    for k in grid:
        if k % n0:
            raise ParameterError(f"time {k} is not a multiple of n0={n0}")
    times = _times(times)
    out = []
    cache = {}

    def pushed(base, t):
        key = (base, t)
        if key not in cache:
            v = grid[base]
            for k in range(base, t):
                v = v @ K.matrix(k)
            cache[key] = v
        return cache[key]

    for t in times:
        base = (t // n0) * n0
        if base not in grid:
            raise RangeError(f"no sub-grid measure at time {base} for t={t}")
        v = pushed(base, t)
        lower = base - n0
        if lower in grid:
            disagreement = float(np.abs(pushed(lower, t) - v).sum())
            if disagreement > tol:
                raise InconsistentFamilyError(
                    f"pushing from {lower} and from {base} to {t} differs by {disagreement:.3e} in TV")
        out.append(_to_probability(v))
    return InvariantFamily.build(K, times.start, np.array(out), "extension")


@dataclass
class PeriodicityScan:
    period: int | None
    defects: dict  # shift p -> sup_n tv(mu_{n+p}, mu_n)

    @property
    def best_shift(self) -> int:
        return min(self.defects, key=lambda p: (self.defects[p], p))


def periodicity_scan(F: InvariantFamily, p_max: int, tol: float = 1e-10) -> PeriodicityScan:
    """Defect ``sup_n tv(mu_{n+p}, mu_n)`` for every shift ``p <= p_max``.

    The smallest shift with defect at most ``tol`` is reported as the period.
    The full table is the profile of approximate periods.
    """
    if p_max < 1:
        raise ParameterError("p_max must be at least 1")
    if len(F) < 2 * p_max:
        raise ParameterError(f"family stores {len(F)} times; need at least {2 * p_max}")
    W = F.weights
    defects = {}
    for p in range(1, p_max + 1):
        defects[p] = float(np.abs(W[p:] - W[:-p]).sum(axis=1).max())
    period = next((p for p in range(1, p_max + 1) if defects[p] <= tol), None)
    return PeriodicityScan(period, defects)
