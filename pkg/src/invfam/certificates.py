"""Checkable witnesses for drift, minorization and ellipticity hypotheses.

Every check works over an explicit window of times.  A result is marked
``exhaustive`` when the window already contains every distinct kernel the
schedule can produce (constant and periodic schedules over a full period,
window schedules over their whole support); otherwise it only holds on the
checked window and says so.

A kernel window ``n`` always refers to transitions that *end* at time ``n``:
the drift check at ``n`` uses ``P_{n-1}`` and the ``n0``-step minorization at
``n`` uses ``P_{n-n0} ... P_{n-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import EmptyDomainError, ParameterError
from .kernels import KernelFamily, backward_product
from .measures import WeightFunction, as_probability, as_weight

DELTA_CAP = 1.0 - 1e-12
DEFAULT_TARGET_DELTA = 0.05
DEFAULT_N0_MAX = 64


def _window_list(window) -> list[int]:
    times = list(window)
    if not times:
        raise ParameterError("window must contain at least one time")
    return times


def _float_list(a) -> list:
    return [float(v) if np.isfinite(v) else "inf" for v in np.asarray(a, dtype=float)]


@dataclass(frozen=True, eq=False)
class DriftCertificate:
    gamma: float
    C: float
    V: WeightFunction
    checked_window: tuple[int, ...]
    worst_slack: float
    witness: tuple[int, int]
    exhaustive: bool

    ok = True

    def to_dict(self) -> dict:
        return {
            "kind": "drift",
            "gamma": self.gamma,
            "C": self.C,
            "V": _float_list(self.V.values),
            "checked_window": list(self.checked_window),
            "worst_slack": self.worst_slack,
            "witness": {"n": self.witness[0], "x": self.witness[1]},
            "scope": "exhaustive" if self.exhaustive else "window-verified",
        }


@dataclass(frozen=True)
class DriftViolation:
    gamma: float
    C: float
    checked_window: tuple[int, ...]
    violations: tuple[tuple[int, int, float], ...]  # (n, x, excess)

    ok = False

    def to_dict(self) -> dict:
        return {
            "kind": "drift_violation",
            "gamma": self.gamma,
            "C": self.C,
            "checked_window": list(self.checked_window),
            "violations": [{"n": n, "x": x, "excess": e} for n, x, e in self.violations],
        }


def drift_values(K: KernelFamily, V: WeightFunction, n: int) -> np.ndarray:
    """``x -> sum_y V(y) P(n-1, x, n, y)`` on the finite-V states (``inf`` elsewhere)."""
    P = K.matrix(n - 1)
    v = V.values
    out = np.full(V.state_count, np.inf)
    fin = V.finite
    rows = P[fin]
    # A row charging an infinite-V state has infinite expected weight.
    charged_inf = (rows[:, ~fin] > 0).any(axis=1) if (~fin).any() else np.zeros(rows.shape[0], bool)
    vals = rows[:, fin] @ v[fin]
    vals[charged_inf] = np.inf
    out[fin] = vals
    return out


def verify_drift(K: KernelFamily, V, gamma: float, C: float, window: Iterable[int]):
    """Check ``sum_y V(y) P(n-1, x, n, y) <= gamma V(x) + C`` exactly on the window.

    States with ``V(x) = inf`` satisfy the bound vacuously.  Returns a
    :class:`DriftCertificate` or a :class:`DriftViolation` listing every
    failing ``(n, x)`` with its excess.
    """
    if not 0.0 < gamma < 1.0:
        raise ParameterError(f"gamma must lie in (0, 1), got {gamma}")
    if not C >= 0.0:
        raise ParameterError(f"C must be nonnegative, got {C}")
    V = as_weight(V)
    if not V.finite.any():
        raise EmptyDomainError("V is infinite on every state")
    times = _window_list(window)
    worst, witness = np.inf, (times[0], int(V.finite_set[0]))
    violations = []
    fin = V.finite_set
    for n in times:
        drift = drift_values(K, V, n)[fin]
        bound = gamma * V.values[fin] + C
        slack = bound - drift
        for i in np.flatnonzero(slack < 0):
            violations.append((n, int(fin[i]), float(-slack[i])))
        i = int(np.argmin(slack))
        if slack[i] < worst:
            worst, witness = float(slack[i]), (n, int(fin[i]))
    if violations:
        return DriftViolation(gamma, C, tuple(times), tuple(violations))
    return DriftCertificate(gamma, C, V, tuple(times), worst, witness, K.exhaustive(times, 1))


@dataclass(frozen=True, eq=False)
class MinorizationCertificate:
    n0: int
    delta: float
    R: float
    checked_window: tuple[int, ...]
    doeblin_delta: float
    worst_pair: tuple[int, int, int]  # (n, x, y)
    exhaustive: bool
    profile: tuple[tuple[int, float], ...] = ()

    ok = True

    def to_dict(self) -> dict:
        return {
            "kind": "minorization",
            "n0": self.n0,
            "delta": self.delta,
            "R": self.R,
            "doeblin_delta": self.doeblin_delta,
            "checked_window": list(self.checked_window),
            "worst_pair": {"n": self.worst_pair[0], "x": self.worst_pair[1], "y": self.worst_pair[2]},
            "profile": [{"n0": k, "delta": d} for k, d in self.profile],
            "scope": "exhaustive" if self.exhaustive else "window-verified",
        }


@dataclass(frozen=True)
class MinorizationFailure:
    R: float
    target_delta: float
    profile: tuple[tuple[int, float], ...]
    checked_window: tuple[int, ...]

    ok = False

    @property
    def best(self) -> tuple[int, float]:
        return max(self.profile, key=lambda item: (item[1], -item[0]))

    def to_dict(self) -> dict:
        return {
            "kind": "minorization_failure",
            "R": self.R,
            "target_delta": self.target_delta,
            "checked_window": list(self.checked_window),
            "profile": [{"n0": k, "delta": d} for k, d in self.profile],
        }


def level_pairs(V: WeightFunction, R: float) -> np.ndarray:
    """Boolean matrix of pairs ``(x, y)`` with ``V(x) + V(y) <= R`` (finite V only)."""
    v = V.values
    fin = V.finite
    mask = (v[:, None] + v[None, :] <= R) & fin[:, None] & fin[None, :]
    return mask


def pairwise_delta(B: np.ndarray, pairs: np.ndarray) -> tuple[float, tuple[int, int]]:
    """``1 - max tv(B[x], B[y]) / 2`` over the masked pairs, with the attaining pair."""
    xs, ys = np.nonzero(pairs)
    keep = xs < ys
    xs, ys = xs[keep], ys[keep]
    if xs.size == 0:
        i = int(np.flatnonzero(pairs.diagonal())[0])
        return 1.0, (i, i)
    worst, at = -1.0, (int(xs[0]), int(ys[0]))
    chunk = max(1, 4_000_000 // B.shape[1])
    for start in range(0, xs.size, chunk):
        a, b = xs[start:start + chunk], ys[start:start + chunk]
        tv = np.abs(B[a] - B[b]).sum(axis=1)
        j = int(np.argmax(tv))
        if tv[j] > worst:
            worst, at = float(tv[j]), (int(a[j]), int(b[j]))
    return 1.0 - worst / 2.0, at


def doeblin_overlap(B: np.ndarray, members: np.ndarray) -> float:
    """Mass of the componentwise minimum of the rows in ``members``."""
    return float(B[members].min(axis=0).sum())


def find_minorization(K: KernelFamily, V, R: float, target_delta: float = DEFAULT_TARGET_DELTA,
                      n0_max: int = DEFAULT_N0_MAX, window: Iterable[int] = range(1)):
    """Smallest ``n0`` whose ``n0``-step rows over ``C_R`` overlap by at least ``target_delta``.

    For each ``n0`` the achieved coupling is
    ``delta(n0) = 1 - max_{n, (x, y) in C_R} tv(P(n-n0, x, n), P(n-n0, y, n)) / 2``,
    capped at ``1 - 1e-12``.  The certificate also records the Doeblin overlap
    ``min_n sum_z min_{V(x) <= R} P(n-n0, x, n, z)``, which never exceeds ``delta``.
    """
    if not 0.0 < target_delta < 1.0:
        raise ParameterError(f"target_delta must lie in (0, 1), got {target_delta}")
    if R <= 0:
        raise ParameterError(f"R must be positive, got {R}")
    V = as_weight(V)
    times = _window_list(window)
    pairs = level_pairs(V, R)
    if not pairs.any():
        raise EmptyDomainError(f"no pair of states has V(x) + V(y) <= {R}")
    members = V.finite & (V.values <= R)
    profile = []
    for n0 in range(1, n0_max + 1):
        delta, doeblin, worst_pair = np.inf, np.inf, None
        for n in times:
            B = backward_product(K, n, n0)
            d, (x, y) = pairwise_delta(B, pairs)
            if d < delta:
                delta, worst_pair = d, (n, x, y)
            doeblin = min(doeblin, doeblin_overlap(B, members))
        delta = min(delta, DELTA_CAP)
        doeblin = min(doeblin, DELTA_CAP)
        profile.append((n0, float(delta)))
        if delta >= target_delta:
            return MinorizationCertificate(n0, float(delta), float(R), tuple(times), float(doeblin),
                                           worst_pair, K.exhaustive(times, n0), tuple(profile))
    return MinorizationFailure(float(R), target_delta, tuple(profile), tuple(times))


@dataclass(frozen=True, eq=False)
class EllipticityCertificate:
    epsilon0: float
    m: np.ndarray
    R: float
    checked_window: tuple[int, ...]
    densities: dict = field(repr=False)  # n -> p_n(z, y) = P(n, z, n+1, y) / m(y)
    witness: tuple[int, int, int]  # (n, x, z) attaining the infimum
    exhaustive: bool

    ok = True

    @property
    def covered_mass(self) -> float:
        return float(self.m.sum())

    def to_dict(self) -> dict:
        return {
            "kind": "ellipticity",
            "epsilon0": self.epsilon0,
            "m": _float_list(self.m),
            "R": self.R,
            "checked_window": list(self.checked_window),
            "witness": {"n": self.witness[0], "x": self.witness[1], "z": self.witness[2]},
            "scope": "exhaustive" if self.exhaustive else "window-verified",
        }


@dataclass(frozen=True)
class EllipticityViolation:
    reason: str
    epsilon0: float
    witness: tuple[int, int, int]
    checked_window: tuple[int, ...]

    ok = False

    def to_dict(self) -> dict:
        return {"kind": "ellipticity_violation", "reason": self.reason, "epsilon0": self.epsilon0,
                "witness": list(self.witness), "checked_window": list(self.checked_window)}


def verify_uniform_ellipticity(K: KernelFamily, m, V, R: float, window: Iterable[int]):
    """Check the two-step density lower bound on ``{V <= R}``.

    With densities ``p_n(z, y) = P(n, z, n+1, y) / m(y)`` the quantity checked is
    ``eps0 = min_{n, x, z} sum_y p_n(x, y) p_{n+1}(y, z) m(y)``, which equals
    ``(P_n P_{n+1})(x, z) / m(z)``.  Here ``n`` ranges over the window.
    """
    m = as_probability(m)
    V = as_weight(V)
    times = _window_list(window)
    if m.size != K.state_count:
        raise ParameterError("reference measure has the wrong number of states")
    members = np.flatnonzero(V.finite & (V.values <= R))
    if members.size == 0:
        raise EmptyDomainError(f"no state has V(x) <= {R}")
    null = m <= 0
    densities = {}
    for n in sorted(set(times) | {t + 1 for t in times}):
        P = K.matrix(n)
        if null.any():
            bad = np.argwhere(P[:, null] > 0)
            if bad.size:
                z, j = bad[0]
                y = int(np.flatnonzero(null)[j])
                return EllipticityViolation("absolute continuity: kernel charges a state with m(y) = 0",
                                            0.0, (n, int(z), y), tuple(times))
        with np.errstate(divide="ignore", invalid="ignore"):
            densities[n] = np.where(null[None, :], 0.0, P / np.where(null, 1.0, m)[None, :])
    eps, witness = np.inf, None
    for n in times:
        p1, p2 = densities[n], densities[n + 1]
        two_step = (p1[members] * m[None, :]) @ p2
        i, z = np.unravel_index(int(np.argmin(two_step)), two_step.shape)
        if two_step[i, z] < eps:
            eps, witness = float(two_step[i, z]), (n, int(members[i]), int(z))
    if eps <= 0.0:
        return EllipticityViolation("two-step density vanishes", eps, witness, tuple(times))
    return EllipticityCertificate(eps, m.copy(), float(R), tuple(times), densities, witness,
                                  K.exhaustive(times, 2))


@dataclass
class LyapunovSpec:
    """A time-dependent weight ``V(n, x)`` with lower envelope ``f``.

    ``table(n)`` returns the weight vector at time ``n``.  ``sup`` optionally
    declares ``sup_n V(n, x)`` per state; without it the supremum is probed
    numerically (see :func:`verify_lyapunov_definition`).
    """

    table: Callable[[int], np.ndarray]
    f: WeightFunction
    sup: WeightFunction | None = None

    @classmethod
    def time_constant(cls, V) -> "LyapunovSpec":
        V = as_weight(V)
        return cls(lambda n: V.values, V, sup=V)


@dataclass(frozen=True)
class LyapunovReport:
    passed: bool
    failed_item: str | None
    B: tuple[int, ...]
    witness: dict
    notes: tuple[str, ...]

    @property
    def ok(self):
        return self.passed


PROBE_TIMES = tuple(s * 10 ** k for k in range(1, 13) for s in (1, -1))
DIVERGENCE_RATIO = 1e8


def _probe_sup(L: LyapunovSpec, times: list[int]) -> tuple[np.ndarray, str]:
    if L.sup is not None:
        return np.asarray(L.sup.values, dtype=float), "declared"
    local = np.max([np.asarray(L.table(n), dtype=float) for n in times], axis=0)
    far = np.max([np.asarray(L.table(n), dtype=float) for n in PROBE_TIMES], axis=0)
    sup = np.maximum(local, far)
    # Growth by many orders of magnitude between the window and |n| = 1e12 is read as divergence.
    diverging = far > DIVERGENCE_RATIO * (1.0 + local)
    sup[diverging] = np.inf
    return sup, "probed"


def verify_lyapunov_definition(K: KernelFamily, L: LyapunovSpec, gamma: float, C: float,
                               window: Iterable[int]) -> LyapunovReport:
    """Check the time-dependent Lyapunov conditions on ``window``.

    (i) ``B = {x : sup_n V(n, x) < inf}`` is nonempty; (ii) ``V(n, x) >= f(x)``
    on the window; (iii) ``sum_y V(n, y) P(n-1, x, n, y) <= gamma V(n-1, x) + C``
    for ``x`` in ``B``.  Compactness of the level sets of ``f`` is automatic on a
    finite space and is reported as such.
    """
    if not 0.0 < gamma < 1.0:
        raise ParameterError(f"gamma must lie in (0, 1), got {gamma}")
    if not C > 0.0:
        raise ParameterError(f"C must be positive, got {C}")
    times = _window_list(window)
    notes = ["level sets of f are finite, hence compact: item (ii) compactness is vacuous"]
    sup, how = _probe_sup(L, times)
    notes.append(f"sup over n of V(n, x) was {how}")
    B = np.flatnonzero(np.isfinite(sup))
    if B.size == 0:
        return LyapunovReport(False, "i", (), {"sup": _float_list(sup)}, tuple(notes))
    f = L.f.values
    for n in times:
        Vn = np.asarray(L.table(n), dtype=float)
        below = np.flatnonzero(Vn < f - 1e-12)
        if below.size:
            x = int(below[0])
            return LyapunovReport(False, "ii", tuple(B.tolist()),
                                  {"n": n, "x": x, "V": float(Vn[x]), "f": float(f[x])}, tuple(notes))
    worst = np.inf
    for n in times:
        Vn = np.asarray(L.table(n), dtype=float)
        Vprev = np.asarray(L.table(n - 1), dtype=float)
        drift = drift_values(K, WeightFunction(Vn), n)[B]
        slack = gamma * Vprev[B] + C - drift
        i = int(np.argmin(slack))
        worst = min(worst, float(slack[i]))
        if slack[i] < 0:
            return LyapunovReport(False, "iii", tuple(B.tolist()),
                                  {"n": n, "x": int(B[i]), "excess": float(-slack[i])}, tuple(notes))
    return LyapunovReport(True, None, tuple(B.tolist()), {"worst_slack": worst}, tuple(notes))
