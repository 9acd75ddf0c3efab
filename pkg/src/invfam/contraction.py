"""Explicit contraction constants and the checks that exercise them.

From a drift certificate ``(gamma, C)`` and a coupling ``(n0, delta)`` on the
level set ``C_R`` the rate pipeline is::

    gamma_star = (1 + gamma) / 2
    R          = 2 C / ((1 - gamma) (gamma_star - gamma))
    beta       = delta / (gamma R + 2 C / (1 - gamma))
    alpha1     = (2 + beta gamma_star R) / (2 + beta R)
    eta        = max(alpha1, 1 - delta / 2)
    alpha      = eta ** (1 / n0)

``alpha1`` is the supremum over ``S >= R`` of ``(2 + beta gamma_star S) / (2 + beta S)``,
which decreases in ``S``.  The prefactor chain is

    M1 = max(3 + beta C / (1 - gamma), beta)
    M2 = M1 * max(1, 1 / beta)          # ||.|| <= max(1, 1/beta) ||.||_beta
    M3 = 1 + C / (1 - gamma)
    M4 = M2 * M3 / eta
    M_tilde = 2 * M4                    # ||phi - mu(phi)|| <= 2 when |phi| <= 1

so that ``tv(P(n-m, x, n), mu_n) <= M_tilde * alpha**m * (1 + V(x))``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .certificates import (
    DEFAULT_N0_MAX,
    DEFAULT_TARGET_DELTA,
    DriftCertificate,
    MinorizationCertificate,
    find_minorization,
)
from .errors import ConstantsError, ParameterError
from .kernels import InvariantFamily, KernelFamily, backward_product
from .measures import as_weight, beta_oscillation

DECAY_HEADER = ("m", "observed_tv", "theoretical_bound", "V_x")


@dataclass(frozen=True)
class ContractionConstants:
    gamma: float
    C: float
    gamma_star: float
    R: float
    n0: int
    delta: float
    beta: float
    alpha1: float
    eta: float
    alpha: float
    M1: float
    M2: float
    M3: float
    M4: float
    M_tilde: float

    def as_dict(self) -> dict:
        return asdict(self)

    def check(self) -> list[str]:
        """Return the names of stored invariants that fail (empty when consistent)."""
        bad = []
        g, C, gs, R = self.gamma, self.C, self.gamma_star, self.R
        if not (1 - g) * (gs - g) * R >= 2 * C * (1 - 1e-12):
            bad.append("R selection")
        if self.beta != self.delta / (g * R + 2 * C / (1 - g)):
            bad.append("beta formula")
        if self.eta != max(self.alpha1, 1 - self.delta / 2):
            bad.append("eta formula")
        if self.alpha != self.eta ** (1.0 / self.n0):
            bad.append("alpha formula")
        for name in ("alpha1", "eta", "alpha", "delta"):
            if not 0.0 < getattr(self, name) < 1.0:
                bad.append(f"{name} range")
        return bad


def level_for(gamma: float, C: float, gamma_star: float) -> float:
    """Smallest ``R`` with ``(1 - gamma)(gamma_star - gamma) R >= 2 C``."""
    if not 0.0 < gamma < 1.0:
        raise ParameterError(f"gamma must lie in (0, 1), got {gamma}")
    if not gamma < gamma_star < 1.0:
        raise ParameterError(f"gamma_star must lie in ({gamma}, 1), got {gamma_star}")
    if not C > 0:
        raise ParameterError(f"C must be positive, got {C}")
    return 2.0 * C / ((1.0 - gamma) * (gamma_star - gamma))


def constants_from(gamma: float, C: float, delta: float, n0: int,
                   gamma_star: float | None = None, R: float | None = None) -> ContractionConstants:
    """Compose the rate constants from drift ``(gamma, C)`` and coupling ``(n0, delta)``."""
    if gamma_star is None:
        gamma_star = (1.0 + gamma) / 2.0
    R_min = level_for(gamma, C, gamma_star)
    if R is None:
        R = R_min
    elif (1 - gamma) * (gamma_star - gamma) * R < 2 * C:
        raise ParameterError(f"R={R} violates (1 - gamma)(gamma_star - gamma) R >= 2C")
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if n0 < 1:
        raise ParameterError(f"n0 must be a positive integer, got {n0}")
    beta = delta / (gamma * R + 2.0 * C / (1.0 - gamma))
    alpha1 = (2.0 + beta * gamma_star * R) / (2.0 + beta * R)
    eta = max(alpha1, 1.0 - delta / 2.0)
    alpha = eta ** (1.0 / n0)
    M1 = max(3.0 + beta * C / (1.0 - gamma), beta)
    M2 = M1 * max(1.0, 1.0 / beta)
    M3 = 1.0 + C / (1.0 - gamma)
    M4 = M2 * M3 / eta
    return ContractionConstants(gamma, C, gamma_star, R, int(n0), delta, beta, alpha1, eta, alpha,
                                M1, M2, M3, M4, 2.0 * M4)


def derive_constants(drift: DriftCertificate, K: KernelFamily, V=None,
                     target_delta: float = DEFAULT_TARGET_DELTA, n0_max: int = DEFAULT_N0_MAX,
                     gamma_star: float | None = None, window=None):
    """Run the minorization search at the level dictated by the drift and compose the constants.

    Returns ``(constants, minorization_certificate)``.  Raises
    :class:`ConstantsError` carrying the ``(n0, delta)`` profile when no
    ``n0 <= n0_max`` reaches ``target_delta``; a larger ``gamma_star`` shrinks
    ``R`` and may help.
    """
    if not drift.ok:
        raise ParameterError("derive_constants needs a passing drift certificate")
    V = drift.V if V is None else as_weight(V)
    if gamma_star is None:
        gamma_star = (1.0 + drift.gamma) / 2.0
    R = level_for(drift.gamma, drift.C, gamma_star)
    if window is None:
        window = drift.checked_window
    mino = find_minorization(K, V, R, target_delta, n0_max, window)
    if not isinstance(mino, MinorizationCertificate):
        raise ConstantsError(f"no n0 <= {n0_max} reaches delta >= {target_delta} at R = {R:.6g}",
                             profile=list(mino.profile), R=R)
    cc = constants_from(drift.gamma, drift.C, mino.delta, mino.n0, gamma_star, R)
    return cc, mino


def sweep_gamma_star(drift: DriftCertificate, K: KernelFamily, grid, V=None,
                     target_delta: float = DEFAULT_TARGET_DELTA, n0_max: int = DEFAULT_N0_MAX):
    """Final ``alpha`` for each ``gamma_star`` in ``grid`` (``None`` where the search fails).

    ``alpha`` is not monotone in ``gamma_star`` because both ``R`` and ``delta(R)`` move.
    """
    out = []
    for gs in grid:
        try:
            cc, _ = derive_constants(drift, K, V, target_delta, n0_max, gamma_star=gs)
        except ConstantsError:
            out.append((float(gs), None))
        else:
            out.append((float(gs), cc.alpha))
    return out


@dataclass(frozen=True)
class ContractionReport:
    max_ratio: float
    eta: float
    trials: int
    skipped: int
    worst_time: int | None

    @property
    def ok(self) -> bool:
        return self.max_ratio <= self.eta + 1e-9


def _test_functions(rng, V, beta, trials):
    d = V.state_count
    w = np.where(V.finite, 1.0 + beta * np.where(V.finite, V.values, 0.0), 0.0)
    for k in range(trials):
        if k % 2 == 0:
            phi = rng.standard_normal(d)
        else:
            # Extreme points of the unit ball of ||.||_beta.
            phi = rng.choice([-1.0, 1.0], size=d) * w
        yield np.where(V.finite, phi, 0.0)


def verify_oscillation_contraction(K: KernelFamily, cc: ContractionConstants, V, trials: int = 100,
                                   window=range(1), seed: int = 0) -> ContractionReport:
    """Worst ``|||P^(n0) phi|||_beta / |||phi|||_beta`` over random ``phi`` and ``n`` in ``window``.

    ``P^(n0)`` is the ``n0``-step kernel ending at ``n``.  Constant test vectors
    have zero seminorm and are skipped.
    """
    V = as_weight(V)
    rng = np.random.default_rng(seed)
    blocks = {n: backward_product(K, n, cc.n0) for n in window}
    worst, at, skipped = 0.0, None, 0
    for phi in _test_functions(rng, V, cc.beta, trials):
        base = beta_oscillation(phi, V, cc.beta)
        if base <= 1e-300:
            skipped += 1
            continue
        for n, B in blocks.items():
            ratio = beta_oscillation(B @ phi, V, cc.beta) / base
            if ratio > worst:
                worst, at = ratio, n
    return ContractionReport(worst, cc.eta, trials, skipped, at)


@dataclass
class DecayReport:
    x: int
    n: int
    V_x: float
    rows: list = field(default_factory=list)  # (m, observed, bound, V_x)
    slope: float | None = None
    log_alpha: float = float("nan")

    @property
    def bound_ok(self) -> bool:
        return all(obs <= bound for _, obs, bound, _ in self.rows)

    @property
    def rate_ok(self) -> bool:
        return self.slope is None or self.slope <= self.log_alpha + 0.01

    @property
    def ok(self) -> bool:
        return self.bound_ok and self.rate_ok

    @property
    def fitted_rate(self) -> float | None:
        return None if self.slope is None else math.exp(self.slope)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(DECAY_HEADER)
        for m, obs, bound, vx in self.rows:
            w.writerow([m, repr(float(obs)), repr(float(bound)), repr(float(vx))])
        return buf.getvalue()


def fit_log_slope(ms, tvs, floor: float = 1e-12) -> float | None:
    """Least-squares slope of ``log tv`` against ``m`` over the geometric tail.

    Leading points with ``tv >= 0.5 * tv[0]`` and points at or below ``floor``
    are discarded.  Returns ``None`` when fewer than two points remain.
    """
    ms = np.asarray(ms, dtype=float)
    tvs = np.asarray(tvs, dtype=float)
    if tvs.size == 0:
        return None
    start = 0
    while start < tvs.size and tvs[start] >= 0.5 * tvs[0]:
        start += 1
    keep = np.zeros(tvs.size, bool)
    keep[start:] = tvs[start:] > floor
    if keep.sum() < 2:
        return None
    slope, _ = np.polyfit(ms[keep], np.log(tvs[keep]), 1)
    return float(slope)


def tv_rate_check(K: KernelFamily, F: InvariantFamily, cc: ContractionConstants, V, x: int, n: int,
                  m_max: int = 200) -> DecayReport:
    """Tabulate ``tv(P(n-m, x, n, .), mu_n)`` against ``M_tilde alpha**m (1 + V(x))``."""
    V = as_weight(V)
    vx = float(V.values[x])
    if not math.isfinite(vx):
        raise ParameterError(f"V({x}) is infinite; the bound is vacuous there")
    mu = F.weights[n - F.start] if n in F.times else F.measure(n).weights
    report = DecayReport(x=x, n=n, V_x=vx, log_alpha=math.log(cc.alpha))
    B = np.eye(K.state_count)
    for m in range(m_max + 1):
        if m > 0:
            B = K.matrix(n - m) @ B
        observed = float(np.abs(B[x] - mu).sum())
        bound = cc.M_tilde * cc.alpha ** m * (1.0 + vx)
        report.rows.append((m, observed, bound, vx))
    report.slope = fit_log_slope([r[0] for r in report.rows], [r[1] for r in report.rows])
    return report


def empirical_prefactor(K: KernelFamily, F: InvariantFamily, cc: ContractionConstants, V, n: int,
                        m_max: int = 50, trials: int = 20, seed: int = 0) -> float:
    """Best observed ``M`` in ``||P^(m) phi - mu_n(phi)|| <= M alpha**m ||phi - mu_n(phi)||``.

    Reported for comparison with the composed constants; never used as a bound.
    """
    V = as_weight(V)
    fin = V.finite
    scale = 1.0 + V.values[fin]
    mu = F.measure(n).weights
    rng = np.random.default_rng(seed)
    best = 0.0
    phis = [np.where(fin, rng.uniform(-1, 1, V.state_count), 0.0) for _ in range(trials)]
    B = np.eye(K.state_count)
    for m in range(m_max + 1):
        if m > 0:
            B = K.matrix(n - m) @ B
        for phi in phis:
            mean = float(mu @ phi)
            den = np.max(np.abs(phi[fin] - mean) / scale)
            if den <= 0:
                continue
            num = np.max(np.abs((B @ phi)[fin] - mean) / scale)
            best = max(best, num / (den * cc.alpha ** m))
    return best
