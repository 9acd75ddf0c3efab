"""Monte Carlo tools for diffusions ``dX = f(t, X) dt + g(t, X) dB``.

Coefficients are vectorized callbacks: ``drift(t, X)`` maps a ``(batch, n)``
array to ``(batch, n)`` and ``diffusion(t, X)`` returns something broadcastable
to ``(batch, n, n)``.  Both are evaluated at the left end of each step (Ito).

Random numbers come from Philox streams keyed by ``(seed, block)`` where a
block is a fixed run of :data:`BLOCK` consecutive path indices, so the noise
driving path ``i`` does not depend on the batch size or on how the work is
split.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BlowUpError, GridTooSmallError, ModelDefinitionError, ParameterError
from .kernels import KernelFamily

BLOCK = 1024
WILSON_Z = 1.959963984540054


@dataclass(frozen=True)
class SDEModel:
    """A diffusion with optional Lyapunov data.

    ``reflect_at_zero`` keeps every coordinate in ``[0, inf)`` by reflection.
    ``V``, ``dV`` and ``d2V`` (value, gradient, Hessian of a time-independent
    Lyapunov function) act on a single point of shape ``(n,)``.
    """

    dimension: int
    drift: Callable
    diffusion: Callable
    name: str = "custom"
    reflect_at_zero: bool = False
    ellipticity_floor: float = 0.0
    V: Callable | None = None
    dV: Callable | None = None
    d2V: Callable | None = None
    period_hints: tuple = ()
    notes: tuple = ()

    def drift_at(self, t: float, X: np.ndarray) -> np.ndarray:
        out = np.asarray(self.drift(t, X), dtype=float)
        return np.broadcast_to(out, X.shape)

    def diffusion_at(self, t: float, X: np.ndarray) -> np.ndarray:
        n = self.dimension
        out = np.asarray(self.diffusion(t, X), dtype=float)
        if out.ndim <= 1 and out.size == 1:
            return np.broadcast_to(out.reshape(1, 1, 1) * np.eye(n), (X.shape[0], n, n))
        return np.broadcast_to(out, (X.shape[0], n, n))


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    paths: np.ndarray  # (batch, records, dimension)
    times: np.ndarray  # (records,)
    seed: int
    s: float
    dt: float

    @property
    def final(self) -> np.ndarray:
        return self.paths[:, -1, :]

    @property
    def batch(self) -> int:
        return self.paths.shape[0]


def _time_grid(s: float, t: float, dt: float) -> np.ndarray:
    if not t > s:
        raise ParameterError(f"need t > s, got s={s}, t={t}")
    if not dt > 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    span = t - s
    k = round(span / dt)
    if k >= 1 and abs(k * dt - span) <= 1e-12 * max(1.0, span):
        steps = np.full(k, dt)
    else:
        k = int(math.floor(span / dt))
        steps = np.full(k, dt)
        rest = span - k * dt
        if rest > 1e-12 * max(1.0, span):
            steps = np.append(steps, rest)
    return np.concatenate([[s], s + np.cumsum(steps)])


def _block_generators(seed: int, batch: int):
    gens = []
    for b in range((batch + BLOCK - 1) // BLOCK):
        ss = np.random.SeedSequence([int(seed), b])
        gens.append(np.random.Generator(np.random.Philox(ss)))
    return gens


def _normals(gens, batch: int, dim: int) -> np.ndarray:
    # Each block always draws a full BLOCK of paths so path i sees the same noise for any batch size.
    return np.concatenate([g.standard_normal((BLOCK, dim)) for g in gens])[:batch]


def euler_maruyama(model: SDEModel, x0, s: float, t: float, dt: float, batch: int = 1, seed: int = 0,
                   record: str = "path") -> TrajectoryBatch:
    """Simulate ``X_{k+1} = X_k + f(t_k, X_k) dt + g(t_k, X_k) sqrt(dt) Z_k``.

    ``x0`` is a point of shape ``(n,)`` or one start per path ``(batch, n)``.
    If ``dt`` does not divide ``t - s`` the last step is shortened.
    ``record="final"`` stores only the terminal state.
    """
    if batch < 1:
        raise ParameterError("batch must be at least 1")
    if record not in ("path", "final"):
        raise ParameterError("record must be 'path' or 'final'")
    n = model.dimension
    grid = _time_grid(s, t, dt)
    X = np.array(np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1, n), (batch, n)))
    if model.reflect_at_zero:
        X = np.abs(X)
    gens = _block_generators(seed, batch)
    kept = [X.copy()] if record == "path" else None
    for k in range(grid.size - 1):
        tk, h = grid[k], grid[k + 1] - grid[k]
        try:
            f = model.drift_at(tk, X)
            G = model.diffusion_at(tk, X)
        except Exception as exc:
            raise ModelDefinitionError(f"coefficient callback failed at t={tk}: {exc}") from exc
        Z = _normals(gens, batch, n)
        X = X + f * h + math.sqrt(h) * np.einsum("bij,bj->bi", G, Z)
        if model.reflect_at_zero:
            X = np.abs(X)
        if not np.all(np.isfinite(X)):
            bad = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
            raise BlowUpError(f"non-finite state at step {k + 1} on path {bad}", step=k + 1, path=bad)
        if kept is not None:
            kept.append(X.copy())
    if kept is None:
        paths, times = X[:, None, :], grid[-1:]
    else:
        paths, times = np.stack(kept, axis=1), grid
    paths.setflags(write=False)
    return TrajectoryBatch(paths, times, int(seed), float(s), float(dt))


@dataclass(frozen=True)
class Grid:
    """A box ``[lower, upper]`` cut into ``bins`` equal cells per coordinate."""

    lower: tuple
    upper: tuple
    bins: tuple

    def __post_init__(self):
        lo, hi, nb = (tuple(np.atleast_1d(np.asarray(a, dtype=float))) for a in (self.lower, self.upper, self.bins))
        if not (len(lo) == len(hi) == len(nb)):
            raise ParameterError("grid bounds and bins must have the same length")
        if any(h <= l for l, h in zip(lo, hi)) or any(b < 1 for b in nb):
            raise ParameterError("grid needs upper > lower and at least one bin per axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "bins", tuple(int(b) for b in nb))

    @property
    def dimension(self) -> int:
        return len(self.bins)

    @property
    def cell_count(self) -> int:
        return int(np.prod(self.bins))

    @property
    def widths(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / np.array(self.bins)

    def centers(self) -> np.ndarray:
        axes = [np.array(self.lower[i]) + (np.arange(self.bins[i]) + 0.5) * self.widths[i]
                for i in range(self.dimension)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def locate(self, X: np.ndarray) -> np.ndarray:
        """Flat cell index of each row of ``X``; ``-1`` outside the box."""
        X = np.asarray(X, dtype=float).reshape(-1, self.dimension)
        lo = np.array(self.lower)
        idx = np.floor((X - lo) / self.widths).astype(np.int64)
        nb = np.array(self.bins)
        # The upper face belongs to the last cell.
        on_top = X == np.array(self.upper)
        idx[on_top] = (nb[None, :] - 1).repeat(X.shape[0], 0)[on_top]
        inside = np.all((idx >= 0) & (idx < nb), axis=1)
        flat = np.ravel_multi_index(tuple(np.clip(idx, 0, nb - 1).T), self.bins)
        return np.where(inside, flat, -1)


@dataclass(frozen=True, eq=False)
class EmpiricalKernel:
    grid: Grid
    s: float
    t: float
    counts: np.ndarray  # (cells, cells) in-grid terminal counts
    overflow: np.ndarray  # (cells,) counts that left the grid
    samples_per_cell: int

    @property
    def matrix(self) -> np.ndarray:
        totals = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, totals, out=np.zeros_like(self.counts, dtype=float), where=totals > 0)

    @property
    def overflow_fraction(self) -> np.ndarray:
        return self.overflow / self.samples_per_cell

    @property
    def halfwidths(self) -> np.ndarray:
        """95% Wilson half-widths of each transition probability."""
        n = self.counts.sum(axis=1, keepdims=True).astype(float)
        n = np.where(n > 0, n, 1.0)
        p = self.counts / n
        z2 = WILSON_Z ** 2
        return WILSON_Z / (1 + z2 / n) * np.sqrt(p * (1 - p) / n + z2 / (4 * n * n))


def estimate_kernel(model: SDEModel, grid: Grid, s: float, t: float, dt: float,
                    samples_per_cell: int = 1000, seed: int = 0,
                    overflow_bound: float = 0.01) -> EmpiricalKernel:
    """Histogram the law at time ``t`` of paths started at each cell center at time ``s``."""
    if samples_per_cell < 100:
        raise ParameterError("samples_per_cell must be at least 100")
    if grid.dimension != model.dimension:
        raise ParameterError("grid and model dimensions differ")
    centers = grid.centers()
    cells = centers.shape[0]
    x0 = np.repeat(centers, samples_per_cell, axis=0)
    traj = euler_maruyama(model, x0, s, t, dt, batch=x0.shape[0], seed=seed, record="final")
    dest = grid.locate(traj.final)
    source = np.repeat(np.arange(cells), samples_per_cell)
    inside = dest >= 0
    counts = np.zeros((cells, cells))
    np.add.at(counts, (source[inside], dest[inside]), 1.0)
    overflow = np.bincount(source[~inside], minlength=cells).astype(float)
    kern = EmpiricalKernel(grid, float(s), float(t), counts, overflow, samples_per_cell)
    worst = float(kern.overflow_fraction.max())
    if worst > overflow_bound:
        raise GridTooSmallError(f"{worst:.3%} of the mass from some cell left the grid "
                                f"(bound {overflow_bound:.3%})", overflow=kern.overflow_fraction)
    return kern


def empirical_kernel_family(model: SDEModel, grid: Grid, t0: float, h: float, count: int, dt: float,
                            samples_per_cell: int = 1000, seed: int = 0,
                            overflow_bound: float = 0.01):
    """Window schedule whose step ``k`` is the estimated kernel from ``t0 + k h`` to ``t0 + (k+1) h``.

    Returns ``(family, kernels)``.
    """
    kernels = []
    for k in range(count):
        sub = int(np.random.SeedSequence([int(seed), k]).generate_state(1)[0])
        kernels.append(estimate_kernel(model, grid, t0 + k * h, t0 + (k + 1) * h, dt,
                                       samples_per_cell, sub, overflow_bound))
    mats = []
    for kern in kernels:
        P = kern.matrix
        empty = P.sum(axis=1) == 0
        P[empty, :] = 0.0
        P[empty, np.flatnonzero(empty)] = 1.0
        mats.append(P)
    return KernelFamily.window(mats, start=0), kernels


def trajectory_csv(traj: TrajectoryBatch) -> str:
    """Long-format dump ``path,time,x0,x1,...`` with round-trip float formatting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dim = traj.paths.shape[2]
    w.writerow(["path", "time"] + [f"x{i}" for i in range(dim)])
    for b in range(traj.batch):
        for k, t in enumerate(traj.times):
            w.writerow([b, repr(float(t))] + [repr(float(v)) for v in traj.paths[b, k]])
    return buf.getvalue()


def kernel_csv(kern: EmpiricalKernel) -> str:
    """Sparse dump ``from,to,probability,halfwidth`` of the nonzero estimated transitions."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["from", "to", "probability", "halfwidth"])
    P, H = kern.matrix, kern.halfwidths
    for i, j in zip(*np.nonzero(P)):
        w.writerow([int(i), int(j), repr(float(P[i, j])), repr(float(H[i, j]))])
    return buf.getvalue()


def _fd_gradient(V, x):
    h = 1e-5 * (1.0 + np.abs(x))
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h[i]
        g[i] = (V(x + e) - V(x - e)) / (2 * h[i])
    return g


def _fd_hessian(V, x):
    # Second differences need a larger step than gradients to keep roundoff near 1e-7.
    h = 1e-4 * (1.0 + np.abs(x))
    n = x.size
    H = np.empty((n, n))
    v0 = V(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (V(x + ei) - 2 * v0 + V(x - ei)) / h[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (V(x + ei + ej) - V(x + ei - ej) - V(x - ei + ej) + V(x - ei - ej)) / (4 * h[i] * h[j])
    return H


def apply_generator(model: SDEModel, V: Callable | None, t: float, x, dV: Callable | None = None,
                    d2V: Callable | None = None, dVdt: Callable | None = None) -> float:
    """``(LV)(t, x) = dV/dt + sum_ij a_ij d2V/dx_i dx_j + sum_i f_i dV/dx_i`` with ``a = g g^T / 2``.

    Missing derivatives fall back to central differences.  ``V`` defaults to the
    model's own Lyapunov function (and its analytic derivatives).
    """
    if V is None:
        V, dV, d2V = model.V, model.dV, model.d2V
        if V is None:
            raise ParameterError("model carries no Lyapunov function")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    try:
        grad = np.atleast_1d(np.asarray(dV(x), dtype=float)) if dV is not None else _fd_gradient(V, x)
        hess = np.atleast_2d(np.asarray(d2V(x), dtype=float)) if d2V is not None else _fd_hessian(V, x)
        f = model.drift_at(t, x[None, :])[0]
        G = model.diffusion_at(t, x[None, :])[0]
        dt_term = float(dVdt(t, x)) if dVdt is not None else 0.0
    except (ParameterError, ModelDefinitionError):
        raise
    except Exception as exc:
        raise ModelDefinitionError(f"derivative or coefficient callback failed at (t={t}, x={x}): {exc}") from exc
    a = 0.5 * G @ G.T
    return dt_term + float(np.sum(a * hess)) + float(f @ grad)


def generator_lattice_check(model: SDEModel, c: float, ts: Sequence[float], xs, V=None, dV=None,
                            d2V=None) -> tuple[bool, float]:
    """Check ``(LV)(t, x) <= -c V(x)`` on every lattice point; return ``(ok, worst slack)``."""
    V_ = V or model.V
    worst = np.inf
    for t in ts:
        for x in xs:
            x = np.atleast_1d(np.asarray(x, dtype=float))
            slack = -c * float(V_(x)) - apply_generator(model, V, t, x, dV, d2V)
            worst = min(worst, slack)
    return bool(worst >= 0), float(worst)


@dataclass
class DriftCheckRow:
    s: float
    t: float
    x: tuple
    estimate: float
    stderr: float
    bias_allowance: float
    bound: float
    passed: bool


@dataclass
class ContinuousDriftReport:
    c: float
    dt: float
    batch: int
    rows: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.rows)

    scope = "window-verified"

    def to_dict(self) -> dict:
        return {
            "kind": "continuous_drift",
            "c": self.c,
            "gamma_of_t": "exp(-c t)",
            "dt": self.dt,
            "batch": self.batch,
            "scope": self.scope,
            "rows": [{"s": r.s, "t": r.t, "x": list(r.x), "estimate": r.estimate, "stderr": r.stderr,
                      "bias_allowance": r.bias_allowance, "bound": r.bound, "passed": r.passed}
                     for r in self.rows],
        }


def mc_drift_check(model: SDEModel, V: Callable | None, c: float, pairs, dt: float, batch: int,
                   seed: int = 0) -> ContinuousDriftReport:
    """Monte Carlo test of ``E[V(X_t) | X_s = x] <= exp(-c (t - s)) V(x)``.

    Each estimate passes when it lies below the bound plus ``3`` standard
    errors plus a discretization allowance ``kappa dt``.  ``kappa`` comes from
    rerunning with ``dt / 2`` on the same seed: ``kappa dt = 2 |E_dt - E_dt/2|``.
    """
    if not c > 0:
        raise ParameterError("c must be positive")
    V = V or model.V
    if V is None:
        raise ParameterError("no Lyapunov function supplied")
    report = ContinuousDriftReport(float(c), float(dt), int(batch))
    for i, (s, t, x) in enumerate(pairs):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        sub = int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
        est, se = _mean_V(model, V, x, s, t, dt, batch, sub)
        est_half, _ = _mean_V(model, V, x, s, t, dt / 2, batch, sub)
        allowance = 2.0 * abs(est - est_half)
        bound = math.exp(-c * (t - s)) * float(V(x))
        passed = est <= bound + 3 * se + allowance
        report.rows.append(DriftCheckRow(float(s), float(t), tuple(x.tolist()), est, se, allowance, bound, passed))
    return report


def _mean_V(model, V, x, s, t, dt, batch, seed):
    traj = euler_maruyama(model, x, s, t, dt, batch=batch, seed=seed, record="final")
    if getattr(V, "vectorized", False):
        vals = np.asarray(V(traj.final), dtype=float)
    else:
        vals = np.array([float(V(p)) for p in traj.final])
    se = float(vals.std(ddof=1) / math.sqrt(batch)) if batch > 1 else 0.0
    return float(vals.mean()), se


def check_nondegeneracy(model: SDEModel, ts, xs, lam: float | None = None) -> tuple[bool, float]:
    """Smallest eigenvalue of ``g g^T`` over a lattice, compared with the claimed floor.

    Also enforces symmetry of ``g`` within 1e-9.
    """
    lam = model.ellipticity_floor if lam is None else lam
    X = np.atleast_2d(np.asarray(xs, dtype=float).reshape(-1, model.dimension))
    lowest = np.inf
    for t in ts:
        G = model.diffusion_at(t, X)
        if np.max(np.abs(G - np.swapaxes(G, 1, 2))) > 1e-9:
            raise ModelDefinitionError(f"diffusion matrix is not symmetric at t={t}")
        eig = np.linalg.eigvalsh(G @ np.swapaxes(G, 1, 2))
        lowest = min(lowest, float(eig.min()))
    return bool(lowest >= lam), lowest


def coefficient_shift_defects(model: SDEModel, shifts, ts, xs) -> dict:
    """``sup |f(t + tau, x) - f(t, x)| + |g(t + tau, x) - g(t, x)|`` over a lattice, per shift ``tau``."""
    X = np.atleast_2d(np.asarray(xs, dtype=float).reshape(-1, model.dimension))
    out = {}
    for tau in shifts:
        worst = 0.0
        for t in ts:
            df = np.abs(model.drift_at(t + tau, X) - model.drift_at(t, X)).max()
            dg = np.abs(model.diffusion_at(t + tau, X) - model.diffusion_at(t, X)).max()
            worst = max(worst, float(df + dg))
        out[float(tau)] = worst
    return out


def release_rate(t, x):
    """Release rule ``r(t, x) = sin(pi t) + cos(sqrt(2) pi t) + x + 3`` of the storage model."""
    return np.sin(np.pi * t) + np.cos(math.sqrt(2) * np.pi * t) + x + 3.0


def _vectorized(fn):
    fn.vectorized = True
    return fn


@_vectorized
def _level_V(x):
    return np.asarray(x, dtype=float)[..., 0]


@_vectorized
def _square_V(x):
    return np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)


def storage_preset() -> SDEModel:
    """Storage level with Brownian input and the almost periodic release rule, reflected at 0."""
    return SDEModel(
        dimension=1,
        drift=lambda t, X: -release_rate(t, X),
        diffusion=lambda t, X: 1.0,
        name="storage",
        reflect_at_zero=True,
        ellipticity_floor=1.0,
        V=_level_V,
        dV=lambda x: np.ones(1),
        d2V=lambda x: np.zeros((1, 1)),
        period_hints=(2.0, math.sqrt(2)),
        notes=("boundary at 0 modeled by reflection (modeling choice)",
               "coefficient smoothness assumed, user-asserted"),
    )


def ou_preset(theta: float = 1.0, forcing: float = 0.5, noise_amplitude: float = 0.5,
              frequency: float = 2 * math.pi) -> SDEModel:
    """Periodically forced OU: ``dX = (-theta X + forcing sin(w t)) dt + (1 + noise_amplitude cos(w t)) dB``."""
    return SDEModel(
        dimension=1,
        drift=lambda t, X: -theta * X + forcing * math.sin(frequency * t),
        diffusion=lambda t, X: 1.0 + noise_amplitude * math.cos(frequency * t),
        name="ou",
        ellipticity_floor=(1.0 - abs(noise_amplitude)) ** 2,
        V=_square_V,
        dV=lambda x: 2 * np.asarray(x, dtype=float),
        d2V=lambda x: 2 * np.eye(np.asarray(x).size),
        period_hints=(2 * math.pi / frequency,),
    )


PRESETS = {"storage": storage_preset, "ou": ou_preset}
