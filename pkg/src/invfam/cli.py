"""Batch front-end: certify, derive constants, build the family, check rates, scan.

Exit codes: 0 all requested assertions pass, 1 an assertion failed, 2 the
configuration is invalid, 3 an output file could not be written.  Logs go to
standard error; data goes to files in ``--out`` only.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .certificates import find_minorization, verify_drift
from .config import STAGES, ConfigError, ExperimentConfig, load_config, load_schedule, schedule_from_dict
from .contraction import constants_from, level_for, tv_rate_check, verify_oscillation_contraction
from .diffusion import PRESETS, Grid, empirical_kernel_family
from .ergodic import backward_limit_family, krylov_bogolyubov_family, periodicity_scan
from .errors import InvfamError
from .kernels import InvariantFamily, KernelFamily
from .measures import ProbabilityVector, as_weight, tv_distance

log = logging.getLogger("invfam")

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

SUBCOMMAND_STAGES = {
    "certify": ("drift", "minorization"),
    "constants": ("constants",),
    "construct": ("family",),
    "rates": ("rates",),
    "scan": ("scan",),
    "run": None,  # whatever the config asks for
}


class StageFailure(Exception):
    def __init__(self, stage: str, reason: str):
        super().__init__(reason)
        self.stage = stage
        self.reason = reason


@dataclass
class PipelineResult:
    stages: list = field(default_factory=list)  # (name, status)
    constants: dict = field(default_factory=dict)
    sections: dict = field(default_factory=dict)
    family: InvariantFamily | None = None
    decay_csv: str | None = None
    failure: StageFailure | None = None

    @property
    def exit_code(self) -> int:
        return EXIT_ASSERT if self.failure else EXIT_OK


def stage_seed(seed: int, stage: str) -> int:
    """Expand the single top-level seed into an independent per-stage seed."""
    return int(np.random.SeedSequence([int(seed), STAGES.index(stage)]).generate_state(1)[0])


# ---------------------------------------------------------------- model setup

_NAMED_V = {
    "zero": lambda x: np.zeros(x.shape[0]),
    "level": lambda x: np.abs(x).sum(axis=1),
    "square": lambda x: (x ** 2).sum(axis=1),
}


def _build_model(cfg: ExperimentConfig):
    """Return ``(kernel family, state coordinates, notes)``."""
    model = cfg.model
    if model["source"] == "schedule":
        if "path" in model:
            K = load_schedule(cfg.base_dir / model["path"])
        else:
            K = schedule_from_dict(model["schedule"])
        coords = np.arange(K.state_count, dtype=float)[:, None]
        return K, coords, []
    sde = PRESETS[model["preset"]](**model.get("params", {}))
    g = model["grid"]
    grid = Grid(np.atleast_1d(np.asarray(g["lower"], float)), np.atleast_1d(np.asarray(g["upper"], float)),
                np.atleast_1d(np.asarray(g["bins"], int)))
    K, _ = empirical_kernel_family(sde, grid, float(model.get("t0", 0.0)), float(model.get("h", 1.0)),
                                   int(model.get("count", 1)), float(model.get("dt", 0.01)),
                                   int(model.get("samples_per_cell", 1000)),
                                   stage_seed(cfg.seed, "drift"),
                                   float(model.get("overflow_bound", 0.01)))
    return K, grid.centers(), list(sde.notes)


def _build_V(cfg: ExperimentConfig, K: KernelFamily, coords: np.ndarray):
    spec = cfg.V
    if spec is None:
        spec = {"name": "level" if cfg.model["source"] == "preset" else "zero"}
    if isinstance(spec, list):
        vals = np.array([np.inf if str(v).lower() in ("inf", ".inf") else float(v) for v in spec])
        if vals.size != K.state_count:
            raise ConfigError(f"V has {vals.size} entries, model has {K.state_count} states")
        return as_weight(vals)
    name = spec.get("name")
    if name not in _NAMED_V:
        raise ConfigError(f"unknown V function {name!r}; choose from {sorted(_NAMED_V)}")
    return as_weight(_NAMED_V[name](coords))


def _default_window(K: KernelFamily) -> range:
    if K.kind == "periodic":
        return range(K.period)
    if K.kind == "window":
        return range(K.start, K.start + len(K.matrices) + 1)
    return range(1)


def _range(pair, fallback) -> range:
    return fallback if pair is None else range(int(pair[0]), int(pair[1]))


# -------------------------------------------------------------------- stages

def _stage_drift(ctx, res):
    d = ctx["cfg"].section("drift")
    cert = verify_drift(ctx["K"], ctx["V"], float(d["gamma"]), float(d["C"]), ctx["window"])
    res.sections["drift"] = cert.to_dict()
    if not cert.ok:
        n, x, e = cert.violations[0]
        raise StageFailure("drift", f"{len(cert.violations)} violation(s), first at n={n} x={x} excess={e!r}")
    ctx["drift"] = cert
    res.constants.update({
        "drift.gamma": cert.gamma, "drift.C": cert.C, "drift.worst_slack": cert.worst_slack,
        "drift.witness_n": cert.witness[0], "drift.witness_x": cert.witness[1],
        "drift.scope": "exhaustive" if cert.exhaustive else "window-verified",
    })


def _stage_minorization(ctx, res):
    cfg = ctx["cfg"]
    drift = ctx["drift"]
    gs = cfg.section("constants")["gamma_star"]
    gs = (1.0 + drift.gamma) / 2.0 if gs is None else float(gs)
    R = level_for(drift.gamma, drift.C, gs)
    m = cfg.section("minorization")
    mino = find_minorization(ctx["K"], ctx["V"], R, float(m["target_delta"]), int(m["n0_max"]), ctx["window"])
    res.sections["minorization"] = mino.to_dict()
    if not mino.ok:
        n0, best = mino.best
        raise StageFailure("minorization", f"no n0 <= {m['n0_max']} reaches delta >= {m['target_delta']} "
                                           f"at R={R!r} (best delta={best!r} at n0={n0})")
    ctx["mino"], ctx["gamma_star"] = mino, gs
    res.constants.update({
        "minorization.n0": mino.n0, "minorization.delta": mino.delta, "minorization.R": mino.R,
        "minorization.doeblin_delta": mino.doeblin_delta,
        "minorization.scope": "exhaustive" if mino.exhaustive else "window-verified",
    })


def _stage_constants(ctx, res):
    drift, mino, cfg = ctx["drift"], ctx["mino"], ctx["cfg"]
    cc = constants_from(drift.gamma, drift.C, mino.delta, mino.n0, ctx["gamma_star"], mino.R)
    bad = cc.check()
    if bad:
        raise StageFailure("constants", "inconsistent constants: " + ", ".join(bad))
    rep = verify_oscillation_contraction(ctx["K"], cc, ctx["V"], int(cfg.section("constants")["trials"]),
                                         ctx["window"], stage_seed(cfg.seed, "constants"))
    res.sections["constants"] = {"values": cc.as_dict(),
                                 "contraction": {"max_ratio": rep.max_ratio, "eta": rep.eta,
                                                 "trials": rep.trials, "skipped": rep.skipped,
                                                 "worst_time": rep.worst_time, "ok": rep.ok}}
    ctx["cc"] = cc
    res.constants.update({f"constants.{k}": v for k, v in cc.as_dict().items()})
    res.constants["constants.contraction_max_ratio"] = rep.max_ratio
    if not rep.ok:
        raise StageFailure("constants", f"oscillation ratio {rep.max_ratio!r} exceeds eta {rep.eta!r}")


def _family_times(ctx) -> range:
    cfg, K = ctx["cfg"], ctx["K"]
    f = cfg.section("family")
    if f["times"] is not None:
        return _range(f["times"], None)
    if K.kind == "periodic":
        return range(0, 4 * K.period)
    if K.kind == "window":
        return range(K.start, K.start + len(K.matrices) + 1)
    return range(0, 2)


def _stage_family(ctx, res):
    cfg, K = ctx["cfg"], ctx["K"]
    f = cfg.section("family")
    tol = float(f["tol"])
    times = _family_times(ctx)
    x = int(f["x"])
    built = {}
    section = {"times": [times.start, times.stop]}
    if f["method"] in ("cesaro", "both"):
        mu0 = ProbabilityVector.point_mass(x, K.state_count)
        fam, diag = krylov_bogolyubov_family(K, mu0, times, int(f["s_max"]), tol)
        built["cesaro"] = (fam, diag)
    if f["method"] in ("backward", "both"):
        V = ctx.get("V") if "drift" in ctx else None
        fam, diag = backward_limit_family(K, x, times, int(f["m_max"]), tol, V=V)
        built["backward"] = (fam, diag)
    for name, (fam, diag) in built.items():
        section[name] = diag.to_dict()
        section[name]["invariance_residual"] = fam.residual
    res.sections["family"] = section
    fam = built.get("backward", built.get("cesaro"))[0]
    ctx["family"] = res.family = fam
    res.constants["family.residual"] = fam.residual
    for name, (_, diag) in built.items():
        if not diag.converged:
            raise StageFailure("family", f"{name} route did not converge (gap {diag.final_gap!r})")
    if len(built) == 2:
        a, b = built["cesaro"][0].weights, built["backward"][0].weights
        gap = float(max(tv_distance(p, q) for p, q in zip(a, b)))
        section["route_disagreement"] = gap
        res.constants["family.route_disagreement"] = gap
        if gap > 10 * tol:
            raise StageFailure("family", f"construction routes disagree by {gap!r} in TV")
    if fam.residual > 10 * tol:
        raise StageFailure("family", f"invariance residual {fam.residual!r} exceeds {10 * tol!r}")


def _stage_rates(ctx, res):
    cfg, fam = ctx["cfg"], ctx["family"]
    r = cfg.section("rates")
    n = fam.times[-1] if r["n"] is None else int(r["n"])
    rep = tv_rate_check(ctx["K"], fam, ctx["cc"], ctx["V"], int(r["x"]), n, int(r["m_max"]))
    res.decay_csv = rep.to_csv()
    res.sections["rates"] = {"x": rep.x, "n": rep.n, "V_x": rep.V_x, "slope": rep.slope,
                             "log_alpha": rep.log_alpha, "bound_ok": rep.bound_ok, "rate_ok": rep.rate_ok}
    res.constants["rates.slope"] = "none" if rep.slope is None else rep.slope
    if not rep.bound_ok:
        m, obs, bound, _ = next(row for row in rep.rows if row[1] > row[2])
        raise StageFailure("rates", f"observed TV {obs!r} exceeds bound {bound!r} at m={m}")
    if not rep.rate_ok:
        raise StageFailure("rates", f"fitted log-slope {rep.slope!r} exceeds log(alpha)+0.01")


def _stage_scan(ctx, res):
    cfg, fam = ctx["cfg"], ctx["family"]
    s = cfg.section("scan")
    p_max = max(1, len(fam) // 2) if s["p_max"] is None else int(s["p_max"])
    scan = periodicity_scan(fam, p_max, float(s["tol"]))
    res.sections["scan"] = {"period": scan.period, "best_shift": scan.best_shift,
                            "defects": {str(p): d for p, d in scan.defects.items()}}
    res.constants["scan.period"] = "none" if scan.period is None else scan.period
    expect = s["expect_period"]
    if expect is not None and scan.period != int(expect):
        raise StageFailure("scan", f"detected period {scan.period} but expected {expect}")


_RUNNERS = {
    "drift": _stage_drift, "minorization": _stage_minorization, "constants": _stage_constants,
    "family": _stage_family, "rates": _stage_rates, "scan": _stage_scan,
}


def run_pipeline(cfg: ExperimentConfig) -> PipelineResult:
    """Run ``cfg.stages`` in dependency order, stopping at the first failing stage."""
    res = PipelineResult()
    if not cfg.stages:
        return res
    try:
        K, coords, notes = _build_model(cfg)
        V = _build_V(cfg, K, coords)
    except ConfigError:
        raise
    except InvfamError as exc:
        res.failure = StageFailure("model", str(exc))
        return res
    res.sections["model"] = {"kind": K.kind, "state_count": K.state_count, "notes": notes}
    ctx = {"cfg": cfg, "K": K, "V": V, "window": _range(cfg.settings["window"], _default_window(K))}
    for stage in cfg.stages:
        log.info("stage %s", stage)
        try:
            _RUNNERS[stage](ctx, res)
        except StageFailure as exc:
            res.failure = exc
        except InvfamError as exc:
            res.failure = StageFailure(stage, f"{type(exc).__name__}: {exc}")
        res.stages.append((stage, "fail" if res.failure else "pass"))
        if res.failure:
            break
    return res


# ------------------------------------------------------------------- reports

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def family_csv(fam: InvariantFamily) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "state", "weight"])
    for i, n in enumerate(fam.times):
        for x, p in enumerate(fam.weights[i]):
            w.writerow([n, x, repr(float(p))])
    return buf.getvalue()


def emit_report(res: PipelineResult, cfg: ExperimentConfig | None, out: Path) -> list[Path]:
    """Write the report bundle into ``out`` and return the written paths.

    ``constants.kv`` and ``report.json`` are always written; ``family.csv`` and
    ``decay.csv`` only when the corresponding stage produced data.
    """
    files = {}
    files["constants.kv"] = "".join(sorted(f"{k}={_fmt(v)}\n" for k, v in res.constants.items()))
    if res.family is not None:
        files["family.csv"] = family_csv(res.family)
    if res.decay_csv is not None:
        files["decay.csv"] = res.decay_csv
    summary = {
        "version": __version__,
        "config": cfg.resolved() if cfg is not None else None,
        "stages": [{"name": n, "status": s} for n, s in res.stages],
        "stage_count": len(res.stages),
        "results": res.sections,
        "failure": None if res.failure is None else {"stage": res.failure.stage, "reason": res.failure.reason},
        "exit_code": res.exit_code,
    }
    files["report.json"] = json.dumps(_jsonable(summary), sort_keys=True, indent=2) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(files):
        path = out / name
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(files[name])
        written.append(path)
    return written


# ----------------------------------------------------------------------- CLI

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invfam", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"invfam {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMAND_STAGES:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", type=Path, default=Path("out"))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--tol", type=float)
        sp.add_argument("--threads", type=int, help="BLAS thread count (does not change results)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("config: --threads must be positive", file=sys.stderr)
            return EXIT_CONFIG
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.tol is not None:
        overrides["family"] = {"tol": args.tol}
    stages = SUBCOMMAND_STAGES[args.command]
    if stages is not None:
        overrides["stages"] = list(stages)
    try:
        cfg = load_config(args.config, overrides)
        res = run_pipeline(cfg)
    except ConfigError as exc:
        print(f"config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        emit_report(res, cfg, args.out)
    except OSError as exc:
        print(f"io: cannot write report to {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    if res.failure is not None:
        print(f"stage {res.failure.stage} failed: {res.failure.reason}", file=sys.stderr)
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
