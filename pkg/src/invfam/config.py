"""Experiment configuration: loading, validation and kernel schedule files.

Configs and schedules are YAML documents (JSON is accepted as a subset).
Paths inside a config are resolved relative to the config file.  Everything
is validated before any computation starts.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, InvfamError
from .kernels import KernelFamily

STAGES = ("drift", "minorization", "constants", "family", "rates", "scan")
REQUIRES = {
    "drift": (),
    "minorization": ("drift",),
    "constants": ("drift", "minorization"),
    "family": (),
    "rates": ("drift", "minorization", "constants", "family"),
    "scan": ("family",),
}

DEFAULTS = {
    "seed": 0,
    "window": None,
    "drift": {"gamma": 0.5, "C": 1.0},
    "minorization": {"target_delta": 0.05, "n0_max": 64},
    "constants": {"gamma_star": None, "trials": 100},
    "family": {"method": "both", "x": 0, "tol": 1e-9, "times": None, "s_max": 65536, "m_max": 1048576},
    "rates": {"x": 0, "n": None, "m_max": 200},
    "scan": {"p_max": None, "tol": 1e-10, "expect_period": None},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_document(path: Path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def load_schedule(path: Path) -> KernelFamily:
    """Read a kernel schedule document.

    Fields: ``state_count``, ``kind`` (``constant`` | ``periodic`` | ``window``),
    ``matrices`` (a list of row-major matrices; ``constant`` also accepts a
    single ``matrix``) and, for windows, ``start``.
    """
    doc = load_document(path)
    return schedule_from_dict(doc, source=str(path))


def schedule_from_dict(doc, source: str = "<inline>") -> KernelFamily:
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: schedule must be a mapping")
    kind = doc.get("kind")
    if kind not in ("constant", "periodic", "window"):
        raise ConfigError(f"{source}: kind must be constant, periodic or window, got {kind!r}")
    mats = doc.get("matrices")
    if mats is None and "matrix" in doc:
        mats = [doc["matrix"]]
    if not mats:
        raise ConfigError(f"{source}: no matrices given")
    try:
        arrays = [np.array(m, dtype=float) for m in mats]
        if kind == "constant":
            if len(arrays) != 1:
                raise ConfigError(f"{source}: constant schedule takes exactly one matrix")
            K = KernelFamily.constant(arrays[0])
        elif kind == "periodic":
            K = KernelFamily.periodic(arrays)
        else:
            K = KernelFamily.window(arrays, start=int(doc.get("start", 0)))
    except (InvfamError, ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{source}: invalid matrices: {exc}") from exc
    sc = doc.get("state_count")
    if sc is not None and int(sc) != K.state_count:
        raise ConfigError(f"{source}: state_count {sc} does not match matrices ({K.state_count})")
    return K


@dataclass
class ExperimentConfig:
    model: dict
    V: object
    stages: tuple
    settings: dict
    seed: int
    base_dir: Path
    raw: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return self.settings[name]

    def resolved(self) -> dict:
        """The fully resolved configuration, embedded in every report."""
        out = {"model": self.model, "V": self.V, "stages": list(self.stages), "seed": self.seed}
        out.update(self.settings)
        return out


def _check_range(name, value, lo=None, hi=None, lo_open=True, hi_open=True):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None
    if not math.isfinite(v):
        raise ConfigError(f"{name} must be finite")
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ConfigError(f"{name}={v} out of range")
    if hi is not None and (v >= hi if hi_open else v > hi):
        raise ConfigError(f"{name}={v} out of range")
    return v


def expand_stages(requested) -> tuple:
    """Close ``requested`` under stage dependencies and order it."""
    wanted = set()
    for s in requested:
        if s not in STAGES:
            raise ConfigError(f"unknown stage {s!r}; choose from {', '.join(STAGES)}")
        wanted.add(s)
        wanted.update(REQUIRES[s])
    return tuple(s for s in STAGES if s in wanted)


def parse_config(doc: dict, base_dir: Path, overrides: dict | None = None) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    doc = _merge(doc, overrides or {})
    settings = _merge({k: v for k, v in DEFAULTS.items() if isinstance(v, dict)},
                      {k: v for k, v in doc.items() if k in DEFAULTS and isinstance(DEFAULTS[k], dict)})
    model = doc.get("model")
    if not isinstance(model, dict):
        raise ConfigError("config needs a 'model' mapping")
    source = model.get("source")
    if source == "schedule":
        if "path" not in model and "schedule" not in model:
            raise ConfigError("schedule model needs 'path' or an inline 'schedule'")
        if "path" in model and not (base_dir / model["path"]).is_file():
            raise ConfigError(f"schedule file {model['path']!r} does not exist")
    elif source == "preset":
        from .diffusion import PRESETS
        if model.get("preset") not in PRESETS:
            raise ConfigError(f"unknown preset {model.get('preset')!r}; choose from {sorted(PRESETS)}")
        grid = model.get("grid")
        if not isinstance(grid, dict) or not {"lower", "upper", "bins"} <= set(grid):
            raise ConfigError("preset model needs grid: {lower, upper, bins}")
        for key in ("h", "dt"):
            _check_range(f"model.{key}", model.get(key, 1.0 if key == "h" else 0.01), lo=0)
        if int(model.get("count", 1)) < 1:
            raise ConfigError("model.count must be at least 1")
        if int(model.get("samples_per_cell", 1000)) < 100:
            raise ConfigError("model.samples_per_cell must be at least 100")
    else:
        raise ConfigError(f"model.source must be 'schedule' or 'preset', got {source!r}")

    stages = doc.get("stages", list(STAGES))
    if not isinstance(stages, (list, tuple)):
        raise ConfigError("stages must be a list")
    stages = expand_stages(stages)

    dr = settings["drift"]
    _check_range("drift.gamma", dr["gamma"], 0, 1)
    _check_range("drift.C", dr["C"], 0)
    mn = settings["minorization"]
    _check_range("minorization.target_delta", mn["target_delta"], 0, 1)
    if int(mn["n0_max"]) < 1:
        raise ConfigError("minorization.n0_max must be positive")
    gs = settings["constants"]["gamma_star"]
    if gs is not None:
        _check_range("constants.gamma_star", gs, float(dr["gamma"]), 1)
    fam = settings["family"]
    if fam["method"] not in ("cesaro", "backward", "both"):
        raise ConfigError("family.method must be cesaro, backward or both")
    _check_range("family.tol", fam["tol"], 0)
    for key in ("times", "window"):
        val = fam["times"] if key == "times" else doc.get("window")
        if val is not None and (not isinstance(val, (list, tuple)) or len(val) != 2 or int(val[1]) <= int(val[0])):
            raise ConfigError(f"{key} must be [start, stop) with stop > start")
    V = doc.get("V")
    if V is not None and not isinstance(V, (list, dict)):
        raise ConfigError("V must be a list of weights or a mapping {name: ...}")
    seed = int(doc.get("seed", 0))
    settings["window"] = doc.get("window")
    return ExperimentConfig(model, V, stages, settings, seed, base_dir, raw=doc)


def load_config(path: Path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(load_document(path), path.parent, overrides)
