"""JSON scenario and bridge-target files: schema, loading and hashing."""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from . import costs as _costs
from .basis import Basis
from .measures import Binning, WeightedSample
from .model import (ControlSpace, DomainSpec, InitialLaw, Scenario, controlled_drift, mean_interaction,
                    quadratic_control_cost)
from .pontryagin import SolverOptions
from .schrodinger import BridgeTarget


class ConfigError(ValueError):
    """Malformed config; the message names the file position or field path."""


SCENARIO_KEYS = {"name", "T", "n_steps", "n_particles", "seed", "noise", "bridge_correction",
                 "domain", "dynamics", "controls", "cost", "initial_law", "solver"}
BLOCK_KEYS = {
    "domain": {"kind", "dim", "threshold", "lo", "hi", "center", "radius"},
    "dynamics": {"kind", "d", "sigma", "eps"},
    "controls": {"kind", "k", "lo", "hi", "radius"},
    "cost": {"kind", "coef", "q", "eps", "F", "nu", "p_hat", "mu_hat", "s", "l", "Psi", "Phi"},
    "initial_law": {"kind", "loc", "scale", "lo", "hi"},
    "solver": {"outer_iters", "gamma", "tol_J", "tol_alpha", "basis_degree", "picard_iters",
               "picard_tol", "n_main"},
}
TARGET_KEYS = {"p_hat", "points", "weights", "normal", "s", "l_list"}
NORMAL_KEYS = {"mean", "sd", "bins", "width"}


def _position(text, key):
    i = text.find(f'"{key}"')
    if i < 0:
        return ""
    line = text.count("\n", 0, i) + 1
    col = i - (text.rfind("\n", 0, i) + 1) + 1
    return f" (line {line}, column {col})"


def _parse(text, source):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: line {e.lineno}, column {e.colno}: {e.msg}") from None


def _check_keys(block, allowed, path, text, source):
    if not isinstance(block, dict):
        raise ConfigError(f"{source}: field '{path}' must be an object")
    for key in block:
        if key not in allowed:
            raise ConfigError(f"{source}: unknown key '{path + '.' if path else ''}{key}'{_position(text, key)}")


def _require(block, key, path, source):
    if key not in block:
        raise ConfigError(f"{source}: missing field '{path}.{key}'")
    return block[key]


def _domain(b, path, source):
    kind = b.get("kind", "full_space")
    if kind == "full_space":
        return DomainSpec.full_space(int(b.get("dim", 1)))
    if kind == "half_line":
        return DomainSpec.half_line(float(b.get("threshold", 0.0)))
    if kind == "interval":
        return DomainSpec.interval(_require(b, "lo", path, source), _require(b, "hi", path, source))
    if kind == "box":
        return DomainSpec.box(_require(b, "lo", path, source), _require(b, "hi", path, source))
    if kind == "ball":
        return DomainSpec.ball(_require(b, "center", path, source), _require(b, "radius", path, source))
    raise ConfigError(f"{source}: field '{path}.kind': unknown domain {kind!r}")


def _dynamics(b, d, path, source):
    kind = b.get("kind", "controlled_drift")
    sigma = b.get("sigma", 1.0)
    d = int(b.get("d", d))
    if kind == "controlled_drift":
        return controlled_drift(d, sigma)
    if kind == "mean_interaction":
        return mean_interaction(float(b.get("eps", 0.1)), d, sigma)
    raise ConfigError(f"{source}: field '{path}.kind': unknown dynamics {kind!r}")


def _controls(b, k, path, source):
    kind = b.get("kind", "full_space")
    if kind == "full_space":
        return ControlSpace.full_space(int(b.get("k", k)))
    if kind == "box":
        return ControlSpace.box(_require(b, "lo", path, source), _require(b, "hi", path, source))
    if kind == "ball":
        return ControlSpace.ball(_require(b, "radius", path, source), int(b.get("k", k)))
    raise ConfigError(f"{source}: field '{path}.kind': unknown action space {kind!r}")


def _sample(spec, path, source):
    if not isinstance(spec, dict) or "points" not in spec or "weights" not in spec:
        raise ConfigError(f"{source}: field '{path}' needs 'points' and 'weights'")
    pts = np.asarray(spec["points"], float)
    pts = pts[:, None] if pts.ndim == 1 else pts
    w = np.asarray(spec["weights"], float)
    return WeightedSample.from_unnormalized(pts, w)


def _functional(name, path, source):
    if name in (None, "zero"):
        return _costs.MeasureFunctional.zero()
    if name == "variance":
        return _costs.MeasureFunctional.variance()
    raise ConfigError(f"{source}: field '{path}': unknown functional {name!r}")


def _cost(b, path, source):
    kind = b.get("kind", "quadratic")
    coef = float(b.get("coef", 1.0))
    if kind == "quadratic":
        return quadratic_control_cost(coef)
    if kind == "lq":
        return _costs.lq_terminal(float(b.get("q", 1.0)))
    if kind == "mean_field_lq":
        return _costs.mean_field_lq_terminal(float(b.get("q", 1.0)))
    if kind == "variance":
        return _costs.variance_terminal(coef)
    if kind == "concave_mean_square":
        return _costs.concave_mean_square(coef)
    if kind == "conditional_exit":
        return _costs.conditional_exit(float(b.get("eps", 0.1)), _functional(b.get("Phi"), path + ".Phi", source),
                                       _functional(b.get("Psi"), path + ".Psi", source), coef=coef)
    if kind == "f_divergence":
        F = b.get("F", "xlogx")
        if F not in _costs.F_CHOICES:
            raise ConfigError(f"{source}: field '{path}.F': unknown divergence {F!r}")
        return _costs.f_divergence(F, _sample(_require(b, "nu", path, source), path + ".nu", source))
    if kind == "fw_target":
        mu = _sample(_require(b, "mu_hat", path, source), path + ".mu_hat", source)
        return _costs.fw_target(float(_require(b, "p_hat", path, source)), mu, float(b.get("s", 1.0)),
                                float(b.get("l", 1.0)))
    raise ConfigError(f"{source}: field '{path}.kind': unknown cost {kind!r}")


def _initial(b, path, source):
    kind = b.get("kind", "point")
    if kind not in ("point", "normal", "uniform"):
        raise ConfigError(f"{source}: field '{path}.kind': unknown initial law {kind!r}")
    return InitialLaw(kind, b.get("loc", 0.0), b.get("scale", 1.0), b.get("lo"), b.get("hi"))


def scenario_from_dict(cfg: dict, text="", source="<config>") -> tuple[Scenario, SolverOptions]:
    _check_keys(cfg, SCENARIO_KEYS, "", text, source)
    for name, allowed in BLOCK_KEYS.items():
        if name in cfg:
            _check_keys(cfg[name], allowed, name, text, source)
    try:
        dom = _domain(cfg.get("domain", {}), "domain", source)
        dyn = _dynamics(cfg.get("dynamics", {}), dom.dim, "dynamics", source)
        ctl = _controls(cfg.get("controls", {}), dyn.k, "controls", source)
        cost = _cost(cfg.get("cost", {}), "cost", source)
        init = _initial(cfg.get("initial_law", {}), "initial_law", source)
        s = Scenario(dom, dyn, ctl, cost, T=float(cfg.get("T", 1.0)), n_steps=int(cfg.get("n_steps", 100)),
                     n_particles=int(cfg.get("n_particles", 10_000)), seed=int(cfg.get("seed", 0)),
                     initial_law=init, bridge_correction=bool(cfg.get("bridge_correction", False)),
                     noise=str(cfg.get("noise", "gaussian")), name=str(cfg.get("name", "")))
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{source}: {e}") from None
    if s.noise not in ("gaussian", "rademacher"):
        raise ConfigError(f"{source}: field 'noise': unknown noise {s.noise!r}")
    sv = cfg.get("solver", {})
    opts = SolverOptions(
        outer_iters=int(sv.get("outer_iters", 100)), gamma=float(sv.get("gamma", 0.5)),
        tol_J=float(sv.get("tol_J", 1e-4)), tol_alpha=float(sv.get("tol_alpha", 1e-4)),
        basis=Basis("poly", int(sv.get("basis_degree", 2))), picard_iters=int(sv.get("picard_iters", 50)),
        picard_tol=float(sv.get("picard_tol", 1e-4)), n_main=int(sv.get("n_main", 256)))
    return s, opts


def load_scenario(path) -> tuple[Scenario, SolverOptions, dict, str]:
    """(scenario, solver options, raw dict, config hash) from a JSON file."""
    text = Path(path).read_text()
    cfg = _parse(text, str(path))
    s, opts = scenario_from_dict(cfg, text, str(path))
    return s, opts, cfg, config_hash(cfg)


def target_from_dict(cfg: dict, text="", source="<target>") -> BridgeTarget:
    _check_keys(cfg, TARGET_KEYS, "", text, source)
    p_hat = float(_require(cfg, "p_hat", "target", source))
    if "normal" in cfg:
        nb = cfg["normal"]
        _check_keys(nb, NORMAL_KEYS, "normal", text, source)
        mean, sd = float(nb.get("mean", 0.0)), float(nb.get("sd", 1.0))
        width = float(nb.get("width", 5.0))
        b = Binning(np.array([mean - width * sd]), np.array([mean + width * sd]), int(nb.get("bins", 64)))
        c = b.centers()
        w = np.exp(-0.5 * ((c[:, 0] - mean) / sd) ** 2)
        mu = WeightedSample(c, w / w.sum())
    else:
        mu = _sample(cfg, "target", source)
    l_list = tuple(float(v) for v in cfg.get("l_list", (1.0, 4.0, 16.0, 64.0, 256.0)))
    return BridgeTarget(p_hat, mu, float(cfg.get("s", 1.0)), l_list)


def load_target(path) -> tuple[BridgeTarget, str]:
    text = Path(path).read_text()
    cfg = _parse(text, str(path))
    return target_from_dict(cfg, text, str(path)), config_hash(cfg)


def config_hash(cfg: dict) -> str:
    """First 16 hex digits of sha256 over the canonical JSON form."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def bundled(name: str) -> Path:
    """Path of a scenario file shipped with the package."""
    return Path(__file__).parent / "scenarios" / f"{name}.json"
