"""Experiment configuration: a TOML file mapped onto model objects.

Every cross-field rule is checked in :func:`build` before anything runs; a
violation raises :class:`ConfigError` naming the rule.
"""
from __future__ import annotations

import copy
import math
import sys
from dataclasses import dataclass

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .drifts import ConstantDrift, PerturbedLinearDrift, ZeroDrift
from .dynamics import Model, StepConfig
from .geometry import ellipsoid_body, halfspace_body, make_layering, nonneg_level_body
from .oblique import constant_field, sine_coupling_field, zero_field
from .spectral import dirichlet_preset, make_space

__all__ = ["ConfigError", "Experiment", "DEFAULTS", "DEFAULT_TOML", "load", "build", "merge"]


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "n_paths": 100,
    "mode": "normal",
    "space": {"preset": "explicit", "eigenvalues": [1.0, 2.0]},
    "body": {"kind": "ellipsoid", "semiaxes": [1.0, 1.0]},
    "oblique": {"kind": "zero"},
    "drift": {"kind": "none", "girsanov": False},
    "step": {
        "dt": 1e-3,
        "t_end": 1.0,
        "scheme": "project",
        "record_stride": 10,
        "burn_in": 0.0,
        "skew_bridge": False,
        "normal_norm": "H",
    },
    "start": {"kind": "stationary"},
    "output": {"dir": "reflou_out", "trajectories": True},
}

DEFAULT_TOML = """\
# reflou experiment configuration (all keys optional; values shown are defaults)
seed = 0
n_paths = 100
# workers = 1            # default from $REFLOU_WORKERS, else 1
mode = "normal"          # free | normal | oblique | skew

[space]
preset = "explicit"      # explicit | dirichlet
eigenvalues = [1.0, 2.0] # explicit: alpha_1..alpha_d
# h1_weights = [1.0, 1.0]
# d = 8                  # dirichlet: number of sine modes
# epsilon = 0.5          # dirichlet: c_j = (j pi)^(1/2 + epsilon)

[body]                   # used by normal and oblique modes
kind = "ellipsoid"       # ellipsoid | halfspace | nonneg_level
semiaxes = [1.0, 1.0]    # ellipsoid
# normal = [1.0, 0.0]    # halfspace {<normal, x> <= offset}
# offset = 0.0
# alpha = 0.1            # nonneg_level {f >= -alpha}, dirichlet space only
# grid_points = 36

# [layering]             # used by skew mode
# bodies = [{kind = "halfspace", normal = [1.0], offset = 0.0}]
# gammas = [0.428571, 1.0]   # K or K + 1 values
# gamma_bar = 1.0
# p = 0.7                # shortcut for one membrane: gammas = [(1 - p)/p, 1]

[oblique]                # used by oblique mode
kind = "zero"            # zero | constant | sine_coupling
# upper = [1.0]          # constant: strict upper triangle, row by row
# strength = 0.5         # sine_coupling

[drift]
kind = "none"            # none | constant | preset
# vector = [0.5, 0.0]    # constant
# preset = "perturbed_linear"
# slope = -0.5
# lip = 1.0
# bound = 0.5            # declared sup-norm
girsanov = false         # true: simulate the base drift and reweight to this one

[step]
dt = 0.001
t_end = 1.0
scheme = "project"       # project | penalize
# penalization_strength = 100.0
record_stride = 10
burn_in = 0.0
skew_bridge = false
# lt_band = 0.1          # occupation band for membrane local time
normal_norm = "H"        # H | H1star

[start]
kind = "stationary"      # stationary | point
# point = [0.0, 0.0]

[output]
dir = "reflou_out"
trajectories = true
"""


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return merge(DEFAULTS, raw)


@dataclass
class Experiment:
    model: Model
    step: StepConfig
    seed: int
    n_paths: int
    start: object
    workers: int | None
    output_dir: str
    trajectories: bool
    raw: dict


def _vector(section, key, name):
    if key not in section:
        raise ConfigError(f"{name}.{key} is required")
    try:
        return np.asarray(section[key], dtype=float).ravel()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}.{key} must be a list of numbers") from exc


def _space(sec):
    preset = sec.get("preset", "explicit")
    if preset == "explicit":
        return make_space(_vector(sec, "eigenvalues", "space"), sec.get("h1_weights"))
    if preset == "dirichlet":
        return dirichlet_preset(int(sec.get("d", 8)), float(sec.get("epsilon", 0.5)))
    raise ConfigError(f"space.preset must be 'explicit' or 'dirichlet', got {preset!r}")


def _body(sec, space, where="body"):
    kind = sec.get("kind")
    if kind == "ellipsoid":
        return ellipsoid_body(space, _vector(sec, "semiaxes", where))
    if kind == "halfspace":
        n = _vector(sec, "normal", where)
        if n.size != space.dim:
            raise ConfigError(f"{where}.normal needs {space.dim} entries")
        return halfspace_body(n, float(sec.get("offset", 0.0)))
    if kind == "nonneg_level":
        return nonneg_level_body(space, float(sec.get("alpha", 0.0)), sec.get("grid_points"))
    raise ConfigError(f"{where}.kind must be ellipsoid, halfspace or nonneg_level, got {kind!r}")


def _layering(sec, space):
    if "p" in sec:
        p = float(sec["p"])
        if not 0 < p < 1:
            raise ConfigError("layering.p must lie in (0, 1)")
        bodies_spec = sec.get("bodies", [{"kind": "halfspace", "normal": [1.0] + [0.0] * (space.dim - 1),
                                          "offset": 0.0}])
        if len(bodies_spec) != 1:
            raise ConfigError("layering.p is a shortcut for exactly one membrane")
        gammas = [(1 - p) / p, 1.0]
    else:
        bodies_spec = sec.get("bodies")
        if not bodies_spec:
            raise ConfigError("layering.bodies is required")
        if "gammas" not in sec:
            raise ConfigError("layering.gammas is required")
        gammas = sec["gammas"]
    bodies = [_body(b, space, "layering.bodies") for b in bodies_spec]
    return make_layering(bodies, gammas, gamma_bar=sec.get("gamma_bar"), c0=sec.get("c0"),
                         space=space)


def _field(sec, space):
    kind = sec.get("kind", "zero")
    if kind == "zero":
        return zero_field(space.dim)
    if kind == "constant":
        return constant_field(space.dim, sec.get("upper", []))
    if kind == "sine_coupling":
        return sine_coupling_field(space.dim, float(sec.get("strength", 0.5)))
    raise ConfigError(f"oblique.kind must be zero, constant or sine_coupling, got {kind!r}")


def _drift(sec, space, body):
    kind = sec.get("kind", "none")
    if kind == "none":
        return None
    if kind == "constant":
        v = _vector(sec, "vector", "drift")
        if v.size != space.dim:
            raise ConfigError(f"drift.vector needs {space.dim} entries")
        return ConstantDrift(v, sec.get("bound"))
    if kind == "preset":
        name = sec.get("preset", "perturbed_linear")
        if name != "perturbed_linear":
            raise ConfigError(f"unknown drift preset {name!r}")
        radius = getattr(body, "radius", None)
        if radius is None:
            raise ConfigError("drift preset perturbed_linear needs a bounded ellipsoid body")
        d = PerturbedLinearDrift(space.dim, float(sec.get("slope", -0.5)), float(sec.get("lip", 1.0)),
                                 radius)
        if "bound" in sec:
            if float(sec["bound"]) < d.bound:
                raise ConfigError(f"drift.bound {sec['bound']} is below the preset's sup-norm {d.bound:.6g}")
            d.bound = float(sec["bound"])
        return d
    raise ConfigError(f"drift.kind must be none, constant or preset, got {kind!r}")


def build(cfg: dict) -> Experiment:
    """Validate a merged config dictionary and construct the experiment."""
    try:
        return _build(cfg)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def _build(cfg):
    mode = cfg.get("mode", "normal")
    if mode not in ("free", "normal", "oblique", "skew"):
        raise ConfigError(f"mode must be free, normal, oblique or skew, got {mode!r}")
    space = _space(cfg.get("space", {}))
    body = layering = field = None
    if mode in ("normal", "oblique"):
        body = _body(cfg.get("body", {}), space)
        if mode == "oblique" and not body.bounded:
            raise ConfigError("rule violated: oblique reflection requires a bounded body "
                              f"(body.kind = {body.kind!r} is unbounded)")
    if mode == "oblique":
        field = _field(cfg.get("oblique", {}), space)
    if mode == "skew":
        if "layering" not in cfg:
            raise ConfigError("rule violated: skew mode requires a [layering] section")
        layering = _layering(cfg["layering"], space)
    dsec = cfg.get("drift", {})
    drift = _drift(dsec, space, body)
    girsanov = bool(dsec.get("girsanov", False))
    if girsanov and drift is None:
        raise ConfigError("rule violated: drift.girsanov needs a drift of kind constant or preset")
    if girsanov and mode in ("skew", "free"):
        raise ConfigError("rule violated: Girsanov reweighting is supported in normal and oblique modes")
    if drift is not None and not math.isfinite(drift.bound):
        raise ConfigError("rule violated: drift must be bounded with a declared bound")
    model = Model(space, mode, body=body, field=field, layering=layering,
                  drift=None if girsanov else drift, target=drift if girsanov else None)
    st = cfg.get("step", {})
    known = {"dt", "t_end", "scheme", "penalization_strength", "record_stride", "burn_in",
             "skew_bridge", "lt_band", "normal_norm", "exact_free"}
    unknown = set(st) - known
    if unknown:
        raise ConfigError(f"unknown step keys: {sorted(unknown)}")
    step = StepConfig(**st)
    if step.scheme == "penalize" and mode not in ("normal",):
        raise ConfigError("rule violated: the penalize scheme applies to normal mode only")
    n_paths = int(cfg.get("n_paths", 1))
    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    ssec = cfg.get("start", {})
    kind = ssec.get("kind", "stationary")
    if kind == "stationary":
        start = "stationary"
    elif kind == "point":
        start = _vector(ssec, "point", "start")
        if start.size != space.dim:
            raise ConfigError(f"start.point needs {space.dim} entries")
        if body is not None and step.scheme == "project" and body.level(start) > 1.0 + 1e-8:
            raise ConfigError("rule violated: start.point must lie in the body")
    else:
        raise ConfigError(f"start.kind must be stationary or point, got {kind!r}")
    workers = cfg.get("workers")
    out = cfg.get("output", {})
    return Experiment(model, step, int(cfg.get("seed", 0)), n_paths, start,
                      None if workers is None else int(workers), str(out.get("dir", "reflou_out")),
                      bool(out.get("trajectories", True)), cfg)
