"""Built-in verification suites behind ``reflou verify``.

Each suite builds its own models, runs the checks at one of two scales and
returns a list of reports.  ``quick`` finishes in seconds and is meant for
smoke runs; ``full`` uses the sample sizes of the acceptance tests.
"""
from __future__ import annotations

import math

import numpy as np

from . import gaussian
from .drifts import ConstantDrift, PerturbedLinearDrift
from .dynamics import Model, StepConfig, simulate
from .geometry import Ellipsoid, HalfSpace, make_layering
from .oblique import constant_field
from .spectral import dirichlet_preset, make_space
from .verify import (ScalarFunction, compare_occupation, contraction_check,
                     cross_variation_check, girsanov_checks, ibp_normal, ibp_oblique, ibp_skew,
                     occupation_check, qv_check, ratio_check, revuz_rate)

__all__ = ["SUITES", "run_suite", "SCALES"]

SCALES = ("quick", "full")


def _sizes(scale, quick, full):
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}")
    return quick if scale == "quick" else full


def _sub(seed, k):
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def moment_observable(x):
    """First and second moments of every coordinate."""
    return np.concatenate([x, x * x], axis=1)


class HalfLineBins:
    """Indicators of ``x_1 < 0`` and of the two bins ``(-h, 0)`` and ``[0, h)``."""

    def __init__(self, h: float):
        self.h = h

    def __call__(self, x):
        x1 = x[:, 0]
        return np.stack([x1 < 0, (x1 > -self.h) & (x1 < 0), (x1 >= 0) & (x1 < self.h)],
                        axis=1).astype(float)


def disk_setup():
    space = make_space([1.0, 2.0])
    return space, Ellipsoid([1.0, 1.0])


def scaled_ellipsoid(space, factor=1.0):
    """Ellipsoid whose boundary sits where ``mu`` has most of its mass."""
    return Ellipsoid(factor * math.sqrt(space.dim) * space.std)


def skew_half_line(p=0.7, alpha=2.0):
    space = make_space([alpha])
    lay = make_layering([HalfSpace([1.0], 0.0)], [(1 - p) / p, 1.0])
    return space, lay


# -- suites -------------------------------------------------------------------------

def suite_ibp(scale="quick", seed=0, workers=None, dims=None):
    n_vol, n_surf = _sizes(scale, (200_000, 20_000), (1_000_000, 100_000))
    dims = dims or _sizes(scale, (1, 2), (1, 2, 8))
    out = []
    k = 0
    for d in dims:
        k += 10
        if d == 1:
            space = make_space([1.0])
            half = HalfSpace([1.0], 0.0)
            out.append(ibp_normal(space, half, [1.0], ScalarFunction("one", 1), _sub(seed, k),
                                  n_vol, n_surf, name="ibp_normal[d=1,half-line,g=one]"))
            out.append(ibp_normal(space, Ellipsoid([1.0]), [1.0], ScalarFunction("sine", 1),
                                  _sub(seed, k + 1), n_vol, n_surf))
            # the only antisymmetric 1x1 matrix is zero
            out.append(ibp_oblique(space, Ellipsoid([1.0]), constant_field(1, []), [1.0],
                                   ScalarFunction("coord", 1), _sub(seed, k + 2), n_vol, n_surf))
            sp, lay = skew_half_line(0.7, 1.0)
            out.append(ibp_skew(sp, lay, [1.0], ScalarFunction("one", 1), _sub(seed, k + 3),
                                n_vol, n_surf, name="ibp_skew[d=1,p=0.7,g=one]"))
            continue
        if d == 2:
            space, body = disk_setup()
            inner = Ellipsoid([0.5, 0.5])
            field = constant_field(2, [1.0])
        else:
            space = dirichlet_preset(d, 0.5) if d > 2 else make_space(np.arange(1, d + 1))
            body = scaled_ellipsoid(space)
            inner = scaled_ellipsoid(space, 0.7)
            upper = 0.5 * np.ones(d * (d - 1) // 2)
            field = constant_field(d, upper)
        e1 = np.eye(d)[0]
        mixed = np.ones(d) / math.sqrt(d)
        out.append(ibp_normal(space, body, e1, ScalarFunction("coord", d, 0), _sub(seed, k),
                              n_vol, n_surf))
        out.append(ibp_normal(space, body, mixed, ScalarFunction("sine", d, 1), _sub(seed, k + 1),
                              n_vol, n_surf))
        out.append(ibp_oblique(space, body, field, e1, ScalarFunction("coord", d, 1),
                               _sub(seed, k + 2), n_vol, n_surf))
        out.append(ibp_oblique(space, body, field, e1, ScalarFunction("one", d),
                               _sub(seed, k + 3), n_vol, n_surf))
        lay = make_layering([inner, body], [1.0, 2.0, 2.0], space=space)
        out.append(ibp_skew(space, lay, e1, ScalarFunction("coord", d, 0), _sub(seed, k + 4),
                            n_vol, n_surf))
    return out


def suite_revuz(scale="quick", seed=0, workers=None):
    dt, T, n = _sizes(scale, (1e-3, 20.0, 100), (1e-4, 200.0, 200))
    space = make_space([0.5])
    model = Model(space, "normal", body=Ellipsoid([1.0]))
    cfg = StepConfig(dt=dt, t_end=T, record_stride=int(round(0.5 / dt)))
    out = revuz_rate(model, cfg, _sub(seed, 1), n, workers=workers)
    sp, lay = skew_half_line(0.7, 2.0)
    skew = Model(sp, "skew", layering=lay)
    cfg = StepConfig(dt=dt, t_end=T / 2, record_stride=int(round(0.5 / dt)), lt_band=0.05)
    out += revuz_rate(skew, cfg, _sub(seed, 2), n, windows=(), workers=workers)
    return out


def qv_reports(batch, dt, max_alpha, d):
    tol = 5 * dt * max_alpha
    e = np.eye(d)
    out = [qv_check(batch, e[0], tol), qv_check(batch, 2 * e[0], tol),
           qv_check(batch, (e[0] + e[1]) / math.sqrt(2), tol),
           cross_variation_check(batch, 0, 1, tol)]
    return out


def suite_qv(scale="quick", seed=0, workers=None, space=None, body=None):
    T, n = _sizes(scale, (2.0, 200), (10.0, 1000))
    dt = 1e-3
    if space is None:
        space, body = disk_setup()
    model = Model(space, "normal", body=body)
    cfg = StepConfig(dt=dt, t_end=T, record_stride=int(round(T / dt)))
    batch = simulate(model, cfg, _sub(seed, 1), n, workers=workers, track_qv=True, record=False)
    return qv_reports(batch, dt, space.max_eigenvalue, space.dim)


def suite_stationary(scale="quick", seed=0, workers=None):
    out = []
    # truncated second moment on [-1, 1] for alpha = 1/2
    # the projection scheme's stationary law carries an O(sqrt(dt)) boundary bias,
    # about 0.009 at dt = 1e-3 and 0.0016 at dt = 1e-4, hence the small step
    dt, T, n = _sizes(scale, (1e-4, 10.0, 100), (1e-4, 50.0, 200))
    space = make_space([0.5])
    cfg = StepConfig(dt=dt, t_end=T, burn_in=2.0, record_stride=int(round(T / dt)))
    b = simulate(Model(space, "normal", body=Ellipsoid([1.0])), cfg, _sub(seed, 1), n,
                 workers=workers, observables={"m": moment_observable}, record=False)
    out.append(occupation_check(b, "m", gaussian.truncated_second_moment(-1.0, 1.0), component=1,
                                label="stationary_second_moment[normal,d=1]"))
    # skew half-line, p = 0.7
    dt, T, n = _sizes(scale, (1e-3, 20.0, 200), (1e-4, 20.0, 1000))
    sp, lay = skew_half_line(0.7, 2.0)
    cfg = StepConfig(dt=dt, t_end=T, burn_in=0.0, record_stride=int(round(T / dt)))
    b = simulate(Model(sp, "skew", layering=lay), cfg, _sub(seed, 2), n, workers=workers,
                 observables={"bins": HalfLineBins(0.05)}, record=False)
    out.append(occupation_check(b, "bins", 0.3, component=0, label="stationary_negative_mass[skew,p=0.7]"))
    out.append(ratio_check(b, "bins", 1, 2, 3 / 7, label="stationary_density_ratio[skew,p=0.7]"))
    # oblique against normal reflection on the disk
    T, n = _sizes(scale, (10.0, 100), (20.0, 400))
    space, disk = disk_setup()
    cfg = StepConfig(dt=1e-3, t_end=T, burn_in=2.0, record_stride=int(round(T / 1e-3)))
    obs = {"m": moment_observable}
    a = simulate(Model(space, "oblique", body=disk, field=constant_field(2, [1.0])), cfg,
                 _sub(seed, 3), n, workers=workers, observables=obs, record=False)
    c = simulate(Model(space, "normal", body=disk), cfg, _sub(seed, 4), n, workers=workers,
                 observables=obs, record=False)
    labels = ["E[x1]", "E[x2]", "E[x1^2]", "E[x2^2]"]
    for j, lab in enumerate(labels):
        out.append(compare_occupation(a, c, "m", j, label=f"oblique_vs_normal[{lab}]"))
    return out


def suite_girsanov(scale="quick", seed=0, workers=None):
    n = _sizes(scale, 2000, 10_000)
    space, disk = disk_setup()
    B = ConstantDrift([0.5, 0.0])
    cfg = StepConfig(dt=1e-3, t_end=1.0, record_stride=1000)
    out = []
    base = Model(space, "normal", body=disk, target=B)
    direct = Model(space, "normal", body=disk, drift=B)
    for r in girsanov_checks(base, direct, cfg, _sub(seed, 1), n, workers=workers):
        r.name = r.name + "[normal]"
        out.append(r)
    field = constant_field(2, [1.0])
    base = Model(space, "oblique", body=disk, field=field, target=B)
    direct = Model(space, "oblique", body=disk, field=field, drift=B)
    for r in girsanov_checks(base, direct, cfg, _sub(seed, 2), n, workers=workers):
        r.name = r.name + "[oblique]"
        out.append(r)
    return out


def suite_contraction(scale="quick", seed=0, workers=None):
    n = _sizes(scale, 200, 1000)
    space, disk = disk_setup()
    cfg = StepConfig(dt=1e-3, t_end=1.0, record_stride=1)
    out = [contraction_check(Model(space, "normal", body=disk), cfg, _sub(seed, 1), n, 0.0,
                             name="contraction[B=0,alpha=0]", workers=workers)]
    drift = PerturbedLinearDrift(2, -0.5, 1.0, radius=1.0)
    out.append(contraction_check(Model(space, "normal", body=disk, drift=drift), cfg, _sub(seed, 2),
                                 n, 1.0, name="contraction[perturbed,alpha=1]", workers=workers))
    return out


SUITES = {
    "ibp": suite_ibp,
    "revuz": suite_revuz,
    "qv": suite_qv,
    "stationary": suite_stationary,
    "girsanov": suite_girsanov,
    "contraction": suite_contraction,
}


def run_suite(name: str, scale: str = "quick", seed: int = 0, workers=None, progress=None):
    names = list(SUITES) if name == "all" else [name]
    out = []
    for nm in names:
        if nm not in SUITES:
            raise KeyError(f"unknown check set {nm!r}")
        if progress:
            progress(f"running {nm} checks ({scale})")
        out += SUITES[nm](scale=scale, seed=seed, workers=workers)
    return out
