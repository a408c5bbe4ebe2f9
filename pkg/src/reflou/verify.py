"""Monte Carlo checks of the Gaussian integration-by-parts identities and of
path-level properties of the reflected processes.

Every check returns a :class:`CheckReport`.  The two sides of an identity are
estimated from independent random streams so that the z-score is honest.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import gaussian
from .dynamics import Model, PathBatch, StepConfig, simulate, stationary_start
from .geometry import (ConvexBody, Ellipsoid, HalfSpace, SkewLayering, exterior_normal,
                       sample_surface)
from .girsanov import novikov_bound, raw_mean, weighted_mean, weights_from_batch
from .oblique import ObliqueField, beta_mu_A
from .spectral import SpectralSpace, sample_mu

__all__ = [
    "CheckReport",
    "make_report",
    "ScalarFunction",
    "ibp_normal",
    "ibp_oblique",
    "ibp_skew",
    "boundary_mass",
    "reference_mass",
    "revuz_rate",
    "qv_check",
    "cross_variation_check",
    "occupation_check",
    "compare_occupation",
    "ratio_check",
    "contraction_check",
    "girsanov_checks",
    "write_reports",
    "CSV_FIELDS",
]

Z_THRESHOLD = 3.0
SE_FLOOR = 1e-12
CSV_FIELDS = ("name", "lhs", "rhs", "std_error", "z_score", "pass", "tolerance")


@dataclass
class CheckReport:
    name: str
    lhs: float
    rhs: float
    std_error: float
    z_score: float
    passed: bool
    tolerance: float = 0.0
    details: dict = field(default_factory=dict)

    def row(self) -> list[str]:
        return [self.name, _fmt(self.lhs), _fmt(self.rhs), _fmt(self.std_error),
                _fmt(self.z_score), "true" if self.passed else "false", _fmt(self.tolerance)]


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def make_report(name: str, lhs: float, rhs: float, std_error: float, tolerance: float = 0.0,
                threshold: float = Z_THRESHOLD, relation: str = "eq", **details) -> CheckReport:
    """Build a report.

    ``relation="eq"`` passes when ``|lhs - rhs| <= threshold * se + tolerance``;
    ``relation="le"`` passes when ``lhs <= rhs + threshold * se + tolerance``.
    The standard error is floored at ``SE_FLOOR * max(1, |rhs|)``.
    """
    se = max(float(std_error), SE_FLOOR * max(1.0, abs(rhs)))
    diff = float(lhs) - float(rhs)
    z = diff / se
    if relation == "eq":
        ok = abs(diff) <= threshold * se + tolerance
    elif relation == "le":
        ok = diff <= threshold * se + tolerance
        z = max(z, 0.0)
    else:
        raise ValueError(f"unknown relation {relation!r}")
    return CheckReport(name, float(lhs), float(rhs), se, float(z), bool(ok), float(tolerance),
                       dict(details))


def write_reports(reports, out, comments=()) -> None:
    """CSV with one row per check; ``comments`` become leading ``#`` lines."""
    own = isinstance(out, (str, bytes)) or hasattr(out, "__fspath__")
    fh = open(out, "w", newline="") if own else out
    try:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in reports:
            w.writerow(r.row())
    finally:
        if own:
            fh.close()


def reports_to_csv(reports, comments=()) -> str:
    buf = io.StringIO()
    write_reports(reports, buf, comments)
    return buf.getvalue()


# -- test functions ----------------------------------------------------------

class ScalarFunction:
    """Smooth test function with gradient: ``one``, ``coord`` (x_k) or ``sine`` (sin x_k)."""

    def __init__(self, kind: str, dim: int, k: int = 0):
        if kind not in ("one", "coord", "sine"):
            raise ValueError(f"unknown test function {kind!r}")
        if not 0 <= k < dim:
            raise ValueError("coordinate index out of range")
        self.kind, self.dim, self.k = kind, int(dim), int(k)

    def __call__(self, x):
        x = np.atleast_2d(x)
        if self.kind == "one":
            return np.ones(len(x))
        if self.kind == "coord":
            return x[:, self.k].copy()
        return np.sin(x[:, self.k])

    def grad(self, x):
        x = np.atleast_2d(x)
        out = np.zeros_like(x)
        if self.kind == "coord":
            out[:, self.k] = 1.0
        elif self.kind == "sine":
            out[:, self.k] = np.cos(x[:, self.k])
        return out

    def __repr__(self):
        return f"{self.kind}" if self.kind == "one" else f"{self.kind}{self.k + 1}"


def _seeds(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _mc_mean(space, rng, integrand, n: int, chunk: int = 200_000):
    """Mean and SE of ``integrand(x)`` under ``mu`` from ``n`` draws."""
    s1 = s2 = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        vals = integrand(sample_mu(space, rng, m))
        s1 += float(vals.sum())
        s2 += float((vals * vals).sum())
        done += m
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return mean, math.sqrt(var / n)


def _inside(body, x):
    if body is None:
        return np.ones(len(x))
    return (body._level(x) <= 1.0).astype(float)


def _surface_term(body, space, rng, integrand, n_hits, shell_eps):
    surf = sample_surface(body, space, rng, shell_eps=shell_eps, n_hits=n_hits)
    return surf.integrate(integrand(surf.points))


# -- integration by parts ----------------------------------------------------------

def ibp_normal(space: SpectralSpace, body: ConvexBody | None, l, g: ScalarFunction,
               seed: int = 0, n_volume: int = 1_000_000, n_surface: int = 100_000,
               shell_eps: float = 1e-2, name: str | None = None) -> CheckReport:
    """``-1/2 int_G <l, Dg> dmu`` against the volume and boundary terms."""
    l = np.asarray(l, dtype=float)
    r_lhs, r_vol, r_surf = _seeds(seed, 3)
    al = space.eigenvalues * l
    lhs, se_l = _mc_mean(space, r_lhs, lambda x: -0.5 * _inside(body, x) * (g.grad(x) @ l), n_volume)
    vol, se_v = _mc_mean(space, r_vol, lambda x: -_inside(body, x) * g(x) * (x @ al), n_volume)
    surf = se_s = 0.0
    if body is not None:
        surf, se_s = _surface_term(
            body, space, r_surf,
            lambda p: -0.5 * g(p) * (exterior_normal(body, p) @ l), n_surface, shell_eps)
    se = math.sqrt(se_l**2 + se_v**2 + se_s**2)
    return make_report(name or f"ibp_normal[d={space.dim},g={g!r}]", lhs, vol + surf, se,
                       volume_term=vol, surface_term=surf)


def ibp_oblique(space: SpectralSpace, body: ConvexBody, field: ObliqueField, l,
                g: ScalarFunction, seed: int = 0, n_volume: int = 1_000_000,
                n_surface: int = 100_000, shell_eps: float = 1e-2,
                name: str | None = None) -> CheckReport:
    """``-1/2 int_G <A l, Dg> dmu`` against ``int <l, A eta> g dS/2 + int <l, beta> g dmu``."""
    if not body.bounded:
        raise ValueError("oblique identity needs a bounded body")
    l = np.asarray(l, dtype=float)
    r_lhs, r_vol, r_surf = _seeds(seed, 3)

    def lhs_f(x):
        al = field.matrix(x) @ l
        return -0.5 * _inside(body, x) * np.sum(al * g.grad(x), axis=-1)

    def vol_f(x):
        return _inside(body, x) * g(x) * (beta_mu_A(field, space, x) @ l)

    def surf_f(p):
        eta = exterior_normal(body, p)
        a_eta = np.einsum("nij,nj->ni", field.matrix(p), eta)
        return 0.5 * g(p) * (a_eta @ l)

    lhs, se_l = _mc_mean(space, r_lhs, lhs_f, n_volume)
    vol, se_v = _mc_mean(space, r_vol, vol_f, n_volume)
    surf, se_s = _surface_term(body, space, r_surf, surf_f, n_surface, shell_eps)
    se = math.sqrt(se_l**2 + se_v**2 + se_s**2)
    return make_report(name or f"ibp_oblique[d={space.dim},g={g!r}]", lhs, vol + surf, se,
                       volume_term=vol, surface_term=surf)


def ibp_skew(space: SpectralSpace, layering: SkewLayering, l, g: ScalarFunction, seed: int = 0,
             n_volume: int = 1_000_000, n_surface: int = 100_000, shell_eps: float = 1e-2,
             name: str | None = None) -> CheckReport:
    """``-1/2 int <l, Dg> rho dmu`` against the weighted volume and membrane terms."""
    l = np.asarray(l, dtype=float)
    K = layering.n_membranes
    rngs = _seeds(seed, 2 + K)
    al = space.eigenvalues * l
    lhs, se_l = _mc_mean(space, rngs[0], lambda x: -0.5 * layering.rho(x) * (g.grad(x) @ l), n_volume)
    vol, se_v = _mc_mean(space, rngs[1], lambda x: -layering.rho(x) * g(x) * (x @ al), n_volume)
    surf, var_s = 0.0, 0.0
    for k, body in enumerate(layering.bodies):
        jump = layering.gammas[k + 1] - layering.gammas[k]
        if jump == 0:
            continue
        val, se = _surface_term(body, space, rngs[2 + k],
                                lambda p, b=body: 0.5 * g(p) * (exterior_normal(b, p) @ l),
                                n_surface, shell_eps)
        surf += jump * val
        var_s += (jump * se) ** 2
    se = math.sqrt(se_l**2 + se_v**2 + var_s)
    return make_report(name or f"ibp_skew[d={space.dim},K={K},g={g!r}]", lhs, vol + surf, se,
                       volume_term=vol, surface_term=surf)


# -- masses ------------------------------------------------------------------------

def boundary_mass(body: ConvexBody, space: SpectralSpace, rng=None, **kw) -> tuple[float, float]:
    """Gaussian surface mass of the boundary with a standard error.

    Closed forms for half-spaces and one-dimensional intervals, polar
    quadrature for two-dimensional ellipses, shell sampling otherwise.
    """
    var = space.covariance
    if isinstance(body, HalfSpace):
        s2 = float(np.sum(body.n**2 * var))
        c = body.offset / math.sqrt(body._n2)
        return gaussian.pdf(c, s2 / body._n2), 0.0
    if isinstance(body, Ellipsoid) and space.dim == 1:
        r = float(body.semiaxes[0])
        return 2.0 * gaussian.pdf(r, float(var[0])), 0.0
    if isinstance(body, Ellipsoid) and space.dim == 2:
        a, b = body.semiaxes
        v1, v2 = var

        def integrand(t):
            x, y = a * math.cos(t), b * math.sin(t)
            speed = math.hypot(a * math.sin(t), b * math.cos(t))
            return gaussian.pdf(x, v1) * gaussian.pdf(y, v2) * speed

        val, _ = integrate.quad(integrand, 0.0, 2 * math.pi, epsabs=1e-13, epsrel=1e-12, limit=200)
        return val, 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    return sample_surface(body, space, rng, **kw).mass()


def reference_mass(model: Model, rng=None, n: int = 1_000_000) -> tuple[float, float]:
    """Total mass of ``mu`` on the body, or of ``rho dmu`` in skew mode."""
    space = model.space
    rng = rng if rng is not None else np.random.default_rng(0)
    if model.mode == "skew":
        lay = model.layering
        if space.dim == 1 and len(lay.bodies) == 1 and isinstance(lay.bodies[0], HalfSpace):
            b = lay.bodies[0]
            c = b.offset / b.n[0]
            p_in = gaussian.cdf(c, float(space.covariance[0]))
            if b.n[0] < 0:
                p_in = 1.0 - p_in
            return lay.gammas[0] * p_in + lay.gammas[1] * (1 - p_in), 0.0
        return _mc_mean(space, rng, lay.rho, n)
    if model.mode in ("normal", "oblique"):
        body = model.body
        if isinstance(body, Ellipsoid) and space.dim == 1:
            r = float(body.semiaxes[0])
            return gaussian.interval_mass(-r, r, float(space.covariance[0])), 0.0
        if isinstance(body, HalfSpace):
            s2 = float(np.sum(body.n**2 * space.covariance))
            return gaussian.cdf(body.offset / math.sqrt(s2)), 0.0
        return _mc_mean(space, rng, lambda x: _inside(body, x), n)
    return 1.0, 0.0


# -- local time -----------------------------------------------------------------------

def revuz_rate(model: Model, config: StepConfig, seed: int, n_paths: int,
               windows=(0.5, 1.0, 2.0), workers: int | None = None, boundary: int = 0,
               batch: PathBatch | None = None) -> list[CheckReport]:
    """Stationary local-time rate times the reference mass against the surface mass.

    The first report is the long-run estimate from the whole horizon.  The
    others compare ``E[L_w] / w`` over the initial window ``[0, w]`` (which
    is stationary by construction of the start) with the long-run rate.
    In skew mode the target is the symmetric value times the surface mass.
    """
    if batch is None:
        batch = simulate(model, config, seed, n_paths, start="stationary", workers=workers)
    key = model.boundary_ids[boundary]
    total = batch.local_total[key]
    T = batch.t_end
    rates = total / T
    rate = float(rates.mean())
    rate_se = float(rates.std(ddof=1) / math.sqrt(len(rates)))
    mass, mass_se = reference_mass(model, np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1]))
    if model.mode == "skew":
        body = model.layering.bodies[boundary]
        factor = model.layering.symmetric_value(boundary)
    else:
        body = model.body
        factor = 1.0
    bm, bm_se = boundary_mass(body, model.space, np.random.default_rng(
        np.random.SeedSequence(seed).spawn(3)[2]))
    rhs = factor * bm
    lhs = mass * rate
    se = math.sqrt((mass * rate_se) ** 2 + (rate * mass_se) ** 2 + (factor * bm_se) ** 2)
    reports = [make_report(f"revuz_rate[{key}]", lhs, rhs, se, rate=rate, rate_se=rate_se,
                           mass=mass, target_rate=rhs / mass)]
    rec_dt = batch.times[1] - batch.times[0] if len(batch.times) > 1 else T
    for w in windows:
        n_int = int(round(w / rec_dt))
        if n_int < 1 or abs(n_int * rec_dt - w) > 1e-9 * max(w, 1.0) or n_int > batch.local_time[key].shape[1]:
            continue
        lw = batch.local_time[key][:, :n_int].sum(axis=1) / w
        se_w = float(lw.std(ddof=1) / math.sqrt(len(lw)))
        reports.append(make_report(f"revuz_window[{key},t={w:g}]", float(lw.mean()), rate,
                                   math.hypot(se_w, rate_se)))
    return reports


# -- martingale part ---------------------------------------------------------------

def qv_check(batch: PathBatch, l, tolerance: float = 0.0, name: str | None = None) -> CheckReport:
    """Realized bracket of ``<l, M>`` per unit time against ``|l|^2``."""
    if batch.qv is None:
        raise ValueError("batch was simulated without quadratic-variation tracking")
    l = np.asarray(l, dtype=float)
    per_path = np.einsum("i,nij,j->n", l, batch.qv, l) / batch.t_end
    mean, se = raw_mean(per_path)
    return make_report(name or f"qv[l={_vec(l)}]", mean, float(l @ l), se, tolerance)


def cross_variation_check(batch: PathBatch, i: int, j: int, tolerance: float = 0.0) -> CheckReport:
    per_path = batch.qv[:, i, j] / batch.t_end
    mean, se = raw_mean(per_path)
    return make_report(f"cross_variation[{i + 1},{j + 1}]", mean, 0.0, se, tolerance)


def _vec(v):
    return "(" + " ".join(format(float(a), ".4g") for a in v) + ")"


# -- stationary laws -----------------------------------------------------------------

def occupation_means(batch: PathBatch, name: str) -> np.ndarray:
    """Per-path time averages of an observable after burn-in, shape ``(n, k)``."""
    return batch.occupation[name] / batch.occupation_time


def occupation_check(batch: PathBatch, name: str, target, component: int = 0,
                     tolerance: float = 0.0, label: str | None = None) -> CheckReport:
    vals = occupation_means(batch, name)[:, component]
    mean, se = raw_mean(vals)
    return make_report(label or f"occupation[{name}]", mean, float(target), se, tolerance)


def compare_occupation(batch_a: PathBatch, batch_b: PathBatch, name: str, component: int = 0,
                       label: str | None = None) -> CheckReport:
    a, se_a = raw_mean(occupation_means(batch_a, name)[:, component])
    b, se_b = raw_mean(occupation_means(batch_b, name)[:, component])
    return make_report(label or f"compare[{name}]", a, b, math.hypot(se_a, se_b))


def ratio_check(batch: PathBatch, name: str, num: int, den: int, target: float,
                rel_tolerance: float = 0.0, label: str | None = None) -> CheckReport:
    """Ratio of two occupation components with a delta-method SE."""
    occ = occupation_means(batch, name)
    a, b = occ[:, num], occ[:, den]
    r = a.mean() / b.mean()
    n = len(a)
    se = float(np.std(a - r * b, ddof=1) / math.sqrt(n) / b.mean())
    return make_report(label or f"ratio[{name}]", float(r), target, se,
                       tolerance=rel_tolerance * abs(target))


# -- contraction ----------------------------------------------------------------------

def contraction_check(model: Model, config: StepConfig, seed: int, n_pairs: int,
                      alpha: float, c: float = 10.0, starts=None, name: str | None = None,
                      workers: int | None = None) -> CheckReport:
    """Same-noise pairs from distinct starts against ``e^{alpha t} |X_0 - Y_0| (1 + c dt max a)``.

    Both members of a pair read the same noise stream; only the starts
    differ.  The report's lhs is the largest ratio of the distance to the
    bound over all pairs and recorded times after the start, and passes
    when it is <= 1.
    """
    idx = np.arange(n_pairs)
    if starts is None:
        x0 = stationary_start(model, seed, idx)
        y0 = stationary_start(model, seed, idx + n_pairs)
    else:
        x0, y0 = (np.asarray(s, dtype=float) for s in starts)
    batch = simulate(model, config, seed, 2 * n_pairs, start=np.vstack([x0, y0]),
                     indices=np.concatenate([idx, idx]), workers=workers)
    xs, ys = batch.states[:n_pairs], batch.states[n_pairs:]
    dist = np.sqrt(np.sum((xs - ys) ** 2, axis=-1))
    d0 = dist[:, :1]
    slack = 1.0 + c * config.dt * model.space.max_eigenvalue
    bound = np.exp(alpha * batch.times)[None, :] * d0 * slack
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, dist / bound, np.where(dist > 0, np.inf, 0.0))
    worst = float(ratio[:, 1:].max()) if ratio.shape[1] > 1 else float(ratio.max())
    return make_report(name or f"contraction[alpha={alpha:g}]", worst, 1.0, 0.0, relation="le",
                       threshold=0.0, mean_ratio=float(ratio[:, -1].mean()))


# -- Girsanov ---------------------------------------------------------------------------

def girsanov_checks(base: Model, direct: Model, config: StepConfig, seed: int, n_paths: int,
                    f=None, start=None, workers: int | None = None,
                    ess_floor: float = 0.0) -> list[CheckReport]:
    """Mean-one, reweighted-versus-direct and Novikov checks.

    ``base`` carries the Girsanov ``target``; ``direct`` simulates the target
    drift itself.  The two runs use independent seeds.
    """
    if base.target is None:
        raise ValueError("base model needs a target drift")
    if f is None:
        f = _first_coordinate
    s_base, s_direct = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    start = np.zeros(base.space.dim) if start is None else start
    b = simulate(base, config, s_base, n_paths, start=start, workers=workers, record=False)
    d = simulate(direct, config, s_direct, n_paths, start=start, workers=workers, record=False)
    w = weights_from_batch(b)
    mean_w, se_w = raw_mean(w)
    reports = [make_report("girsanov_mean_weight", mean_w, 1.0, se_w)]
    est = weighted_mean(w, f(b.final), ess_floor)
    direct_mean, direct_se = raw_mean(f(d.final))
    reports.append(make_report("girsanov_reweighted_vs_direct", est.estimate, direct_mean,
                               math.hypot(est.std_error, direct_se), ess=est.ess,
                               ess_flagged=est.flagged))
    sup = base.target.bound + base.drift.bound
    nb = novikov_bound(sup, b.t_end)
    eq, se_q = raw_mean(np.exp(0.5 * b.girsanov_qv))
    reports.append(make_report("girsanov_novikov", eq, nb, se_q, relation="le"))
    return reports


def _first_coordinate(x):
    return np.asarray(x)[:, 0]
