"""Euler schemes for reflected, obliquely reflected and skew OU processes.

All step functions work on one point ``(d,)`` or a batch ``(n, d)``.  The
engine :func:`run_paths` advances a batch of paths in lock step, drawing the
noise of path ``i`` from its own counter-based stream so that every path is a
pure function of ``(seed, i)``.

Local time follows the convention of an SDE carrying ``1/2 * direction * dL``:
the projection scheme sets ``dL = 2 * |Y - proj(Y)|``.
"""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .drifts import BetaMuADrift, Drift, ZeroDrift
from .geometry import TOL_BOUNDARY, ConvexBody, SkewLayering
from .oblique import ObliqueField
from .spectral import SpectralSpace, exact_ou_step, sample_mu
from .streams import PathStreams, start_generator

__all__ = [
    "StepConfig",
    "Model",
    "PathSample",
    "PathBatch",
    "ObliqueSolverError",
    "step_reflect_normal",
    "step_reflect_oblique",
    "step_skew",
    "step_penalized",
    "stationary_start",
    "run_paths",
    "simulate",
    "default_workers",
]

MODES = ("free", "normal", "oblique", "skew")
OBLIQUE_TOL = 1e-10
OBLIQUE_MAXITER = 50
MAX_HALVINGS = 8
MEMBRANE_TOL = 1e-12
WORKERS_ENV = "REFLOU_WORKERS"


class ObliqueSolverError(RuntimeError):
    """The oblique reflection point could not be found; the step is too large."""

    def __init__(self, msg, mask=None):
        super().__init__(msg)
        self.mask = mask


@dataclass(frozen=True)
class StepConfig:
    dt: float
    t_end: float
    scheme: str = "project"
    penalization_strength: float | None = None
    record_stride: int = 1
    burn_in: float = 0.0
    skew_bridge: bool = False
    lt_band: float | None = None
    normal_norm: str = "H"
    exact_free: bool = False

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.dt > self.t_end:
            raise ValueError("dt must not exceed t_end")
        if self.scheme not in ("project", "penalize"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "penalize":
            s = self.penalization_strength
            if s is None or not s > 0:
                raise ValueError("penalize scheme needs a positive penalization_strength")
            if s * self.dt > 1:
                raise ValueError(f"penalization_strength*dt = {s * self.dt:.3g} > 1 is unstable")
        if int(self.record_stride) != self.record_stride or self.record_stride < 1:
            raise ValueError("record_stride must be a positive integer")
        if not 0 <= self.burn_in < self.t_end:
            raise ValueError("burn_in must lie in [0, t_end)")
        if self.normal_norm not in ("H", "H1star"):
            raise ValueError("normal_norm must be 'H' or 'H1star'")
        if self.lt_band is not None and not self.lt_band > 0:
            raise ValueError("lt_band must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def burn_steps(self) -> int:
        return int(round(self.burn_in / self.dt))

    @property
    def band(self) -> float:
        return self.lt_band if self.lt_band is not None else 10.0 * math.sqrt(self.dt)


@dataclass
class Model:
    """A process specification: space, mode, geometry and drifts.

    ``drift`` is added to ``-A x`` in the simulated dynamics.  In oblique mode
    it defaults to ``beta^{mu,A}``.  ``target`` is an optional drift whose law
    is reached by Girsanov reweighting of the simulated paths.
    """

    space: SpectralSpace
    mode: str = "normal"
    body: ConvexBody | None = None
    field: ObliqueField | None = None
    layering: SkewLayering | None = None
    drift: Drift | None = None
    target: Drift | None = None

    def __post_init__(self):
        d = self.space.dim
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode in ("normal", "oblique") and self.body is None:
            raise ValueError(f"{self.mode} mode needs a body")
        if self.body is not None and self.body.dim != d:
            raise ValueError("body dimension does not match the space")
        if self.mode == "oblique":
            if self.field is None:
                raise ValueError("oblique mode needs an oblique field")
            if self.field.dim != d:
                raise ValueError("field dimension does not match the space")
            if not self.body.bounded:
                raise ValueError("oblique reflection requires a bounded body")
            if self.drift is None:
                self.drift = BetaMuADrift(self.field, self.space, _radius(self.body))
        if self.mode == "skew":
            if self.layering is None:
                raise ValueError("skew mode needs a layering")
            if self.layering.dim != d:
                raise ValueError("layering dimension does not match the space")
        if self.drift is None:
            self.drift = ZeroDrift(d)
        for dr in (self.drift, self.target):
            if dr is not None and dr.dim != d:
                raise ValueError("drift dimension does not match the space")

    @property
    def boundary_ids(self) -> list[str]:
        if self.mode in ("normal", "oblique"):
            return ["boundary"]
        if self.mode == "skew":
            return [f"membrane_{k}" for k in range(self.layering.n_membranes)]
        return []

    def total_drift(self, x) -> np.ndarray:
        if isinstance(self.drift, ZeroDrift):
            return -self.space.eigenvalues * x
        return -self.space.eigenvalues * x + self.drift.checked(x)


def _radius(body) -> float:
    if hasattr(body, "radius"):
        return float(body.radius)
    return math.inf


# -- single steps ---------------------------------------------------------

def _as_batch(x):
    arr = np.asarray(x, dtype=float)
    return np.atleast_2d(arr), arr.ndim == 1


def step_reflect_normal(space: SpectralSpace, body: ConvexBody, x, dW, drift, dt: float):
    """Projection step; returns ``(new_state, dL)``."""
    xb, single = _as_batch(x)
    y = xb + np.asarray(drift, dtype=float) * dt + np.asarray(dW, dtype=float)
    p = body.project(y)
    r = y - p
    dL = 2.0 * np.sqrt(np.sum(r * r, axis=-1))
    return (p[0], float(dL[0])) if single else (p, dL)


def _oblique_dir(field, body, x):
    g = body._grad(x)
    nu = -g / np.sqrt(np.sum(g * g, axis=-1))[:, None]
    a = field.matrix(x)
    return nu + np.einsum("nji,nj->ni", a, nu)


def _solve_oblique(body, field, y, tol=OBLIQUE_TOL, max_iter=OBLIQUE_MAXITER):
    """Solve ``x = y + lam * v(x)`` on the boundary for rows of ``y`` outside.

    Fixed-point iteration seeded at the projection: evaluate the direction at
    the current boundary point and follow the ray from ``y`` back to the
    boundary.  Converged rows are frozen.  After ten undamped iterations the
    update is halved and pulled back to the boundary.
    """
    n = len(y)
    xs = body._project(y)
    lam = np.full(n, np.nan)
    ok = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for it in range(max_iter):
        v = _oblique_dir(field, body, xs[active])
        lam_a = body._ray_hit(y[active], v)
        x_new = y[active] + lam_a[:, None] * v
        step = np.sqrt(np.sum((x_new - xs[active]) ** 2, axis=-1))
        bad = ~np.isfinite(lam_a)
        done = (step <= tol) & ~bad
        lam[active[done]] = lam_a[done]
        ok[active[done]] = True
        keep = ~done & ~bad
        if it >= 10:
            x_new[keep] = body._to_boundary(0.5 * (x_new[keep] + xs[active[keep]]))
        xs[active[keep]] = x_new[keep]
        active = active[keep]
        if active.size == 0:
            break
    return xs, lam, ok


def step_reflect_oblique(space: SpectralSpace, body: ConvexBody, field: ObliqueField, x, dW,
                         drift, dt: float, tol: float = OBLIQUE_TOL,
                         max_iter: int = OBLIQUE_MAXITER):
    """Oblique reflection along ``nu + A^T nu``; returns ``(new_state, dL)``.

    Raises :class:`ObliqueSolverError` when the reflection point is not found.
    """
    if field.is_zero:
        return step_reflect_normal(space, body, x, dW, drift, dt)
    if not body.bounded:
        raise ValueError("oblique reflection requires a bounded body")
    xb, single = _as_batch(x)
    y = xb + np.asarray(drift, dtype=float) * dt + np.asarray(dW, dtype=float)
    out, dL, failed = _oblique_batch(body, field, y, tol, max_iter)
    if failed.any():
        raise ObliqueSolverError(f"oblique solver failed on {failed.sum()} point(s)", failed)
    return (out[0], float(dL[0])) if single else (out, dL)


def _oblique_batch(body, field, y, tol=OBLIQUE_TOL, max_iter=OBLIQUE_MAXITER):
    out = y.copy()
    dL = np.zeros(len(y))
    failed = np.zeros(len(y), dtype=bool)
    outside = np.flatnonzero(body._level(y) > 1.0)
    if outside.size:
        xs, lam, ok = _solve_oblique(body, field, y[outside], tol, max_iter)
        out[outside] = xs
        dL[outside] = 2.0 * lam
        failed[outside[~ok]] = True
    return out, dL, failed


def step_penalized(space: SpectralSpace, body: ConvexBody, x, dW, drift, dt: float,
                   strength: float):
    """Euler step with the penalty ``-strength * (x - proj(x))`` added to the drift."""
    if strength * dt > 1:
        raise ValueError(f"strength*dt = {strength * dt:.3g} > 1 is unstable")
    xb, single = _as_batch(x)
    pen = -strength * (xb - body.project(xb))
    out = xb + (np.asarray(drift, dtype=float) + pen) * dt + np.asarray(dW, dtype=float)
    return out[0] if single else out


def _mirror(y, point, normal):
    return y - 2.0 * np.sum((y - point) * normal, axis=-1)[:, None] * normal


def _resolve_crossing(body, x, y, u_k, p_k, t=None):
    """Apply the skew choice at one membrane for rows crossing it.

    Returns the adjusted end points and the crossing points.
    """
    if t is None:
        t = body._chord_crossing(x, y)
    xc = x + t[:, None] * (y - x)
    g = body._grad(xc)
    n = g / np.sqrt(np.sum(g * g, axis=-1))[:, None]
    y_out = np.sum((y - xc) * n, axis=-1) > 0
    want_out = u_k < p_k
    flip = y_out != want_out
    out = y.copy()
    if flip.any():
        out[flip] = _mirror(y[flip], xc[flip], n[flip])
    return out, xc


def step_skew(space: SpectralSpace, layering: SkewLayering, x, dW, drift, dt: float,
              rng: np.random.Generator | None = None, uniforms=None):
    """Skew step through membranes; returns ``(new_state, crossings)``.

    ``crossings`` counts, per membrane, whether it was crossed in this step.
    A path that stays on one side of every membrane moves to ``Y`` unchanged.
    A path crossing membrane ``k`` ends on the outer side with probability
    ``p_k``; the other side is reached by mirroring the overshoot across the
    tangent hyperplane at the crossing point.  Several crossings in one step
    are handled in chord order, each membrane at most once.
    """
    xb, single = _as_batch(x)
    y = xb + np.asarray(drift, dtype=float) * dt + np.asarray(dW, dtype=float)
    K = layering.n_membranes
    if uniforms is None:
        rng = rng if rng is not None else np.random.default_rng()
        uniforms = rng.random((len(xb), K))
    uniforms = np.atleast_2d(np.asarray(uniforms, dtype=float))
    out, cross = _skew_batch(layering, xb, y, uniforms)
    return (out[0], cross[0]) if single else (out, cross)


def _skew_batch(layering, x, y, uniforms):
    K = layering.n_membranes
    bodies = layering.bodies
    probs = np.array([layering.skew_prob(k) for k in range(K)])
    lev_x = np.stack([b._level(x) for b in bodies], axis=1)
    side_x = lev_x > 1.0
    side_y = np.stack([b._level(y) > 1.0 for b in bodies], axis=1)
    # a start exactly on a membrane counts as a crossing at t = 0
    on = np.abs(lev_x - 1.0) <= MEMBRANE_TOL
    crossed = (side_x != side_y) | on
    n_cross = crossed.sum(axis=1)
    out = y.copy()
    cross = np.zeros((len(x), K), dtype=np.int64)
    single_rows = n_cross == 1
    if single_rows.any():
        k_of = np.argmax(crossed, axis=1)
        for k in range(K):
            rows = np.flatnonzero(single_rows & (k_of == k))
            if rows.size == 0:
                continue
            t = np.zeros(rows.size)
            moving = ~on[rows, k]
            if moving.any():
                t[moving] = bodies[k]._chord_crossing(x[rows[moving]], y[rows[moving]])
            out[rows], _ = _resolve_crossing(bodies[k], x[rows], y[rows], uniforms[rows, k],
                                             probs[k], t=t)
            cross[rows, k] = 1
    for i in np.flatnonzero(n_cross > 1):
        out[i], cross[i] = _skew_sequential(bodies, probs, x[i], y[i], uniforms[i])
    return out, cross


def _skew_sequential(bodies, probs, x, y, u):
    start, end = x[None, :].copy(), y[None, :].copy()
    used = np.zeros(len(bodies), dtype=np.int64)
    for _ in range(len(bodies)):
        best_k, best_t = -1, 2.0
        for k, b in enumerate(bodies):
            if used[k]:
                continue
            ls, le = b._level(start)[0], b._level(end)[0]
            if abs(ls - 1.0) <= MEMBRANE_TOL and np.array_equal(start, x[None, :]):
                t = 0.0
            elif (ls > 1.0) != (le > 1.0):
                t = b._chord_crossing(start, end)[0]
            else:
                continue
            if t < best_t:
                best_k, best_t = k, t
        if best_k < 0:
            break
        end, xc = _resolve_crossing(bodies[best_k], start, end, u[best_k:best_k + 1],
                                    probs[best_k], t=np.array([best_t]))
        start = xc
        used[best_k] = 1
    return end[0], used


def _skew_bridge_hits(layering, x, y, dt, uniforms_hit):
    """Rows that touch a membrane between two same-side end points.

    For a Brownian bridge over one step the chance of touching a flat
    membrane at distances ``a`` and ``b`` is ``exp(-2 a b / dt)``.
    """
    hits = []
    for body in layering.bodies:
        da = np.abs(body._level(x) - 1.0) / np.sqrt(np.sum(body._grad(x) ** 2, axis=-1))
        db = np.abs(body._level(y) - 1.0) / np.sqrt(np.sum(body._grad(y) ** 2, axis=-1))
        same = (body._level(x) > 1.0) == (body._level(y) > 1.0)
        hits.append(same & (uniforms_hit < np.exp(-2.0 * da * db / dt)))
    return np.stack(hits, axis=1)


def _skew_bridge_resolve(layering, y, hits, uniforms):
    """Re-choose the side for paths whose bridge touched a membrane."""
    out = y.copy()
    cross = np.zeros(hits.shape, dtype=np.int64)
    for k, body in enumerate(layering.bodies):
        rows = np.flatnonzero(hits[:, k])
        if rows.size == 0:
            continue
        p_k = layering.skew_prob(k)
        yr = out[rows]
        xc = body._to_boundary(yr)
        g = body._grad(xc)
        n = g / np.sqrt(np.sum(g * g, axis=-1))[:, None]
        y_out = np.sum((yr - xc) * n, axis=-1) > 0
        flip = y_out != (uniforms[rows, k] < p_k)
        if flip.any():
            yr[flip] = _mirror(yr[flip], xc[flip], n[flip])
        out[rows] = yr
        cross[rows, k] = 1
    return out, cross


# -- path containers --------------------------------------------------------

@dataclass
class PathSample:
    """One recorded path."""

    index: int
    times: np.ndarray
    states: np.ndarray
    wiener_increments: np.ndarray
    local_time: dict
    crossings: dict
    girsanov_z: float | None = None
    girsanov_qv: float | None = None


@dataclass
class PathBatch:
    """Results for a batch of paths; arrays carry the path axis first."""

    indices: np.ndarray
    dt: float
    t_end: float
    times: np.ndarray
    states: np.ndarray | None          # (n, m, d)
    wiener: np.ndarray | None          # (n, m - 1, d) noise summed per record interval
    local_time: dict                   # id -> (n, m - 1) increments per record interval
    local_total: dict                  # id -> (n,)
    crossings: dict                    # id -> (n,)
    final: np.ndarray                  # (n, d)
    initial: np.ndarray                # (n, d)
    qv: np.ndarray | None = None       # (n, d, d) realized bracket of the martingale part
    girsanov_z: np.ndarray | None = None
    girsanov_qv: np.ndarray | None = None
    occupation: dict = field(default_factory=dict)   # name -> (n, ...) time integrals
    occupation_time: float = 0.0
    eq12_violation: np.ndarray | None = None
    multi_crossings: np.ndarray | None = None
    halvings: np.ndarray | None = None
    max_distance: np.ndarray | None = None   # (n, m) |X - Y| for coupled pairs, if tracked

    def __len__(self):
        return len(self.indices)

    def path(self, i: int) -> PathSample:
        return PathSample(
            index=int(self.indices[i]),
            times=self.times,
            states=None if self.states is None else self.states[i],
            wiener_increments=None if self.wiener is None else self.wiener[i],
            local_time={k: v[i] for k, v in self.local_time.items()},
            crossings={k: int(v[i]) for k, v in self.crossings.items()},
            girsanov_z=None if self.girsanov_z is None else float(self.girsanov_z[i]),
            girsanov_qv=None if self.girsanov_qv is None else float(self.girsanov_qv[i]),
        )

    @staticmethod
    def concat(parts: list) -> "PathBatch":
        first = parts[0]

        def cat(get):
            vals = [get(p) for p in parts]
            return None if vals[0] is None else np.concatenate(vals)

        return PathBatch(
            indices=cat(lambda p: p.indices),
            dt=first.dt,
            t_end=first.t_end,
            times=first.times,
            states=cat(lambda p: p.states),
            wiener=cat(lambda p: p.wiener),
            local_time={k: cat(lambda p: p.local_time[k]) for k in first.local_time},
            local_total={k: cat(lambda p: p.local_total[k]) for k in first.local_total},
            crossings={k: cat(lambda p: p.crossings[k]) for k in first.crossings},
            final=cat(lambda p: p.final),
            initial=cat(lambda p: p.initial),
            qv=cat(lambda p: p.qv),
            girsanov_z=cat(lambda p: p.girsanov_z),
            girsanov_qv=cat(lambda p: p.girsanov_qv),
            occupation={k: cat(lambda p: p.occupation[k]) for k in first.occupation},
            occupation_time=first.occupation_time,
            eq12_violation=cat(lambda p: p.eq12_violation),
            multi_crossings=cat(lambda p: p.multi_crossings),
            halvings=cat(lambda p: p.halvings),
        )


# -- starts ----------------------------------------------------------------------

def stationary_start(model: Model, seed: int, indices, max_tries: int = 100_000) -> np.ndarray:
    """Per-path draws from the invariant law by rejection.

    Reflection modes use ``mu`` restricted to the body; skew mode uses
    ``rho dmu`` normalized; free mode uses ``mu``.
    """
    space = model.space
    out = np.empty((len(indices), space.dim))
    if model.mode == "skew":
        gmax = float(model.layering.gammas.max())
    for r, idx in enumerate(indices):
        rng = start_generator(seed, idx)
        for _ in range(max_tries):
            cand = sample_mu(space, rng, 64)
            if model.mode in ("normal", "oblique"):
                ok = model.body._level(cand) <= 1.0
            elif model.mode == "skew":
                ok = rng.random(64) * gmax < model.layering.rho(cand)
            else:
                ok = np.ones(64, dtype=bool)
            hit = np.flatnonzero(ok)
            if hit.size:
                out[r] = cand[hit[0]]
                break
        else:
            raise RuntimeError("stationary start: acceptance rate too small")
    return out


# -- engine ---------------------------------------------------------------------

class _Stepper:
    """Advances a whole batch by one Euler step and reports its pieces."""

    def __init__(self, model: Model, config: StepConfig, streams: PathStreams):
        self.model = model
        self.cfg = config
        self.streams = streams
        self.space = model.space
        self.halvings = np.zeros(len(streams), dtype=np.int64)
        self.multi = np.zeros(len(streams), dtype=np.int64)

    def step(self, x, z, u):
        """Returns ``(x_new, drift, dW, reflection, dL (n, K) or None, cross or None)``."""
        m, cfg, dt = self.model, self.cfg, self.cfg.dt
        dW = z * math.sqrt(dt)
        b = m.total_drift(x)
        mode = m.mode
        if mode == "free":
            if cfg.exact_free and isinstance(m.drift, ZeroDrift):
                xn = exact_ou_step(self.space, x, z, dt)
                return xn, b, dW, xn - x - b * dt - dW, None, None
            return x + b * dt + dW, b, dW, 0.0, None, None
        if mode in ("normal", "oblique") and cfg.scheme == "penalize":
            pen = -cfg.penalization_strength * (x - m.body._project(x))
            xn = x + (b + pen) * dt + dW
            return xn, b, dW, pen * dt, None, None
        y = x + b * dt + dW
        if mode == "normal":
            p = m.body._project(y)
            refl = p - y
            dL = 2.0 * np.sqrt(np.sum(refl * refl, axis=-1))
            return p, b, dW, refl, dL[:, None], None
        if mode == "oblique":
            if m.field.is_zero:
                p = m.body._project(y)
                refl = p - y
                dL = 2.0 * np.sqrt(np.sum(refl * refl, axis=-1))
                return p, b, dW, refl, dL[:, None], None
            xn, dL, failed = _oblique_batch(m.body, m.field, y)
            refl = xn - y
            for r in np.flatnonzero(failed):
                xr, lr = self._halve(x[r:r + 1], dW[r:r + 1], dt, r, 1)
                xn[r], dL[r] = xr[0], lr
                refl[r] = xn[r] - y[r]
            return xn, b, dW, refl, dL[:, None], None
        # skew
        K = m.layering.n_membranes
        xn, cross = _skew_batch(m.layering, x, y, u[:, :K])
        self.multi += cross.sum(axis=1) >= 2
        if cfg.skew_bridge:
            hits = _skew_bridge_hits(m.layering, x, xn, dt, u[:, K])
            hits &= cross == 0
            if hits.any():
                xn, extra = _skew_bridge_resolve(m.layering, xn, hits, u[:, K + 1:])
                cross = cross + extra
        return xn, b, dW, xn - y, None, cross

    def _halve(self, x, dW, dt, r, depth):
        """Split a failed oblique step in two with a Brownian bridge midpoint."""
        if depth > MAX_HALVINGS:
            raise ObliqueSolverError(f"oblique solver failed after {MAX_HALVINGS} halvings")
        self.halvings[r] += 1
        m = self.model
        xi = self.streams.bridge_normals(r, (1, self.space.dim))
        half = 0.5 * dt
        dW1 = 0.5 * dW + math.sqrt(dt) * 0.5 * xi
        dW2 = dW - dW1
        total = 0.0
        for piece in (dW1, dW2):
            y = x + m.total_drift(x) * half + piece
            xn, dL, failed = _oblique_batch(m.body, m.field, y)
            if failed[0]:
                xn, dLv = self._halve(x, piece, half, r, depth + 1)
                dL = np.array([dLv])
            total += float(dL[0])
            x = xn
        return x, total


def _local_time_occupation(layering, x, band, dt, norm, space):
    """Symmetric local time increments ``dt/band * 1{dist < band/2}`` per membrane."""
    out = np.empty((len(x), layering.n_membranes))
    for k, body in enumerate(layering.bodies):
        g = body._grad(x)
        gn = np.sqrt(np.sum(g * g, axis=-1))
        dist = np.abs(body._level(x) - 1.0) / gn
        inc = np.where(dist < 0.5 * band, dt / band, 0.0)
        if norm == "H1star":
            inc = inc * space.h1star_norm(g / gn[:, None])
        out[:, k] = inc
    return out


def run_paths(model: Model, config: StepConfig, seed: int, indices, start="stationary",
              record: bool = True, track_qv: bool = False, observables=None,
              noise_scale: float = 1.0) -> PathBatch:
    """Simulate the paths with the given stream indices in one process.

    ``start`` is ``"stationary"``, one point, or one point per path.
    ``observables`` maps names to callables ``(n, d) -> (n, k)`` whose time
    integrals after ``config.burn_in`` are accumulated.  ``noise_scale = 0``
    is a test hook giving the noiseless dynamics.
    """
    indices = np.asarray(indices, dtype=np.int64)
    n, d = len(indices), model.space.dim
    mode = model.mode
    if isinstance(start, str):
        if start != "stationary":
            raise ValueError(f"unknown start {start!r}")
        x = stationary_start(model, seed, indices)
    else:
        x = np.array(np.broadcast_to(np.asarray(start, dtype=float), (n, d)))
    if mode in ("normal", "oblique") and config.scheme == "project":
        if np.any(model.body._level(x) > 1.0 + TOL_BOUNDARY):
            raise ValueError("start point outside the body")
    x0 = x.copy()

    K = model.layering.n_membranes if mode == "skew" else 0
    n_unif = (K + 1 + K if config.skew_bridge else K) if mode == "skew" else 0
    streams = PathStreams(seed, indices, d, n_uniform=n_unif)
    stepper = _Stepper(model, config, streams)
    ids = model.boundary_ids
    n_lt = len(ids)

    n_steps, stride = config.n_steps, int(config.record_stride)
    n_rec = n_steps // stride
    times = np.arange(n_rec + 1) * stride * config.dt
    states = np.empty((n, n_rec + 1, d)) if record else None
    wiener = np.zeros((n, n_rec, d)) if record else None
    if record:
        states[:, 0] = x
    lt_rec = np.zeros((n, n_rec, n_lt))
    lt_tot = np.zeros((n, n_lt))
    crossings = np.zeros((n, K), dtype=np.int64)
    qv = np.zeros((n, d, d)) if track_qv else None
    gz = gq = None
    if model.target is not None:
        gz, gq = np.zeros(n), np.zeros(n)
    observables = observables or {}
    occ = {}
    eq12 = np.zeros(n)
    burn = config.burn_steps
    band = config.band
    norm = config.normal_norm

    w_acc = np.zeros((n, d))
    lt_acc = np.zeros((n, n_lt))
    for s in range(n_steps):
        z, u = streams.next()
        if noise_scale != 1.0:
            z = z * noise_scale
        x_old = x
        if gz is not None:
            v = model.target.checked(x_old) - model.drift.checked(x_old)
            dW_g = z * math.sqrt(config.dt)
            gz += np.sum(v * dW_g, axis=-1)
            gq += np.sum(v * v, axis=-1) * config.dt
        x, b, dW, refl, dL, cross = stepper.step(x_old, z, u)
        if mode == "skew":
            crossings += cross
            dL = _local_time_occupation(model.layering, x, band, config.dt, norm, model.space)
        elif dL is not None:
            hit = dL[:, 0] > 0
            if hit.any():
                lv = model.body._level(x[hit])
                eq12[hit] += np.where(np.abs(lv - 1.0) > TOL_BOUNDARY, dL[hit, 0], 0.0)
                if norm == "H1star":
                    g = model.body._grad(x[hit])
                    g = g / np.sqrt(np.sum(g * g, axis=-1))[:, None]
                    dL[hit, 0] *= model.space.h1star_norm(g)
        if dL is not None:
            lt_acc += dL
        if track_qv:
            dM = x - x_old - b * config.dt - refl
            qv += dM[:, :, None] * dM[:, None, :]
        if record:
            w_acc += dW
        if observables and s >= burn:
            for name, f in observables.items():
                val = np.asarray(f(x), dtype=float).reshape(n, -1) * config.dt
                if name in occ:
                    occ[name] += val
                else:
                    occ[name] = val
        if (s + 1) % stride == 0:
            j = (s + 1) // stride
            if j <= n_rec:
                lt_rec[:, j - 1] = lt_acc
                lt_tot += lt_acc
                lt_acc[:] = 0.0
                if record:
                    states[:, j] = x
                    wiener[:, j - 1] = w_acc
                    w_acc[:] = 0.0
    lt_tot += lt_acc
    return PathBatch(
        indices=indices,
        dt=config.dt,
        t_end=n_steps * config.dt,
        times=times,
        states=states,
        wiener=wiener,
        local_time={k: lt_rec[:, :, i] for i, k in enumerate(ids)},
        local_total={k: lt_tot[:, i] for i, k in enumerate(ids)},
        crossings={k: crossings[:, i] for i, k in enumerate(ids)} if mode == "skew" else {},
        final=x,
        initial=x0,
        qv=qv,
        girsanov_z=gz,
        girsanov_qv=gq,
        occupation=occ,
        occupation_time=(n_steps - burn) * config.dt,
        eq12_violation=eq12,
        multi_crossings=stepper.multi,
        halvings=stepper.halvings,
    )


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        warnings.warn(f"ignoring malformed {WORKERS_ENV}={raw!r}")
        return 1


def _run_chunk(args):
    model, config, seed, idx, start, kw = args
    return run_paths(model, config, seed, idx, start=start, **kw)


def simulate(model: Model, config: StepConfig, seed: int, n_paths: int = 1,
             start="stationary", workers: int | None = None, indices=None, **kw) -> PathBatch:
    """Simulate ``n_paths`` paths, optionally spread over worker processes.

    The result depends only on the inputs and ``seed``: path ``i`` always uses
    stream ``i`` no matter how paths are split between workers.
    """
    idx = np.arange(n_paths) if indices is None else np.asarray(indices, dtype=np.int64)
    workers = default_workers() if workers is None else max(1, int(workers))
    starts = None
    if not isinstance(start, str):
        arr = np.asarray(start, dtype=float)
        starts = arr if arr.ndim == 2 else np.broadcast_to(arr, (len(idx), model.space.dim))
    if workers == 1 or len(idx) < 2:
        return run_paths(model, config, seed, idx, start=start, **kw)
    chunks = np.array_split(np.arange(len(idx)), min(workers, len(idx)))
    jobs = [(model, config, seed, idx[c], start if starts is None else starts[c], kw)
            for c in chunks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_run_chunk, jobs))
    return PathBatch.concat(parts)
