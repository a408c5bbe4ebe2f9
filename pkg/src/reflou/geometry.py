"""Convex bodies, Gaussian surface measures and membrane layerings.

Every body is described by a convex level function ``g`` with
``Gamma = {g <= 1}`` and ``boundary = {g = 1}``.  Methods accept one point
``(d,)`` or a batch ``(n, d)`` and return matching shapes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .spectral import SpectralSpace, sample_mu, synthesize

__all__ = [
    "TOL_BOUNDARY",
    "ConvexBody",
    "Ellipsoid",
    "HalfSpace",
    "NonnegLevel",
    "ellipsoid_body",
    "halfspace_body",
    "nonneg_level_body",
    "exterior_normal",
    "surface_density",
    "SurfaceSample",
    "SurfaceStarvation",
    "sample_surface",
    "SkewLayering",
    "make_layering",
    "rho_eval",
    "skew_prob",
]

TOL_BOUNDARY = 1e-8
ROOT_TOL = 1e-12
ROOT_MAXITER = 100


def _batch(x):
    arr = np.asarray(x, dtype=float)
    return np.atleast_2d(arr), arr.ndim == 1


def _unbatch(values, single):
    return values[0] if single else values


def _norm(v):
    return np.sqrt(np.sum(v * v, axis=-1))


class ConvexBody:
    """Closed convex set ``{g <= 1}``.

    Subclasses implement ``_level``, ``_grad`` and ``_project`` on batches.
    The generic chord, ray and boundary searches use bisection on ``g`` and
    may be overridden with closed forms.
    """

    kind = "body"
    bounded = False

    def __init__(self, dim: int):
        self.dim = int(dim)

    # -- public, shape preserving -------------------------------------
    def level(self, x):
        xb, single = _batch(x)
        return _unbatch(self._level(xb), single)

    def grad(self, x):
        xb, single = _batch(x)
        return _unbatch(self._grad(xb), single)

    def hess_apply(self, x, h):
        raise NotImplementedError(f"{self.kind} does not provide second derivatives")

    def contains(self, x, tol: float = TOL_BOUNDARY):
        xb, single = _batch(x)
        return _unbatch(self._level(xb) <= 1.0 + tol, single)

    def project(self, y):
        yb, single = _batch(y)
        return _unbatch(self._project(yb), single)

    def normal(self, x):
        """Unit exterior normal ``Dg/|Dg|`` without boundary checks."""
        xb, single = _batch(x)
        g = self._grad(xb)
        return _unbatch(g / _norm(g)[:, None], single)

    def on_boundary(self, x, tol: float = TOL_BOUNDARY):
        xb, single = _batch(x)
        return _unbatch(np.abs(self._level(xb) - 1.0) <= tol, single)

    def to_boundary(self, x):
        """Map points near the boundary onto it (used by the shell sampler)."""
        xb, single = _batch(x)
        return _unbatch(self._to_boundary(xb), single)

    def chord_crossing(self, x, y):
        """Parameter ``t`` in [0, 1] where ``g(x + t (y - x)) = 1``.

        The endpoints must lie on opposite sides of the boundary.
        """
        xb, single = _batch(x)
        yb, _ = _batch(y)
        return _unbatch(self._chord_crossing(xb, yb), single)

    def ray_hit(self, y, v):
        """Smallest ``lam >= 0`` with ``g(y + lam v) = 1`` for ``y`` outside.

        Returns NaN where the ray misses the body.
        """
        yb, single = _batch(y)
        vb, _ = _batch(v)
        return _unbatch(self._ray_hit(yb, vb), single)

    def spec(self) -> dict:
        return {"kind": self.kind}

    # -- generic batch implementations --------------------------------
    def _level(self, x):
        raise NotImplementedError

    def _grad(self, x):
        raise NotImplementedError

    def _project(self, y):
        raise NotImplementedError

    def _to_boundary(self, x):
        # Newton steps along the gradient, freezing converged rows
        out = x.copy()
        active = np.ones(len(x), dtype=bool)
        for _ in range(50):
            idx = np.flatnonzero(active)
            lv = self._level(out[idx]) - 1.0
            done = np.abs(lv) <= ROOT_TOL
            active[idx[done]] = False
            idx, lv = idx[~done], lv[~done]
            if idx.size == 0:
                break
            g = self._grad(out[idx])
            out[idx] = out[idx] - (lv / np.sum(g * g, axis=-1))[:, None] * g
        return out

    def _chord_crossing(self, x, y, tol: float = 1e-10):
        x_in = self._level(x) <= 1.0
        lo = np.zeros(len(x))
        hi = np.ones(len(x))
        # fixed count keeps each row independent of the batch
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            p = x + mid[:, None] * (y - x)
            same = (self._level(p) <= 1.0) == x_in
            lo = np.where(same, mid, lo)
            hi = np.where(same, hi, mid)
        return 0.5 * (lo + hi)

    def _ray_hit(self, y, v):
        lam_hi = np.ones(len(y))
        inside = self._level(y + lam_hi[:, None] * v) <= 1.0
        for _ in range(60):
            if inside.all():
                break
            lam_hi = np.where(inside, lam_hi, 2.0 * lam_hi)
            inside = self._level(y + lam_hi[:, None] * v) <= 1.0
        t = self._chord_crossing(y, y + lam_hi[:, None] * v)
        lam = t * lam_hi
        return np.where(inside, lam, np.nan)


class Ellipsoid(ConvexBody):
    """``g(x) = sum_j (x_j / r_j)^2``."""

    kind = "ellipsoid"
    bounded = True

    def __init__(self, semiaxes):
        r = np.asarray(semiaxes, dtype=float).ravel()
        if r.size == 0 or np.any(~np.isfinite(r)) or np.any(r <= 0):
            raise ValueError("ellipsoid semiaxes must be positive")
        super().__init__(r.size)
        self.semiaxes = r
        self._inv2 = 1.0 / r**2
        self._ball = bool(np.all(r == r[0]))

    def spec(self):
        return {"kind": self.kind, "semiaxes": self.semiaxes.tolist()}

    @property
    def radius(self) -> float:
        return float(self.semiaxes.max())

    def _level(self, x):
        return np.sum(x * x * self._inv2, axis=-1)

    def _grad(self, x):
        return 2.0 * x * self._inv2

    def hess_apply(self, x, h):
        return 2.0 * np.asarray(h, dtype=float) * self._inv2

    def _project(self, y):
        out = y.copy()
        outside = self._level(y) > 1.0
        if not np.any(outside):
            return out
        yo = y[outside]
        if self._ball:
            out[outside] = yo * (self.semiaxes[0] / _norm(yo))[:, None]
            return out
        r2 = self.semiaxes**2
        # Newton on F(t) = sum (r_j y_j / (r_j^2 + t))^2 - 1, convex and
        # decreasing on t >= 0, so iterates from t = 0 increase monotonically.
        t = np.zeros(len(yo))
        ry2 = r2 * yo**2
        active = np.ones(len(yo), dtype=bool)
        # converged entries are frozen so results do not depend on batch makeup
        for _ in range(ROOT_MAXITER):
            denom = r2 + t[active, None]
            f = np.sum(ry2[active] / denom**2, axis=-1) - 1.0
            fp = -2.0 * np.sum(ry2[active] / denom**3, axis=-1)
            step = f / fp
            t[active] = t[active] - step
            done = np.abs(step) <= ROOT_TOL * np.maximum(1.0, t[active])
            active[np.flatnonzero(active)[done]] = False
            if not active.any():
                break
        out[outside] = yo * r2 / (r2 + t[:, None])
        return out

    def _to_boundary(self, x):
        return x / np.sqrt(self._level(x))[:, None]

    def _chord_crossing(self, x, y, tol: float = 1e-10):
        t, ok = self._quadratic_root(x, y - x, want="crossing")
        if not ok.all():
            t[~ok] = super()._chord_crossing(x[~ok], y[~ok], tol)
        return t

    def _ray_hit(self, y, v):
        lam, ok = self._quadratic_root(y, v, want="entry")
        return np.where(ok, lam, np.nan)

    def _quadratic_root(self, p, v, want):
        a = np.sum(v * v * self._inv2, axis=-1)
        b = 2.0 * np.sum(p * v * self._inv2, axis=-1)
        c = self._level(p) - 1.0
        disc = b * b - 4.0 * a * c
        ok = (disc >= 0) & (a > 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        aa = np.where(a > 0, a, 1.0)
        # numerically stable pair of roots
        q = -0.5 * (b + np.copysign(sq, b))
        q = np.where(q == 0, -1e-300, q)
        r1 = q / aa
        r2 = c / q
        lo = np.minimum(r1, r2)
        hi = np.maximum(r1, r2)
        if want == "entry":
            root = lo
            ok &= root >= -1e-12
        else:
            # p inside -> exit root (hi); p outside -> entry root (lo)
            root = np.where(c <= 0, hi, lo)
            ok &= (root >= -1e-12) & (root <= 1 + 1e-12)
        return np.clip(root, 0.0, None), ok


class HalfSpace(ConvexBody):
    """``{x : <n, x> <= offset}`` with level ``g = 1 + <n, x> - offset``."""

    kind = "halfspace"
    bounded = False

    def __init__(self, normal, offset: float = 0.0):
        n = np.asarray(normal, dtype=float).ravel()
        if n.size == 0 or not np.all(np.isfinite(n)) or not np.any(n != 0):
            raise ValueError("halfspace normal must be non-zero")
        super().__init__(n.size)
        self.n = n
        self.offset = float(offset)
        self._n2 = float(n @ n)

    def spec(self):
        return {"kind": self.kind, "normal": self.n.tolist(), "offset": self.offset}

    def _signed(self, x):
        return np.sum(x * self.n, axis=-1) - self.offset

    def _level(self, x):
        return 1.0 + self._signed(x)

    def _grad(self, x):
        return np.broadcast_to(self.n, x.shape).copy()

    def hess_apply(self, x, h):
        return np.zeros_like(np.asarray(h, dtype=float))

    def _project(self, y):
        excess = np.maximum(self._signed(y), 0.0)
        return y - (excess / self._n2)[:, None] * self.n

    def _to_boundary(self, x):
        return x - (self._signed(x) / self._n2)[:, None] * self.n

    def _chord_crossing(self, x, y, tol: float = 1e-10):
        sx = self._signed(x)
        sy = self._signed(y)
        return np.clip(sx / (sx - sy), 0.0, 1.0)

    def _ray_hit(self, y, v):
        nv = np.sum(v * self.n, axis=-1)
        lam = -self._signed(y) / np.where(nv < 0, nv, np.nan)
        return np.where(lam >= 0, lam, np.nan)


class NonnegLevel(ConvexBody):
    """``{f in L^2(0,1) : f >= -alpha}`` seen through the sine coefficients.

    Membership is evaluated on ``grid_points`` interior nodes.  The level
    function is ``g = 1 - (min_grid f + alpha)``; the projection is the exact
    Euclidean projection onto the discretized constraint set, computed as a
    least-distance program through nonnegative least squares.
    """

    kind = "nonneg_level"
    bounded = False

    def __init__(self, space: SpectralSpace, alpha: float, grid_points: int | None = None,
                 tol: float = 1e-12):
        if space.basis != "dirichlet_sine":
            raise ValueError("nonneg_level bodies need the dirichlet sine basis")
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        grid_points = 4 * space.dim + 4 if grid_points is None else int(grid_points)
        if grid_points < space.dim:
            raise ValueError(f"grid of {grid_points} points is too coarse for {space.dim} modes")
        super().__init__(space.dim)
        self.alpha = float(alpha)
        self.grid_points = grid_points
        self.tol = tol
        nodes = np.arange(1, grid_points + 1) / (grid_points + 1)
        j = np.arange(1, space.dim + 1)
        # synthesis matrix: f(r_m) = sum_j c_j sqrt(2) sin(j pi r_m)
        self._synth = math.sqrt(2.0) * np.sin(np.pi * np.outer(nodes, j))
        self.nodes = nodes

    def spec(self):
        return {"kind": self.kind, "alpha": self.alpha, "grid_points": self.grid_points}

    def values(self, x):
        """Grid values of the function with coefficients ``x``."""
        return synthesize(x, self.grid_points)

    def _level(self, x):
        return 1.0 - (synthesize(x, self.grid_points).min(axis=-1) + self.alpha)

    def _grad(self, x):
        vals = synthesize(x, self.grid_points)
        m = np.argmin(vals, axis=-1)
        return -self._synth[m]

    def _project(self, y):
        out = y.copy()
        outside = self._level(y) > 1.0 + self.tol
        for i in np.flatnonzero(outside):
            out[i] = self._ldp(y[i])
        return out

    def _ldp(self, y):
        # min |c - y| subject to S c >= -alpha, as least-distance programming:
        # with G = S, h = -alpha - S y, solve NNLS on E = [G^T; h^T], f = e_{d+1}
        # (bounded-variable LS; optimize.nnls misreports some solutions in scipy 1.15)
        G = self._synth
        h = -self.alpha - G @ y
        E = np.vstack([G.T, h[None, :]])
        f = np.zeros(self.dim + 1)
        f[-1] = 1.0
        u = optimize.lsq_linear(E, f, bounds=(0.0, np.inf), method="bvls", tol=1e-14).x
        r = E @ u - f
        if abs(r[-1]) < 1e-300:
            raise RuntimeError("nonneg_level constraint set appears empty")
        return y - r[:-1] / r[-1]

    def _to_boundary(self, x):
        # shift along the active-node direction; g is affine along it locally
        lv = self._level(x)
        g = self._grad(x)
        g2 = np.sum(g * g, axis=-1)
        return x - ((lv - 1.0) / g2)[:, None] * g


def ellipsoid_body(space: SpectralSpace, semiaxes) -> Ellipsoid:
    body = Ellipsoid(semiaxes)
    if body.dim != space.dim:
        raise ValueError(f"need {space.dim} semiaxes, got {body.dim}")
    return body


def halfspace_body(normal, offset: float = 0.0) -> HalfSpace:
    return HalfSpace(normal, offset)


def nonneg_level_body(space: SpectralSpace, alpha: float, grid_points: int | None = None) -> NonnegLevel:
    return NonnegLevel(space, alpha, grid_points)


def exterior_normal(body: ConvexBody, x, tol: float = TOL_BOUNDARY, norm: str = "H",
                    space: SpectralSpace | None = None) -> np.ndarray:
    """Exterior normal at boundary points.

    ``norm="H"`` gives ``Dg/|Dg|``; ``norm="H1star"`` rescales to unit dual
    Gelfand norm and needs ``space``.
    """
    xb, single = _batch(x)
    if np.any(np.abs(body._level(xb) - 1.0) > tol):
        raise ValueError("point is not on the boundary")
    g = body._grad(xb)
    gn = _norm(g)
    if np.any(gn == 0):
        raise ValueError("level gradient vanishes at boundary point")
    eta = g / gn[:, None]
    if norm == "H1star":
        if space is None:
            raise ValueError("H1star normalization needs the spectral space")
        eta = eta / space.h1star_norm(eta)[:, None]
    elif norm != "H":
        raise ValueError(f"unknown normalization {norm!r}")
    return _unbatch(eta, single)


def surface_density(body: ConvexBody, space: SpectralSpace, x, tol: float = TOL_BOUNDARY):
    """Density ``|Dg| / |Q^{1/2} Dg|`` of the Gaussian surface measure."""
    xb, single = _batch(x)
    if np.any(np.abs(body._level(xb) - 1.0) > tol):
        raise ValueError("point is not on the boundary")
    return _unbatch(_surface_ratio(body, space, xb), single)


def _surface_ratio(body, space, xb):
    g = body._grad(xb)
    gn = _norm(g)
    if np.any(gn == 0):
        raise ValueError("level gradient vanishes at boundary point")
    return gn / _norm(g * space.std)


class SurfaceStarvation(RuntimeError):
    """Too few draws landed in the boundary shell."""


@dataclass
class SurfaceSample:
    """Boundary points with weights estimating integrals against the surface measure.

    ``sum(weights * f(points))`` estimates ``int f d||dGamma||``.  The
    estimator is an average over ``n_draws`` Gaussian draws, most of which
    missed the shell and contribute zero.
    """

    points: np.ndarray
    weights: np.ndarray
    n_draws: int
    shell_eps: float

    @property
    def n_hits(self) -> int:
        return int(len(self.weights))

    def integrate(self, values=None) -> tuple[float, float]:
        vals = np.ones(self.n_hits) if values is None else np.asarray(values, dtype=float)
        h = self.weights * vals * self.n_draws  # per-draw contributions
        n = self.n_draws
        mean = h.sum() / n
        var = max((np.sum(h * h) / n - mean * mean) * n / max(n - 1, 1), 0.0)
        return float(mean), float(math.sqrt(var / n))

    def mass(self) -> tuple[float, float]:
        return self.integrate()


def sample_surface(body: ConvexBody, space: SpectralSpace, rng: np.random.Generator,
                   shell_eps: float = 1e-2, n_hits: int = 10_000, min_hits: int = 100,
                   max_draws: int = 200_000_000, chunk: int = 1_000_000) -> SurfaceSample:
    """Thin-shell estimator of the Gaussian surface measure of ``body``.

    Draws from ``mu`` are kept when ``|g - 1| <= shell_eps/2`` and mapped onto
    the boundary.  By the coarea formula each kept draw carries weight
    ``|Dg| / shell_eps`` per draw, i.e. the surface density times the
    ``|Q^{1/2} Dg|`` factor of the induced Gaussian surface measure, divided by
    the shell thickness.  The centred shell makes the thickness error second order.
    """
    if shell_eps <= 0:
        raise ValueError("shell_eps must be positive")
    pts, wts = [], []
    hits = draws = 0
    chunk = int(chunk)
    while hits < n_hits and draws < max_draws:
        m = min(chunk, max_draws - draws)
        x = sample_mu(space, rng, m)
        draws += m
        keep = np.abs(body._level(x) - 1.0) <= 0.5 * shell_eps
        if not np.any(keep):
            continue
        xs = x[keep]
        gn = _norm(body._grad(xs))
        pts.append(body._to_boundary(xs))
        wts.append(gn / shell_eps)
        hits += len(xs)
    if hits < min_hits:
        raise SurfaceStarvation(f"only {hits} shell hits in {draws} draws (need {min_hits})")
    points = np.concatenate(pts) if pts else np.empty((0, space.dim))
    weights = np.concatenate(wts) / draws if wts else np.empty(0)
    return SurfaceSample(points, weights, draws, shell_eps)


@dataclass(frozen=True, eq=False)
class SkewLayering:
    """Nested bodies ``Gamma_0 <= ... <= Gamma_{K-1}`` with step weights.

    ``gammas`` has ``K + 1`` entries: ``gammas[0]`` inside the smallest body,
    ``gammas[k + 1]`` on ``Gamma_{k+1} minus Gamma_k`` and ``gammas[K]`` (the limit
    value) outside the largest body.
    """

    bodies: tuple
    gammas: np.ndarray
    c0: float

    @property
    def n_membranes(self) -> int:
        return len(self.bodies)

    @property
    def gamma_bar(self) -> float:
        return float(self.gammas[-1])

    @property
    def dim(self) -> int:
        return self.bodies[0].dim

    def rho(self, x):
        xb, single = _batch(x)
        return _unbatch(self.gammas[self._n_outside(xb)], single)

    def _n_outside(self, xb):
        count = np.zeros(len(xb), dtype=int)
        for body in self.bodies:
            count += body._level(xb) > 1.0
        return count

    def skew_prob(self, k: int) -> float:
        if not 0 <= k < self.n_membranes:
            raise IndexError(f"membrane index {k} outside 0..{self.n_membranes - 1}")
        lo, hi = self.gammas[k], self.gammas[k + 1]
        return float(hi / (hi + lo))

    def skew_bias(self, k: int) -> float:
        """``2 p_k - 1 = (gamma_{k+1} - gamma_k) / (gamma_{k+1} + gamma_k)``."""
        lo, hi = self.gammas[k], self.gammas[k + 1]
        return float((hi - lo) / (hi + lo))

    def symmetric_value(self, k: int) -> float:
        return float(0.5 * (self.gammas[k] + self.gammas[k + 1]))

    def jumps(self) -> np.ndarray:
        return np.diff(self.gammas)

    def variation_sum(self, space: SpectralSpace, rng: np.random.Generator, **kw) -> float:
        """Finite-window value of ``sum_k |gamma_{k+1} - gamma_k| * surface mass``."""
        total = 0.0
        for k, body in enumerate(self.bodies):
            jump = abs(self.gammas[k + 1] - self.gammas[k])
            if jump == 0:
                continue
            total += jump * sample_surface(body, space, rng, **kw).mass()[0]
        return total

    def spec(self) -> dict:
        return {"bodies": [b.spec() for b in self.bodies], "gammas": self.gammas.tolist()}


def make_layering(bodies, gammas, gamma_bar: float | None = None, c0: float | None = None,
                  space: SpectralSpace | None = None, rng: np.random.Generator | None = None,
                  n_check: int = 2000) -> SkewLayering:
    """Validate and build a membrane layering.

    ``gammas`` may list ``K`` values with ``gamma_bar`` appended, or all
    ``K + 1`` values.  Nesting is checked by sampling: boundary points of each
    body must lie in the next one, and some boundary point of the next one
    must lie strictly outside.
    """
    bodies = tuple(bodies)
    if not bodies:
        raise ValueError("a layering needs at least one body")
    g = [float(v) for v in gammas]
    if len(g) == len(bodies):
        if gamma_bar is None:
            raise ValueError("gamma_bar is required when only K gammas are given")
        g.append(float(gamma_bar))
    elif len(g) == len(bodies) + 1:
        if gamma_bar is not None and not math.isclose(g[-1], gamma_bar):
            raise ValueError("last gamma disagrees with gamma_bar")
    else:
        raise ValueError(f"expected {len(bodies)} or {len(bodies) + 1} gammas, got {len(g)}")
    garr = np.array(g)
    if np.any(garr <= 0) or not np.all(np.isfinite(garr)):
        raise ValueError("gammas must be positive and finite")
    band = float(max(garr.max(), 1.0 / garr.min()))
    if c0 is None:
        c0 = max(band, 2.0)
    elif c0 <= 1:
        raise ValueError("c0 must exceed 1")
    elif band > c0 * (1 + 1e-12):
        raise ValueError(f"gammas leave the band [1/{c0}, {c0}]")
    dims = {b.dim for b in bodies}
    if len(dims) != 1:
        raise ValueError("all bodies must share one dimension")
    if len(bodies) > 1:
        _check_nested(bodies, space, rng or np.random.default_rng(0), n_check)
    garr.setflags(write=False)
    return SkewLayering(bodies, garr, float(c0))


def _check_nested(bodies, space, rng, n):
    d = bodies[0].dim
    scales = np.ones(d) if space is None else space.std
    for k in range(len(bodies) - 1):
        inner, outer = bodies[k], bodies[k + 1]
        raw = rng.standard_normal((n, d)) * scales * rng.choice([0.3, 1.0, 3.0], size=(n, 1))
        on_inner = inner._to_boundary(raw)
        ok = np.isfinite(on_inner).all(axis=1)
        if np.any(outer._level(on_inner[ok]) > 1.0 + 1e-9):
            raise ValueError(f"bodies {k} and {k + 1} are not nested")
        on_outer = outer._to_boundary(raw)
        ok = np.isfinite(on_outer).all(axis=1)
        if not np.any(inner._level(on_outer[ok]) > 1.0 + 1e-9):
            raise ValueError(f"body {k + 1} adds nothing to body {k} (no witness found)")


def rho_eval(layering: SkewLayering, x):
    return layering.rho(x)


def skew_prob(layering: SkewLayering, k: int) -> float:
    return layering.skew_prob(k)
