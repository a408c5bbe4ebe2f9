"""Truncated eigen-coordinates of the OU operator and its Gaussian measure.

Points are plain ``numpy`` arrays of coordinates in the eigenbasis of ``A``:
shape ``(d,)`` for one point, ``(n, d)`` for a batch.  Every inner product of
``H`` is therefore a dot product of coordinate vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft

__all__ = [
    "SpectralSpace",
    "make_space",
    "dirichlet_preset",
    "sample_mu",
    "beta_mu",
    "ou_drift",
    "exact_ou_step",
    "synthesize",
    "analyze",
]


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SpectralSpace:
    """Diagonal operator ``A`` truncated to ``span{e_1, ..., e_d}``.

    ``eigenvalues[j]`` is ``alpha_{j+1}`` and ``h1_weights[j]`` the Gelfand
    weight ``c_{j+1}``.  The Gaussian reference measure is ``N(0, Q)`` with
    ``Q = diag(1 / (2 alpha_j))``.
    """

    eigenvalues: np.ndarray
    h1_weights: np.ndarray
    delta: float
    basis: str = "abstract"
    epsilon: float | None = None
    covariance: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "covariance", _frozen(0.5 / self.eigenvalues))

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.shape[0])

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.covariance)

    @property
    def max_eigenvalue(self) -> float:
        return float(self.eigenvalues.max())

    def trace(self) -> float:
        """Trace of the covariance, ``sum_j 1/(2 alpha_j)``."""
        return float(self.covariance.sum())

    def h1star_norm(self, v) -> np.ndarray:
        """Dual Gelfand norm, ``sqrt(sum_j v_j^2 / c_j^2)``."""
        v = np.asarray(v, dtype=float)
        return np.sqrt(np.sum((v / self.h1_weights) ** 2, axis=-1))

    def default_dt(self) -> float:
        return 1e-3 / self.max_eigenvalue

    def describe(self) -> dict:
        return {
            "dim": self.dim,
            "basis": self.basis,
            "delta": self.delta,
            "epsilon": self.epsilon,
            "eigenvalues": self.eigenvalues.tolist(),
        }


def make_space(eigenvalues, h1_weights=None) -> SpectralSpace:
    """Build a space from explicit eigenvalues and Gelfand weights.

    ``delta`` is recorded as the smallest eigenvalue.
    """
    alphas = np.asarray(eigenvalues, dtype=float).ravel()
    if alphas.size == 0:
        raise ValueError("eigenvalues must be non-empty")
    if h1_weights is None:
        weights = np.ones_like(alphas)
    else:
        weights = np.asarray(h1_weights, dtype=float).ravel()
    if weights.shape != alphas.shape:
        raise ValueError(
            f"eigenvalues and h1_weights differ in length ({alphas.size} vs {weights.size})"
        )
    if not np.all(np.isfinite(alphas)) or np.any(alphas <= 0):
        raise ValueError("all eigenvalues must be finite and > 0 (A >= delta*Id)")
    if not np.all(np.isfinite(weights)) or np.any(weights < 1):
        raise ValueError("all h1_weights must be >= 1")
    return SpectralSpace(_frozen(alphas), _frozen(weights), float(alphas.min()))


def dirichlet_preset(d: int, epsilon: float = 0.5) -> SpectralSpace:
    """``A = -1/2 d^2/dr^2`` on ``(0, 1)`` with Dirichlet conditions.

    Eigenfunctions ``e_j(r) = sqrt(2) sin(j pi r)``, eigenvalues
    ``(j pi)^2 / 2`` and weights ``c_j = (j pi)^(1/2 + epsilon)``.
    """
    if int(d) != d or d < 1:
        raise ValueError("d must be a positive integer")
    if not 0.0 < epsilon <= 1.5:
        raise ValueError("epsilon must lie in (0, 3/2]")
    jpi = np.arange(1, int(d) + 1) * math.pi
    alphas = jpi**2 / 2.0
    weights = jpi ** (0.5 + epsilon)
    return SpectralSpace(
        _frozen(alphas), _frozen(weights), float(alphas.min()),
        basis="dirichlet_sine", epsilon=float(epsilon),
    )


def sample_mu(space: SpectralSpace, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from ``mu = N(0, Q)``; one point if ``size`` is None."""
    shape = (space.dim,) if size is None else (int(size), space.dim)
    return rng.standard_normal(shape) * space.std


def beta_mu(space: SpectralSpace, i: int, x) -> np.ndarray | float:
    """Logarithmic derivative ``-2 <A e_i, x>``; ``i`` counts from 1 like ``e_i``."""
    if not 1 <= i <= space.dim:
        raise IndexError(f"basis index {i} outside 1..{space.dim}")
    x = np.asarray(x, dtype=float)
    out = -2.0 * space.eigenvalues[i - 1] * x[..., i - 1]
    return float(out) if out.ndim == 0 else out


def ou_drift(space: SpectralSpace, x) -> np.ndarray:
    return -space.eigenvalues * np.asarray(x, dtype=float)


def exact_ou_step(space: SpectralSpace, x, z, dt: float) -> np.ndarray:
    """Exact transition of the free process driven by standard normals ``z``."""
    decay = np.exp(-space.eigenvalues * dt)
    scale = np.sqrt(-np.expm1(-2.0 * space.eigenvalues * dt) / (2.0 * space.eigenvalues))
    return np.asarray(x) * decay + scale * np.asarray(z)


# Grid transforms for the sine basis.  With the orthonormal DST-I matrix S on
# N interior nodes r_m = m / (N + 1), f(r_m) = sqrt(N + 1) * (S c)_m.

def _check_grid(dim: int, n_grid: int):
    if n_grid < dim:
        raise ValueError(f"grid of {n_grid} points is too coarse for {dim} modes")


def synthesize(coeffs, n_grid: int) -> np.ndarray:
    """Values of ``sum_j c_j sqrt(2) sin(j pi r)`` at the interior grid nodes."""
    c = np.atleast_2d(np.asarray(coeffs, dtype=float))
    _check_grid(c.shape[-1], n_grid)
    padded = np.zeros(c.shape[:-1] + (n_grid,))
    padded[..., : c.shape[-1]] = c
    vals = math.sqrt(n_grid + 1) * fft.dst(padded, type=1, norm="ortho", axis=-1)
    return vals[0] if np.ndim(coeffs) == 1 else vals


def analyze(values, dim: int | None = None) -> np.ndarray:
    """Inverse of :func:`synthesize`, truncated to the first ``dim`` modes."""
    v = np.asarray(values, dtype=float)
    n_grid = v.shape[-1]
    coeffs = fft.dst(v, type=1, norm="ortho", axis=-1) / math.sqrt(n_grid + 1)
    return coeffs if dim is None else coeffs[..., :dim]
