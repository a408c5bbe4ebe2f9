"""Bounded drift fields ``B`` added to the OU drift ``-A x``.

Each drift is a picklable callable on batches ``(n, d) -> (n, d)`` carrying a
declared sup-norm ``bound`` and, when known, a one-sided Lipschitz constant
``monotone`` with ``<B(u) - B(v), u - v> <= monotone * |u - v|^2``.
"""
from __future__ import annotations

import math

import numpy as np

from .oblique import ObliqueField, beta_mu_A
from .spectral import SpectralSpace

__all__ = [
    "Drift",
    "ZeroDrift",
    "ConstantDrift",
    "PerturbedLinearDrift",
    "BetaMuADrift",
    "BoundViolation",
]


class BoundViolation(ValueError):
    """A drift evaluation exceeded its declared sup-norm."""


class Drift:
    name = "drift"
    bound = math.inf
    monotone = None

    def __init__(self, dim: int):
        self.dim = int(dim)

    def __call__(self, x) -> np.ndarray:
        raise NotImplementedError

    def checked(self, x) -> np.ndarray:
        """Evaluate and assert the declared bound."""
        out = self(x)
        if math.isfinite(self.bound):
            size = np.sqrt(np.sum(out * out, axis=-1))
            if np.any(size > self.bound * (1 + 1e-12) + 1e-15):
                raise BoundViolation(
                    f"|B(x)| = {size.max():.6g} exceeds declared bound {self.bound:.6g} ({self.name})")
        return out

    def spec(self) -> dict:
        return {"kind": self.name, "bound": self.bound}


class ZeroDrift(Drift):
    name = "none"
    bound = 0.0
    monotone = 0.0

    def __call__(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))


class ConstantDrift(Drift):
    name = "constant"
    monotone = 0.0

    def __init__(self, vector, bound: float | None = None):
        v = np.asarray(vector, dtype=float).ravel()
        super().__init__(v.size)
        self.vector = v
        size = float(np.sqrt(v @ v))
        self.bound = size if bound is None else float(bound)
        if size > self.bound * (1 + 1e-12):
            raise BoundViolation(f"|B| = {size:.6g} exceeds declared bound {self.bound:.6g}")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.vector, x.shape).copy()

    def spec(self):
        return {"kind": self.name, "vector": self.vector.tolist(), "bound": self.bound}


class PerturbedLinearDrift(Drift):
    """``B(x) = slope * x + lip * sin(x shifted by one coordinate)``.

    The perturbation is ``lip``-Lipschitz and bounded, so ``B`` is one-sided
    Lipschitz with constant ``slope + lip``.  ``B`` is unbounded on all of
    ``H``; ``radius`` bounds the states it is evaluated on.
    """

    name = "perturbed_linear"

    def __init__(self, dim: int, slope: float = -0.5, lip: float = 1.0, radius: float = 1.0):
        super().__init__(dim)
        self.slope = float(slope)
        self.lip = float(lip)
        self.radius = float(radius)
        self.bound = abs(self.slope) * self.radius + abs(self.lip) * math.sqrt(self.dim)
        self.monotone = self.slope + abs(self.lip)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.slope * x + self.lip * np.sin(np.roll(x, -1, axis=-1))

    def spec(self):
        return {"kind": self.name, "slope": self.slope, "lip": self.lip,
                "radius": self.radius, "bound": self.bound}


class BetaMuADrift(Drift):
    """The drift ``beta^{mu,A}`` making ``mu`` restricted to ``Gamma`` invariant."""

    name = "beta_mu_A"

    def __init__(self, field: ObliqueField, space: SpectralSpace, radius: float):
        super().__init__(space.dim)
        self.field = field
        self.space = space
        partial_bound = field.partial_bound
        # |A^T (alpha x)| <= |A|_F max(alpha) |x| and the divergence term is half a sum of partials
        self.bound = field.fro_bound * space.max_eigenvalue * radius + 0.5 * partial_bound
        self.monotone = None

    def __call__(self, x):
        return beta_mu_A(self.field, self.space, np.atleast_2d(x))

    def spec(self):
        return {"kind": self.name, "field": self.field.name, "bound": self.bound}
