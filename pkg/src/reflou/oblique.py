"""Antisymmetric dispersion fields and oblique reflection directions."""
from __future__ import annotations

import math

import numpy as np

from .geometry import ConvexBody, exterior_normal, TOL_BOUNDARY
from .spectral import SpectralSpace

__all__ = [
    "ObliqueField",
    "zero_field",
    "constant_field",
    "sine_coupling_field",
    "beta_mu_A",
    "oblique_direction",
    "reflection_angle",
    "tangent_frame",
    "tangential_direction",
    "reconstruct_direction",
]

FD_STEP = 1e-5


class ObliqueField:
    """Matrix field ``x -> (a_ij(x))`` with ``a_ij = -a_ji``.

    ``entries(x)`` maps a batch ``(n, d)`` to ``(n, d, d)``.  ``partials(x)``
    returns ``D[n, i, j] = d_i a_ij(x)``; when it is not supplied a central
    finite difference with step ``FD_STEP * scale`` is used instead.
    """

    def __init__(self, dim: int, entries, partials=None, fro_bound: float = math.inf,
                 name: str = "callable", scale: float = 1.0, partial_bound: float = math.inf):
        self.dim = int(dim)
        # sup of |(sum_i d_i a_ij)_j|, the divergence part of beta^{mu,A}
        self.partial_bound = float(partial_bound)
        self._entries = entries
        self._partials = partials
        self.fro_bound = float(fro_bound)
        self.name = name
        self.scale = float(scale)

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"

    def matrix(self, x) -> np.ndarray:
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        out = self._entries(xb)
        return out[0] if np.ndim(x) == 1 else out

    def partials(self, x) -> np.ndarray:
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        out = self._partials(xb) if self._partials is not None else self.fd_partials(xb)
        return out[0] if np.ndim(x) == 1 else out

    def fd_partials(self, x) -> np.ndarray:
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        h = FD_STEP * self.scale
        out = np.empty((len(xb), self.dim, self.dim))
        for i in range(self.dim):
            step = np.zeros(self.dim)
            step[i] = h
            diff = (self._entries(xb + step) - self._entries(xb - step)) / (2 * h)
            out[:, i, :] = diff[:, i, :]
        return out

    def validate(self, points, atol: float = 1e-10, fd_rtol: float = 1e-5) -> None:
        """Check antisymmetry, the Frobenius bound and supplied derivatives."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        a = self._entries(pts)
        if np.max(np.abs(a + np.swapaxes(a, 1, 2)), initial=0.0) > atol:
            raise ValueError("field is not antisymmetric")
        fro = np.sqrt(np.sum(a * a, axis=(1, 2)))
        if np.any(fro > self.fro_bound * (1 + 1e-12)):
            raise ValueError(f"Frobenius norm {fro.max():.4g} exceeds declared bound {self.fro_bound}")
        if self._partials is not None:
            given = self._partials(pts)
            approx = self.fd_partials(pts)
            scale = max(1.0, float(np.max(np.abs(given))))
            if np.max(np.abs(given - approx)) > fd_rtol * scale + 1e-6:
                raise ValueError("supplied partial derivatives disagree with finite differences")


class _ConstantEntries:
    def __init__(self, mat):
        self.mat = mat

    def __call__(self, x):
        return np.broadcast_to(self.mat, (len(x),) + self.mat.shape).copy()


class _ZeroPartials:
    def __init__(self, dim):
        self.dim = dim

    def __call__(self, x):
        return np.zeros((len(x), self.dim, self.dim))


def zero_field(dim: int) -> ObliqueField:
    zeros = _ZeroPartials(dim)
    return ObliqueField(dim, zeros, zeros, fro_bound=0.0, name="zero", partial_bound=0.0)


def constant_field(dim: int, upper) -> ObliqueField:
    """Constant field from its strictly upper triangle, listed row by row."""
    upper = np.asarray(upper, dtype=float).ravel()
    n_upper = dim * (dim - 1) // 2
    if upper.size != n_upper:
        raise ValueError(f"need {n_upper} upper-triangle entries for d={dim}, got {upper.size}")
    mat = np.zeros((dim, dim))
    mat[np.triu_indices(dim, 1)] = upper
    mat -= mat.T
    fro = float(np.sqrt(np.sum(mat * mat)))
    name = "zero" if fro == 0 else "constant"
    return ObliqueField(dim, _ConstantEntries(mat), _ZeroPartials(dim), fro_bound=fro, name=name,
                        partial_bound=0.0)


class _SineEntries:
    def __init__(self, strength):
        self.strength = strength

    def __call__(self, x):
        diff = x[:, :, None] - x[:, None, :]
        return self.strength * np.sin(diff)


class _SinePartials:
    def __init__(self, strength):
        self.strength = strength

    def __call__(self, x):
        diff = x[:, :, None] - x[:, None, :]
        out = self.strength * np.cos(diff)
        # a_ii is identically zero
        idx = np.arange(x.shape[1])
        out[:, idx, idx] = 0.0
        return out


def sine_coupling_field(dim: int, strength: float = 0.5) -> ObliqueField:
    """State dependent preset ``a_ij(x) = s sin(x_i - x_j)``."""
    return ObliqueField(dim, _SineEntries(strength), _SinePartials(strength),
                        fro_bound=abs(strength) * dim, name="sine_coupling",
                        partial_bound=abs(strength) * (dim - 1) * math.sqrt(dim))


def beta_mu_A(field: ObliqueField, space: SpectralSpace, x) -> np.ndarray:
    """Drift ``sum_i (a_ij / 2)(-2 alpha_i x_i) + d_i a_ij / 2`` in component ``j``."""
    xb = np.atleast_2d(np.asarray(x, dtype=float))
    a = field.matrix(xb)
    d = field.partials(xb)
    ax = space.eigenvalues * xb
    out = -np.sum(a * ax[:, :, None], axis=1) + 0.5 * np.sum(d, axis=1)
    return out[0] if np.ndim(x) == 1 else out


def _inward(body, x, tol):
    return -exterior_normal(body, x, tol=tol)


def oblique_direction(field: ObliqueField, body: ConvexBody, space: SpectralSpace, x,
                      tol: float = TOL_BOUNDARY) -> np.ndarray:
    """``nu + A^T(x) nu`` with ``nu`` the inward unit normal."""
    nu = _inward(body, x, tol)
    a = field.matrix(x)
    return nu + np.einsum("...ji,...j->...i", a, nu)


def reflection_angle(field, body, space, x, tol: float = TOL_BOUNDARY):
    v = oblique_direction(field, body, space, x, tol)
    return np.arcsin(np.clip(1.0 / np.linalg.norm(v, axis=-1), -1.0, 1.0))


def tangent_frame(body: ConvexBody, x, tol: float = TOL_BOUNDARY) -> np.ndarray:
    """Rows form an orthonormal basis of the complement of the normal at ``x``."""
    nu = _inward(body, np.asarray(x, dtype=float), tol)
    d = nu.size
    basis = np.column_stack([nu, np.eye(d)])
    q, _ = np.linalg.qr(basis)
    return q[:, 1:d].T


def tangential_direction(field, body, space, x, frame, tol: float = TOL_BOUNDARY,
                         ortho_tol: float = 1e-10) -> np.ndarray:
    """Tangential part ``F(x) = sum_k <v, z_k> z_k`` of the oblique direction."""
    nu = _inward(body, x, tol)
    frame = np.atleast_2d(np.asarray(frame, dtype=float))
    if len(frame) != nu.size - 1:
        raise ValueError("frame must have d - 1 vectors")
    full = np.vstack([nu, frame])
    if np.max(np.abs(full @ full.T - np.eye(len(full)))) > ortho_tol:
        raise ValueError("frame together with the normal is not orthonormal")
    v = oblique_direction(field, body, space, x, tol)
    return (frame @ v) @ frame


def reconstruct_direction(theta: float, tangential, nu) -> np.ndarray:
    """Recover the reflection vector from its angle and tangential part."""
    tangential = np.asarray(tangential, dtype=float)
    coef2 = 1.0 / math.sin(theta) ** 2 - float(tangential @ tangential)
    if coef2 <= 0:
        raise ValueError("angle and tangential part are inconsistent")
    return math.sqrt(coef2) * np.asarray(nu, dtype=float) + tangential
