"""Exponential-martingale reweighting between reflected SDEs with different drifts."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GirsanovWeight",
    "accumulate",
    "novikov_bound",
    "weights_from_batch",
    "weighted_mean",
    "raw_mean",
    "weighted_expectation",
    "WeightedEstimate",
]


@dataclass(frozen=True)
class GirsanovWeight:
    z: float = 0.0
    qv: float = 0.0

    def __post_init__(self):
        if self.qv < 0:
            raise ValueError("quadratic variation must be >= 0")

    @property
    def weight(self) -> float:
        return math.exp(self.z - 0.5 * self.qv)


def accumulate(state: GirsanovWeight, v, dW, dt: float) -> GirsanovWeight:
    """Add ``<v, dW>`` to ``z`` and ``|v|^2 dt`` to ``qv``.

    ``v`` is ``B - beta`` at the current state and ``dW`` must be the increment
    the path stepper used.
    """
    v = np.asarray(v, dtype=float)
    dW = np.asarray(dW, dtype=float)
    return GirsanovWeight(state.z + float(v @ dW), state.qv + float(v @ v) * dt)


def novikov_bound(sup_diff: float, T: float) -> float:
    """``exp(T sup^2 / 2)``, a bound for ``E exp(qv / 2)``."""
    if sup_diff < 0:
        raise ValueError("sup_diff must be >= 0")
    return math.exp(0.5 * T * sup_diff**2)


def weights_from_batch(batch) -> np.ndarray:
    if batch.girsanov_z is None:
        raise ValueError("batch was simulated without a Girsanov target")
    return np.exp(batch.girsanov_z - 0.5 * batch.girsanov_qv)


@dataclass(frozen=True)
class WeightedEstimate:
    estimate: float
    std_error: float
    ess: float
    flagged: bool


def weighted_mean(weights, values, ess_floor: float = 0.0) -> WeightedEstimate:
    """Self-normalized estimate ``sum w f / sum w`` with a delta-method SE."""
    w = np.asarray(weights, dtype=float)
    f = np.asarray(values, dtype=float)
    if w.shape != f.shape:
        raise ValueError("weights and values differ in shape")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive sum")
    n = len(w)
    est = float(np.sum(w * f) / np.sum(w))
    wbar = w.mean()
    resid = w * (f - est) / wbar
    se = float(math.sqrt(np.sum(resid**2) / (n * max(n - 1, 1))))
    ess = float(w.sum() ** 2 / np.sum(w * w))
    return WeightedEstimate(est, se, ess, ess < ess_floor)


def raw_mean(values) -> tuple[float, float]:
    """Plain mean and standard error."""
    v = np.asarray(values, dtype=float)
    n = len(v)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf


def weighted_expectation(paths, f, ess_floor: float = 0.0) -> WeightedEstimate:
    """Reweighted expectation of a functional of the terminal state.

    ``paths`` is a sequence of ``(PathSample, GirsanovWeight)`` pairs.
    """
    w = np.array([gw.weight for _, gw in paths])
    vals = np.array([f(p.states[-1]) for p, _ in paths], dtype=float)
    return weighted_mean(w, vals, ess_floor)
