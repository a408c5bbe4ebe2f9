"""Closed-form one-dimensional Gaussian quantities used as test oracles."""
from __future__ import annotations

import math

SQRT2 = math.sqrt(2.0)
SQRT2PI = math.sqrt(2.0 * math.pi)


def pdf(x: float, var: float = 1.0) -> float:
    return math.exp(-0.5 * x * x / var) / math.sqrt(2.0 * math.pi * var)


def cdf(x: float, var: float = 1.0) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0 * var))


def interval_mass(a: float, b: float, var: float = 1.0) -> float:
    """``P(a <= X <= b)`` for ``X ~ N(0, var)``."""
    return cdf(b, var) - cdf(a, var)


def partial_first_moment(a: float, b: float, var: float = 1.0) -> float:
    """``E[X; a <= X <= b]``, which equals ``var * (pdf(a) - pdf(b))``."""
    return var * (_pdf_or_zero(a, var) - _pdf_or_zero(b, var))


def partial_second_moment(a: float, b: float, var: float = 1.0) -> float:
    """``E[X^2; a <= X <= b]``."""
    boundary = _x_pdf(a, var) - _x_pdf(b, var)
    return var * (interval_mass(a, b, var) + boundary)


def truncated_second_moment(a: float, b: float, var: float = 1.0) -> float:
    """``E[X^2 | a <= X <= b]``."""
    return partial_second_moment(a, b, var) / interval_mass(a, b, var)


def interval_boundary_mass(a: float, b: float, var: float = 1.0) -> float:
    """Gaussian surface mass of the interval ``[a, b]``: the density at its ends."""
    return _pdf_or_zero(a, var) + _pdf_or_zero(b, var)


def _pdf_or_zero(x: float, var: float) -> float:
    return 0.0 if math.isinf(x) else pdf(x, var)


def _x_pdf(x: float, var: float) -> float:
    return 0.0 if math.isinf(x) else x * pdf(x, var)
