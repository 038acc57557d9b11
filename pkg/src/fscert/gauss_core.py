"""Scalar Gaussian mathematics behind the feature-space certificates.

Everything here is a pure function of floats. The normal CDF is evaluated
through ``math.erfc`` and its inverse through a rational approximation that
is polished with one Halley step, which brings the round trip to ~1e-15.
"""

from __future__ import annotations

import math
from typing import NamedTuple

SCORE_CLAMP = 1e-6

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of the function."""


class SaturationError(DomainError):
    """Inverse CDF requested at exactly 0 or 1."""

    def __init__(self, p: float):
        super().__init__(f"inverse normal CDF saturates at p={p!r}; clamp the score first")
        self.p = p
        self.sign = 1 if p >= 1.0 else -1


def _check_finite(name: str, x: float) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise DomainError(f"{name} must be finite, got {x!r}")
    return x


def std_normal_cdf(x: float) -> float:
    x = _check_finite("x", x)
    return min(1.0, max(0.0, 0.5 * math.erfc(-x / _SQRT2)))


def std_normal_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / _SQRT2PI


# Acklam's coefficients for the central and tail regions.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _rational_inv_cdf(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
               ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log1p(-p))
        return -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
                ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
           (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def std_normal_inv_cdf(p: float) -> float:
    """Inverse of the standard normal CDF on the open interval (0, 1).

    Raises :class:`SaturationError` at p in {0, 1} and :class:`DomainError`
    outside [0, 1].
    """
    p = _check_finite("p", p)
    if p < 0.0 or p > 1.0:
        raise DomainError(f"p must lie in (0, 1), got {p!r}")
    if p == 0.0 or p == 1.0:
        raise SaturationError(p)
    if p == 0.5:
        return 0.0
    x = _rational_inv_cdf(p)
    # Halley refinement; the residual is taken on the smaller tail to keep precision.
    if p < 0.5:
        e = 0.5 * math.erfc(-x / _SQRT2) - p
    else:
        e = (1.0 - p) - 0.5 * math.erfc(x / _SQRT2)
    u = e * _SQRT2PI * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def clamp_score(score: float) -> tuple[float, bool]:
    """Clamp a score into [1e-6, 1 - 1e-6]; the flag reports that a limit was hit."""
    score = _check_finite("score", score)
    saturated = score >= 1.0 - SCORE_CLAMP or score <= SCORE_CLAMP
    return min(1.0 - SCORE_CLAMP, max(SCORE_CLAMP, score)), saturated


def _check_sigma(sigma: float) -> float:
    sigma = _check_finite("sigma", sigma)
    if sigma <= 0.0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")
    return sigma


def fcsb(score_lb: float, eps: float, sigma: float = 1.0) -> float:
    """Certified lower bound on Cos(smoothed feature at x', clean feature).

    ``2 * Phi(Phi^-1(score_lb) - eps / sigma) - 1``. The score must already
    be clamped to the open unit interval.
    """
    sigma = _check_sigma(sigma)
    eps = _check_finite("eps", eps)
    if eps < 0.0:
        raise DomainError(f"eps must be non-negative, got {eps!r}")
    if eps == 0.0:
        return 2.0 * float(score_lb) - 1.0
    value = 2.0 * std_normal_cdf(std_normal_inv_cdf(score_lb) - eps / sigma) - 1.0
    return min(1.0, max(-1.0, value))


def certified_radius(score_lb: float, sigma: float, target_cos: float = 0.5) -> float:
    """Largest l2 radius over which the bound stays at or above ``target_cos``."""
    sigma = _check_sigma(sigma)
    target_cos = _check_finite("target_cos", target_cos)
    if not -1.0 < target_cos < 1.0:
        raise DomainError(f"target_cos must lie in (-1, 1), got {target_cos!r}")
    threshold = 0.5 * (1.0 + target_cos)
    if score_lb <= threshold:
        return 0.0
    radius = sigma * (std_normal_inv_cdf(score_lb) - std_normal_inv_cdf(threshold))
    return max(0.0, radius)


def eps_for_cos(score_lb: float, sigma: float, target_cos: float) -> float:
    """Alias of :func:`certified_radius` read as "budget at which the bound hits target"."""
    return certified_radius(score_lb, sigma, target_cos)


def score_lower_confidence_bound(mean: float, n: int, alpha: float) -> float:
    """One-sided Hoeffding lower bound for the mean of n samples in [0, 1]."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha!r}")
    return max(0.0, float(mean) - math.sqrt(math.log(1.0 / alpha) / (2.0 * n)))


class SphereBounds(NamedTuple):
    lower: float
    upper: float


def sphere_bounds(gamma: float, a: float) -> SphereBounds:
    """Range of v.p over unit v with u.v >= gamma, given a = u.p.

    Angles: a = cos(alpha), gamma = cos(delta). The cap around u reaches
    angles in [max(0, alpha - delta), min(pi, alpha + delta)] from p, so
    the extremes are the two geodesic rotations unless the cap already
    contains p (upper = 1) or -p (lower = -1).
    """
    gamma = min(1.0, max(-1.0, _check_finite("gamma", gamma)))
    a = min(1.0, max(-1.0, _check_finite("a", a)))
    cross = math.sqrt(max(0.0, 1.0 - gamma * gamma)) * math.sqrt(max(0.0, 1.0 - a * a))
    upper = 1.0 if gamma <= a else gamma * a + cross
    lower = -1.0 if gamma <= -a else gamma * a - cross
    return SphereBounds(min(1.0, max(-1.0, lower)), min(1.0, max(-1.0, upper)))


def sphere_bounds_geodesic(gamma: float, a: float) -> SphereBounds:
    """The plain geodesic pair gamma*a -/+ sqrt(1-gamma^2)sqrt(1-a^2).

    Coincides with :func:`sphere_bounds` whenever gamma >= |a|, which is
    the only regime where a margin certificate can hold.
    """
    cross = math.sqrt(max(0.0, 1.0 - gamma * gamma)) * math.sqrt(max(0.0, 1.0 - a * a))
    return SphereBounds(max(-1.0, gamma * a - cross), min(1.0, gamma * a + cross))
