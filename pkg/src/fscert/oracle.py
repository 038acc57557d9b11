"""Brute-force references for the closed forms and Monte Carlo estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import betainc

from . import gauss_core as gc
from .encoders import FeatureMap
from .smoothing import SmoothingConfig, gaussian_block, input_key, smooth_and_score


def exact_binomial_lcb(successes: int, trials: int, alpha: float) -> float:
    """One-sided exact lower bound on a binomial proportion.

    The largest p with P(X >= successes | trials, p) <= alpha, found by
    bisection on the tail (regularized incomplete beta).
    """
    if not 0 <= successes <= trials:
        raise ValueError("need 0 <= successes <= trials")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if successes == 0:
        return 0.0
    if successes == trials:
        return alpha ** (1.0 / trials)
    lo, hi = 0.0, successes / trials
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if betainc(successes, trials - successes + 1, mid) > alpha:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-15:
            break
    return lo


@dataclass
class SphereSearchSpec:
    gamma: float
    u: np.ndarray
    p: np.ndarray
    samples: int = 100_000
    seed: int = 0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        for name, vec in (("u", self.u), ("p", self.p)):
            if abs(np.linalg.norm(vec) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be unit norm")

    @property
    def dimension(self) -> int:
        return self.u.shape[0]


@dataclass
class SphereExtrema:
    minimum: float
    maximum: float
    sample_min: float
    sample_max: float
    feasible: int


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _geodesic_candidates(u: np.ndarray, p: np.ndarray, gamma: float) -> np.ndarray:
    """Feasible points on the great circle through u and p.

    v(t) = cos(t) u + sin(t) w with w the unit part of p orthogonal to u;
    the cap is |t| <= delta. The extremes of v.p on that arc are at the
    arc ends and at the clipped angles of p and -p.
    """
    a = float(np.clip(u @ p, -1.0, 1.0))
    w = p - a * u
    nw = np.linalg.norm(w)
    if nw < 1e-12:
        w = np.zeros_like(u)
        w[np.argmin(np.abs(u))] = 1.0
        w -= (w @ u) * u
        nw = np.linalg.norm(w)
    w /= nw
    delta = math.acos(min(1.0, max(-1.0, gamma)))
    alpha = math.acos(a)
    angles = [0.0, delta, -delta, min(alpha, delta), max(alpha - math.pi, -delta)]
    return np.stack([math.cos(t) * u + math.sin(t) * w for t in angles])


def brute_force_sphere_extrema(spec: SphereSearchSpec) -> SphereExtrema:
    """min / max of v.p over sampled unit v with u.v >= gamma."""
    rng = np.random.default_rng(spec.seed)
    v = _unit_rows(rng, spec.samples, spec.dimension)
    feasible = v[v @ spec.u >= spec.gamma]
    cands = _geodesic_candidates(spec.u, spec.p, spec.gamma)
    cands = cands[cands @ spec.u >= spec.gamma - 1e-12]
    sample_vals = feasible @ spec.p
    vals = np.concatenate([sample_vals, cands @ spec.p, [spec.u @ spec.p]])
    s_min = float(sample_vals.min()) if len(sample_vals) else float("nan")
    s_max = float(sample_vals.max()) if len(sample_vals) else float("nan")
    return SphereExtrema(float(vals.min()), float(vals.max()), s_min, s_max, len(feasible))


@dataclass
class SphereGridReport:
    grid: int
    samples: int
    max_deviation: float
    violations: int
    worst: tuple = field(default_factory=tuple)


def sphere_grid_check(grid: int = 21, samples: int = 1_000_000, dimension: int = 3,
                      seed: int = 0, lim: float = 0.95, slack: float = 1e-12) -> SphereGridReport:
    """Compare sphere_bounds with brute force on a (gamma, a) grid.

    One shared sample set; u = e1 and p = a e1 + sqrt(1-a^2) e2.
    """
    rng = np.random.default_rng(seed)
    v = _unit_rows(rng, samples, dimension)
    u = np.zeros(dimension)
    u[0] = 1.0
    uv = v[:, 0]
    worst_dev, worst, violations = 0.0, (), 0
    for gamma in np.linspace(-lim, lim, grid):
        mask = uv >= gamma
        vf = v[mask]
        for a in np.linspace(-lim, lim, grid):
            p = np.zeros(dimension)
            p[0], p[1] = a, math.sqrt(1.0 - a * a)
            vals = vf @ p
            cands = _geodesic_candidates(u, p, gamma)
            cands = cands[cands @ u >= gamma - 1e-12]
            all_vals = np.concatenate([vals, cands @ p])
            lower, upper = gc.sphere_bounds(float(gamma), float(a))
            violations += int(np.sum(vals < lower - slack) + np.sum(vals > upper + slack))
            dev = max(abs(all_vals.min() - lower), abs(all_vals.max() - upper))
            if dev > worst_dev:
                worst_dev, worst = dev, (float(gamma), float(a))
    return SphereGridReport(grid, samples, worst_dev, violations, worst)


def reference_loop_smooth(fmap: FeatureMap, x, sigma: float, n: int, base_seed: int,
                          input_id: int = 0) -> np.ndarray:
    """Straightforward per-sample loop over the same counter-based draws."""
    x = np.asarray(x, dtype=np.float64)
    key = input_key(base_seed, input_id)
    total = np.zeros(fmap.d_f)
    for i in range(n):
        eps = gaussian_block(key, i, i + 1, fmap.d_in)[0] * sigma
        total += fmap.encode(x + eps)
    return total / n


@dataclass
class IdentityReport:
    inputs: int
    max_identity_error: float
    max_norm: float
    norm_violations: int
    renormalization_violations: int


def proof_identity_check(fmap: FeatureMap, xs, cfg: SmoothingConfig, first_id: int = 0) -> IdentityReport:
    """Same-sample checks: <f_hat, f> = 2S - 1, ||f_hat|| <= 1, Cos >= inner."""
    max_err, max_norm, norm_bad, renorm_bad = 0.0, 0.0, 0, 0
    xs = np.atleast_2d(xs)
    for i, x in enumerate(xs):
        sm, est = smooth_and_score(fmap, x, cfg, first_id + i)
        ref = fmap.reference(x)
        inner = float(sm.mean_feature @ ref)
        max_err = max(max_err, abs(inner - (2.0 * est.mean_score - 1.0)))
        max_norm = max(max_norm, sm.norm)
        norm_bad += int(sm.norm > 1.0 + sm.jensen_slack)
        cos = float(sm.normalized @ ref)
        # for a negative inner product dividing by a norm <= 1 moves it down
        renorm_bad += int(inner >= 0 and cos < inner - 1e-15)
    return IdentityReport(len(xs), max_err, max_norm, norm_bad, renorm_bad)


class LatticeSmoother:
    """Deterministic Gaussian smoothing of a 2-D encoder on a lattice.

    The encoder is tabulated on a square lattice and convolved with a
    sampled Gaussian kernel (a Riemann sum of the smoothing integral, which
    converges very fast for smooth maps). Lattice nodes inside the window
    then carry the smoothed feature with no Monte Carlo error.
    """

    def __init__(self, fmap: FeatureMap, center, half_width: float, sigma: float,
                 spacing: float, truncate: float = 6.0):
        if fmap.d_in != 2:
            raise ValueError("lattice smoothing is implemented for d_in = 2")
        self.center = np.asarray(center, dtype=np.float64)
        self.spacing = spacing
        self.sigma = sigma
        m = int(math.ceil(half_width / spacing))
        k = int(math.ceil(truncate * sigma / spacing))
        self.m = m
        offsets = np.arange(-(m + k), m + k + 1) * spacing
        gx, gy = np.meshgrid(offsets, offsets, indexing="ij")
        pts = self.center + np.stack([gx.ravel(), gy.ravel()], axis=1)
        feats = fmap.encode_batch(pts).reshape(len(offsets), len(offsets), fmap.d_f)
        ko = np.arange(-k, k + 1) * spacing
        kern1 = np.exp(-0.5 * (ko / sigma) ** 2)
        kern = np.outer(kern1, kern1)
        kern /= kern.sum()
        sm = np.stack([fftconvolve(feats[..., c], kern, mode="valid") for c in range(fmap.d_f)], axis=-1)
        self.smoothed = sm  # shape (2m+1, 2m+1, d_f)
        inner = np.arange(-m, m + 1) * spacing
        ix, iy = np.meshgrid(inner, inner, indexing="ij")
        self.offsets = np.stack([ix, iy], axis=-1)

    def disc(self, radius: float):
        """Offsets inside the closed disc and their smoothed features."""
        r = np.linalg.norm(self.offsets, axis=-1)
        mask = r <= radius + 1e-12
        return self.offsets[mask], self.smoothed[mask]
