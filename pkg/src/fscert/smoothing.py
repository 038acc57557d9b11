"""Monte Carlo smoothed encoder and Gaussian robustness score.

Noise is counter-based: sample ``i`` of input ``input_id`` always comes
from the Philox4x64 block at counter ``i * blocks_per_sample`` under a
key derived from ``(base_seed, input_id)``. Any split of the sample range
across worker lanes therefore reproduces the sequential draws exactly,
and the reduction runs once over the assembled sample array.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import gauss_core as gc
from .encoders import FeatureMap

MODES = ("point-estimate", "certified")
CHUNK_ROWS = 16384
MAX_REJECT_FRACTION = 0.01

# counter word 1 separates independent uses of the same input key
STREAM_SMOOTH = 0
STREAM_RS_SELECT = 1
STREAM_RS_ESTIMATE = 2
STREAM_ATTACK_INIT = 3
STREAM_EOT = 4
STREAM_GSB = 5


class TooManyRejectionsError(RuntimeError):
    pass


def worker_lanes(requested: int | None = None) -> int:
    cap = os.environ.get("FSCERT_THREADS")
    lanes = requested if requested is not None else (int(cap) if cap else 1)
    if cap:
        lanes = min(lanes, int(cap))
    return max(1, lanes)


def input_key(base_seed: int, input_id: int) -> np.ndarray:
    return np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF,
                                   int(input_id) & 0xFFFFFFFFFFFFFFFF]).generate_state(2, np.uint64)


def gaussian_block(key: np.ndarray, start: int, stop: int, d: int,
                   stream: int = STREAM_SMOOTH, substream: int = 0) -> np.ndarray:
    """Standard normal rows ``start..stop-1`` of the counter-based stream."""
    blocks = -(-d // 4)
    counter = np.array([start * blocks, stream, substream, 0], dtype=np.uint64)
    raw = np.random.Philox(key=key, counter=counter).random_raw((stop - start) * blocks * 4)
    raw = raw.reshape(stop - start, blocks * 4)[:, :d]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
    return ndtri(u)


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.25
    n_samples: int = 10_000
    base_seed: int = 0
    alpha: float = 0.001
    mode: str = "certified"
    lanes: int | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def _sample_range(fmap: FeatureMap, x: np.ndarray, key, sigma: float, start: int, stop: int,
                  stream: int):
    eps = gaussian_block(key, start, stop, fmap.d_in, stream) * sigma
    feats, bad = fmap.features(x[None, :] + eps)
    rejected = 0
    attempt = 0
    while bad.any():
        attempt += 1
        rows = np.flatnonzero(bad)
        rejected += len(rows)
        if rejected > MAX_REJECT_FRACTION * (stop - start) + 1 or attempt > 20:
            raise TooManyRejectionsError(
                f"{rejected} degenerate samples in rows {start}..{stop}")
        for r in rows:
            i = start + r
            redo = gaussian_block(key, i, i + 1, fmap.d_in, stream, substream=attempt) * sigma
            f, b = fmap.features(x[None, :] + redo)
            feats[r] = f[0]
            bad[r] = b[0]
    return feats, rejected


def sample_features(fmap: FeatureMap, x: np.ndarray, cfg: SmoothingConfig, input_id: int = 0,
                    stream: int = STREAM_SMOOTH, n_samples: int | None = None,
                    chunk_rows: int = CHUNK_ROWS):
    """Unit features of all noisy copies of x, in sample-index order.

    Returns ``(features, rejected_count)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (fmap.d_in,):
        raise ValueError(f"input shape {x.shape} does not match encoder d_in={fmap.d_in}")
    n = cfg.n_samples if n_samples is None else n_samples
    key = input_key(cfg.base_seed, input_id)
    bounds = list(range(0, n, chunk_rows)) + [n]
    chunks = list(zip(bounds[:-1], bounds[1:]))
    lanes = worker_lanes(cfg.lanes)
    if lanes == 1 or len(chunks) == 1:
        parts = [_sample_range(fmap, x, key, cfg.sigma, a, b, stream) for a, b in chunks]
    else:
        with ThreadPoolExecutor(max_workers=lanes) as pool:
            parts = list(pool.map(lambda ab: _sample_range(fmap, x, key, cfg.sigma, *ab, stream), chunks))
    rejected = sum(p[1] for p in parts)
    if rejected > MAX_REJECT_FRACTION * n:
        raise TooManyRejectionsError(f"{rejected} of {n} samples were degenerate")
    return np.concatenate([p[0] for p in parts], axis=0), rejected


@dataclass(frozen=True)
class SmoothedFeature:
    mean_feature: np.ndarray
    norm: float
    normalized: np.ndarray
    n_samples: int
    rejected: int = 0

    @property
    def jensen_slack(self) -> float:
        return 1e-6 + 3.0 / math.sqrt(self.n_samples)


@dataclass(frozen=True)
class RobustnessEstimate:
    mean_score: float
    score_lb: float
    n_samples: int
    sigma: float
    mean_cos: float
    cos_std: float
    mode: str
    alpha: float
    rejected: int = 0

    @property
    def score_used(self) -> float:
        return self.score_lb if self.mode == "certified" else self.mean_score

    @property
    def clamped(self) -> tuple[float, bool]:
        return gc.clamp_score(self.score_used)


def _smoothed(feats: np.ndarray, rejected: int) -> SmoothedFeature:
    mean = feats.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    normalized = mean / norm if norm > 0 else mean
    return SmoothedFeature(mean, norm, normalized, len(feats), rejected)


def _estimate(feats: np.ndarray, reference: np.ndarray, cfg: SmoothingConfig, rejected: int):
    cos = feats @ reference
    mean_cos = float(cos.mean())
    mean_score = 0.5 * (1.0 + mean_cos)
    n = len(cos)
    return RobustnessEstimate(
        mean_score=mean_score,
        score_lb=gc.score_lower_confidence_bound(mean_score, n, cfg.alpha),
        n_samples=n, sigma=cfg.sigma, mean_cos=mean_cos,
        cos_std=float(cos.std(ddof=1)) if n > 1 else 0.0,
        mode=cfg.mode, alpha=cfg.alpha, rejected=rejected)


def smooth_feature(fmap: FeatureMap, x, cfg: SmoothingConfig, input_id: int = 0) -> SmoothedFeature:
    feats, rejected = sample_features(fmap, x, cfg, input_id)
    return _smoothed(feats, rejected)


def estimate_score(fmap: FeatureMap, x, cfg: SmoothingConfig, input_id: int = 0,
                   reference: np.ndarray | None = None) -> RobustnessEstimate:
    """Gaussian robustness score: half of one plus the mean noisy/clean cosine.

    ``reference`` defaults to ``fmap.reference(x)``, the clean feature of
    the base encoder (a booster-wrapped encoder reports its base here).
    """
    x = np.asarray(x, dtype=np.float64)
    ref = fmap.reference(x) if reference is None else np.asarray(reference, dtype=np.float64)
    feats, rejected = sample_features(fmap, x, cfg, input_id)
    return _estimate(feats, ref, cfg, rejected)


def smooth_and_score(fmap: FeatureMap, x, cfg: SmoothingConfig, input_id: int = 0,
                     reference: np.ndarray | None = None):
    """Both quantities from one shared sample set."""
    x = np.asarray(x, dtype=np.float64)
    ref = fmap.reference(x) if reference is None else np.asarray(reference, dtype=np.float64)
    feats, rejected = sample_features(fmap, x, cfg, input_id)
    return _smoothed(feats, rejected), _estimate(feats, ref, cfg, rejected)


@dataclass(frozen=True)
class LipschitzReport:
    phi_gap: float
    scaled_distance: float
    allowance: float
    violation: bool
    skipped: bool
    score_1: float
    score_2: float


def _phi_inv_se(est: RobustnessEstimate) -> float:
    # delta method: sd(S_i) = sd(cos_i) / 2, then divide by the normal density at Phi^-1(S)
    z = gc.std_normal_inv_cdf(est.mean_score)
    return 0.5 * est.cos_std / math.sqrt(est.n_samples) / gc.std_normal_pdf(z)


def lipschitz_probe(fmap: FeatureMap, x1, x2, cfg: SmoothingConfig,
                    ids: tuple[int, int] = (0, 1), n_sd: float = 3.0) -> LipschitzReport:
    """Empirical check that x -> Phi^-1(S(x)) is (1/sigma)-Lipschitz.

    Both scores are measured against the clean feature at x1.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    ref = fmap.reference(x1)
    point_cfg = SmoothingConfig(cfg.sigma, cfg.n_samples, cfg.base_seed, cfg.alpha,
                                "point-estimate", cfg.lanes)
    e1 = estimate_score(fmap, x1, point_cfg, ids[0], reference=ref)
    e2 = estimate_score(fmap, x2, point_cfg, ids[1], reference=ref)
    dist = float(np.linalg.norm(x1 - x2)) / cfg.sigma
    lo, hi = gc.SCORE_CLAMP, 1.0 - gc.SCORE_CLAMP
    if not all(lo < e.mean_score < hi for e in (e1, e2)):
        return LipschitzReport(float("nan"), dist, float("nan"), False, True, e1.mean_score, e2.mean_score)
    gap = abs(gc.std_normal_inv_cdf(e1.mean_score) - gc.std_normal_inv_cdf(e2.mean_score))
    allowance = n_sd * math.hypot(_phi_inv_se(e1), _phi_inv_se(e2))
    return LipschitzReport(gap, dist, allowance, gap > dist + allowance, False,
                           e1.mean_score, e2.mean_score)
