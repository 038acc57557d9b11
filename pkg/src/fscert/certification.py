"""Feature-level and prediction-level certificates.

A feature certificate turns a robustness-score estimate into the cosine
bound curve over a budget grid and the radius at which that bound reaches
0.5. A prediction certificate pushes the bound through a cosine-prototype
head with the spherical cap bounds. ``rs_baseline_certify`` is the
classical label-vote smoothing comparator.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import gauss_core as gc
from .encoders import FeatureMap, LabeledDataset, cosine_softmax_loss
from .oracle import exact_binomial_lcb
from .smoothing import (STREAM_RS_ESTIMATE, STREAM_RS_SELECT, RobustnessEstimate, SmoothingConfig,
                        estimate_score, sample_features)

ABSTAIN = -1
EPS_RESOLUTION = 1e-4


@dataclass
class FeatureCertificate:
    input_id: int
    sigma: float
    n_samples: int
    mode: str
    score_point: float
    score_lb: float
    score_used: float
    saturated: bool
    fcsb_curve: list[tuple[float, float]]
    radius_at_half: float
    mean_cos: float = float("nan")

    def fcsb_at(self, eps: float) -> float:
        return gc.fcsb(self.score_used, eps, self.sigma)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["fcsb_curve"] = [[float(e), float(v)] for e, v in self.fcsb_curve]
        return rec


def certificate_from_scores(score_point: float, score_lb: float, sigma: float, n_samples: int,
                            eps_list: Sequence[float], mode: str = "certified", input_id: int = 0,
                            mean_cos: float = float("nan")) -> FeatureCertificate:
    eps_list = [float(e) for e in eps_list]
    if any(e < 0 for e in eps_list) or eps_list != sorted(eps_list):
        raise ValueError("eps_list must be ascending and non-negative")
    raw = score_lb if mode == "certified" else score_point
    used, saturated = gc.clamp_score(raw)
    curve = [(e, gc.fcsb(used, e, sigma)) for e in eps_list]
    return FeatureCertificate(
        input_id=input_id, sigma=float(sigma), n_samples=int(n_samples), mode=mode,
        score_point=float(score_point), score_lb=float(score_lb), score_used=used,
        saturated=saturated, fcsb_curve=curve,
        radius_at_half=gc.certified_radius(used, sigma, 0.5), mean_cos=float(mean_cos))


def certificate_from_estimate(est: RobustnessEstimate, eps_list, input_id: int = 0) -> FeatureCertificate:
    return certificate_from_scores(est.mean_score, est.score_lb, est.sigma, est.n_samples, eps_list,
                                   est.mode, input_id, est.mean_cos)


def certify_feature(fmap: FeatureMap, x, cfg: SmoothingConfig, eps_list: Sequence[float],
                    input_id: int = 0) -> FeatureCertificate:
    est = estimate_score(fmap, x, cfg, input_id)
    return certificate_from_estimate(est, eps_list, input_id)


# -- cosine-prototype head -----------------------------------------------------

@dataclass
class PrototypeHead:
    prototypes: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        norms = np.linalg.norm(self.prototypes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("prototypes must be unit norm")
        if not self.class_names:
            self.class_names = [str(k) for k in range(len(self.prototypes))]

    @property
    def K(self) -> int:
        return len(self.prototypes)

    def scores(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u) @ self.prototypes.T


@dataclass(frozen=True)
class Prediction:
    label: int
    tie: bool


def predict(head: PrototypeHead, u: np.ndarray) -> Prediction:
    s = head.scores(u)
    best = int(np.argmax(s))
    return Prediction(best, bool(np.count_nonzero(s == s[best]) > 1))


def predict_batch(head: PrototypeHead, U: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(U) @ head.prototypes.T, axis=1)


def fit_prototypes(fmap: FeatureMap, data: LabeledDataset, refine_epochs: int = 0, lr: float = 0.1,
                   temperature: float = 10.0) -> PrototypeHead:
    """Normalized class means of clean features, optionally refined.

    Refinement runs full-batch gradient descent on the cosine-softmax loss
    and re-normalizes the prototypes after every step.
    """
    feats = fmap.encode_batch(data.inputs)
    protos = []
    for k in range(data.class_count):
        members = feats[data.labels == k]
        if len(members) == 0:
            raise ValueError(f"class {k} has no samples")
        m = members.mean(axis=0)
        norm = np.linalg.norm(m)
        if norm < 1e-12:
            raise ValueError(f"class {k} features average to zero")
        protos.append(m / norm)
    P = np.stack(protos)
    U = ad.Tensor(feats)
    for _ in range(refine_epochs):
        p = ad.Tensor(P, requires_grad=True)
        loss = cosine_softmax_loss(U, p, data.labels, temperature)
        loss.backward()
        P = P - lr * p.grad
        P = P / np.linalg.norm(P, axis=1, keepdims=True)
    return PrototypeHead(P)


# -- prediction certificate ------------------------------------------------------

@dataclass
class PredictionCertificate:
    input_id: int
    clean_class: int
    tie: bool
    clean_scores: list[float]
    eps: float
    gamma_used: float
    lb_y: float
    max_ub_other: float
    certified: bool
    max_certified_eps: float

    def to_record(self) -> dict:
        return asdict(self)


def _margin(gamma: float, a: np.ndarray, y: int) -> tuple[float, float]:
    lb_y = gc.sphere_bounds(gamma, float(a[y])).lower
    ubs = [gc.sphere_bounds(gamma, float(a[k])).upper for k in range(len(a)) if k != y]
    return lb_y, max(ubs) if ubs else -1.0


def _certified_at(gamma: float, a: np.ndarray, y: int) -> bool:
    if gamma <= -1.0 + 1e-9:
        return False
    lb, ub = _margin(gamma, a, y)
    return lb > ub


def max_certified_eps(score_used: float, sigma: float, a: np.ndarray, y: int,
                      resolution: float = EPS_RESOLUTION) -> float:
    """Largest budget (to ``resolution``) whose margin condition holds.

    The bound decreases in eps and the margin increases in the bound, so
    the certified set is an interval starting at 0.
    """
    if not _certified_at(gc.fcsb(score_used, 0.0, sigma), a, y):
        return 0.0
    lo, hi = 0.0, sigma
    while _certified_at(gc.fcsb(score_used, hi, sigma), a, y):
        lo, hi = hi, 2.0 * hi
        if hi > 1e6:
            return lo
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if _certified_at(gc.fcsb(score_used, mid, sigma), a, y):
            lo = mid
        else:
            hi = mid
    return lo


def certify_prediction(head: PrototypeHead, clean_feature: np.ndarray, feature_cert: FeatureCertificate,
                       eps: float) -> PredictionCertificate:
    u = np.asarray(clean_feature, dtype=np.float64)
    u = u / np.linalg.norm(u)
    a = head.scores(u)
    pred = predict(head, u)
    y = pred.label
    gamma = feature_cert.fcsb_at(eps)
    lb, ub = _margin(gamma, a, y)
    certified = _certified_at(gamma, a, y)
    return PredictionCertificate(
        input_id=feature_cert.input_id, clean_class=y, tie=pred.tie,
        clean_scores=[float(v) for v in a], eps=float(eps), gamma_used=float(gamma),
        lb_y=float(lb), max_ub_other=float(ub), certified=bool(certified),
        max_certified_eps=max_certified_eps(feature_cert.score_used, feature_cert.sigma, a, y))


# -- label-vote smoothing comparator ---------------------------------------------

@dataclass(frozen=True)
class RsResult:
    label: int
    radius: float
    p_lower: float
    top_count: int
    n_estimate: int

    @property
    def abstained(self) -> bool:
        return self.label == ABSTAIN


def _vote_counts(fmap: FeatureMap, head: PrototypeHead, x, cfg: SmoothingConfig, input_id: int,
                 n: int, stream: int) -> np.ndarray:
    feats, _ = sample_features(fmap, x, cfg, input_id, stream=stream, n_samples=n)
    return np.bincount(predict_batch(head, feats), minlength=head.K)


def rs_baseline_certify(fmap: FeatureMap, head: PrototypeHead, x, sigma: float, n_select: int,
                        n_estimate: int, alpha: float, base_seed: int = 0, input_id: int = 0) -> RsResult:
    """Select the top vote class, bound its probability, radius sigma*Phi^-1(pA)."""
    if n_select < 1 or n_estimate < n_select:
        raise ValueError("need n_select >= 1 and n_estimate >= n_select")
    cfg = SmoothingConfig(sigma=sigma, n_samples=n_estimate, base_seed=base_seed, alpha=alpha)
    select = _vote_counts(fmap, head, x, cfg, input_id, n_select, STREAM_RS_SELECT)
    top = int(np.argmax(select))
    counts = _vote_counts(fmap, head, x, cfg, input_id, n_estimate, STREAM_RS_ESTIMATE)
    p_lower = exact_binomial_lcb(int(counts[top]), n_estimate, alpha)
    if p_lower <= 0.5:
        return RsResult(ABSTAIN, 0.0, p_lower, int(counts[top]), n_estimate)
    return RsResult(top, sigma * gc.std_normal_inv_cdf(p_lower), p_lower, int(counts[top]), n_estimate)


# -- aggregation ---------------------------------------------------------------

AGGREGATE_COLUMNS = ("sigma", "eps", "avg_fcsb", "avg_radius", "certified_fraction")


def aggregate_feature_certificates(certs: Sequence[FeatureCertificate], target_cos: float = 0.5) -> list[dict]:
    """One row per eps: mean bound, mean radius, fraction with bound >= target."""
    if not certs:
        return []
    rows = []
    radius = float(np.mean([c.radius_at_half for c in certs]))
    for j, (eps, _) in enumerate(certs[0].fcsb_curve):
        vals = np.array([c.fcsb_curve[j][1] for c in certs])
        rows.append({"sigma": certs[0].sigma, "eps": eps, "avg_fcsb": float(vals.mean()),
                     "avg_radius": radius, "certified_fraction": float(np.mean(vals >= target_cos))})
    return rows


def certified_at_grid(feature_cert: FeatureCertificate, head: PrototypeHead, clean_feature,
                      eps_grid: Sequence[float]) -> list[bool]:
    u = np.asarray(clean_feature, dtype=np.float64)
    a = head.scores(u / np.linalg.norm(u))
    y = predict(head, u).label
    return [_certified_at(feature_cert.fcsb_at(e), a, y) for e in eps_grid]


def rs_certified_at_grid(result: RsResult, eps_grid: Sequence[float]) -> list[bool]:
    return [(not result.abstained) and (result.radius >= e if e > 0 else True) for e in eps_grid]


def certified_accuracy_curve(certified: np.ndarray, correct: Sequence[bool]) -> list[float]:
    """Column means of ``certified & correct`` over inputs (rows)."""
    certified = np.asarray(certified, dtype=bool)
    hit = certified & np.asarray(correct, dtype=bool)[:, None]
    return [float(v) for v in hit.mean(axis=0)] if len(hit) else []
