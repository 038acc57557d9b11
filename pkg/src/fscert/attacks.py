"""Projected gradient attacks on plain and smoothed encoders, and a certificate checker.

Attacks run batched over many inputs at once; each row has its own
budget, its own noise stream and its own best-iterate bookkeeping. With
``eot_samples > 0`` the attacked model is the smoothed encoder: the
objective is evaluated on the normalized mean of unit features over fresh
noise draws each step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import gauss_core as gc
from .certification import FeatureCertificate, PredictionCertificate, PrototypeHead
from .encoders import FeatureMap
from .smoothing import (STREAM_ATTACK_INIT, STREAM_EOT, SmoothingConfig, gaussian_block, input_key,
                        sample_features)

NORMS = ("l2", "linf")
OBJECTIVES = ("untargeted-feature", "targeted-feature", "prediction-flip")
STALL_STEPS = 10


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "l2"
    eps: float = 1.0
    steps: int = 200
    step_size: float | None = None
    objective: str = "untargeted-feature"
    eot_samples: int = 0
    sigma: float = 0.25
    seed: int = 0
    random_start: bool = True

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eot_samples < 0:
            raise ValueError("eot_samples must be >= 0")
        if self.eot_samples > 0 and not self.sigma > 0:
            raise ValueError("smoothed attacks need sigma > 0")

    def resolved_step(self, eps: float) -> float:
        return self.step_size if self.step_size is not None else 2.5 * eps / self.steps


@dataclass
class AttackResult:
    x_adv: np.ndarray
    achieved_cos_clean: float
    achieved_cos_target: float
    prediction_flipped: bool
    norm_used: float
    objective: float
    stalled: bool = False
    steps_run: int = 0


def _project(delta: np.ndarray, eps: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.clip(delta, -eps[:, None], eps[:, None])
    n = np.linalg.norm(delta, axis=1)
    factor = np.minimum(1.0, eps / np.maximum(n, 1e-300))
    return delta * factor[:, None]


def _random_start(keys, d: int, eps: np.ndarray, norm: str) -> np.ndarray:
    g = np.stack([gaussian_block(k, 0, 1, d + 1, STREAM_ATTACK_INIT)[0] for k in keys])
    if norm == "linf":
        return np.tanh(g[:, :d]) * eps[:, None]
    direction = g[:, :d] / np.linalg.norm(g[:, :d], axis=1, keepdims=True)
    # the spare coordinate gives a uniform radius in the ball
    u = np.array([gc.std_normal_cdf(v) for v in g[:, d]])
    radius = eps * u ** (1.0 / d)
    return direction * radius[:, None]


class _Objective:
    """Per-row attack objective (to be maximized) on a batch of points."""

    def __init__(self, fmap: FeatureMap, cfg: AttackConfig, refs: np.ndarray, targets, head, labels, keys):
        self.fmap, self.cfg, self.refs = fmap, cfg, refs
        self.targets, self.head, self.labels, self.keys = targets, head, labels, keys

    def features(self, Xa: ad.Tensor, step: int, rows: np.ndarray) -> ad.Tensor:
        m = self.cfg.eot_samples
        if m == 0:
            return ad.normalize_rows(self.fmap.raw(Xa))
        noise = np.concatenate([
            gaussian_block(self.keys[r], step * m, (step + 1) * m, self.fmap.d_in, STREAM_EOT)
            for r in rows]) * self.cfg.sigma
        B, d = Xa.shape
        rep = ad.reshape(ad.Tensor(np.ones((B, m, 1))) * ad.reshape(Xa, (B, 1, d)), (B * m, d))
        u = ad.normalize_rows(self.fmap.raw(rep + noise))
        mean = ad.tmean(ad.reshape(u, (B, m, u.shape[1])), axis=1)
        return ad.normalize_rows(mean)

    def value(self, u: ad.Tensor, rows: np.ndarray) -> ad.Tensor:
        obj = self.cfg.objective
        if obj == "untargeted-feature":
            return -ad.tsum(u * self.refs[rows], axis=-1)
        if obj == "targeted-feature":
            return ad.tsum(u * self.targets[rows], axis=-1)
        scores = u @ self.head.prototypes.T
        y = self.labels[rows]
        onehot = np.zeros(scores.shape)
        onehot[np.arange(len(rows)), y] = 1.0
        s_y = ad.tsum(scores * onehot, axis=-1, keepdims=True)
        others = scores + onehot * -4.0  # scores live in [-1, 1]
        return ad.reshape(ad.tmax(others, axis=1) - s_y, (len(rows),))


def pgd_attack_batch(fmap: FeatureMap, X: np.ndarray, cfg: AttackConfig, eps: Sequence[float] | None = None,
                     targets: np.ndarray | None = None, head: PrototypeHead | None = None,
                     labels: Sequence[int] | None = None, input_ids: Sequence[int] | None = None) -> list[AttackResult]:
    """Batched PGD; ``eps`` overrides the per-row budget (default cfg.eps)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    B, d = X.shape
    if d != fmap.d_in:
        raise ValueError(f"input dimension {d} != encoder d_in {fmap.d_in}")
    if cfg.objective == "targeted-feature" and targets is None:
        raise ValueError("targeted attacks need target features")
    if cfg.objective == "prediction-flip" and head is None:
        raise ValueError("prediction-flip attacks need a prototype head")
    budget = np.full(B, cfg.eps) if eps is None else np.asarray(eps, dtype=np.float64)
    if budget.shape != (B,) or np.any(budget <= 0):
        raise ValueError("per-row budgets must be positive")
    ids = np.arange(B) if input_ids is None else np.asarray(input_ids)
    keys = [input_key(cfg.seed, int(i)) for i in ids]
    refs = np.stack([fmap.reference(x) for x in X])
    if targets is not None:
        targets = np.atleast_2d(targets)
        targets = targets / np.linalg.norm(targets, axis=1, keepdims=True)
    if head is not None and labels is None:
        labels = np.argmax(refs @ head.prototypes.T, axis=1)
    labels = None if labels is None else np.asarray(labels)
    objective = _Objective(fmap, cfg, refs, targets, head, labels, keys)

    delta = _random_start(keys, d, budget, cfg.norm) if cfg.random_start else np.zeros((B, d))
    delta = _project(delta, budget, cfg.norm)
    step_size = np.array([cfg.resolved_step(e) for e in budget])
    best_val = np.full(B, -np.inf)
    best_delta = delta.copy()
    best_feat = np.zeros_like(refs)
    zero_run = np.zeros(B, dtype=int)
    active = np.ones(B, dtype=bool)
    steps_run = np.zeros(B, dtype=int)
    for step in range(cfg.steps + 1):
        rows = np.flatnonzero(active)
        if len(rows) == 0:
            break
        Xa = ad.Tensor(X[rows] + delta[rows], requires_grad=True)
        u = objective.features(Xa, step, rows)
        val = objective.value(u, rows)
        better = val.data > best_val[rows]
        best_val[rows[better]] = val.data[better]
        best_delta[rows[better]] = delta[rows[better]]
        best_feat[rows[better]] = u.data[better]
        if step == cfg.steps:
            break
        ad.tsum(val).backward()
        g = Xa.grad if Xa.grad is not None else np.zeros_like(Xa.data)
        gnorm = np.linalg.norm(g, axis=1)
        zero = gnorm == 0.0
        zero_run[rows] = np.where(zero, zero_run[rows] + 1, 0)
        if cfg.norm == "l2":
            move = g / np.where(zero, 1.0, gnorm)[:, None]
        else:
            move = np.sign(g)
        delta[rows] = _project(delta[rows] + step_size[rows, None] * move, budget[rows], cfg.norm)
        steps_run[rows] += 1
        active[rows[zero_run[rows] >= STALL_STEPS]] = False

    out = []
    for b in range(B):
        x_adv = X[b] + best_delta[b]
        u = best_feat[b]
        flipped = False
        if head is not None:
            flipped = int(np.argmax(head.scores(u))) != int(labels[b])
        cos_t = float(u @ targets[b]) if targets is not None else float("nan")
        norm_used = float(np.abs(best_delta[b]).max() if cfg.norm == "linf" else np.linalg.norm(best_delta[b]))
        out.append(AttackResult(x_adv, float(u @ refs[b]), cos_t, flipped, norm_used, float(best_val[b]),
                                stalled=bool(zero_run[b] >= STALL_STEPS), steps_run=int(steps_run[b])))
    return out


def pgd_attack(fmap: FeatureMap, x: np.ndarray, cfg: AttackConfig, target_feature: np.ndarray | None = None,
               head: PrototypeHead | None = None, label: int | None = None, input_id: int = 0) -> AttackResult:
    targets = None if target_feature is None else np.atleast_2d(target_feature)
    labels = None if label is None else [label]
    return pgd_attack_batch(fmap, np.atleast_2d(x), cfg, targets=targets, head=head, labels=labels,
                            input_ids=[input_id])[0]


# -- certificate validation ------------------------------------------------------

@dataclass
class ViolationRecord:
    input_id: int
    budget: float
    bound: float
    measured: float
    allowance: float
    slack: float
    violation: bool
    prediction_checked: bool = False
    prediction_eps: float = 0.0
    prediction_flipped: bool = False
    prediction_violation: bool = False


@dataclass
class ViolationReport:
    records: list[ViolationRecord] = field(default_factory=list)

    @property
    def inputs(self) -> int:
        return len(self.records)

    @property
    def violations(self) -> int:
        return sum(int(r.violation or r.prediction_violation) for r in self.records)

    @property
    def min_slack(self) -> float:
        slacks = [r.slack for r in self.records if math.isfinite(r.slack)]
        return min(slacks) if slacks else float("nan")

    def lines(self) -> list[str]:
        rows = [" ".join(f"{k}={_fmt(v)}" for k, v in asdict(r).items()) for r in self.records]
        rows.append(f"aggregate inputs={self.inputs} violations={self.violations} min_slack={_fmt(self.min_slack)}")
        return rows


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(float(f"{v:.12g}"))
    return str(v)


def delta_method_se(feats: np.ndarray, direction: np.ndarray) -> tuple[float, float]:
    """Estimate and standard error of <m, r>/||m|| with m the mean of ``feats``."""
    m = feats.mean(axis=0)
    nm = float(np.linalg.norm(m))
    val = float(m @ direction) / nm
    grad = direction / nm - val * m / (nm * nm)
    proj = feats @ grad
    se = float(proj.std(ddof=1) / math.sqrt(len(feats))) if len(feats) > 1 else float("inf")
    return val, se


def validate_certificates(fmap: FeatureMap, xs: np.ndarray, certs: Sequence[FeatureCertificate],
                          attack_cfg: AttackConfig, rho: float = 0.9, n_measure: int | None = None,
                          measure_seed: int = 1, n_sd: float = 3.0, head: PrototypeHead | None = None,
                          prediction_certs: Sequence[PredictionCertificate] | None = None) -> ViolationReport:
    """Attack every certificate inside its claim and re-measure with a large sample.

    Feature claims are attacked at rho times the radius where the bound
    reaches 0.5; inputs with zero radius make no claim and are skipped.
    Prediction claims are attacked at their certified eps with the
    prediction-flip objective.
    """
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if len(xs) != len(certs):
        raise ValueError("one certificate per input is required")
    sigma = certs[0].sigma if certs else attack_cfg.sigma
    n_meas = n_measure if n_measure is not None else 5 * max(c.n_samples for c in certs) if certs else 0
    mcfg = SmoothingConfig(sigma=sigma, n_samples=n_meas, base_seed=measure_seed, mode="point-estimate")
    refs = [fmap.reference(x) for x in xs]

    claim = [i for i, c in enumerate(certs) if c.radius_at_half > 0]
    budgets = np.array([rho * certs[i].radius_at_half for i in claim])
    records = {}
    if claim:
        cfg = AttackConfig(**{**asdict(attack_cfg), "objective": "untargeted-feature", "sigma": sigma})
        results = pgd_attack_batch(fmap, xs[claim], cfg, eps=budgets, input_ids=[certs[i].input_id for i in claim])
        for i, b, res in zip(claim, budgets, results):
            feats, _ = sample_features(fmap, res.x_adv, mcfg, certs[i].input_id)
            measured, se = delta_method_se(feats, refs[i])
            bound = certs[i].fcsb_at(float(b))
            allowance = n_sd * se
            slack = measured + allowance - bound
            records[i] = ViolationRecord(certs[i].input_id, float(b), bound, measured, allowance, slack, slack < 0)
    for i, c in enumerate(certs):
        if i not in records:
            records[i] = ViolationRecord(c.input_id, 0.0, float("nan"), float("nan"), float("nan"),
                                         float("nan"), False)

    if prediction_certs is not None:
        if head is None:
            raise ValueError("prediction checks need the prototype head")
        checked = [i for i, p in enumerate(prediction_certs) if p.certified and p.eps > 0]
        if checked:
            cfg = AttackConfig(**{**asdict(attack_cfg), "objective": "prediction-flip", "sigma": sigma})
            labels = [prediction_certs[i].clean_class for i in checked]
            results = pgd_attack_batch(fmap, xs[checked], cfg, eps=[prediction_certs[i].eps for i in checked],
                                       head=head, labels=labels,
                                       input_ids=[certs[i].input_id for i in checked])
            for i, y, res in zip(checked, labels, results):
                feats, _ = sample_features(fmap, res.x_adv, mcfg, certs[i].input_id)
                scores = head.scores(feats.mean(axis=0))
                others = scores.copy()
                others[y] = -np.inf
                k = int(np.argmax(others))
                gap, se = delta_method_se(feats, head.prototypes[k] - head.prototypes[y])
                rec = records[i]
                rec.prediction_checked = True
                rec.prediction_eps = float(prediction_certs[i].eps)
                rec.prediction_flipped = bool(gap > 0)
                rec.prediction_violation = bool(gap - n_sd * se > 0)
    return ViolationReport([records[i] for i in range(len(certs))])
