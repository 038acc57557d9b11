"""Gaussian smoothness booster: input denoiser plus sigma-aware feature mapper.

The denoiser ``P`` is a three-layer dense residual network on input
vectors with a learned sigma embedding appended to its input; its last
layer starts at zero so it begins as the identity. The mapper ``M`` is a
stack of residual blocks

    LN -> channel MLP -> unit direction v
    dz = [(1 + film_gamma(s)) * v * amp(s) * s**expo(s) + film_beta(s)] * scale

with ``amp`` and ``expo`` softplus heads and ``scale`` a per-channel
damping vector starting at 5e-4. Token attention and depthwise
convolution have nothing to act on for single-token features, so blocks
carry only the MLP branch.

Both stages are trained with the encoder frozen; gradients pass through
it via :mod:`fscert.autodiff`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .encoders import DegenerateFeatureError, Encoder, FeatureMap, LabeledDataset
from .smoothing import STREAM_GSB, SmoothingConfig, estimate_score, gaussian_block, input_key

SCALE_INIT = 5e-4
LOG_SIGMA_FLOOR = 1e-6


class Net:
    """Named float64 parameter arrays."""

    def __init__(self, params: dict[str, np.ndarray], **config):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.config = config

    def tensors(self, requires_grad: bool = False) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def copy(self):
        return type(self)({k: v.copy() for k, v in self.params.items()}, **self.config)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def _init(rng, fan_out, fan_in, gain=1.0):
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)


class Denoiser(Net):

    @classmethod
    def create(cls, d_in: int, hidden: int = 64, emb_dim: int = 8, seed: int = 0) -> "Denoiser":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x50]))
        w1x, b1 = _init(rng, hidden, d_in)
        w1e, _ = _init(rng, hidden, emb_dim)
        w2, b2 = _init(rng, hidden, hidden)
        params = {
            "emb_a": rng.standard_normal((1, emb_dim)), "emb_c": np.zeros((1, emb_dim)),
            "w1x": w1x, "w1e": w1e, "b1": b1, "w2": w2, "b2": b2,
            "w3": np.zeros((d_in, hidden)), "b3": np.zeros(d_in),
        }
        return cls(params, d_in=d_in, hidden=hidden, emb_dim=emb_dim)

    @property
    def d_in(self) -> int:
        return self.config["d_in"]

    def forward(self, X: ad.Tensor, sigma: float, t: dict | None = None) -> ad.Tensor:
        t = t if t is not None else self.tensors()
        emb = ad.tanh(t["emb_a"] * sigma + t["emb_c"])
        h = ad.tanh(ad.linear(X, t["w1x"], t["b1"]) + emb @ t["w1e"].T)
        h = ad.tanh(ad.linear(h, t["w2"], t["b2"]))
        return X + ad.linear(h, t["w3"], t["b3"])


def denoise(P: Denoiser, x_noisy: np.ndarray, sigma: float) -> np.ndarray:
    X = np.atleast_2d(np.asarray(x_noisy, dtype=np.float64))
    out = P.forward(ad.Tensor(X), sigma).data
    return out[0] if np.ndim(x_noisy) == 1 else out


class Mapper(Net):

    @classmethod
    def create(cls, d_f: int, blocks: int = 3, hidden: int = 32, film_hidden: int = 16,
               head_hidden: int = 8, seed: int = 0) -> "Mapper":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4D]))
        params = {}
        for i in range(blocks):
            p = f"b{i}."
            fw1, fb1 = _init(rng, film_hidden, 1)
            fwg, fbg = _init(rng, d_f, film_hidden, 0.1)
            fwb, fbb = _init(rng, d_f, film_hidden, 0.1)
            mw1, mb1 = _init(rng, hidden, d_f)
            mw2, mb2 = _init(rng, d_f, hidden)
            aw1, ab1 = _init(rng, head_hidden, 2)
            aw2, ab2 = _init(rng, 1, head_hidden)
            bw1, bb1 = _init(rng, head_hidden, 1)
            bw2, bb2 = _init(rng, 1, head_hidden)
            params.update({
                p + "ln_g": np.ones(d_f), p + "ln_b": np.zeros(d_f),
                p + "film_w1": fw1, p + "film_b1": fb1,
                p + "film_wg": fwg, p + "film_bg": fbg, p + "film_wb": fwb, p + "film_bb": fbb,
                p + "mlp_w1": mw1, p + "mlp_b1": mb1, p + "mlp_w2": mw2, p + "mlp_b2": mb2,
                p + "amp_w1": aw1, p + "amp_b1": ab1, p + "amp_w2": aw2, p + "amp_b2": ab2,
                p + "exp_w1": bw1, p + "exp_b1": bb1, p + "exp_w2": bw2, p + "exp_b2": bb2,
                p + "scale": np.full(d_f, SCALE_INIT),
            })
        return cls(params, d_f=d_f, blocks=blocks, hidden=hidden, film_hidden=film_hidden,
                   head_hidden=head_hidden)

    @property
    def blocks(self) -> int:
        return self.config["blocks"]

    def _block(self, z: ad.Tensor, sigma: float, t: dict, i: int) -> ad.Tensor:
        p = f"b{i}."
        mu = ad.tmean(z, axis=-1, keepdims=True)
        zc = z - mu
        var = ad.tmean(zc * zc, axis=-1, keepdims=True)
        zn = zc / ad.sqrt(var + 1e-5) * t[p + "ln_g"] + t[p + "ln_b"]

        s = ad.Tensor(np.array([[sigma]]))
        film_h = ad.gelu(ad.linear(s, t[p + "film_w1"], t[p + "film_b1"]))
        film_gamma = ad.linear(film_h, t[p + "film_wg"], t[p + "film_bg"])
        film_beta = ad.linear(film_h, t[p + "film_wb"], t[p + "film_bb"])

        h = ad.linear(ad.gelu(ad.linear(zn, t[p + "mlp_w1"], t[p + "mlp_b1"])),
                      t[p + "mlp_w2"], t[p + "mlp_b2"])
        v = ad.normalize_rows(h)

        if sigma > 0:
            feats = ad.Tensor(np.array([[sigma, math.log(max(sigma, LOG_SIGMA_FLOOR))]]))
            amp = ad.softplus(ad.linear(ad.gelu(ad.linear(feats, t[p + "amp_w1"], t[p + "amp_b1"])),
                                        t[p + "amp_w2"], t[p + "amp_b2"]))
            expo = ad.softplus(ad.linear(ad.gelu(ad.linear(s, t[p + "exp_w1"], t[p + "exp_b1"])),
                                         t[p + "exp_w2"], t[p + "exp_b2"]))
            noise_gain = amp * ad.exp(expo * math.log(sigma))
            direction = (film_gamma + 1.0) * v * noise_gain
            dz = (direction + film_beta) * t[p + "scale"]
        else:
            # sigma**expo vanishes for any positive exponent: only the shift path is left
            dz = film_beta * t[p + "scale"] + z * 0.0
        return dz

    def forward(self, z: ad.Tensor, sigma: float, t: dict | None = None) -> ad.Tensor:
        """Total residual M(z, sigma) = z_k - z_0 over the block chain."""
        t = t if t is not None else self.tensors()
        zi = z
        total = None
        for i in range(self.blocks):
            dz = self._block(zi, sigma, t, i)
            zi = zi + dz
            total = dz if total is None else total + dz
        return total


def map_feature(M: Mapper, z_tilde: np.ndarray, sigma: float) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(z_tilde, dtype=np.float64))
    out = Z + M.forward(ad.Tensor(Z), sigma).data
    return out[0] if np.ndim(z_tilde) == 1 else out


class GsbEncoder(FeatureMap):
    """Encoder wrapped as f_e(P(x)) + M(f_e(P(x)), sigma); either part may be absent.

    ``reference`` stays the clean feature of the base encoder.
    """

    def __init__(self, base: Encoder, P: Denoiser | None, M: Mapper | None, sigma: float):
        self.base, self.P, self.M, self.sigma = base, P, M, float(sigma)
        self.d_in, self.d_f = base.d_in, base.d_f

    def raw(self, X: ad.Tensor, tp: dict | None = None, tm: dict | None = None) -> ad.Tensor:
        Xp = self.P.forward(X, self.sigma, tp) if self.P is not None else X
        z = ad.normalize_rows(self.base.raw(Xp))
        if self.M is None:
            return z
        return z + self.M.forward(z, self.sigma, tm)

    def reference(self, x):
        return self.base.encode(x)


def gsb_forward(P: Denoiser | None, M: Mapper | None, e: Encoder, x: np.ndarray, noise: np.ndarray,
                sigma: float) -> tuple[np.ndarray, float]:
    """Unit booster feature of x + noise and its pre-normalization norm."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64) + noise)
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = GsbEncoder(e, P, M, sigma).raw(ad.Tensor(X)).data[0]
    norm = float(np.linalg.norm(raw))
    # a zero base feature shows up here as NaN
    if not norm > 1e-12:
        raise DegenerateFeatureError("booster output is the zero vector")
    return raw / norm, norm


# -- losses ------------------------------------------------------------------------

@dataclass(frozen=True)
class Lambdas:
    mse: float = 0.25
    stats: float = 100.0
    ident: float = 0.25


@dataclass
class GsbLossReport:
    l_mse: float
    l_rb_P: float
    L_P: float
    l_rb_M: float
    l_stats: float
    l_id: float
    L_M: float


def _std_rows(a: ad.Tensor, axis: int) -> tuple[ad.Tensor, ad.Tensor]:
    mu = ad.tmean(a, axis=axis, keepdims=True)
    c = a - mu
    return mu, ad.sqrt(ad.tmean(c * c, axis=axis, keepdims=True) + 1e-12)


def loss_graph(P: Denoiser | None, M: Mapper | None, e: Encoder, X: np.ndarray, sigma: float, n0: int,
               lambdas: Lambdas, seed: int, tp: dict | None = None, tm: dict | None = None,
               stages=("P", "M")) -> dict[str, ad.Tensor]:
    """Differentiable stage losses on one batch with n0 draws per input.

    Rows are draw-major (row j*B + b is draw j of input b) so per-draw
    batch statistics are a reshape away.
    """
    if n0 < 1:
        raise ValueError("n0 must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    B, d = X.shape
    if "M" in stages and B < 2:
        raise ValueError("the statistics loss needs a batch of at least 2 inputs")
    noise = gaussian_block(input_key(seed, 0), 0, B * n0, d, stream=STREAM_GSB) * sigma
    Xrep = np.tile(X, (n0, 1))
    Xn = ad.Tensor(Xrep + noise)
    z_clean = e.encode_batch(X)
    z_rep = np.tile(z_clean, (n0, 1))
    tp = tp if tp is not None else (P.tensors() if P is not None else None)
    Xp = P.forward(Xn, sigma, tp) if P is not None else Xn
    z_t = ad.normalize_rows(e.raw(Xp))
    out = {}
    if "P" in stages:
        diff = Xrep - Xp
        out["l_mse"] = ad.tmean(ad.sqrt(ad.tsum(diff * diff, axis=-1) + 1e-24))
        out["l_rb_P"] = ad.tmean(ad.cosine_rows(z_t, z_rep))
        out["L_P"] = -out["l_rb_P"] + lambdas.mse * out["l_mse"]
    if "M" in stages:
        if M is None:
            raise ValueError("mapper losses need a mapper")
        tm = tm if tm is not None else M.tensors()
        z_m = z_t + M.forward(z_t, sigma, tm)
        out["l_rb_M"] = ad.tmean(ad.cosine_rows(z_m, z_rep))
        D = z_clean.shape[1]
        mu_m, sd_m = _std_rows(ad.reshape(z_m, (n0, B, D)), axis=1)
        mu_z = z_clean.mean(axis=0)
        sd_z = z_clean.std(axis=0)
        dmu = mu_m - mu_z
        dsd = sd_m - sd_z
        out["l_stats"] = ad.tmean(dmu * dmu + dsd * dsd)
        r0 = M.forward(z_t, 0.0, tm)
        out["l_id"] = ad.tmean(ad.tsum(r0 * r0, axis=-1))
        out["L_M"] = -out["l_rb_M"] + lambdas.stats * out["l_stats"] + lambdas.ident * out["l_id"]
    return out


def compute_losses(P, M, e, batch, sigma: float, n0: int = 8, lambdas: Lambdas = Lambdas(),
                   seed: int = 0) -> GsbLossReport:
    stages = ("P", "M") if M is not None else ("P",)
    g = loss_graph(P, M, e, batch, sigma, n0, lambdas, seed, stages=stages)
    val = {k: float(v.data) for k, v in g.items()}
    nan = float("nan")
    return GsbLossReport(val["l_mse"], val["l_rb_P"], val["L_P"], val.get("l_rb_M", nan),
                         val.get("l_stats", nan), val.get("l_id", nan), val.get("L_M", nan))


# -- optimizers -----------------------------------------------------------------------

class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict):
        for k in params:
            params[k] = params[k] - self.lr * grads[k]


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1 ** self.t)
            vh = self.v[k] / (1 - self.b2 ** self.t)
            params[k] = params[k] - self.lr * mh / (np.sqrt(vh) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return Sgd(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


# -- training -------------------------------------------------------------------------

@dataclass
class GsbConfig:
    sigma: float = 0.25
    n0: int = 8
    lambda1: float = 0.25
    lambda2: float = 100.0
    lambda3: float = 0.25
    # reference recipe: Adam 1e-4, batch 8 (denoiser); AdamW 2e-4, batch 16, cosine schedule (mapper)
    optimizer: str = "sgd"
    lr_p: float = 1e-3
    lr_m: float = 2e-4
    epochs_p: int = 30
    epochs_m: int = 30
    batch_size: int = 16
    seed: int = 0
    denoiser_hidden: int = 64
    mapper_blocks: int = 3
    mapper_hidden: int = 32
    train_denoiser: bool = True
    train_mapper: bool = True
    holdout_n: int = 256

    @property
    def lambdas(self) -> Lambdas:
        return Lambdas(self.lambda1, self.lambda2, self.lambda3)


HISTORY_COLUMNS = ("epoch", "stage", "l_mse", "l_rb_P", "L_P", "l_rb_M", "l_stats", "l_id", "L_M",
                   "heldout_score")


def mean_score(fmap: FeatureMap, inputs: np.ndarray, sigma: float, n: int, seed: int) -> float:
    cfg = SmoothingConfig(sigma=sigma, n_samples=n, base_seed=seed, mode="point-estimate")
    return float(np.mean([estimate_score(fmap, x, cfg, i).mean_score for i, x in enumerate(inputs)]))


def _run_stage(stage: str, net: Net, others: dict, e: Encoder, data: LabeledDataset, cfg: GsbConfig,
               heldout: np.ndarray | None, history: list, epochs: int, lr: float):
    opt = make_optimizer(cfg.optimizer, lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x47, ord(stage)]))
    n = len(data)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        sums, count = {}, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if stage == "M" and len(idx) < 2:
                continue
            t = net.tensors(requires_grad=True)
            batch_seed = (cfg.seed * 1_000_003 + epoch * 10_007 + step) & 0x7FFFFFFF
            if stage == "P":
                g = loss_graph(net, others.get("M"), e, data.inputs[idx], cfg.sigma, cfg.n0, cfg.lambdas,
                               batch_seed, tp=t, stages=("P",))
                loss = g["L_P"]
            else:
                g = loss_graph(others.get("P"), net, e, data.inputs[idx], cfg.sigma, cfg.n0, cfg.lambdas,
                               batch_seed, tm=t, stages=("P", "M"))
                loss = g["L_M"]
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"stage {stage} loss diverged at epoch {epoch}, step {step}")
            loss.backward()
            grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in t.items()}
            opt.step(net.params, grads)
            for k, v in g.items():
                sums[k] = sums.get(k, 0.0) + float(v.data) * len(idx)
            count += len(idx)
            step += 1
        row = {c: float("nan") for c in HISTORY_COLUMNS}
        row.update({k: v / max(count, 1) for k, v in sums.items()})
        row["epoch"], row["stage"] = epoch, stage
        if heldout is not None and len(heldout):
            P = net if stage == "P" else others.get("P")
            M = net if stage == "M" else None
            row["heldout_score"] = mean_score(GsbEncoder(e, P, M, cfg.sigma), heldout, cfg.sigma,
                                              cfg.holdout_n, cfg.seed + 17)
        history.append(row)


def train_gsb(e: Encoder, data: LabeledDataset, cfg: GsbConfig = GsbConfig(),
              heldout: np.ndarray | None = None):
    """Two-stage training: denoiser on L_P, then mapper on L_M with P frozen.

    Returns ``(P, M, history)``; a part switched off in ``cfg`` comes back
    as ``None``. The encoder is never modified.
    """
    P = Denoiser.create(e.d_in, cfg.denoiser_hidden, seed=cfg.seed) if cfg.train_denoiser else None
    M = Mapper.create(e.d_f, cfg.mapper_blocks, cfg.mapper_hidden, seed=cfg.seed) if cfg.train_mapper else None
    history: list[dict] = []
    if P is not None:
        _run_stage("P", P, {}, e, data, cfg, heldout, history, cfg.epochs_p, cfg.lr_p)
    if M is not None:
        _run_stage("M", M, {"P": P}, e, data, cfg, heldout, history, cfg.epochs_m, cfg.lr_m)
    return P, M, history


# -- gradient verification -------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    worst: tuple = field(default_factory=tuple)


def grad_check(loss_fn: Callable[[], ad.Tensor], params: dict[str, ad.Tensor] | list[ad.Tensor],
               n_checks: int = 200, step: float = 1e-4, seed: int = 0, abs_floor: float = 1e-8) -> GradCheckReport:
    """Central differences on randomly chosen scalar parameters.

    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(str(i), p) for i, p in enumerate(params)]
    for _, p in named:
        p.grad = None
    loss_fn().backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in named}
    sizes = np.array([p.data.size for _, p in named])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_checks, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst_err, worst = 0.0, ()
    for flat in picks:
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, p = named[j]
        idx = np.unravel_index(flat - offsets[j], p.data.shape)
        old = p.data[idx]
        p.data[idx] = old + step
        up = float(loss_fn().data)
        p.data[idx] = old - step
        down = float(loss_fn().data)
        p.data[idx] = old
        numeric = (up - down) / (2 * step)
        a = float(analytic[name][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
        if err > worst_err:
            worst_err, worst = err, (name, tuple(int(i) for i in idx), a, numeric)
    return GradCheckReport(worst_err, len(picks), worst)
