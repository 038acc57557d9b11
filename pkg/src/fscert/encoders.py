"""Feature encoders and synthetic labeled data.

Every encoder maps input rows in R^d_in to unit-norm feature rows in
R^d_f. Parameters are drawn from ``U(-gain/sqrt(fan_in), gain/sqrt(fan_in))``
seeded through ``numpy.random.SeedSequence`` so an encoder is fully
determined by (kind, dims, seed, gain).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

DEGENERATE_NORM = 1e-12
KINDS = ("random-linear", "mlp", "mlp-trained")


class DegenerateFeatureError(ArithmeticError):
    """The pre-normalization feature is (numerically) the zero vector."""


class FeatureMap:
    """Anything that turns input rows into unit feature rows.

    Subclasses implement :meth:`raw`, the differentiable pre-normalization
    map. ``reference`` is the clean feature scores are measured against;
    for plain encoders it is the encoder's own output.
    """

    d_in: int
    d_f: int

    def raw(self, X: ad.Tensor) -> ad.Tensor:
        raise NotImplementedError

    def trace(self, X: ad.Tensor) -> ad.Tensor:
        return ad.normalize_rows(self.raw(X))

    def features(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unit features and a mask of rows whose raw output was degenerate."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d_in:
            raise ValueError(f"input dimension {X.shape[1]} != encoder d_in {self.d_in}")
        z = self.raw(ad.Tensor(X)).data
        norms = np.sqrt(np.einsum("ij,ij->i", z, z))
        bad = ~(norms > DEGENERATE_NORM)
        safe = np.where(bad, 1.0, norms)
        return z / safe[:, None], bad

    def encode_batch(self, X: np.ndarray) -> np.ndarray:
        feats, bad = self.features(X)
        if bad.any():
            raise DegenerateFeatureError(f"{int(bad.sum())} input(s) map to a zero feature")
        return feats

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("encode expects a single input vector")
        return self.encode_batch(x[None, :])[0]

    def reference(self, x: np.ndarray) -> np.ndarray:
        return self.encode(x)


@dataclass(frozen=True, eq=False)
class Encoder(FeatureMap):
    kind: str
    d_in: int
    d_f: int
    seed: int
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    hidden_dims: tuple[int, ...] = ()
    gain: float = 1.0
    meta: dict = field(default_factory=dict)

    def raw(self, X: ad.Tensor, params: Sequence[ad.Tensor] | None = None) -> ad.Tensor:
        if params is None:
            params = [ad.Tensor(p) for p in self.parameters()]
        h = X
        n_layers = len(self.weights)
        for i in range(n_layers):
            h = ad.linear(h, params[2 * i], params[2 * i + 1])
            if i < n_layers - 1:
                h = ad.tanh(h)
        return h

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def with_parameters(self, params: Sequence[np.ndarray], kind: str | None = None, **meta) -> "Encoder":
        params = [np.array(p, dtype=np.float64) for p in params]
        return dataclasses.replace(
            self,
            kind=kind or self.kind,
            weights=tuple(params[0::2]),
            biases=tuple(params[1::2]),
            meta={**self.meta, **meta},
        )


class ConstantEncoder(FeatureMap):
    """Ignores its input; emits a fixed unit vector."""

    def __init__(self, direction: np.ndarray, d_in: int):
        direction = np.asarray(direction, dtype=np.float64)
        self.direction = direction / np.linalg.norm(direction)
        self.d_in = d_in
        self.d_f = direction.shape[0]

    def raw(self, X: ad.Tensor) -> ad.Tensor:
        # x * 0 keeps the graph connected so attacks see an exactly zero gradient
        n = X.shape[0]
        return ad.tsum(X * 0.0, axis=-1, keepdims=True) + np.broadcast_to(self.direction, (n, self.d_f))


def _uniform_fan_in(rng: np.random.Generator, fan_out: int, fan_in: int, gain: float):
    bound = gain / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    b = rng.uniform(-bound, bound, size=fan_out)
    return w, b


def make_encoder(kind: str, d_in: int, d_f: int, seed: int,
                 hidden_dims: Sequence[int] | None = None, gain: float = 1.0) -> Encoder:
    if kind not in ("random-linear", "mlp"):
        raise ValueError(f"make_encoder builds 'random-linear' or 'mlp', got {kind!r}")
    if d_in < 1 or d_f < 1:
        raise ValueError("encoder dimensions must be >= 1")
    if kind == "random-linear":
        dims = [d_in, d_f]
        hidden = ()
    else:
        hidden = tuple(hidden_dims) if hidden_dims else (32,)
        if any(h < 1 for h in hidden):
            raise ValueError("hidden dimensions must be >= 1")
        dims = [d_in, *hidden, d_f]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x454E43]))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w, b = _uniform_fan_in(rng, fan_out, fan_in, gain)
        weights.append(w)
        biases.append(b)
    return Encoder(kind=kind, d_in=d_in, d_f=d_f, seed=int(seed), weights=tuple(weights),
                   biases=tuple(biases), hidden_dims=hidden, gain=float(gain))


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside 0..K-1")

    def __len__(self):
        return len(self.labels)

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.class_count, dict(self.spec))

    def split(self, holdout: float, seed: int = 0) -> tuple["LabeledDataset", "LabeledDataset"]:
        """Stratified train/held-out split."""
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x53504C]))
        train_idx, test_idx = [], []
        for k in range(self.class_count):
            idx = np.flatnonzero(self.labels == k)
            idx = idx[rng.permutation(len(idx))]
            n_test = int(round(holdout * len(idx)))
            test_idx.extend(idx[:n_test])
            train_idx.extend(idx[n_test:])
        return self.subset(np.sort(train_idx)), self.subset(np.sort(test_idx))


def _class_means(rng, K: int, d_in: int, separation: float) -> np.ndarray:
    if K <= d_in:
        q, _ = np.linalg.qr(rng.standard_normal((d_in, d_in)))
        return (separation / np.sqrt(2.0)) * q[:, :K].T
    radius = separation
    while True:
        for _ in range(200):
            m = rng.standard_normal((K, d_in))
            m *= radius / np.linalg.norm(m, axis=1, keepdims=True)
            d = np.linalg.norm(m[:, None] - m[None], axis=-1)
            if d[np.triu_indices(K, 1)].min() >= separation:
                return m
        radius *= 1.5


def gen_mixture_dataset(K: int, per_class: int, d_in: int, separation: float, seed: int,
                        spread: float = 1.0, latent_dim: int | None = None) -> LabeledDataset:
    """K Gaussian clusters whose means sit at pairwise distance >= separation.

    With ``latent_dim`` set, within-class variation is confined to a random
    subspace of that dimension shared by all classes; otherwise it is
    isotropic with standard deviation ``spread``.
    """
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if not separation > 0:
        raise ValueError(f"separation must be > 0, got {separation}")
    if latent_dim is not None and not 1 <= latent_dim <= d_in:
        raise ValueError("latent_dim must lie in 1..d_in")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4D4958]))
    means = _class_means(rng, K, d_in, separation)
    if latent_dim is None:
        basis = np.eye(d_in)
    else:
        basis, _ = np.linalg.qr(rng.standard_normal((d_in, latent_dim)))
    k_lat = basis.shape[1]
    labels = np.repeat(np.arange(K), per_class)
    latent = rng.standard_normal((K * per_class, k_lat))
    inputs = means[labels] + spread * latent @ basis.T
    order = rng.permutation(K * per_class)
    spec = {"K": K, "per_class": per_class, "d_in": d_in, "separation": float(separation),
            "seed": int(seed), "spread": float(spread), "latent_dim": latent_dim}
    return LabeledDataset(inputs[order], labels[order], K, spec)


def cosine_softmax_loss(features: ad.Tensor, prototypes: ad.Tensor, labels: np.ndarray,
                        temperature: float) -> ad.Tensor:
    """Mean cross-entropy of softmax(temperature * u . p_k)."""
    protos = ad.normalize_rows(prototypes)
    logits = (features @ protos.T) * temperature
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ad.tsum(logits * onehot, axis=-1, keepdims=True)
    return ad.tmean(ad.logsumexp(logits, axis=-1) - picked)


def train_encoder_supervised(e: Encoder, data: LabeledDataset, epochs: int, lr: float,
                             temperature: float = 10.0, batch_size: int = 32,
                             seed: int = 0) -> Encoder:
    """Minibatch SGD on a cosine-prototype softmax loss.

    Prototypes are learned jointly, starting from normalized class means
    of the initial features, and discarded afterwards. The epoch-mean
    losses are kept in ``meta['loss_history']``.
    """
    if e.kind not in ("mlp", "mlp-trained"):
        raise ValueError(f"supervised training needs an mlp encoder, got {e.kind!r}")
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if data.d_in != e.d_in:
        raise ValueError("dataset and encoder input dimensions differ")
    if epochs == 0:
        return e
    params = [ad.Tensor(p.copy(), requires_grad=True) for p in e.parameters()]
    feats0 = e.encode_batch(data.inputs)
    protos0 = np.stack([
        feats0[data.labels == k].mean(axis=0) if np.any(data.labels == k) else np.eye(e.d_f)[k % e.d_f]
        for k in range(data.class_count)
    ])
    protos = ad.Tensor(protos0, requires_grad=True)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x545245]))
    history = []
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            feats = ad.normalize_rows(e.raw(ad.Tensor(data.inputs[idx]), params))
            loss = cosine_softmax_loss(feats, protos, data.labels[idx], temperature)
            grads = ad.gradients(loss, params + [protos])
            for p, g in zip(params + [protos], grads):
                p.data = p.data - lr * g
            losses.append(float(loss.data) * len(idx))
        history.append(sum(losses) / n)
        if not np.isfinite(history[-1]):
            raise FloatingPointError("encoder training diverged")
    return e.with_parameters([p.data for p in params], kind="mlp-trained",
                             loss_history=history, temperature=temperature)


def nearest_mean_accuracy(data: LabeledDataset) -> float:
    """Brute-force nearest-class-mean classifier accuracy in input space."""
    means = np.stack([data.inputs[data.labels == k].mean(axis=0) for k in range(data.class_count)])
    d = np.linalg.norm(data.inputs[:, None, :] - means[None], axis=-1)
    return float(np.mean(np.argmin(d, axis=1) == data.labels))
