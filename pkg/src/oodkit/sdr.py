"""Supervised dimensionality reduction for per-stride features.

A small ReLU MLP maps a stride's pooled features to a low-dimensional space
where same-class points sit close and other-class points sit far, trained
with a squared-distance hinge triplet loss. Backprop is written out by hand
(float64) so the gradients can be checked against finite differences, and
training is deterministic given the seed.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from oodkit.errors import DataError, DivergenceError, TripletError


@dataclass
class SdrConfig:
    out_dim: int = 32
    hidden_dims: tuple[int, ...] = (128, 128)
    k_neighbors: int = 15
    margin: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0


class Mlp:
    """Dense ReLU network, linear last layer, float64 throughout."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        self.dims = list(dims)
        self.weights = []
        self.biases = []
        for d_in, d_out in zip(dims, dims[1:]):
            scale = np.sqrt(2.0 / d_in)
            self.weights.append(rng.normal(0.0, scale, size=(d_in, d_out)))
            self.biases.append(np.zeros(d_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._forward_cached(np.atleast_2d(x))[0]

    def _forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns (output, activations); activations[i] is layer i's input."""
        activations = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.maximum(z, 0.0)
            activations.append(h)
        return h, activations

    def _backward(self, grad_out: np.ndarray, activations: list[np.ndarray]):
        """Parameter gradients for d(loss)/d(output) = grad_out."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        delta = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = activations[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (activations[i] > 0.0)
        grads = []
        for gw, gb in zip(grads_w, grads_b):
            grads.extend((gw, gb))
        return grads


def triplet_loss_and_grads(
    model: Mlp,
    anchors: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    margin: float,
) -> tuple[float, list[np.ndarray]]:
    """Mean hinge triplet loss over the batch and its parameter gradients.

    Loss per triplet: max(0, ||g(a)-g(p)||^2 - ||g(a)-g(n)||^2 + margin).
    """
    ea, cache_a = model._forward_cached(np.atleast_2d(anchors))
    ep, cache_p = model._forward_cached(np.atleast_2d(positives))
    en, cache_n = model._forward_cached(np.atleast_2d(negatives))
    d_pos = np.sum((ea - ep) ** 2, axis=1)
    d_neg = np.sum((ea - en) ** 2, axis=1)
    per_triplet = np.maximum(0.0, d_pos - d_neg + margin)
    loss = float(per_triplet.mean())
    active = (per_triplet > 0.0)[:, None].astype(np.float64)
    scale = active / len(per_triplet)
    grad_a = 2.0 * (en - ep) * scale
    grad_p = 2.0 * (ep - ea) * scale
    grad_n = 2.0 * (ea - en) * scale
    grads = model._backward(grad_a, cache_a)
    for extra in (model._backward(grad_p, cache_p), model._backward(grad_n, cache_n)):
        for g, e in zip(grads, extra):
            g += e
    return loss, grads


def _neighbor_structure(features: np.ndarray, labels: np.ndarray, k_neighbors: int):
    """Per-anchor same-class k-NN lists and per-class negative pools."""
    n = len(features)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise TripletError(f"triplet mining needs >= 2 classes, got {len(classes)}")
    by_class = {int(c): np.flatnonzero(labels == c) for c in classes}
    neg_pool = {int(c): np.flatnonzero(labels != c) for c in classes}
    anchors = []
    positive_lists = []
    for i in range(n):
        own = by_class[int(labels[i])]
        others = own[own != i]
        if len(others) == 0:
            continue  # singleton class: no positive available
        d2 = np.sum((features[others] - features[i]) ** 2, axis=1)
        order = np.argsort(d2, kind="stable")[: min(k_neighbors, len(others))]
        anchors.append(i)
        positive_lists.append(others[order])
    if not anchors:
        raise TripletError("no class has two or more samples")
    return anchors, positive_lists, neg_pool


def _sample_triplets(anchors, positive_lists, neg_pool, labels, rng) -> np.ndarray:
    triples = np.empty((len(anchors), 3), dtype=np.int64)
    for row, (i, positives) in enumerate(zip(anchors, positive_lists)):
        pool = neg_pool[int(labels[i])]
        triples[row] = (i, rng.choice(positives), rng.choice(pool))
    return triples


def mine_triplets(
    features: np.ndarray,
    labels: np.ndarray,
    k_neighbors: int = 15,
    seed: int = 0,
) -> np.ndarray:
    """One (anchor, positive, negative) index triple per eligible anchor.

    Positives are drawn uniformly from the anchor's k nearest same-class
    neighbors (L2 in input space); negatives uniformly from other classes.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(features) != len(labels):
        raise DataError(f"{len(features)} features vs {len(labels)} labels")
    structure = _neighbor_structure(features, labels, k_neighbors)
    rng = np.random.default_rng(seed)
    return _sample_triplets(*structure[:2], structure[2], labels, rng)


class Reducer:
    """A trained per-stride feature reducer."""

    def __init__(self, model: Mlp, cfg: SdrConfig):
        self.model = model
        self.cfg = cfg

    @property
    def input_dim(self) -> int:
        return self.model.dims[0]

    @property
    def out_dim(self) -> int:
        return self.model.dims[-1]

    def transform(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        single = features.ndim == 1
        batch = np.atleast_2d(features)
        if batch.shape[1] != self.input_dim:
            raise DataError(
                f"reducer expects dim {self.input_dim}, got {batch.shape[1]}"
            )
        out = self.model.forward(batch)
        return out[0] if single else out

    def to_json_dict(self) -> dict:
        return {
            "dims": self.model.dims,
            "weights": [w.tolist() for w in self.model.weights],
            "biases": [b.tolist() for b in self.model.biases],
        }

    @classmethod
    def from_json_dict(cls, doc: dict, cfg: SdrConfig | None = None) -> "Reducer":
        model = Mlp.__new__(Mlp)
        model.dims = list(doc["dims"])
        model.weights = [np.asarray(w, dtype=np.float64) for w in doc["weights"]]
        model.biases = [np.asarray(b, dtype=np.float64) for b in doc["biases"]]
        return cls(model, cfg or SdrConfig())


class _Adam:
    def __init__(self, params: list[np.ndarray], lr: float):
        self.lr = lr
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _stratified_split(labels: np.ndarray, val_fraction: float, rng):
    train_idx, val_idx = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(len(members))]
        n_val = min(max(1, int(round(val_fraction * len(members)))), len(members) - 1)
        if len(members) < 2:
            train_idx.extend(members)  # too small to hold anything out
            continue
        val_idx.extend(members[:n_val])
        train_idx.extend(members[n_val:])
    return np.sort(np.array(train_idx)), np.sort(np.array(val_idx))


def train_reducer(features: np.ndarray, labels: np.ndarray, cfg: SdrConfig) -> Reducer:
    """Train one reducer on a stride's correct-prediction features.

    Holds out a stratified validation split, re-samples triplets every
    epoch, and stops after ``cfg.patience`` epochs without improvement of
    the validation loss, restoring the best parameters.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = _stratified_split(labels, cfg.val_fraction, rng)
    if len(val_idx) == 0:
        raise TripletError("validation split is empty; need more samples per class")
    x_train, y_train = features[train_idx], labels[train_idx]
    x_val, y_val = features[val_idx], labels[val_idx]

    structure = _neighbor_structure(x_train, y_train, cfg.k_neighbors)
    val_structure = _neighbor_structure(x_val, y_val, cfg.k_neighbors)
    val_triples = _sample_triplets(*val_structure[:2], val_structure[2], y_val, rng)

    dims = [features.shape[1], *cfg.hidden_dims, cfg.out_dim]
    model = Mlp(dims, rng)
    optimizer = _Adam(model.params, cfg.learning_rate)

    best_loss = np.inf
    best_state = None
    epochs_since_best = 0
    for _ in range(cfg.max_epochs):
        triples = _sample_triplets(*structure[:2], structure[2], y_train, rng)
        triples = triples[rng.permutation(len(triples))]
        for start in range(0, len(triples), cfg.batch_size):
            batch = triples[start : start + cfg.batch_size]
            loss, grads = triplet_loss_and_grads(
                model, x_train[batch[:, 0]], x_train[batch[:, 1]], x_train[batch[:, 2]], cfg.margin
            )
            if not np.isfinite(loss):
                raise DivergenceError(f"triplet loss became {loss}")
            optimizer.step(model.params, grads)
        val_loss, _ = triplet_loss_and_grads(
            model, x_val[val_triples[:, 0]], x_val[val_triples[:, 1]], x_val[val_triples[:, 2]], cfg.margin
        )
        if not np.isfinite(val_loss):
            raise DivergenceError(f"validation loss became {val_loss}")
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = (copy.deepcopy(model.weights), copy.deepcopy(model.biases))
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break
    if best_state is not None:
        model.weights, model.biases = best_state
    return Reducer(model, cfg)
