"""Per-dimension scale-and-shift feature adapter.

The adapter applies gamma * x + delta elementwise. It is trained on base-task
features jointly with a disposable linear probe (softmax cross-entropy); the
probe is discarded and the adapter frozen afterwards.
"""

from dataclasses import dataclass

import numpy as np

from .features import FeatureMatrix
from .seeding import derive_rng


class SsfError(ValueError):
    pass


class SsfDivergence(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"non-finite adapter loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class SsfAdapter:
    gamma: np.ndarray
    delta: np.ndarray
    frozen: bool = False

    @classmethod
    def identity(cls, dim: int) -> "SsfAdapter":
        return cls(gamma=np.ones(dim), delta=np.zeros(dim))


def ssf_apply(adapter: SsfAdapter, features: FeatureMatrix) -> FeatureMatrix:
    if features.dim != adapter.gamma.size:
        raise SsfError(
            f"adapter dimension {adapter.gamma.size} != feature dimension {features.dim}")
    return FeatureMatrix(rows=features.rows * adapter.gamma + adapter.delta,
                         labels=list(features.labels), source="adapted")


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def probe_loss_and_grad(gamma, delta, w, b, X, y_idx):
    """Cross-entropy of the probe on adapted features; grads for all four params."""
    Z = X * gamma + delta
    logits = Z @ w + b
    n = X.shape[0]
    probs = _softmax(logits)
    loss = float(-np.log(probs[np.arange(n), y_idx] + 1e-300).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), y_idx] -= 1.0
    dlogits /= n
    gw = Z.T @ dlogits
    gb = dlogits.sum(axis=0)
    dZ = dlogits @ w.T
    ggamma = (dZ * X).sum(axis=0)
    gdelta = dZ.sum(axis=0)
    return loss, ggamma, gdelta, gw, gb


def ssf_train(base_features: FeatureMatrix, epochs: int = 50, lr: float = 0.1,
              seed: int = 0, batch_size: int = 32) -> SsfAdapter:
    """Train gamma/delta with a throwaway linear probe on base-task features."""
    classes = sorted(set(base_features.labels))
    if len(classes) < 2:
        raise SsfError("adapter training needs at least 2 base classes")
    X = base_features.rows
    y = np.array([classes.index(c) for c in base_features.labels])
    d, k = X.shape[1], len(classes)
    rng = derive_rng(seed, "ssf")
    gamma, delta = np.ones(d), np.zeros(d)
    w = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, k))
    b = np.zeros(k)
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            sel = order[start : start + batch_size]
            loss, gg, gd, gw, gb = probe_loss_and_grad(gamma, delta, w, b, X[sel], y[sel])
            if not np.isfinite(loss):
                raise SsfDivergence(epoch)
            gamma -= lr * gg
            delta -= lr * gd
            w -= lr * gw
            b -= lr * gb
    return SsfAdapter(gamma=gamma, delta=delta, frozen=True)


def probe_accuracy(adapter: SsfAdapter, features: FeatureMatrix, epochs: int = 50,
                   lr: float = 0.1, seed: int = 0) -> float:
    """Train-set accuracy of a fresh probe on adapted features; used to compare
    adapter settings on equal footing."""
    adapted = ssf_apply(SsfAdapter(adapter.gamma, adapter.delta), features)
    classes = sorted(set(features.labels))
    X = adapted.rows
    y = np.array([classes.index(c) for c in features.labels])
    d, k = X.shape[1], len(classes)
    rng = derive_rng(seed, "ssf", 1)
    w = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, k))
    b = np.zeros(k)
    ones, zeros = np.ones(d), np.zeros(d)
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), 32):
            sel = order[start : start + 32]
            _, _, _, gw, gb = probe_loss_and_grad(ones, zeros, w, b, X[sel], y[sel])
            w -= lr * gw
            b -= lr * gb
    return float(((X @ w + b).argmax(axis=1) == y).mean())
