"""Low-rank + sparse decomposition for speckle filtering.

Two routes: a trainable bilinear map (the production denoiser) and a
classical principal-component-pursuit solver kept as an independent
verification oracle. The sparse residual is the filtered image.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import derive_rng

SMOOTH_EPS = 1e-4  # |u| ~ sqrt(u^2 + eps^2)


class RpcaError(ValueError):
    pass


class RpcaDivergence(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"non-finite denoiser loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class RpcaModel:
    A: np.ndarray  # m x r
    B: np.ndarray  # r x m
    rank: int
    m: int
    epoch_losses: list = field(default_factory=list)

    def __post_init__(self):
        if self.A.shape != (self.m, self.rank) or self.B.shape != (self.rank, self.m):
            raise RpcaError("A/B shapes inconsistent with (m, rank)")
        # r == m is allowed only so tests can build the square identity map;
        # training itself rejects r >= m.
        if self.rank > self.m:
            raise RpcaError("rank must not exceed window length")
        if not (np.isfinite(self.A).all() and np.isfinite(self.B).all()):
            raise RpcaError("model weights must be finite")


@dataclass(frozen=True)
class DecomposedImage:
    original: np.ndarray   # X
    low_rank: np.ndarray   # L = A B x
    sparse: np.ndarray     # X' = X - L, exactly additive


def _smooth_l1(u: np.ndarray) -> float:
    return float(np.sum(np.sqrt(u * u + SMOOTH_EPS * SMOOTH_EPS)))


def bilinear_loss_and_grad(A, B, batch):
    """Smoothed-L1 reconstruction loss sum_i |x_i - A B x_i| and its gradients.

    batch: (n, m) array of flattened images.
    """
    Z = batch @ B.T            # (n, r)
    E = batch - Z @ A.T        # residuals (n, m)
    S = np.sqrt(E * E + SMOOTH_EPS * SMOOTH_EPS)
    W = E / S                  # d|e|/de
    gA = -(W.T @ Z)            # (m, r)
    gB = -(A.T @ W.T) @ batch  # (r, m)
    return float(S.sum()), gA, gB


def rpca_train(images, r: int, epochs: int = 200, lr: float = 0.5,
               seed: int = 0, batch_size: int = 16, lr_decay: float = 0.01,
               grad_clip: float = 1.0) -> RpcaModel:
    """Fit the bilinear denoiser by mini-batch subgradient descent on the
    smoothed-L1 objective.

    The step size decays harmonically (lr / (1 + lr_decay * epoch)), batch
    gradients are norm-clipped, and the two factors are rebalanced to equal
    Frobenius norm after each epoch. A fixed step oscillates at a floor set
    by the step size and the unbalanced factorization can blow up, so both
    safeguards are needed for the L1 objective to actually converge.
    """
    X = np.asarray(images, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise RpcaError("images must be a non-empty (n, m) array")
    n, m = X.shape
    if not 0 < r < m:
        raise RpcaError(f"rank must satisfy 0 < r < m, got r={r}, m={m}")
    if lr <= 0:
        raise RpcaError("lr must be positive")

    rng = derive_rng(seed, "rpca")
    A = rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, r))
    B = rng.normal(0.0, 1.0 / np.sqrt(m), size=(r, m))

    losses = [bilinear_loss_and_grad(A, B, X)[0]]
    for epoch in range(epochs):
        step = lr / (1.0 + lr_decay * epoch)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = X[order[start : start + batch_size]]
            _, gA, gB = bilinear_loss_and_grad(A, B, batch)
            gA /= len(batch)
            gB /= len(batch)
            gnorm = np.sqrt((gA * gA).sum() + (gB * gB).sum())
            if gnorm > grad_clip:
                gA *= grad_clip / gnorm
                gB *= grad_clip / gnorm
            A -= step * gA
            B -= step * gB
        na, nb = np.linalg.norm(A), np.linalg.norm(B)
        if na > 0 and nb > 0:
            s = np.sqrt(nb / na)
            A *= s
            B /= s
        loss = bilinear_loss_and_grad(A, B, X)[0]
        if not np.isfinite(loss):
            raise RpcaDivergence(epoch)
        losses.append(loss)
    return RpcaModel(A=A, B=B, rank=r, m=m, epoch_losses=losses)


def rpca_apply(model: RpcaModel, image) -> DecomposedImage:
    """Decompose one flattened image: L = A B x, sparse X' = x - L."""
    x = np.asarray(image, dtype=np.float64).ravel()
    if x.size != model.m:
        raise RpcaError(f"image length {x.size} != model window length {model.m}")
    low = model.A @ (model.B @ x)
    return DecomposedImage(original=x, low_rank=low, sparse=x - low)


def export_sparse_pgm(decomp: DecomposedImage, side: int, path) -> dict:
    """Write the sparse component as a PGM after affine rescale to [0,1];
    the scale is recorded in a JSON sidecar so the raw values are recoverable."""
    from .pgm import write_pgm

    sp = decomp.sparse.reshape(side, side)
    lo, hi = float(sp.min()), float(sp.max())
    scale = hi - lo if hi > lo else 1.0
    write_pgm(path, (sp - lo) / scale)
    sidecar = {"offset": lo, "scale": scale}
    Path(str(path) + ".json").write_text(json.dumps(sidecar) + "\n")
    return sidecar


def pcp_oracle(X, mu: float | None = None, tol: float = 1e-7, max_iter: int = 500):
    """Principal component pursuit by augmented-Lagrangian alternation:
    singular-value thresholding on L, elementwise soft-thresholding on S.

    Returns (L, S). Sparsity weight is 1/sqrt(max(dim)). Raises on
    non-convergence, reporting the residual achieved.
    """
    X = np.asarray(X, dtype=np.float64)
    if not np.isfinite(X).all():
        raise RpcaError("X must be finite")
    if tol <= 0:
        raise RpcaError("tol must be positive")
    norm_x = np.linalg.norm(X)
    if norm_x == 0:
        return np.zeros_like(X), np.zeros_like(X)
    lam = 1.0 / np.sqrt(max(X.shape))
    if mu is None:
        mu = X.size / (4.0 * np.abs(X).sum())
    Y = X / max(norm_x, np.abs(X).max() / lam)
    L = np.zeros_like(X)
    S = np.zeros_like(X)
    for _ in range(max_iter):
        U, sv, Vt = np.linalg.svd(X - S + Y / mu, full_matrices=False)
        sv = np.maximum(sv - 1.0 / mu, 0.0)
        L = (U * sv) @ Vt
        G = X - L + Y / mu
        S = np.sign(G) * np.maximum(np.abs(G) - lam / mu, 0.0)
        R = X - L - S
        Y = Y + mu * R
        if np.linalg.norm(R) / norm_x <= tol:
            return L, S
    raise RpcaError(
        f"pcp_oracle did not converge in {max_iter} iterations "
        f"(residual {np.linalg.norm(X - L - S) / norm_x:.3e})"
    )
