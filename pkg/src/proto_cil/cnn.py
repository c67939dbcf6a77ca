"""Small trainable convnet for 70x70 single-channel imagery, numpy only.

Four conv+relu+maxpool stages (kernels 7/5/3/3, channels 16/32/64/128),
dropout, then a dense feature layer plus a throwaway classifier head used
only while training on the base task. Backprop is hand-written so parameter
gradients can be verified against finite differences.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .features import FeatureMatrix
from .seeding import derive_rng

KERNELS = (7, 5, 3, 3)
CHANNELS = (16, 32, 64, 128)
INPUT_SIZE = 70
FLAT_SIZE = 4 * 4 * 128  # spatial sizes after pools: 35, 17, 8, 4


class CnnError(ValueError):
    pass


class CnnDivergence(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class CnnModel:
    params: dict  # name -> float64 array
    d_cnn: int
    dropout: float
    num_classes: int
    frozen: bool = False
    history: list = field(default_factory=list)  # (epoch, loss, accuracy)

    def copy(self):
        return CnnModel(
            params={k: v.copy() for k, v in self.params.items()},
            d_cnn=self.d_cnn, dropout=self.dropout,
            num_classes=self.num_classes, frozen=self.frozen,
            history=list(self.history),
        )


def cnn_init(d_cnn: int, dropout: float, seed: int, num_classes: int = 2) -> CnnModel:
    """He fan-in Gaussian init for conv/dense weights, zero biases."""
    if d_cnn < 1:
        raise CnnError("d_cnn must be >= 1")
    if not 0 <= dropout < 1:
        raise CnnError(f"dropout must be in [0,1), got {dropout}")
    if num_classes < 2:
        raise CnnError("num_classes must be >= 2")
    rng = derive_rng(seed, "cnn")
    params = {}
    in_ch = 1
    for i, (k, out_ch) in enumerate(zip(KERNELS, CHANNELS)):
        fan_in = in_ch * k * k
        params[f"conv{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, out_ch))
        params[f"conv{i}_b"] = np.zeros(out_ch)
        in_ch = out_ch
    params["dense_w"] = rng.normal(0.0, np.sqrt(2.0 / FLAT_SIZE), size=(FLAT_SIZE, d_cnn))
    params["dense_b"] = np.zeros(d_cnn)
    params["head_w"] = rng.normal(0.0, np.sqrt(2.0 / d_cnn), size=(d_cnn, num_classes))
    params["head_b"] = np.zeros(num_classes)
    return CnnModel(params=params, d_cnn=d_cnn, dropout=dropout, num_classes=num_classes)


# ---------------------------------------------------------------------------
# layer primitives

def _im2col(x, k):
    """x: (N, C, H, W) zero-padded to preserve size; returns (N, H*W, C*k*k)."""
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, H, W, k, k)
    n, c, h, w = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * k * k)


def _col2im(dcols, shape, k):
    """Adjoint of _im2col: scatter-add column gradients back to (N, C, H, W)."""
    n, c, h, w = shape
    p = k // 2
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    d6 = dcols.reshape(n, h, w, c, k, k)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + h, kj : kj + w] += d6[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return dxp[:, :, p : p + h, p : p + w]


def _maxpool(x):
    """2x2 stride-2 floor pooling; returns (out, argmax) for backprop."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2)
    flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, idx


def apply_dropout(x, p, rng):
    """Inverted dropout: surviving units are rescaled by 1/(1-p), so the
    expectation over masks equals the eval-mode input."""
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def _maxpool_back(dout, idx, shape):
    n, c, h, w = shape
    h2, w2 = h // 2, w // 2
    dflat = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(dflat, idx[..., None], dout[..., None], axis=-1)
    dwin = dflat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(shape)
    dx[:, :, : 2 * h2, : 2 * w2] = dwin.reshape(n, c, 2 * h2, 2 * w2)
    return dx


def _forward_batch(model, images, train_mode, rng):
    """images: (N, 70, 70). Returns (features, logits, cache)."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (INPUT_SIZE, INPUT_SIZE):
        raise CnnError(f"expected {INPUT_SIZE}x{INPUT_SIZE} images, got {x.shape[1:]}")
    a = x[:, None, :, :]
    cache = {"x_shapes": [], "cols": [], "relu": [], "pool_idx": []}
    for i, k in enumerate(KERNELS):
        cols = _im2col(a, k)
        z = cols @ model.params[f"conv{i}_w"] + model.params[f"conv{i}_b"]
        n, hw, f = z.shape
        side = a.shape[2]
        z = z.reshape(n, side, side, f).transpose(0, 3, 1, 2)
        relu_mask = z > 0
        z = z * relu_mask
        pooled, idx = _maxpool(z)
        cache["x_shapes"].append((a.shape, z.shape))
        cache["cols"].append(cols)
        cache["relu"].append(relu_mask)
        cache["pool_idx"].append(idx)
        a = pooled
    flat = a.reshape(a.shape[0], -1)
    if train_mode and model.dropout > 0:
        if rng is None:
            raise CnnError("train-mode forward needs an rng for dropout")
        flat, mask = apply_dropout(flat, model.dropout, rng)
        cache["drop_mask"] = mask
    else:
        cache["drop_mask"] = None
    cache["flat"] = flat
    feats = flat @ model.params["dense_w"] + model.params["dense_b"]
    logits = feats @ model.params["head_w"] + model.params["head_b"]
    cache["feats"] = feats
    return feats, logits, cache


def cnn_forward(model: CnnModel, image, train_mode: bool = False, seed: int = 0):
    """Single-image forward pass; eval mode is deterministic (dropout off)."""
    rng = derive_rng(seed, "cnn", 1) if train_mode else None
    feats, logits, _ = _forward_batch(model, np.asarray(image)[None], train_mode, rng)
    return feats[0], logits[0]


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cnn_loss_and_grad(model, images, label_idx, train_mode=False, rng=None):
    """Mean softmax cross-entropy and gradients for every parameter."""
    _, logits, cache = _forward_batch(model, images, train_mode, rng)
    n = logits.shape[0]
    probs = _softmax(logits)
    loss = float(-np.log(probs[np.arange(n), label_idx] + 1e-300).mean())

    grads = {}
    dlogits = probs.copy()
    dlogits[np.arange(n), label_idx] -= 1.0
    dlogits /= n
    grads["head_w"] = cache["feats"].T @ dlogits
    grads["head_b"] = dlogits.sum(axis=0)
    dfeats = dlogits @ model.params["head_w"].T
    grads["dense_w"] = cache["flat"].T @ dfeats
    grads["dense_b"] = dfeats.sum(axis=0)
    dflat = dfeats @ model.params["dense_w"].T
    if cache["drop_mask"] is not None:
        dflat = dflat * cache["drop_mask"]
    da = dflat.reshape(n, CHANNELS[-1], 4, 4)
    for i in reversed(range(len(KERNELS))):
        a_shape, z_shape = cache["x_shapes"][i]
        dz = _maxpool_back(da, cache["pool_idx"][i], z_shape)
        dz = dz * cache["relu"][i]
        dzm = dz.transpose(0, 2, 3, 1).reshape(n, -1, dz.shape[1])
        grads[f"conv{i}_w"] = np.einsum("nid,nif->df", cache["cols"][i], dzm)
        grads[f"conv{i}_b"] = dzm.sum(axis=(0, 1))
        if i > 0:
            dcols = dzm @ model.params[f"conv{i}_w"].T
            da = _col2im(dcols, a_shape, KERNELS[i])
    return loss, grads


def cnn_train(model: CnnModel, images, labels, epochs: int = 30, lr: float = 0.01,
              momentum: float = 0.9, weight_decay: float = 0.0005,
              seed: int = 0, batch_size: int = 16) -> CnnModel:
    """SGD with momentum and weight decay on base-task classes; returns a
    frozen copy with per-epoch (loss, accuracy) history."""
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise CnnError("base task must contain at least 2 classes")
    model = model.copy()
    if model.num_classes != len(classes):
        head_rng = derive_rng(seed, "cnn", 2)
        model.params["head_w"] = head_rng.normal(
            0.0, np.sqrt(2.0 / model.d_cnn), size=(model.d_cnn, len(classes)))
        model.params["head_b"] = np.zeros(len(classes))
        model.num_classes = len(classes)
    x = np.asarray(images, dtype=np.float64)
    y = np.array([classes.index(c) for c in labels])
    rng = derive_rng(seed, "cnn", 3)
    vel = {k: np.zeros_like(v) for k, v in model.params.items()}
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            sel = order[start : start + batch_size]
            loss, grads = cnn_loss_and_grad(model, x[sel], y[sel], train_mode=True, rng=rng)
            if not np.isfinite(loss):
                raise CnnDivergence(epoch)
            for k, g in grads.items():
                if k.endswith("_w"):
                    g = g + weight_decay * model.params[k]
                vel[k] = momentum * vel[k] - lr * g
                model.params[k] += vel[k]
        _, logits, _ = _forward_batch(model, x, False, None)
        probs = _softmax(logits)
        ep_loss = float(-np.log(probs[np.arange(len(x)), y] + 1e-300).mean())
        acc = float((logits.argmax(axis=1) == y).mean())
        if not np.isfinite(ep_loss):
            raise CnnDivergence(epoch)
        model.history.append((epoch, ep_loss, acc))
    model.frozen = True
    return model


def cnn_extract(model: CnnModel, images, labels, batch_size: int = 64) -> FeatureMatrix:
    """Eval-mode dense features for a frozen model."""
    if not model.frozen:
        raise CnnError("cnn_extract requires a trained (frozen) model")
    x = np.asarray(images, dtype=np.float64)
    rows = []
    for start in range(0, len(x), batch_size):
        feats, _, _ = _forward_batch(model, x[start : start + batch_size], False, None)
        rows.append(feats)
    return FeatureMatrix(rows=np.concatenate(rows, axis=0), labels=list(labels), source="cnn")


# ---------------------------------------------------------------------------
# checkpoints

def save_cnn(model: CnnModel, path) -> None:
    from .binio import save_blocks

    meta = {"kind": "cnn", "d_cnn": model.d_cnn, "dropout": model.dropout,
            "num_classes": model.num_classes, "frozen": model.frozen}
    save_blocks(path, meta, model.params)


def load_cnn(path) -> CnnModel:
    from .binio import load_blocks

    meta, arrays = load_blocks(path)
    if meta.get("kind") != "cnn":
        raise CnnError(f"{path}: not a cnn checkpoint")
    return CnnModel(params=arrays, d_cnn=meta["d_cnn"], dropout=meta["dropout"],
                    num_classes=meta["num_classes"], frozen=meta["frozen"])
