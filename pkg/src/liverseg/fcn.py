"""Small fully convolutional unary model with class-weighted training loss.

A plain stack of 3x3 same-padding convolutions (ReLU between them) followed
by a 1x1 convolution to class logits and a per-pixel softmax. Forward,
backward and the SGD loop are written in numpy with float64 parameters so
analytic gradients can be verified against central finite differences.

The training loss is a binary cross-entropy over foreground probabilities
with a per-pixel class weight (the inverse pixel count of the pixel's
ground-truth class), averaged over the pixels of the batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import MissingClassError, NumericalError, VolumeFormatError
from .volume import LabelVolume

PROB_EPS = 1e-7
CHECKPOINT_MAGIC = b"TOYFCN1\x00"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.8
    weight_decay: float = 0.0005
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass(frozen=True)
class ClassWeights:
    """Per-class positive weights, indexed by label."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("class weights must be a 1-D vector")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("class weights must be finite and positive")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "w", w)


def class_weights(labels, classes: int, min_count: int | None = None) -> ClassWeights:
    """Inverse pixel-count weights: w[k] = 1 / (#voxels of class k).

    ``labels`` is an iterable of LabelVolume (or integer arrays). A class
    absent from the whole collection has no finite weight; pass ``min_count``
    to floor the counts instead of raising.
    """
    counts = np.zeros(classes, dtype=np.int64)
    for item in labels:
        arr = item.labels if isinstance(item, LabelVolume) else np.asarray(item)
        counts += np.bincount(arr.reshape(-1).astype(np.int64), minlength=classes)[:classes]
    if min_count is not None:
        counts = np.maximum(counts, int(min_count))
    absent = np.nonzero(counts == 0)[0]
    if absent.size:
        raise MissingClassError(
            f"class {int(absent[0])} has no voxels; its weight would be infinite "
            f"(pass min_count to floor the counts)"
        )
    return ClassWeights(1.0 / counts)


def normalized_class_weights(labels, classes: int, min_count: int | None = None) -> ClassWeights:
    """Inverse-count weights rescaled so the average pixel weight is 1.

    A pure global rescale of :func:`class_weights` (the loss is linear in the
    weights), keeping gradient magnitudes at a trainable scale regardless of
    dataset size.
    """
    base = class_weights(labels, classes, min_count=min_count)
    counts = 1.0 / base.w
    total = counts.sum()
    return ClassWeights(base.w * (total / classes))


def weighted_ce_loss(p: np.ndarray, target: np.ndarray, weights: np.ndarray):
    """Class-weighted binary cross-entropy over foreground probabilities.

    ``loss = -(1/n) * sum_i w_i * [t_i log p_i + (1 - t_i) log(1 - p_i)]``
    with n the number of pixels and p clamped into [eps, 1-eps]. Returns the
    scalar loss and its gradient with respect to p (evaluated at the clamped
    values): ``dL/dp_i = -(1/n) w_i (t_i/p_i - (1-t_i)/(1-p_i))``.
    """
    p = np.asarray(p, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if p.shape != target.shape or p.shape != weights.shape:
        raise ValueError(
            f"shape mismatch: p {p.shape}, target {target.shape}, weights {weights.shape}"
        )
    if np.any(weights <= 0):
        raise ValueError("per-pixel weights must be positive")
    n = p.size
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = -(weights * (target * np.log(pc) + (1.0 - target) * np.log1p(-pc))).sum() / n
    grad = -(weights * (target / pc - (1.0 - target) / (1.0 - pc))) / n
    return float(loss), grad


class ToyNet:
    """Stack of 3x3 convs (+ReLU) and a 1x1 head producing class logits."""

    def __init__(self, in_channels: int = 1, hidden_channels: int = 16,
                 conv_layers: int = 4, classes: int = 2, use_relu: bool = True,
                 seed: int = 0):
        if conv_layers < 1:
            raise ValueError("need at least one 3x3 layer")
        rng = np.random.default_rng(seed)
        self.use_relu = use_relu
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        chans = [in_channels] + [hidden_channels] * conv_layers
        for cin, cout in zip(chans[:-1], chans[1:]):
            std = np.sqrt(2.0 / (cin * 9))
            self.weights.append(rng.normal(0.0, std, size=(cout, cin, 3, 3)))
            self.biases.append(np.zeros(cout))
        std = np.sqrt(2.0 / hidden_channels)
        self.weights.append(rng.normal(0.0, std, size=(classes, hidden_channels, 1, 1)))
        self.biases.append(np.zeros(classes))

    @property
    def in_channels(self) -> int:
        return self.weights[0].shape[1]

    @property
    def classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b


def _conv3_forward(x, w, b):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))
    return np.einsum("ocuv,chwuv->ohw", w, win, optimize=True) + b[:, None, None]


def _conv3_backward(x, w, dy):
    h, wd = x.shape[1:]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))
    dw = np.einsum("ohw,chwuv->ocuv", dy, win, optimize=True)
    db = dy.sum(axis=(1, 2))
    dxp = np.zeros_like(xp)
    for u in range(3):
        for v in range(3):
            dxp[:, u : u + h, v : v + wd] += np.einsum("ohw,oc->chw", dy, w[:, :, u, v])
    return dw, db, dxp[:, 1 : h + 1, 1 : wd + 1]


def _head_forward(x, w, b):
    return np.einsum("oc,chw->ohw", w[:, :, 0, 0], x) + b[:, None, None]


def _head_backward(x, w, dy):
    dw = np.einsum("ohw,chw->oc", dy, x)[:, :, None, None]
    db = dy.sum(axis=(1, 2))
    dx = np.einsum("ohw,oc->chw", dy, w[:, :, 0, 0])
    return dw, db, dx


def _forward_cached(net: ToyNet, image: np.ndarray):
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, :, :]
    if x.shape[0] != net.in_channels:
        raise ValueError(f"net expects {net.in_channels} input channels, got {x.shape[0]}")
    acts = [x]
    pres = []
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        z = _conv3_forward(acts[-1], w, b)
        pres.append(z)
        acts.append(np.maximum(z, 0.0) if net.use_relu else z)
    logits = _head_forward(acts[-1], net.weights[-1], net.biases[-1])
    m = logits.max(axis=0, keepdims=True)
    e = np.exp(logits - m)
    probs = e / e.sum(axis=0, keepdims=True)
    return probs, acts, pres


def forward(net: ToyNet, image: np.ndarray) -> np.ndarray:
    """Per-pixel class probabilities, shape (classes, H, W)."""
    probs, _, _ = _forward_cached(net, image)
    return probs


def _backward(net: ToyNet, probs, acts, pres, dprobs):
    # softmax backward: dz = P * (g - sum_k g_k P_k)
    inner = (dprobs * probs).sum(axis=0, keepdims=True)
    dlogits = probs * (dprobs - inner)
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.biases)
    dw, db, dx = _head_backward(acts[-1], net.weights[-1], dlogits)
    grads_w[-1], grads_b[-1] = dw, db
    for i in range(len(net.weights) - 2, -1, -1):
        if net.use_relu:
            dx = dx * (pres[i] > 0)
        dw, db, dx = _conv3_backward(acts[i], net.weights[i], dx)
        grads_w[i], grads_b[i] = dw, db
    return grads_w, grads_b


def _loss_and_grads(net: ToyNet, image, target, pixel_weights, grad_scale=1.0):
    probs, acts, pres = _forward_cached(net, image)
    p_fg = probs[1]
    loss, dldp = weighted_ce_loss(p_fg, target, pixel_weights)
    dprobs = np.zeros_like(probs)
    dprobs[1] = dldp * grad_scale
    grads_w, grads_b = _backward(net, probs, acts, pres, dprobs)
    return loss, grads_w, grads_b


def train(net: ToyNet, dataset, cfg: TrainConfig, weights: ClassWeights) -> list[float]:
    """SGD with momentum and L2 weight decay; returns per-epoch mean losses.

    ``dataset`` is a sequence of (slice, label_slice) pairs with labels in
    {0, 1}; the per-pixel loss weight is the class weight of the pixel's
    ground-truth label. Deterministic given ``cfg.seed``; aborts with a
    diagnostic when the loss stops being finite.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    vel_w = [np.zeros_like(w) for w in net.weights]
    vel_b = [np.zeros_like(b) for b in net.biases]
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            n_batch = sum(np.asarray(dataset[i][1]).size for i in batch)
            sum_w = [np.zeros_like(w) for w in net.weights]
            sum_b = [np.zeros_like(b) for b in net.biases]
            batch_loss = 0.0
            for i in batch:
                img, lab = dataset[i]
                lab = np.asarray(lab)
                scale = lab.size / n_batch
                pix_w = weights.w[lab.astype(np.int64)]
                loss, gw, gb = _loss_and_grads(
                    net, img, (lab == 1).astype(np.float64), pix_w, grad_scale=scale
                )
                batch_loss += loss * scale
                for acc, g in zip(sum_w, gw):
                    acc += g
                for acc, g in zip(sum_b, gb):
                    acc += g
            if not np.isfinite(batch_loss):
                raise NumericalError(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"batch starting at {start}"
                )
            for w, v, g in zip(net.weights, vel_w, sum_w):
                v *= cfg.momentum
                v -= cfg.learning_rate * (g + cfg.weight_decay * w)
                w += v
            for b, v, g in zip(net.biases, vel_b, sum_b):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                b += v
            epoch_losses.append(batch_loss)
        trace.append(float(np.mean(epoch_losses)))
    return trace


def gradient_check(net: ToyNet, image, label, weights: ClassWeights, h: float = 1e-4) -> float:
    """Max relative error of analytic parameter gradients vs central differences.

    Perturbs every parameter (nets are guarded to <= 1e4 parameters); the
    comparison skips parameters whose analytic gradient magnitude is below
    1e-8.
    """
    if net.n_params > 10_000:
        raise ValueError(f"gradient_check limited to 1e4 parameters, net has {net.n_params}")
    label = np.asarray(label)
    target = (label == 1).astype(np.float64)
    pix_w = weights.w[label.astype(np.int64)]

    def loss_now():
        probs, _, _ = _forward_cached(net, image)
        return weighted_ce_loss(probs[1], target, pix_w)[0]

    _, grads_w, grads_b = _loss_and_grads(net, image, target, pix_w)
    analytic = grads_w + grads_b
    params = net.weights + net.biases

    worst = 0.0
    for par, grad in zip(params, analytic):
        flat = par.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            g = gflat[idx]
            if abs(g) <= 1e-8:
                continue
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss_now()
            flat[idx] = orig - h
            lm = loss_now()
            flat[idx] = orig
            fd = (lp - lm) / (2.0 * h)
            rel = abs(g - fd) / max(abs(g), abs(fd))
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint format: magic, layer count, then per-layer dims and float32
# weight/bias payloads in declaration order (little-endian throughout).
# ---------------------------------------------------------------------------

def save_checkpoint(net: ToyNet, path: str | Path) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(net.weights))]
    for w, b in zip(net.weights, net.biases):
        cout, cin, kh, kw = w.shape
        parts.append(struct.pack("<IIII", kh, kw, cin, cout))
        parts.append(w.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> ToyNet:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise VolumeFormatError(f"{path}: not a network checkpoint (bad magic)")
    off = 8
    try:
        (n_layers,) = struct.unpack_from("<I", blob, off)
        off += 4
        weights, biases = [], []
        for _ in range(n_layers):
            kh, kw, cin, cout = struct.unpack_from("<IIII", blob, off)
            off += 16
            wsize = cout * cin * kh * kw * 4
            w = np.frombuffer(blob, dtype="<f4", count=cout * cin * kh * kw, offset=off)
            off += wsize
            b = np.frombuffer(blob, dtype="<f4", count=cout, offset=off)
            off += cout * 4
            weights.append(w.reshape(cout, cin, kh, kw).astype(np.float64))
            biases.append(b.astype(np.float64))
    except (struct.error, ValueError) as exc:
        raise VolumeFormatError(f"{path}: truncated checkpoint: {exc}") from exc
    if off != len(blob):
        raise VolumeFormatError(f"{path}: {len(blob) - off} trailing bytes in checkpoint")
    if n_layers < 1 or weights[-1].shape[2:] != (1, 1):
        raise VolumeFormatError(f"{path}: checkpoint must end with a 1x1 head layer")

    net = ToyNet.__new__(ToyNet)
    net.use_relu = True
    net.weights = weights
    net.biases = biases
    return net
