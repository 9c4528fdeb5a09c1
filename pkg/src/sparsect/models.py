"""Residual U-Net for artifact reduction, a small CNN lesion detector, saliency.

U-Net layout (``c_l = base * 2**l``)::

    stem     4 x conv3x3 -> c_0                                   skip 0
    enc l    strided 2x2 -> c_l, conv1x1, 3 x conv3x3              skip l
    dec l    3 x conv3x3 at c_l, transposed 2x2 -> c_{l-1}, + skip l-1
    tail     3 x conv3x3 at c_0, conv3x3 -> 1, + network input

ReLU follows every convolution except the transposed convolutions
(their output is summed with a skip) and the final output convolution.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Image2D, Rng, as_array, as_mask, fisher_yates_shuffle
from .nn import (
    Adam,
    Chain,
    Conv2d,
    GlobalAvgPool,
    Linear,
    LrSchedule,
    ReLU,
    StridedConv2x2,
    TransposedConv2x2,
    bce_loss,
    load_checkpoint,
    lr_at,
    mse_loss,
    save_checkpoint,
    sigmoid,
)

__all__ = [
    "UNetConfig",
    "UNet",
    "build_unet",
    "train_unet",
    "rotate_patch",
    "DetectorConfig",
    "Detector",
    "build_detector",
    "train_detector",
    "saliency_map",
    "raw_saliency",
    "saliency_ratio",
    "write_training_log",
]


@dataclass(frozen=True)
class UNetConfig:
    input_size: int = 64
    base_channels: int = 8
    depth: int = 3
    growth: int = 2
    zero_init_output: bool = True

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.growth < 1:
            raise ValueError("depth, base_channels and growth must be positive")
        if self.input_size % (2**self.depth):
            raise ValueError(f"input_size {self.input_size} not divisible by 2**{self.depth}")

    def channels(self, level: int) -> int:
        return self.base_channels * self.growth**level

    @property
    def bottleneck_shape(self) -> tuple[int, int, int]:
        s = self.input_size // 2**self.depth
        return self.channels(self.depth), s, s


def _conv_relu(cin, cout, rng, k=3):
    return [Conv2d(cin, cout, k, rng), ReLU()]


class UNet:
    def __init__(self, cfg: UNetConfig, rng: Rng):
        self.cfg = cfg
        b = cfg.base_channels
        stem = _conv_relu(1, b, rng)
        for _ in range(3):
            stem += _conv_relu(b, b, rng)
        self.stem = Chain(stem)
        self.enc, self.dec = [], []
        for level in range(1, cfg.depth + 1):
            cp, c = cfg.channels(level - 1), cfg.channels(level)
            layers = [StridedConv2x2(cp, c, rng), ReLU()] + _conv_relu(c, c, rng, k=1)
            for _ in range(3):
                layers += _conv_relu(c, c, rng)
            self.enc.append(Chain(layers))
            dl = []
            for _ in range(3):
                dl += _conv_relu(c, c, rng)
            dl.append(TransposedConv2x2(c, cp, rng))
            self.dec.append(Chain(dl))
        tail = []
        for _ in range(3):
            tail += _conv_relu(b, b, rng)
        self.out_conv = Conv2d(b, 1, 3, None if cfg.zero_init_output else rng)
        tail.append(self.out_conv)
        self.tail = Chain(tail)
        self._bottleneck_shape = None

    @property
    def layers(self):
        out = list(self.stem.layers)
        for e in self.enc:
            out += e.layers
        for d in self.dec:
            out += d.layers
        return out + list(self.tail.layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"U-Net expects (n, 1, h, w) input, got {x.shape}")
        if x.shape[2] % 2**self.cfg.depth or x.shape[3] % 2**self.cfg.depth:
            raise ValueError(f"spatial size {x.shape[2:]} not divisible by 2**{self.cfg.depth}")
        skips = [self.stem(x)]
        for e in self.enc:
            skips.append(e(skips[-1]))
        h = skips[-1]
        self._bottleneck_shape = h.shape[1:]
        for level in range(self.cfg.depth, 0, -1):
            h = self.dec[level - 1](h) + skips[level - 1]
        return self.tail(h) + x

    __call__ = forward

    def backward(self, gy: np.ndarray) -> np.ndarray:
        g = self.tail.backward(gy)
        # g is the gradient w.r.t. the decoder output at every level's sum node
        skip_grads = [None] * (self.cfg.depth + 1)
        for level in range(1, self.cfg.depth + 1):
            skip_grads[level - 1] = g
            g = self.dec[level - 1].backward(g)
        # g now reaches the bottleneck (the deepest encoder output)
        for level in range(self.cfg.depth, 0, -1):
            g = self.enc[level - 1].backward(g)
            g = g + skip_grads[level - 1]
        return self.stem.backward(g) + gy

    def predict(self, images: np.ndarray, batch: int = 16) -> np.ndarray:
        """Apply to a ``(n, h, w)`` stack."""
        images = np.asarray(images, dtype=np.float64)
        out = np.empty_like(images)
        for i in range(0, len(images), batch):
            out[i : i + batch] = self.forward(images[i : i + batch, None])[:, 0]
        return out

    def save(self, path):
        return save_checkpoint(self.layers, path, {"model": "unet", "config": self.cfg.__dict__})

    def load(self, path):
        load_checkpoint(self.layers, path)
        return self


def build_unet(cfg: UNetConfig, rng: Rng | None = None) -> UNet:
    return UNet(cfg, rng if rng is not None else Rng(0))


def rotate_patch(patch: np.ndarray, k: int) -> np.ndarray:
    """Rotate counter-clockwise by ``k * 90`` degrees (last two axes)."""
    return np.rot90(patch, k, axes=(-2, -1))


def _stack(images):
    return np.stack([as_array(im) for im in images])


def train_unet(
    net: UNet,
    pairs,
    epochs: int,
    batch: int,
    rng: Rng,
    patch_size: int | None = None,
    schedule: LrSchedule | None = None,
    val_pairs=None,
) -> list[dict]:
    """MSE training on random rotated patches; one patch per image per epoch.

    Returns one log row per epoch: ``epoch, lr, train_loss, val_loss``
    (the validation loss is computed on whole images, NaN without data).
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("train_unet needs at least one pair")
    inputs = _stack([p[0] for p in pairs])
    targets = _stack([p[1] for p in pairs])
    if inputs.shape != targets.shape:
        raise ValueError("input and reference stacks differ in shape")
    n, h, w = inputs.shape
    ps = patch_size or min(h, w)
    if ps > min(h, w) or ps % 2**net.cfg.depth:
        raise ValueError(f"invalid patch size {ps} for {h}x{w} images")
    schedule = schedule or LrSchedule.reciprocal(1e-4)
    opt = Adam(net.layers)
    log = []
    for epoch in range(epochs):
        lr = lr_at(schedule, epoch)
        order = fisher_yates_shuffle(range(n), rng)
        rows = rng.integers(h - ps + 1, size=n)
        cols = rng.integers(w - ps + 1, size=n)
        rots = rng.integers(4, size=n)
        losses, weights = [], []
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            xb = np.empty((len(idx), 1, ps, ps))
            yb = np.empty_like(xb)
            for k, i in enumerate(idx):
                r, c, q = rows[i], cols[i], rots[i]
                xb[k, 0] = rotate_patch(inputs[i, r : r + ps, c : c + ps], q)
                yb[k, 0] = rotate_patch(targets[i, r : r + ps, c : c + ps], q)
            opt.zero_grad()
            loss, g = mse_loss(net.forward(xb), yb)
            net.backward(g)
            opt.step(lr)
            losses.append(loss)
            weights.append(len(idx))
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.average(losses, weights=weights))}
        row["val_loss"] = _unet_val_loss(net, val_pairs)
        log.append(row)
    return log


def _unet_val_loss(net, val_pairs) -> float:
    if not val_pairs:
        return float("nan")
    x = _stack([p[0] for p in val_pairs])
    y = _stack([p[1] for p in val_pairs])
    pred = net.predict(x)
    return float(np.mean((pred - y) ** 2))


# --------------------------------------------------------------- detector


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 64
    channels: tuple[int, ...] = (8, 16, 32, 32)

    def __post_init__(self):
        if self.input_size % 2 ** len(self.channels):
            raise ValueError("input_size must be divisible by 2**stages")


class Detector:
    """Per stage: conv3x3 + ReLU, strided 2x2 conv + ReLU; then global average pool and a linear logit."""

    def __init__(self, cfg: DetectorConfig, rng: Rng):
        self.cfg = cfg
        layers = []
        cin = 1
        for c in cfg.channels:
            layers += [Conv2d(cin, c, 3, rng), ReLU(), StridedConv2x2(c, c, rng), ReLU()]
            cin = c
        layers += [GlobalAvgPool(), Linear(cin, 1, rng)]
        self.body = Chain(layers)

    @property
    def layers(self):
        return self.body.layers

    def forward(self, x: np.ndarray) -> np.ndarray:
        """``(n, 1, h, w) -> (n,)`` logits."""
        return self.body(x)[:, 0]

    __call__ = forward

    def backward(self, g: np.ndarray) -> np.ndarray:
        return self.body.backward(g[:, None])

    def logits(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = np.empty(len(images))
        for i in range(0, len(images), batch):
            out[i : i + batch] = self.forward(images[i : i + batch, None])
        return out

    def predict_proba(self, images) -> np.ndarray:
        return sigmoid(self.logits(images))

    def get_state(self):
        return [copy.deepcopy(layer.params) for layer in self.layers]

    def set_state(self, state):
        for layer, params in zip(self.layers, state):
            for k, v in params.items():
                layer.params[k][...] = v

    def save(self, path):
        return save_checkpoint(self.layers, path, {"model": "detector", "channels": list(self.cfg.channels)})

    def load(self, path):
        load_checkpoint(self.layers, path)
        return self


def build_detector(cfg: DetectorConfig, rng: Rng | None = None) -> Detector:
    return Detector(cfg, rng if rng is not None else Rng(0))


def train_detector(
    net: Detector,
    dataset,
    epochs: int,
    batch: int,
    rng: Rng,
    val=None,
    schedule: LrSchedule | None = None,
    augment: bool = True,
) -> tuple[Detector, list[dict]]:
    """BCE training with the cosine warm-restart schedule; keeps the lowest-validation-loss weights.

    ``dataset`` and ``val`` are ``(images, labels)`` with images ``(n, h, w)``.
    Without validation data the training loss selects the checkpoint.
    With ``augment`` each image is randomly rotated by a multiple of 90 degrees.
    """
    images, labels = np.asarray(dataset[0], dtype=np.float64), np.asarray(dataset[1]).astype(float)
    if labels.all() or not labels.any():
        raise ValueError("detector training needs both classes")
    schedule = schedule or LrSchedule.cosine()
    opt = Adam(net.layers)
    n = len(images)
    best, best_loss, log = None, np.inf, []
    for epoch in range(epochs):
        lr = lr_at(schedule, epoch)
        order = fisher_yates_shuffle(range(n), rng)
        rots = rng.integers(4, size=n) if augment else np.zeros(n, dtype=int)
        losses, weights = [], []
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            xb = np.stack([rotate_patch(images[i], rots[i]) for i in idx])[:, None]
            opt.zero_grad()
            loss, g = bce_loss(net.forward(xb), labels[idx])
            net.backward(g)
            opt.step(lr)
            losses.append(loss)
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights))
        if val is not None:
            val_loss, _ = bce_loss(net.logits(val[0]), np.asarray(val[1]).astype(float))
        else:
            val_loss = train_loss
        log.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": float(val_loss)})
        if val_loss < best_loss:
            best_loss, best = val_loss, net.get_state()
    net.set_state(best)
    return net, log


# --------------------------------------------------------------- saliency


def raw_saliency(net, image) -> np.ndarray:
    """``|d logit / d pixel|`` for one image, by a single backward pass."""
    x = as_array(image)[None, None]
    net.forward(x)
    g = net.backward(np.ones(1))
    return np.abs(g[0, 0])


def saliency_map(net, image) -> Image2D:
    """Absolute input gradient of the logit, min-max normalised to [0, 1].

    A constant gradient map (for instance all zero) normalises to zeros.
    """
    s = raw_saliency(net, image)
    lo, hi = s.min(), s.max()
    if hi == lo:
        return Image2D(np.zeros_like(s), (0.0, 1.0))
    return Image2D((s - lo) / (hi - lo), (0.0, 1.0))


def saliency_ratio(saliency, lesion_mask) -> float:
    """Sum of saliency inside the mask over the sum outside; ``inf`` if nothing lies outside."""
    s = as_array(saliency)
    m = as_mask(lesion_mask)
    if s.shape != m.shape:
        raise ValueError("saliency map and mask differ in shape")
    if m.all() or not m.any():
        raise ValueError("lesion mask must contain both inside and outside pixels")
    if np.any(s < 0):
        raise ValueError("saliency map must be non-negative")
    inside, outside = float(s[m].sum()), float(s[~m].sum())
    if outside == 0.0:
        return float("inf")
    return inside / outside


def write_training_log(log, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_loss"])
        for row in log:
            w.writerow([row["epoch"], row["lr"], row["train_loss"], row["val_loss"]])
    return path
