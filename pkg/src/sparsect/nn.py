"""Small reverse-mode layer set for the U-Net and the detector.

Tensors are plain float64 ``numpy`` arrays in ``(batch, channels, height,
width)`` order.  Every layer caches what it needs in :meth:`forward` and
returns the input gradient from :meth:`backward`, accumulating parameter
gradients into ``layer.grads``.  A layer instance is used at most once per
forward pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FormatError, Rng, read_f64, write_f64

__all__ = [
    "Layer",
    "Conv2d",
    "StridedConv2x2",
    "TransposedConv2x2",
    "ReLU",
    "Bias",
    "GlobalAvgPool",
    "Linear",
    "Chain",
    "add_forward",
    "add_backward",
    "relu_forward",
    "relu_backward",
    "mse_loss",
    "bce_loss",
    "sigmoid",
    "AdamState",
    "adam_step",
    "Adam",
    "LrSchedule",
    "lr_at",
    "save_checkpoint",
    "load_checkpoint",
]


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.in_channels = 0
        self.out_channels = 0

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _accumulate(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g

    def spec(self) -> dict:
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels}


def _kaiming_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Layer):
    """Stride-1 k x k cross-correlation with zero padding (k - 1) / 2; k is 1 or 3."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, rng: Rng | None = None):
        super().__init__()
        if kernel not in (1, 3):
            raise ValueError("Conv2d supports kernel sizes 1 and 3")
        self.kind = "conv3x3" if kernel == 3 else "conv1x1"
        self.k = kernel
        self.in_channels, self.out_channels = in_channels, out_channels
        shape = (out_channels, in_channels, kernel, kernel)
        fan_in = in_channels * kernel * kernel
        self.params["weight"] = _kaiming_uniform(rng, shape, fan_in) if rng else np.zeros(shape)
        self.params["bias"] = np.zeros(out_channels)
        self._cache = None

    def _cols(self, x):
        n, c, h, w = x.shape
        if self.k == 1:
            return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
        xp = np.zeros((c, n, h + 2, w + 2))
        xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
        cols = np.empty((c, 3, 3, n, h, w))
        for i in range(3):
            for j in range(3):
                cols[:, i, j] = xp[:, :, i : i + h, j : j + w]
        return cols.reshape(c * 9, n * h * w)

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"{self.kind}: expected {self.in_channels} input channels, got {c}")
        cols = self._cols(x)
        wm = self.params["weight"].reshape(self.out_channels, -1)
        y = wm @ cols + self.params["bias"][:, None]
        self._cache = (x.shape, cols)
        return np.ascontiguousarray(y.reshape(self.out_channels, n, h, w).transpose(1, 0, 2, 3))

    def backward(self, gy):
        (n, c, h, w), cols = self._cache
        o = self.out_channels
        g = gy.transpose(1, 0, 2, 3).reshape(o, -1)
        wm = self.params["weight"].reshape(o, -1)
        self._accumulate("weight", (g @ cols.T).reshape(self.params["weight"].shape))
        self._accumulate("bias", g.sum(axis=1))
        gcols = wm.T @ g
        if self.k == 1:
            return np.ascontiguousarray(gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
        gcols = gcols.reshape(c, 3, 3, n, h, w)
        gxp = np.zeros((c, n, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                gxp[:, :, i : i + h, j : j + w] += gcols[:, i, j]
        return np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))


class StridedConv2x2(Layer):
    """2 x 2 kernel, stride 2: halves height and width (which must be even)."""

    kind = "strided_conv2x2"

    def __init__(self, in_channels: int, out_channels: int, rng: Rng | None = None):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        shape = (out_channels, in_channels, 2, 2)
        self.params["weight"] = _kaiming_uniform(rng, shape, in_channels * 4) if rng else np.zeros(shape)
        self.params["bias"] = np.zeros(out_channels)
        self._cache = None

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"{self.kind}: expected {self.in_channels} input channels, got {c}")
        if h % 2 or w % 2:
            raise ValueError(f"{self.kind}: spatial dims must be even, got {(h, w)}")
        h2, w2 = h // 2, w // 2
        cols = x.reshape(n, c, h2, 2, w2, 2).transpose(1, 3, 5, 0, 2, 4).reshape(c * 4, n * h2 * w2)
        y = self.params["weight"].reshape(self.out_channels, -1) @ cols + self.params["bias"][:, None]
        self._cache = (x.shape, cols)
        return np.ascontiguousarray(y.reshape(self.out_channels, n, h2, w2).transpose(1, 0, 2, 3))

    def backward(self, gy):
        (n, c, h, w), cols = self._cache
        o = self.out_channels
        g = gy.transpose(1, 0, 2, 3).reshape(o, -1)
        wm = self.params["weight"].reshape(o, -1)
        self._accumulate("weight", (g @ cols.T).reshape(self.params["weight"].shape))
        self._accumulate("bias", g.sum(axis=1))
        gcols = (wm.T @ g).reshape(c, 2, 2, n, h // 2, w // 2)
        return np.ascontiguousarray(gcols.transpose(3, 0, 4, 1, 5, 2).reshape(n, c, h, w))


class TransposedConv2x2(Layer):
    """Stride-2 transposed convolution, weight ``(in, out, 2, 2)``: doubles height and width.

    With zero bias it is the exact adjoint of :class:`StridedConv2x2`
    sharing the same weight array.
    """

    kind = "transposed_conv2x2"

    def __init__(self, in_channels: int, out_channels: int, rng: Rng | None = None):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        shape = (in_channels, out_channels, 2, 2)
        self.params["weight"] = _kaiming_uniform(rng, shape, in_channels) if rng else np.zeros(shape)
        self.params["bias"] = np.zeros(out_channels)
        self._cache = None

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"{self.kind}: expected {self.in_channels} input channels, got {c}")
        o = self.out_channels
        xm = x.transpose(1, 0, 2, 3).reshape(c, -1)
        y = self.params["weight"].reshape(c, o * 4).T @ xm
        y = y.reshape(o, 2, 2, n, h, w).transpose(3, 0, 4, 1, 5, 2).reshape(n, o, 2 * h, 2 * w)
        self._cache = (x.shape, xm)
        return y + self.params["bias"][None, :, None, None]

    def backward(self, gy):
        (n, c, h, w), xm = self._cache
        o = self.out_channels
        g = gy.reshape(n, o, h, 2, w, 2).transpose(1, 3, 5, 0, 2, 4).reshape(o * 4, -1)
        wm = self.params["weight"].reshape(c, o * 4)
        self._accumulate("weight", (xm @ g.T).reshape(self.params["weight"].shape))
        self._accumulate("bias", gy.sum(axis=(0, 2, 3)))
        gx = wm @ g
        return np.ascontiguousarray(gx.reshape(c, n, h, w).transpose(1, 0, 2, 3))


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, gy):
    """Subgradient 0 at 0."""
    return gy * (x > 0)


def add_forward(a, b):
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def add_backward(gy):
    return gy, gy


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._x = x
        return relu_forward(x)

    def backward(self, gy):
        return relu_backward(self._x, gy)


class Bias(Layer):
    """Per-channel additive bias."""

    kind = "bias"

    def __init__(self, channels: int):
        super().__init__()
        self.in_channels = self.out_channels = channels
        self.params["bias"] = np.zeros(channels)

    def forward(self, x):
        return x + self.params["bias"][None, :, None, None]

    def backward(self, gy):
        self._accumulate("bias", gy.sum(axis=(0, 2, 3)))
        return gy


class GlobalAvgPool(Layer):
    """``(n, c, h, w) -> (n, c)``."""

    kind = "global_avg_pool"

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, gy):
        n, c, h, w = self._shape
        return np.broadcast_to(gy[:, :, None, None] / (h * w), self._shape).copy()


class Linear(Layer):
    """``(n, in) -> (n, out)``."""

    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng: Rng | None = None):
        super().__init__()
        self.in_channels, self.out_channels = in_features, out_features
        shape = (out_features, in_features)
        self.params["weight"] = _kaiming_uniform(rng, shape, in_features) if rng else np.zeros(shape)
        self.params["bias"] = np.zeros(out_features)

    def forward(self, x):
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, gy):
        self._accumulate("weight", gy.T @ self._x)
        self._accumulate("bias", gy.sum(axis=0))
        return gy @ self.params["weight"]


class Chain:
    """Layers applied in sequence."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


# ----------------------------------------------------------------- losses


def mse_loss(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.mean(d * d)), 2.0 * d / d.size


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(logit, label):
    """Mean binary cross-entropy of logits, ``max(z, 0) - z y + log(1 + exp(-|z|))``."""
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"bce_loss: shape mismatch {z.shape} vs {y.shape}")
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(loss.mean()), (sigmoid(z) - y) / z.size


# -------------------------------------------------------------- optimiser

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float):
    """In-place bias-corrected Adam update of every array in ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state disagree in length")
    state.t += 1
    c1 = 1.0 - BETA1**state.t
    c2 = 1.0 - BETA2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError("parameter/gradient/state shape mismatch")
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params, state


class Adam:
    """Adam over the parameters of a list of layers."""

    def __init__(self, layers):
        self.layers = list(layers)
        self.slots = [(layer, k) for layer in self.layers for k in layer.params]
        self.state = AdamState.like([layer.params[k] for layer, k in self.slots])

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def step(self, lr: float):
        params = [layer.params[k] for layer, k in self.slots]
        grads = [layer.grads[k] for layer, k in self.slots]
        adam_step(params, grads, self.state, lr)


# -------------------------------------------------------------- schedules


@dataclass(frozen=True)
class LrSchedule:
    """``reciprocal``: ``base / (epoch + 1)``.

    ``cosine_warm_restarts``: cosine decay from ``base_lr`` to ``min_lr``
    within each segment delimited by ``restart_epochs``.  A segment of
    ``L`` epochs uses period ``T = L - 1`` so its first epoch runs at the
    base rate and its last at the minimum; a one-epoch segment stays at
    the base rate.  The segment after the last restart is twice as long
    as the one before it, and the pattern repeats past its end.
    """

    kind: str = "reciprocal"
    base_lr: float = 1e-4
    min_lr: float = 0.0
    restart_epochs: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in ("reciprocal", "cosine_warm_restarts"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.base_lr > self.min_lr >= 0:
            raise ValueError("need base_lr > min_lr >= 0")
        r = tuple(int(e) for e in self.restart_epochs)
        if any(b <= a for a, b in zip((0,) + r, r)):
            raise ValueError("restart epochs must be positive and increasing")
        object.__setattr__(self, "restart_epochs", r)

    @classmethod
    def reciprocal(cls, base_lr: float = 1e-4) -> "LrSchedule":
        return cls("reciprocal", base_lr, 0.0)

    @classmethod
    def cosine(cls, base_lr: float = 5e-4, min_lr: float = 1e-5, restarts=(1, 3, 7)) -> "LrSchedule":
        return cls("cosine_warm_restarts", base_lr, min_lr, tuple(restarts))

    def segments(self):
        """Yield ``(start, length)`` of successive cosine segments forever."""
        bounds = (0,) + self.restart_epochs
        for a, b in zip(bounds, bounds[1:]):
            yield a, b - a
        start = bounds[-1]
        length = 2 * (bounds[-1] - bounds[-2]) if len(bounds) > 1 else 1
        while True:
            yield start, length
            start += length


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if schedule.kind == "reciprocal":
        return schedule.base_lr / (epoch + 1)
    for start, length in schedule.segments():
        if epoch < start + length:
            t = epoch - start
            if length == 1:
                return schedule.base_lr
            period = length - 1
            return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (
                1.0 + math.cos(math.pi * t / period)
            )
    raise AssertionError("unreachable")


# ------------------------------------------------------------- checkpoints


def save_checkpoint(layers, path, extra: dict | None = None) -> Path:
    """JSON manifest of layer specs plus one little-endian float64 payload."""
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for i, layer in enumerate(layers):
        spec = layer.spec()
        spec["index"] = i
        spec["params"] = {}
        for k, v in layer.params.items():
            spec["params"][k] = {"offset": offset, "shape": list(v.shape)}
            chunks.append(v.ravel())
            offset += v.size
        entries.append(spec)
    payload = path.with_name(path.name + ".f64")
    write_f64(payload, np.concatenate(chunks) if chunks else np.zeros(0))
    manifest = {"payload": payload.name, "count": offset, "layers": entries, "extra": extra or {}}
    out = path.with_name(path.name + ".json")
    out.write_text(json.dumps(manifest, indent=1))
    return out


def load_checkpoint(layers, path) -> dict:
    """Load weights saved by :func:`save_checkpoint` into ``layers`` (same architecture)."""
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    manifest = json.loads(path.with_name(path.name + ".json").read_text())
    flat = read_f64(path.with_name(manifest["payload"]), manifest["count"])
    if len(manifest["layers"]) != len(layers):
        raise FormatError("checkpoint layer count does not match the network")
    for layer, spec in zip(layers, manifest["layers"]):
        if spec["kind"] != layer.kind:
            raise FormatError(f"checkpoint layer {spec['index']} is {spec['kind']}, network has {layer.kind}")
        for k, info in spec["params"].items():
            size = int(np.prod(info["shape"]))
            arr = flat[info["offset"] : info["offset"] + size].reshape(info["shape"])
            if arr.shape != layer.params[k].shape:
                raise FormatError(f"shape mismatch for layer {spec['index']} param {k}")
            layer.params[k][...] = arr
    return manifest.get("extra", {})
