"""Small feed-forward networks with hand-written backprop.

Layers: ``dense(out)``, ``relu``, ``conv2d(out_ch, kernel, stride)`` (valid
padding, NCHW) and ``flatten``. Heads: softmax cross-entropy (mean over the
batch) or L2 regression (mean squared error over all outputs). Everything
runs in float64.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import BadMagicError, _read_exact
from .rng import Rng

NPK_MAGIC = b"NP1\x00"
HEADS = ("softmax_ce", "l2")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetSpec:
    input_shape: tuple
    layers: tuple
    head: str = "softmax_ce"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(dict(layer) for layer in self.layers))
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        shapes = self.shapes()
        if len(shapes[-1]) != 1:
            raise ValueError("network must end in a flat output (add flatten + dense)")
        if self.head == "softmax_ce" and shapes[-1][0] < 2:
            raise ValueError("classification needs at least 2 classes")

    @classmethod
    def mlp(cls, input_dim: int, hidden=(64,), n_out: int = 2, head: str = "softmax_ce") -> "NetSpec":
        layers = []
        for h in hidden:
            layers += [{"type": "dense", "out": h}, {"type": "relu"}]
        layers.append({"type": "dense", "out": n_out})
        return cls((input_dim,), tuple(layers), head)

    def shapes(self) -> list[tuple]:
        """Activation shape (without batch axis) before each layer and after the last."""
        shape = self.input_shape
        if not shape or min(shape) < 1:
            raise ValueError(f"bad input shape {shape}")
        out = [shape]
        for i, layer in enumerate(self.layers):
            kind = layer.get("type")
            if kind == "dense":
                if len(shape) != 1:
                    raise ValueError(f"layer {i}: dense needs flat input, got {shape}; add flatten")
                shape = (int(layer["out"]),)
                if shape[0] < 1:
                    raise ValueError(f"layer {i}: dense out must be >= 1")
            elif kind == "relu":
                pass
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "conv2d":
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: conv2d needs (C, H, W) input, got {shape}")
                k, s = int(layer["kernel"]), int(layer.get("stride", 1))
                c, h, w = shape
                if k < 1 or s < 1 or k > h or k > w:
                    raise ValueError(f"layer {i}: kernel {k} / stride {s} incompatible with {shape}")
                shape = (int(layer["out_ch"]), (h - k) // s + 1, (w - k) // s + 1)
            else:
                raise ValueError(f"layer {i}: unknown layer type {kind!r}")
            out.append(shape)
        return out

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def n_outputs(self) -> int:
        return self.shapes()[-1][0]

    def with_output(self, n_out: int, head: str | None = None) -> "NetSpec":
        """Same body with the last dense layer resized."""
        layers = list(self.layers)
        if not layers or layers[-1].get("type") != "dense":
            raise ValueError("last layer must be dense to resize the output")
        layers[-1] = {**layers[-1], "out": int(n_out)}
        return NetSpec(self.input_shape, tuple(layers), head or self.head)

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [dict(x) for x in self.layers],
                "head": self.head}

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        shape = d.get("input_shape", [d["input_dim"]] if "input_dim" in d else None)
        return cls(tuple(shape), tuple(d["layers"]), d.get("head", "softmax_ce"))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 0  # epochs; 0 disables the step schedule
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every <= 0:
            return self.lr
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class NetParams:
    weights: list  # per layer: ndarray or None
    biases: list
    velocity: list = field(default_factory=list)

    def copy(self) -> "NetParams":
        cp = lambda xs: [None if x is None else x.copy() for x in xs]  # noqa: E731
        return NetParams(cp(self.weights), cp(self.biases), cp(self.velocity))

    def tensors(self):
        """(layer, name, array) for every trainable tensor."""
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w is not None:
                yield i, "W", w
                yield i, "b", b


def init_params(spec: NetSpec, seed: int = 0) -> NetParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = Rng(seed)
    shapes = spec.shapes()
    weights, biases = [], []
    for i, layer in enumerate(spec.layers):
        kind = layer["type"]
        if kind == "dense":
            fan_in, out = shapes[i][0], layer["out"]
            wshape = (fan_in, out)
        elif kind == "conv2d":
            c, k = shapes[i][0], int(layer["kernel"])
            fan_in, out = c * k * k, int(layer["out_ch"])
            wshape = (out, c, k, k)
        else:
            weights.append(None)
            biases.append(None)
            continue
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniforms(wshape, -bound, bound))
        biases.append(np.zeros(out))
    return NetParams(weights, biases)


def _patches(x: np.ndarray, k: int, s: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::s, ::s]  # (B, C, H', W', k, k)


def forward(spec: NetSpec, params: NetParams, X, upto: int | None = None):
    """Run the layers; returns ``(output, cache)``. ``upto`` stops before that layer."""
    x = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains NaN or Inf")
    if x.ndim == 1:
        x = x[None, :]
    x = x.reshape((x.shape[0],) + spec.input_shape)
    cache = []
    layers = spec.layers if upto is None else spec.layers[:upto]
    for i, layer in enumerate(layers):
        kind = layer["type"]
        cache.append(x)
        if kind == "dense":
            x = x @ params.weights[i] + params.biases[i]
        elif kind == "relu":
            x = np.maximum(x, 0.0)
        elif kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif kind == "conv2d":
            p = _patches(x, int(layer["kernel"]), int(layer.get("stride", 1)))
            x = np.einsum("bchwij,ocij->bohw", p, params.weights[i]) + params.biases[i][None, :, None, None]
    return x, cache


def _check_targets(spec: NetSpec, outputs: np.ndarray, targets) -> np.ndarray:
    t = np.asarray(targets)
    if spec.head == "softmax_ce":
        t = t.astype(np.int64).reshape(-1)
        if t.shape[0] != outputs.shape[0]:
            raise ValueError("targets and batch size differ")
        if t.size and (t.min() < 0 or t.max() >= outputs.shape[1]):
            raise ValueError(f"label out of range for {outputs.shape[1]} classes")
    else:
        t = np.asarray(t, dtype=np.float64).reshape(outputs.shape)
    return t


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def loss(spec: NetSpec, outputs, targets) -> float:
    outputs = np.asarray(outputs, dtype=np.float64)
    t = _check_targets(spec, outputs, targets)
    if spec.head == "softmax_ce":
        lp = log_softmax(outputs)
        return float(-lp[np.arange(len(t)), t].mean())
    return float(np.mean((outputs - t) ** 2))


def loss_grad(spec: NetSpec, outputs, targets) -> np.ndarray:
    t = _check_targets(spec, outputs, targets)
    if spec.head == "softmax_ce":
        g = np.exp(log_softmax(outputs))
        g[np.arange(len(t)), t] -= 1.0
        return g / len(t)
    return 2.0 * (outputs - t) / outputs.size


def backward(spec: NetSpec, params: NetParams, X, targets):
    """Loss and exact gradients: ``(loss, [(dW, db) or None per layer])``."""
    out, cache = forward(spec, params, X)
    value = loss(spec, out, targets)
    g = loss_grad(spec, out, targets)
    grads = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, x = spec.layers[i], cache[i]
        kind = layer["type"]
        if kind == "dense":
            grads[i] = (x.T @ g, g.sum(axis=0))
            g = g @ params.weights[i].T
        elif kind == "relu":
            g = g * (x > 0)
        elif kind == "flatten":
            g = g.reshape(x.shape)
        elif kind == "conv2d":
            k, s = int(layer["kernel"]), int(layer.get("stride", 1))
            W = params.weights[i]
            p = _patches(x, k, s)
            grads[i] = (np.einsum("bohw,bchwij->ocij", g, p), g.sum(axis=(0, 2, 3)))
            dx = np.zeros_like(x)
            ho, wo = g.shape[2], g.shape[3]
            for a in range(k):
                for b in range(k):
                    dx[:, :, a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s] += \
                        np.einsum("bohw,oc->bchw", g, W[:, :, a, b])
            g = dx
    return value, grads


def predict(spec: NetSpec, params: NetParams, X) -> np.ndarray:
    out, _ = forward(spec, params, X)
    return np.argmax(out, axis=1) if spec.head == "softmax_ce" else out


def embed(spec: NetSpec, params: NetParams, X) -> np.ndarray:
    """Activations entering the last layer (the penultimate representation)."""
    out, _ = forward(spec, params, X, upto=len(spec.layers) - 1)
    return out.reshape(out.shape[0], -1)


def evaluate(spec: NetSpec, params: NetParams, X, labels) -> float:
    """Classification accuracy."""
    labels = np.asarray(labels).reshape(-1)
    if len(labels) == 0:
        raise ValueError("no samples to evaluate")
    return float(np.mean(predict(spec, params, X) == labels))


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float(np.mean(pred == labels))


def sgd_step(params: NetParams, grads, lr: float, momentum: float, weight_decay: float = 0.0) -> None:
    if not params.velocity:
        params.velocity = [None if w is None else (np.zeros_like(w), np.zeros_like(b))
                           for w, b in zip(params.weights, params.biases)]
    for i, gr in enumerate(grads):
        if gr is None:
            continue
        dW, db = gr
        if weight_decay:
            dW = dW + weight_decay * params.weights[i]
        vW, vb = params.velocity[i]
        vW *= momentum
        vW -= lr * dW
        vb *= momentum
        vb -= lr * db
        params.weights[i] += vW
        params.biases[i] += vb


def train(spec: NetSpec, cfg: TrainConfig, X, targets, params: NetParams | None = None):
    """Mini-batch SGD with momentum and step decay.

    Returns ``(params, history)``; history has one entry per epoch with the
    full-training-set loss (and accuracy for classification) after that epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    targets = np.asarray(targets)
    n = X.shape[0]
    if targets.shape[0] != n:
        raise ValueError(f"{n} samples but {targets.shape[0]} targets")
    params = init_params(spec, cfg.seed) if params is None else params.copy()
    rng = Rng.substream(cfg.seed, 1)
    history = []
    # overflow shows up as a non-finite loss, reported below as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        return params, _epochs(spec, cfg, X, targets, params, rng, history)


def _epochs(spec, cfg, X, targets, params, rng, history):
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = backward(spec, params, X[idx], targets[idx])
            sgd_step(params, grads, lr, cfg.momentum, cfg.weight_decay)
        out, _ = forward(spec, params, X)
        value = loss(spec, out, targets) if np.all(np.isfinite(out)) else float("nan")
        if not math.isfinite(value):
            raise DivergenceError(f"training diverged at epoch {epoch + 1}: loss is {value}")
        entry = {"epoch": epoch + 1, "lr": lr, "loss": value}
        if spec.head == "softmax_ce":
            entry["accuracy"] = accuracy(np.argmax(out, axis=1), targets)
        history.append(entry)
    return history


def numeric_gradients(spec: NetSpec, params: NetParams, X, targets, h: float = 1e-5):
    """Central finite differences for every trainable tensor."""
    grads = [None] * len(spec.layers)
    work = params.copy()
    for i, _, _ in work.tensors():
        if grads[i] is not None:
            continue
        pair = []
        for arr in (work.weights[i], work.biases[i]):
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + h
                up = loss(spec, forward(spec, work, X)[0], targets)
                flat[j] = old - h
                down = loss(spec, forward(spec, work, X)[0], targets)
                flat[j] = old
                gflat[j] = (up - down) / (2 * h)
            pair.append(g)
        grads[i] = tuple(pair)
    return grads


def gradcheck(spec: NetSpec, params: NetParams, X, targets, h: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error ``|a - n| / max(|a|, |n|, floor)`` over all parameters."""
    _, analytic = backward(spec, params, X, targets)
    numeric = numeric_gradients(spec, params, X, targets, h)
    worst = 0.0
    for a, nu in zip(analytic, numeric):
        if a is None:
            continue
        for ga, gn in zip(a, nu):
            denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), floor)
            worst = max(worst, float(np.max(np.abs(ga - gn) / denom)))
    return worst


def save_params(spec: NetSpec, params: NetParams, path) -> None:
    """NPK1: magic, u32 layer count, then per layer u32 flag and, when set,
    W and b each as (u32 ndim, u32 dims..., f64 payload)."""
    parts = [NPK_MAGIC, struct.pack("<I", len(spec.layers))]
    for w, b in zip(params.weights, params.biases):
        if w is None:
            parts.append(struct.pack("<I", 0))
            continue
        parts.append(struct.pack("<I", 1))
        for arr in (w, b):
            parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path) -> NetParams:
    buf = Path(path).read_bytes()
    if buf[:4] != NPK_MAGIC:
        raise BadMagicError(f"{path}: expected magic {NPK_MAGIC!r}, found {buf[:4]!r}")
    (n_layers,) = struct.unpack("<I", _read_exact(buf, 4, 4, "NPK1 header"))
    off = 8
    weights, biases = [], []
    for _ in range(n_layers):
        (flag,) = struct.unpack("<I", _read_exact(buf, off, 4, "NPK1 layer flag"))
        off += 4
        if not flag:
            weights.append(None)
            biases.append(None)
            continue
        pair = []
        for _t in range(2):
            (ndim,) = struct.unpack("<I", _read_exact(buf, off, 4, "NPK1 ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(buf, off + 4, 4 * ndim, "NPK1 shape"))
            off += 4 + 4 * ndim
            nbytes = 8 * int(np.prod(shape))
            pair.append(np.frombuffer(_read_exact(buf, off, nbytes, "NPK1 payload"), dtype="<f8")
                        .reshape(shape).copy())
            off += nbytes
        weights.append(pair[0])
        biases.append(pair[1])
    return NetParams(weights, biases)


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())
