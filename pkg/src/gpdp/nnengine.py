"""Small dense MLP engine: forward, reverse-mode gradients, Adam, checkpoints.

Everything runs in float64. Weights are stored as (out, in) matrices so a
layer computes ``x @ W.T + b`` on row-major batches.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"GPDP"
FORMAT_VERSION = 1

HIDDEN_LAYERS = 3


class ShapeError(ValueError):
    """Raised when an array does not match the network contract."""


def _tanh_softplus(x):
    # tanh(log(1 + e^x)) = n / (n + 2) with n = e^x (e^x + 2); saturates to 1 past x = 20
    e = np.exp(np.minimum(x, 20.0))
    n = e * (e + 2.0)
    return n / (n + 2.0), e


def mish(x):
    """x * tanh(softplus(x)). Accepts scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    return x * _tanh_softplus(x)[0]


def mish_grad(x):
    x = np.asarray(x, dtype=np.float64)
    t, e = _tanh_softplus(x)
    return t + x * (1.0 - t * t) * (e / (1.0 + e))


@dataclass
class MlpNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(f"layer {k} input {w.shape[1]} != previous output "
                                 f"{self.weights[k - 1].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpNet":
        return MlpNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params())

    def __call__(self, x):
        return forward(self, x)


def init_mlp(in_dim: int, out_dim: int, hidden: int = 64, n_hidden: int = HIDDEN_LAYERS,
             rng: np.random.Generator | int | None = 0) -> MlpNet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    rng = np.random.default_rng(rng)
    sizes = [in_dim] + [hidden] * n_hidden + [out_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpNet(weights, biases)


def _check_input(net: MlpNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"expected input (batch, {net.in_dim}), got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite network input")
    return x


def forward_cache(net: MlpNet, x) -> tuple[np.ndarray, list]:
    """Forward pass keeping what backward needs: layer inputs and mish slopes."""
    h = _check_input(net, x)
    cache = [h]
    last = net.n_layers - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        if k == last:
            h = z
        else:
            t, e = _tanh_softplus(z)
            h = z * t
            # d mish / dz = t + z (1 - t^2) sigmoid(z)
            cache.append(t + z * (1.0 - t * t) * (e / (1.0 + e)))
            cache.append(h)
    return h, cache


def forward(net: MlpNet, x) -> np.ndarray:
    return forward_cache(net, x)[0]


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def backward(net: MlpNet, x, grad_out, cache: list[np.ndarray] | None = None) -> Gradients:
    """Reverse-mode gradients of ``sum(grad_out * forward(net, x))``.

    Pass the ``cache`` from :func:`forward_cache` to skip recomputing the
    forward pass.
    """
    if cache is None:
        _, cache = forward_cache(net, x)
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    batch = cache[0].shape[0]
    if g.shape != (batch, net.out_dim):
        raise ShapeError(f"upstream gradient {g.shape} != ({batch}, {net.out_dim})")

    dws = [None] * net.n_layers
    dbs = [None] * net.n_layers
    for k in range(net.n_layers - 1, -1, -1):
        # cache layout: [x, slope0, h0, slope1, h1, ...]; input to layer k is cache[2k]
        h_in = cache[2 * k]
        dws[k] = g.T @ h_in
        dbs[k] = g.sum(axis=0)
        g = g @ net.weights[k]
        if k > 0:
            g *= cache[2 * k - 1]
    return Gradients(dws, dbs, g)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_net(cls, net: MlpNet, lr: float = 3e-4, **kw) -> "AdamState":
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        return cls([np.zeros_like(p) for p in net.params()],
                   [np.zeros_like(p) for p in net.params()], lr=lr, **kw)


def adam_step(net: MlpNet, grads: Gradients, state: AdamState) -> tuple[MlpNet, AdamState]:
    """Bias-corrected Adam update, applied in place. Returns ``(net, state)``."""
    params = net.params()
    gs = grads.params()
    if len(gs) != len(params):
        raise ShapeError("gradient list does not match network parameters")
    for p, g in zip(params, gs):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} != parameter {p.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient passed to adam_step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, gs, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


def save_checkpoint(net: MlpNet, path) -> None:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, net.n_layers)]
    for w, b in zip(net.weights, net.biases):
        rows, cols = w.shape
        chunks.append(struct.pack("<II", rows, cols))
        chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> MlpNet:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a GPDP checkpoint")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    weights, biases = [], []
    for _ in range(n_layers):
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        w = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
        off += 8 * rows * cols
        b = np.frombuffer(data, dtype="<f8", count=rows, offset=off)
        off += 8 * rows
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return MlpNet(weights, biases)
