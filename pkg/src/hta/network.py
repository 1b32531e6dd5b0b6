"""Fully connected networks with hand-written backpropagation.

All parameters of an :class:`Mlp` live in one flat float64 vector
``theta``; per-layer weights ``(d_out, d_in)`` and biases ``(d_out,)`` are
reshaped views into it, so an optimizer step on ``theta`` updates the
network in place.  Layout order is ``W_1, b_1, W_2, b_2, ...`` with every
weight matrix row-major.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .linalg import Rng


class Activation(enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return np.maximum(z, 0.0)
        if self is Activation.SIGMOID:
            # split on sign so exp never overflows
            out = np.empty_like(z)
            pos = z >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
            ez = np.exp(z[~pos])
            out[~pos] = ez / (1.0 + ez)
            return out
        return z

    def derivative(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Derivative at pre-activation ``z`` given ``a = self(z)``."""
        if self is Activation.RELU:
            return (z > 0).astype(z.dtype)  # subgradient 0 at the kink
        if self is Activation.SIGMOID:
            return a * (1.0 - a)
        return np.ones_like(z)


class LossKind(enum.Enum):
    SQUARED_ERROR = "squared_error"
    CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True)
class ParamLayout:
    """Offsets of every weight matrix and bias vector inside ``theta``."""

    sizes: tuple

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def size(self) -> int:
        return sum(o * i + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def weight_slice(self, layer: int) -> slice:
        start = self._offset(layer)
        return slice(start, start + self.sizes[layer + 1] * self.sizes[layer])

    def bias_slice(self, layer: int) -> slice:
        start = self.weight_slice(layer).stop
        return slice(start, start + self.sizes[layer + 1])

    def weight_shape(self, layer: int) -> tuple:
        return (self.sizes[layer + 1], self.sizes[layer])

    def locate(self, offset: int) -> tuple:
        """Map a flat offset to ``(layer, kind, position)``."""
        if not 0 <= offset < self.size:
            raise IndexError(f"offset {offset} outside parameter vector of length {self.size}")
        for layer in range(self.n_layers):
            ws, bs = self.weight_slice(layer), self.bias_slice(layer)
            if offset < ws.stop:
                return layer, "weight", np.unravel_index(offset - ws.start, self.weight_shape(layer))
            if offset < bs.stop:
                return layer, "bias", (offset - bs.start,)
        raise AssertionError("unreachable")

    def _offset(self, layer: int) -> int:
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} out of range for {self.n_layers} layers")
        return sum(o * i + o for i, o in zip(self.sizes[:layer], self.sizes[1 : layer + 1]))


def pack(weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([p for w, b in zip(weights, biases) for p in (np.ravel(w), np.ravel(b))])


def unpack(layout: ParamLayout, theta: np.ndarray) -> tuple:
    """Split a flat vector into per-layer (weight, bias) views."""
    theta = np.asarray(theta)
    if theta.shape != (layout.size,):
        raise ValueError(f"parameter vector has shape {theta.shape}, layout expects ({layout.size},)")
    weights = [theta[layout.weight_slice(l)].reshape(layout.weight_shape(l)) for l in range(layout.n_layers)]
    biases = [theta[layout.bias_slice(l)] for l in range(layout.n_layers)]
    return weights, biases


class Mlp:
    """Multilayer perceptron; the last layer is always affine."""

    def __init__(self, sizes: Sequence[int], activations: Sequence, theta: np.ndarray | None = None):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        activations = tuple(Activation(a) for a in activations)
        if len(activations) != len(sizes) - 1:
            raise ValueError(f"{len(sizes) - 1} layers need as many activations, got {len(activations)}")
        if activations[-1] is not Activation.IDENTITY:
            raise ValueError("output layer activation must be identity")
        self.sizes = sizes
        self.activations = activations
        self.layout = ParamLayout(sizes)
        if theta is None:
            theta = np.zeros(self.layout.size)
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (self.layout.size,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.layout.size},)")
        self.theta = theta
        self.weights, self.biases = unpack(self.layout, self.theta)
        self._slices = [(self.layout.weight_slice(l), self.layout.bias_slice(l)) for l in range(self.n_layers)]

    @classmethod
    def random(cls, sizes: Sequence[int], hidden: Activation | str, rng: Rng) -> "Mlp":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        hidden = Activation(hidden)
        acts = [hidden] * (len(sizes) - 2) + [Activation.IDENTITY]
        net = cls(sizes, acts)
        for l in range(net.n_layers):
            bound = 1.0 / np.sqrt(sizes[l])
            net.weights[l][...] = rng.uniform(-bound, bound, net.weights[l].shape)
            net.biases[l][...] = rng.uniform(-bound, bound, net.biases[l].shape)
        return net

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    @property
    def hidden_widths(self) -> tuple:
        return self.sizes[1:-1]

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, self.activations, self.theta.copy())

    def with_theta(self, theta: np.ndarray) -> "Mlp":
        return Mlp(self.sizes, self.activations, theta)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]

    def __repr__(self):
        acts = ",".join(a.value for a in self.activations)
        return f"Mlp(sizes={self.sizes}, activations=({acts}))"


class Cache(NamedTuple):
    sizes: tuple
    single: bool
    inputs: list  # input to each layer, (B, d_in)
    pre: list  # pre-activations, (B, d_out)
    post: list  # post-activations, (B, d_out)


def forward(net: Mlp, x: np.ndarray) -> tuple:
    """Evaluate ``net`` on one input ``(n,)`` or a batch ``(B, n)``.

    Returns the output (same rank as ``x``) and a cache for :func:`backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.ndim != 2 or h.shape[1] != net.input_dim:
        raise ValueError(f"input shape {x.shape} does not match input dim {net.input_dim}")
    inputs, pre, post = [], [], []
    for W, b, act in zip(net.weights, net.biases, net.activations):
        inputs.append(h)
        z = h @ W.T + b
        h = act(z)
        pre.append(z)
        post.append(h)
    out = h[0] if single else h
    return out, Cache(net.sizes, single, inputs, pre, post)


def backward(net: Mlp, cache: Cache, d_out: np.ndarray) -> tuple:
    """Reverse-mode pass.

    ``d_out`` is the loss gradient w.r.t. the output of the matching
    :func:`forward` call.  Returns ``(grad, d_input)`` where ``grad`` is a
    flat vector in ``net.layout`` order, summed over the batch.
    """
    if cache.sizes != net.sizes:
        raise ValueError(f"cache from a {cache.sizes} net used with a {net.sizes} net")
    delta = np.asarray(d_out, dtype=np.float64)
    if cache.single:
        delta = delta[None, :]
    if delta.shape != cache.post[-1].shape:
        raise ValueError(f"output gradient shape {np.shape(d_out)} does not match cached output {cache.post[-1].shape}")
    grad = np.empty(net.theta.size)
    for l in range(net.n_layers - 1, -1, -1):
        act = net.activations[l]
        if act is not Activation.IDENTITY:
            delta = delta * act.derivative(cache.pre[l], cache.post[l])
        ws, bs = net._slices[l]
        grad[ws] = (delta.T @ cache.inputs[l]).ravel()
        grad[bs] = delta.sum(axis=0)
        delta = delta @ net.weights[l]
    return grad, (delta[0] if cache.single else delta)


def loss_and_grad(kind: LossKind | str, output: np.ndarray, target) -> tuple:
    """Batch-mean loss and its gradient w.r.t. ``output``.

    Squared error per sample is ``sum_i (out_i - tgt_i)**2``.  Cross
    entropy takes integer labels and uses the max-shifted log-sum-exp.
    """
    kind = LossKind(kind)
    out = np.asarray(output, dtype=np.float64)
    single = out.ndim == 1
    o = out[None, :] if single else out
    batch = o.shape[0]
    if kind is LossKind.SQUARED_ERROR:
        tgt = np.asarray(target, dtype=np.float64).reshape(o.shape) if np.size(target) == o.size else None
        if tgt is None:
            raise ValueError(f"target shape {np.shape(target)} does not match output {out.shape}")
        r = o - tgt
        loss = float(np.sum(r * r)) / batch
        grad = (2.0 / batch) * r
    else:
        labels = np.atleast_1d(np.asarray(target))
        if labels.shape != (batch,) or not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"cross entropy needs {batch} integer labels, got {np.shape(target)}")
        if labels.min() < 0 or labels.max() >= o.shape[1]:
            raise ValueError(f"label out of range [0, {o.shape[1]})")
        rows = np.arange(batch)
        top = o.argmax(axis=1)
        shifted = o - o[rows, top][:, None]
        e = np.exp(shifted)
        e[rows, top] = 0.0
        # log1p keeps tiny losses (well-separated logits) strictly positive
        lse = np.log1p(e.sum(axis=1))
        loss = float(np.sum(lse - shifted[rows, labels])) / batch
        grad = np.exp(shifted - lse[:, None])
        grad[rows, labels] -= 1.0
        grad /= batch
    return loss, (grad[0] if single else grad)


def loss(net: Mlp, kind: LossKind | str, x: np.ndarray, target) -> float:
    return loss_and_grad(kind, forward(net, x)[0], target)[0]


def loss_grad(net: Mlp, kind: LossKind | str, x: np.ndarray, target) -> tuple:
    out, cache = forward(net, x)
    value, d_out = loss_and_grad(kind, out, target)
    return value, backward(net, cache, d_out)[0]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f, theta: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of scalar ``f`` over every entry of ``theta``."""
    theta = np.array(theta, dtype=np.float64)
    g = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + eps
        fp = f(theta)
        theta[i] = orig - eps
        fm = f(theta)
        theta[i] = orig
        g[i] = (fp - fm) / (2.0 * eps)
    return g


def grad_check(net: Mlp, kind: LossKind | str, x: np.ndarray, target, eps: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, analytic = loss_grad(net, kind, x, target)
    probe = net.copy()

    def f(theta):
        probe.theta[...] = theta
        return loss(probe, kind, x, target)

    numeric = numeric_grad(f, net.theta, eps)
    return float(relative_error(analytic, numeric).max())


# -- serialization -----------------------------------------------------------

MAGIC = "hta-mlp 1"


def dumps(net: Mlp) -> str:
    lines = [
        MAGIC,
        "sizes " + " ".join(str(s) for s in net.sizes),
        "activations " + " ".join(a.value for a in net.activations),
    ]
    for l in range(net.n_layers):
        lines.append(f"layer {l}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in net.weights[l])
        lines.append(" ".join(repr(float(v)) for v in net.biases[l]))
    return "\n".join(lines) + "\n"


def loads(text: str) -> Mlp:
    rows = text.splitlines()

    def fail(lineno, msg):
        raise ValueError(f"line {lineno}: {msg}")

    if not rows or rows[0].strip() != MAGIC:
        fail(1, f"expected header {MAGIC!r}")
    if len(rows) < 3 or not rows[1].startswith("sizes ") or not rows[2].startswith("activations "):
        fail(2, "expected 'sizes' and 'activations' lines")
    try:
        sizes = [int(s) for s in rows[1].split()[1:]]
        acts = [Activation(a) for a in rows[2].split()[1:]]
        net = Mlp(sizes, acts)
    except ValueError as exc:
        fail(2, str(exc))
    pos = 3
    for l in range(net.n_layers):
        if pos >= len(rows) or rows[pos].strip() != f"layer {l}":
            fail(pos + 1, f"expected 'layer {l}'")
        pos += 1
        d_out, d_in = net.layout.weight_shape(l)
        for target, width in [(net.weights[l][r], d_in) for r in range(d_out)] + [(net.biases[l], d_out)]:
            if pos >= len(rows):
                fail(pos + 1, "unexpected end of file")
            try:
                vals = [float(v) for v in rows[pos].split()]
            except ValueError:
                fail(pos + 1, "non-numeric entry")
            if len(vals) != width:
                fail(pos + 1, f"expected {width} values, got {len(vals)}")
            target[...] = vals
            pos += 1
    return net


def save(net: Mlp, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(net))


def load(path) -> Mlp:
    with open(path) as fh:
        return loads(fh.read())
