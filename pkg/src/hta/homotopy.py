"""Blended models, growth operators, and continuation training.

A blend pairs a large network with a :class:`SubnetView` that selects the
sub-blocks of its parameters forming a smaller network, and evaluates

    H(x; theta, t) = (1 - t) * small(x; theta) + t * large(x; theta).

Both terms read the same flat parameter vector (the large net's
``theta``), so gradients of shared entries from the two paths add up.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import optim
from .linalg import Rng
from .network import Activation, LossKind, Mlp, ParamLayout, backward, forward, loss, loss_and_grad, loss_grad


@dataclass(frozen=True)
class LayerMap:
    large_layer: int
    rows: np.ndarray
    cols: np.ndarray


class SubnetView:
    """Index map from a small network's parameters into a large network's."""

    def __init__(self, sizes: Sequence[int], activations: Sequence, maps: Sequence[LayerMap], large_sizes: Sequence[int]):
        self.sizes = tuple(sizes)
        self.activations = tuple(Activation(a) for a in activations)
        self.maps = tuple(maps)
        self.large_sizes = tuple(large_sizes)
        template = Mlp(self.sizes, self.activations)
        large = ParamLayout(self.large_sizes)
        if len(self.maps) != template.n_layers:
            raise ValueError("one layer map per small-network layer is required")
        pieces = []
        for j, m in enumerate(self.maps):
            shape = (len(m.rows), len(m.cols))
            if shape != template.layout.weight_shape(j):
                raise ValueError(f"layer {j}: view block {shape} != small weight {template.layout.weight_shape(j)}")
            d_out, d_in = large.weight_shape(m.large_layer)
            if m.rows.min() < 0 or m.rows.max() >= d_out or m.cols.min() < 0 or m.cols.max() >= d_in:
                raise ValueError(f"layer {j}: view indices outside large layer {m.large_layer} of shape {(d_out, d_in)}")
            ws = large.weight_slice(m.large_layer).start
            bs = large.bias_slice(m.large_layer).start
            pieces.append((ws + m.rows[:, None] * d_in + m.cols[None, :]).ravel())
            pieces.append(bs + m.rows)
        self.flat_index = np.concatenate(pieces)
        if len(np.unique(self.flat_index)) != len(self.flat_index):
            raise ValueError("view selects a parameter more than once")

    @classmethod
    def identity(cls, net: Mlp) -> "SubnetView":
        maps = [LayerMap(l, np.arange(net.sizes[l + 1]), np.arange(net.sizes[l])) for l in range(net.n_layers)]
        return cls(net.sizes, net.activations, maps, net.sizes)

    def check(self, large: Mlp) -> None:
        if large.sizes != self.large_sizes:
            raise ValueError(f"view built for {self.large_sizes}, applied to {large.sizes}")

    def extract(self, large: Mlp) -> Mlp:
        """The small network, with parameters copied out of ``large``."""
        self.check(large)
        return Mlp(self.sizes, self.activations, large.theta[self.flat_index])

    def __repr__(self):
        return f"SubnetView({self.sizes} in {self.large_sizes})"


@dataclass
class HomotopyBlend:
    large: Mlp
    view: SubnetView
    t: float = 0.0

    def __post_init__(self):
        self.view.check(self.large)
        self.set_t(self.t)
        self._small = None

    def set_t(self, t: float) -> None:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"homotopy parameter t={t} outside [0, 1]")
        self.t = float(t)

    @property
    def small(self) -> Mlp:
        """The small network read from the current large parameters.

        The returned object is reused between calls; it is a snapshot,
        refreshed on every access.
        """
        if self._small is None:
            self._small = self.view.extract(self.large)
        else:
            np.take(self.large.theta, self.view.flat_index, out=self._small.theta)
        return self._small


def blend_forward(b: HomotopyBlend, x: np.ndarray) -> np.ndarray:
    if b.t == 0.0:
        return b.small(x)
    if b.t == 1.0:
        return b.large(x)
    return (1.0 - b.t) * b.small(x) + b.t * b.large(x)


def blend_loss_grad(b: HomotopyBlend, x: np.ndarray, kind, target) -> tuple:
    """Loss of the blended output and its gradient w.r.t. ``b.large.theta``."""
    t = b.t
    if t < 1.0:
        small = b.small
        s_out, s_cache = forward(small, x)
    if t > 0.0:
        l_out, l_cache = forward(b.large, x)
    if t == 0.0:
        out = s_out
    elif t == 1.0:
        out = l_out
    else:
        out = (1.0 - t) * s_out + t * l_out
    value, d_out = loss_and_grad(kind, out, target)
    if t > 0.0:
        grad = backward(b.large, l_cache, d_out)[0]
        if t < 1.0:
            grad *= t
    else:
        grad = np.zeros(b.large.layout.size)
    if t < 1.0:
        g_small = backward(small, s_cache, d_out)[0]
        grad[b.view.flat_index] += g_small if t == 0.0 else (1.0 - t) * g_small
    return value, grad


def blend_backward(b: HomotopyBlend, x: np.ndarray, kind, target) -> np.ndarray:
    return blend_loss_grad(b, x, kind, target)[1]


def blend_loss(b: HomotopyBlend, x: np.ndarray, kind, target) -> float:
    return loss_and_grad(kind, blend_forward(b, x), target)[0]


# -- growth operators -----------------------------------------------------


@dataclass(frozen=True)
class Widen:
    """Add ``added`` units to hidden layer ``layer`` (0-based)."""

    layer: int
    added: int

    def __post_init__(self):
        if self.added < 1:
            raise ValueError("widen needs added >= 1")

    def apply(self, net: Mlp, rng: Rng) -> tuple:
        return widen(net, self.layer, self.added, rng)


@dataclass(frozen=True)
class AddLayer:
    """Insert a hidden layer of ``width`` units as hidden layer ``position``."""

    position: int
    width: int
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("add_layer needs width >= 1")

    def apply(self, net: Mlp, rng: Rng) -> tuple:
        return add_layer(net, self.position, self.width, self.activation, rng)


def widen(net: Mlp, layer: int, added: int, rng: Rng) -> tuple:
    """Grow hidden layer ``layer`` by ``added`` units.

    New incoming rows are uniform in +-1/sqrt(fan_in); new outgoing columns
    are zero, so the widened network computes exactly the same function.
    Returns ``(large, view)`` with the view selecting the original blocks.
    """
    if not 0 <= layer < net.n_layers - 1:
        raise IndexError(f"hidden layer {layer} out of range (net has {net.n_layers - 1} hidden layers)")
    if added < 1:
        raise ValueError("added must be >= 1")
    old = net.sizes[layer + 1]
    sizes = list(net.sizes)
    sizes[layer + 1] = old + added
    large = Mlp(sizes, net.activations)
    bound = 1.0 / np.sqrt(net.sizes[layer])
    for l in range(net.n_layers):
        if l == layer:
            large.weights[l][:old] = net.weights[l]
            large.biases[l][:old] = net.biases[l]
            large.weights[l][old:] = rng.uniform(-bound, bound, (added, net.sizes[l]))
            large.biases[l][old:] = rng.uniform(-bound, bound, added)
        elif l == layer + 1:
            large.weights[l][:, :old] = net.weights[l]
            large.biases[l][...] = net.biases[l]
        else:
            large.weights[l][...] = net.weights[l]
            large.biases[l][...] = net.biases[l]
    maps = []
    for l in range(net.n_layers):
        rows = np.arange(old) if l == layer else np.arange(net.sizes[l + 1])
        cols = np.arange(old) if l == layer + 1 else np.arange(net.sizes[l])
        maps.append(LayerMap(l, rows, cols))
    return large, SubnetView(net.sizes, net.activations, maps, large.sizes)


def add_layer(net: Mlp, position: int, width: int, activation=Activation.IDENTITY, rng: Rng | None = None,
              fill: str = "zero") -> tuple:
    """Insert a hidden layer with the pass-through initialization.

    The layer that fed position ``position`` (weights ``W``, bias ``b``)
    becomes the first ``d = W.shape[0]`` units of the inserted layer, and a
    new layer ``[I_d, 0]`` with zero bias maps them onward.  The remaining
    incoming rows are zero (``fill="zero"``) or uniform +-1/sqrt(fan_in)
    (``fill="random"``); their outgoing weights are always zero.  With an
    identity activation the large net reproduces the old one exactly.
    """
    activation = Activation(activation)
    if not 0 <= position <= net.n_layers - 1:
        raise IndexError(f"insert position {position} out of range [0, {net.n_layers - 1}]")
    carried = net.sizes[position + 1]
    if width < carried:
        raise ValueError(f"inserted width {width} cannot carry {carried} signals")
    if fill not in ("zero", "random"):
        raise ValueError(f"unknown fill {fill!r}")
    sizes = list(net.sizes[: position + 1]) + [width] + list(net.sizes[position + 1 :])
    acts = list(net.activations[:position]) + [activation] + list(net.activations[position:])
    large = Mlp(sizes, acts)
    for l in range(net.n_layers):
        dst = l if l <= position else l + 1
        if l == position:
            large.weights[dst][:carried] = net.weights[l]
            large.biases[dst][:carried] = net.biases[l]
            if fill == "random":
                if rng is None:
                    raise ValueError("fill='random' needs an rng")
                bound = 1.0 / np.sqrt(net.sizes[l])
                large.weights[dst][carried:] = rng.uniform(-bound, bound, (width - carried, net.sizes[l]))
        else:
            large.weights[dst][...] = net.weights[l]
            large.biases[dst][...] = net.biases[l]
    large.weights[position + 1][:, :carried] = np.eye(carried)
    maps = []
    for l in range(net.n_layers):
        dst = l if l <= position else l + 1
        maps.append(LayerMap(dst, np.arange(net.sizes[l + 1]), np.arange(net.sizes[l])))
    return large, SubnetView(net.sizes, net.activations, maps, large.sizes)


# -- continuation training -------------------------------------------------


@dataclass(frozen=True)
class HtaSchedule:
    delta_t: float = 0.5
    epochs_per_step: int = 1

    def __post_init__(self):
        if not 0.0 < self.delta_t <= 1.0:
            raise ValueError("delta_t must lie in (0, 1]")
        if abs(self.steps * self.delta_t - 1.0) > 1e-12:
            raise ValueError(f"1/delta_t = {1.0 / self.delta_t} is not an integer")
        if self.epochs_per_step < 0:
            raise ValueError("epochs_per_step must be >= 0")

    @property
    def steps(self) -> int:
        return max(1, round(1.0 / self.delta_t))

    def ts(self) -> list:
        """``t_i = i / N`` for i = 1..N; the last value is exactly 1."""
        return [i / self.steps for i in range(1, self.steps + 1)]


def _phase_seed(seed: int, stage: int, phase: int) -> int:
    return Rng(seed).spawn(1000 * stage + phase).seed


def hta_train(b: HomotopyBlend, inputs: np.ndarray, targets: np.ndarray, sched: HtaSchedule,
              opt: optim.TrainConfig, *, kind=LossKind.SQUARED_ERROR, presolve_epochs: int = 0,
              stage: int = 0, k0: int = 0, evaluate=None, eval_every: int = 0) -> tuple:
    """Continuation loop: optional t=0 solve, then t = 1/N, 2/N, ..., 1.

    Each phase runs ``sched.epochs_per_step`` epochs of ``opt`` warm-started
    from the previous phase; the parameters live in ``b.large.theta`` and
    are updated in place.  ``evaluate(large_net)`` is sampled every
    ``eval_every`` steps.  Returns ``(theta, trace)``.
    """
    theta = b.large.theta
    trace = optim.Trace()
    phases = ([(0.0, presolve_epochs)] if presolve_epochs else []) + [(t, sched.epochs_per_step) for t in sched.ts()]

    def oracle(th, xb, yb):
        return blend_loss_grad(b, xb, kind, _labels(kind, yb))

    def full_loss(th):
        return blend_loss(b, inputs, kind, _labels(kind, targets))

    ev = (lambda th: evaluate(b.large)) if evaluate is not None else None
    k = k0
    for phase, (t, epochs) in enumerate(phases):
        b.set_t(t)
        cfg = opt.replace(epochs=epochs, seed=_phase_seed(opt.seed, stage, phase))
        if opt.max_steps is not None:
            cfg = cfg.replace(max_steps=max(0, opt.max_steps - trace.n_steps))
        _, part = optim.train(oracle, theta, inputs, targets, cfg, k0=k, t=t, stage=stage,
                              full_loss=full_loss, evaluate=ev, eval_every=eval_every)
        k += part.n_steps
        trace.extend(part)
    return theta, trace


def _labels(kind, y):
    if LossKind(kind) is LossKind.CROSS_ENTROPY:
        return y.astype(np.int64).ravel()
    return y


def plain_train(net: Mlp, inputs, targets, opt: optim.TrainConfig, *, kind=LossKind.SQUARED_ERROR,
                stage: int = 0, k0: int = 0, evaluate=None, eval_every: int = 0) -> tuple:
    """SGD on a single network; ``net.theta`` is updated in place."""

    def oracle(th, xb, yb):
        return loss_grad(net, kind, xb, _labels(kind, yb))

    def full_loss(th):
        return loss(net, kind, inputs, _labels(kind, targets))

    ev = (lambda th: evaluate(net)) if evaluate is not None else None
    return optim.train(oracle, net.theta, inputs, targets, opt, k0=k0, t=1.0, stage=stage,
                       full_loss=full_loss, evaluate=ev, eval_every=eval_every)


@dataclass
class StageRecord:
    stage: int
    sizes: tuple
    op: object
    train_loss: float


def multi_stage_train(stages: Sequence, base: Mlp, inputs, targets, opt: optim.TrainConfig, *,
                      kind=LossKind.SQUARED_ERROR, base_epochs: int | None = None, rng: Rng | None = None,
                      evaluate=None, eval_every: int = 0) -> tuple:
    """Train ``base``, then for each ``(growth_op, schedule)`` grow and continue.

    Returns ``(final_net, trace, history)``.  The base network is trained in
    place; each stage starts from the previous stage's optimum embedded in
    the grown network.
    """
    rng = rng if rng is not None else Rng(opt.seed).spawn(7)
    epochs = opt.epochs if base_epochs is None else base_epochs
    net = base
    _, trace = plain_train(net, inputs, targets, opt.replace(epochs=epochs, seed=_phase_seed(opt.seed, 0, 0)),
                           kind=kind, stage=0, evaluate=evaluate, eval_every=eval_every)
    history = [StageRecord(0, net.sizes, None, _last_loss(trace))]
    for i, (op, sched) in enumerate(stages, start=1):
        large, view = op.apply(net, rng)
        blend = HomotopyBlend(large, view, 0.0)
        if opt.max_steps is not None:
            remaining = max(0, opt.max_steps - trace.n_steps)
            stage_opt = opt.replace(max_steps=remaining)
        else:
            stage_opt = opt
        _, part = hta_train(blend, inputs, targets, sched, stage_opt, kind=kind, stage=i,
                            k0=trace.n_steps, evaluate=evaluate, eval_every=eval_every)
        trace.extend(part)
        net = large
        history.append(StageRecord(i, net.sizes, op, _last_loss(part)))
    return net, trace, history


def _last_loss(trace: optim.Trace) -> float:
    return trace.epochs[-1][4] if trace.epochs else float("nan")
