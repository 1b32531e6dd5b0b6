"""Paired HTA-versus-traditional experiments and the structure search.

Every paired run gives both methods the same split, loss and (by default)
the same total number of SGD steps.  Results are ``ExperimentReport``
objects which serialise to ``metrics.json``; traces go to CSV.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as D
from .homotopy import (HomotopyBlend, HtaSchedule, Widen, blend_forward, hta_train, multi_stage_train,
                       plain_train, widen)
from .linalg import Rng
from .network import LossKind, Mlp, backward, forward, loss
from .optim import Constant, DivergenceError, Trace, TrainConfig, restart_sweep

HTA = "hta"
TRADITIONAL = "traditional"
BUDGETS = ("equal", "per_phase")


@dataclass
class ExperimentReport:
    """Per-restart losses for one method, plus the config that produced them."""

    method: str
    experiment: str
    seeds: list
    train_losses: list
    test_losses: list
    config: dict
    wall_clock: float
    extra: dict = field(default_factory=dict)

    @property
    def best_index(self) -> int:
        test = [v if math.isfinite(v) else math.inf for v in self.test_losses]
        return int(np.argmin(test))

    @property
    def best_test_loss(self) -> float:
        return self.test_losses[self.best_index]

    @property
    def best_train_loss(self) -> float:
        return self.train_losses[self.best_index]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best"] = {"index": self.best_index, "seed": self.seeds[self.best_index],
                     "train_loss": self.best_train_loss, "test_loss": self.best_test_loss}
        return _jsonable(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        d = {k: v for k, v in d.items() if k != "best"}
        return cls(**d)


@dataclass
class EstimationResult:
    samples: np.ndarray  # (M, 2) true (mu, k)
    optima: np.ndarray  # (M, 2) estimates

    @property
    def err_pe(self) -> float:
        return mean_distance(self.samples, self.optima)

    def pairs(self) -> list:
        return [(tuple(s), tuple(o)) for s, o in zip(self.samples.tolist(), self.optima.tolist())]


@dataclass
class GrowthStep:
    layer: int
    added: int
    new_rms: float
    ref_rms: float
    accepted: bool
    widths: tuple


@dataclass
class StructureResult:
    widths: tuple
    history: list
    stop_reason: str

    def to_dict(self) -> dict:
        return _jsonable({"widths": self.widths, "stop_reason": self.stop_reason,
                          "history": [asdict(h) for h in self.history]})


@dataclass(frozen=True)
class ExperimentConfig:
    """Shared settings for the paired experiments.

    ``budget="equal"`` splits ``train.epochs`` over all HTA phases (base solve
    included) so both methods take the same number of SGD steps;
    ``"per_phase"`` gives every HTA phase the full epoch count.
    """

    train: TrainConfig = TrainConfig()
    delta_t: float = 0.5
    data_seed: int = 0
    train_fraction: float = 0.9
    domain: tuple = D.DEFAULT_DOMAIN
    budget: str = "equal"
    hidden: str = "relu"
    workers: int = 1

    def __post_init__(self):
        if self.budget not in BUDGETS:
            raise ValueError(f"budget must be one of {BUDGETS}, got {self.budget!r}")

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["domain"] = list(self.domain)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["train"] = TrainConfig.from_dict(d["train"])
        d["domain"] = tuple(d["domain"])
        return cls(**d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if hasattr(obj, "value") and hasattr(obj, "name"):  # enums
        return obj.value
    return obj


def phase_epochs(total: int, phases: int) -> tuple:
    """Split ``total`` epochs into ``(base, per_phase)`` with ``base + (phases-1)*per == total``."""
    if phases < 1:
        raise ValueError("need at least one phase")
    if phases == 1:
        return total, 0
    per = math.ceil(total / phases)
    base = total - per * (phases - 1)
    if base < 1:
        raise ValueError(f"{total} epochs cannot cover {phases} phases")
    return base, per


# -- paired regression runs ---------------------------------------------------


@dataclass
class _Run:
    net: Mlp
    trace: Trace
    stage_sizes: list = field(default_factory=list)


def _paired(name: str, train: D.Dataset, test: D.Dataset, trad_sizes, base_sizes, growth: Sequence,
            cfg: ExperimentConfig, *, max_steps: int | None = None, eval_every: int = 0, meta=None) -> tuple:
    """Run both methods over the same restarts; returns (hta_report, trad_report, runs)."""
    opt = cfg.train
    sched = HtaSchedule(cfg.delta_t, 1)
    phases = 1 + len(growth) * sched.steps
    if cfg.budget == "equal":
        base_epochs, per = phase_epochs(opt.epochs, phases)
    else:
        base_epochs, per = opt.epochs, opt.epochs
    trad_epochs = opt.epochs
    if max_steps is not None:
        opt = opt.replace(max_steps=max_steps)
        nb = math.ceil(len(train) / min(opt.batch_size, len(train)))
        trad_epochs = math.ceil(max_steps / nb)
        # a step cap always means equal steps; each phase gets an equal share
        base_epochs = per = math.ceil(trad_epochs / phases)
    stages = [(op, HtaSchedule(cfg.delta_t, per)) for op in growth]
    evaluate = (lambda net: loss(net, LossKind.SQUARED_ERROR, test.inputs, test.targets)) if eval_every else None

    def final_losses(net):
        return (loss(net, LossKind.SQUARED_ERROR, train.inputs, train.targets),
                loss(net, LossKind.SQUARED_ERROR, test.inputs, test.targets))

    def run_trad(seed):
        net = Mlp.random(trad_sizes, cfg.hidden, Rng(seed).spawn(0))
        try:
            _, trace = plain_train(net, train.inputs, train.targets, opt.replace(seed=seed, epochs=trad_epochs),
                                   evaluate=evaluate, eval_every=eval_every)
        except DivergenceError as exc:
            return math.inf, math.inf, _Run(net, exc.trace)
        return (*final_losses(net), _Run(net, trace))

    def run_hta(seed):
        base = Mlp.random(base_sizes, cfg.hidden, Rng(seed).spawn(0))
        try:
            net, trace, history = multi_stage_train(stages, base, train.inputs, train.targets, opt.replace(seed=seed),
                                              base_epochs=base_epochs, evaluate=evaluate, eval_every=eval_every)
        except DivergenceError as exc:
            return math.inf, math.inf, _Run(base, exc.trace)
        return (*final_losses(net), _Run(net, trace, [list(h.sizes) for h in history]))

    shared = {"experiment": name, "settings": cfg.to_dict(), "train_points": len(train), "test_points": len(test),
              "dataset": train.meta, "loss": LossKind.SQUARED_ERROR.value, "max_steps": max_steps, **(meta or {})}
    reports, runs = {}, {}
    for method, runner, extra in ((TRADITIONAL, run_trad, {"sizes": list(trad_sizes), "epochs": trad_epochs}),
                                  (HTA, run_hta, {"sizes": list(base_sizes), "growth": [repr(g) for g in growth],
                                                  "base_epochs": base_epochs, "epochs_per_phase": per,
                                                  "delta_t": cfg.delta_t})):
        start = time.perf_counter()
        sweep = restart_sweep(runner, opt, workers=cfg.workers)
        wall = time.perf_counter() - start
        steps = sweep.best.trace.n_steps
        reports[method] = ExperimentReport(
            method, name, [s.seed for s in sweep.summaries], [s.train_loss for s in sweep.summaries],
            [s.test_loss for s in sweep.summaries], {**shared, "method": extra}, wall,
            {"sgd_steps": steps, "test_trajectory": sweep.best.trace.evals,
             "stage_sizes": sweep.best.stage_sizes or [list(sweep.best.net.sizes)]})
        runs[method] = sweep.best
    return reports[HTA], reports[TRADITIONAL], runs


def _sin_split(n: int, cfg: ExperimentConfig) -> tuple:
    ds = D.sin_dataset(n, domain=cfg.domain)
    return D.split(ds, cfg.train_fraction, seed=cfg.data_seed)


def example1(n: int, cfg: ExperimentConfig = ExperimentConfig()) -> tuple:
    """Width-20 single hidden layer: direct training vs width 10 widened to 20."""
    train, test = _sin_split(n, cfg)
    return _paired("example1", train, test, [n, 20, 1], [n, 10, 1], [Widen(0, 10)], cfg)


def example2(n: int, cfg: ExperimentConfig = ExperimentConfig()) -> tuple:
    """Two hidden layers; HTA grows (10,10) -> (10,20) -> (20,20)."""
    train, test = _sin_split(n, cfg)
    return _paired("example2", train, test, [n, 20, 20, 1], [n, 10, 10, 1], [Widen(1, 10), Widen(0, 10)], cfg)


VDP_STEPS = 50_000


def vdp_surrogate(cfg: ExperimentConfig = ExperimentConfig(), *, steps: int = VDP_STEPS, mesh: float = 0.1,
                  eval_every: int = 1000, train_range=(1.0, 10.0), test_range=(11.0, 14.0)) -> tuple:
    """Surrogates for ``(mu, k) -> y(1)``; both methods stop after ``steps`` SGD steps."""
    train = D.vdp_dataset(train_range, train_range, mesh)
    test = D.vdp_dataset(test_range, test_range, mesh)
    return _paired("vdp", train, test, [2, 20, 1], [2, 10, 1], [Widen(0, 10)], cfg, max_steps=steps,
                   eval_every=eval_every, meta={"test_dataset": test.meta})


# -- parameter estimation --------------------------------------------------


def param_estimate(surrogate: Mlp, y_tilde, init=(11.0, 11.0), steps: int = 2000, lr: float = 0.05) -> np.ndarray:
    """Minimise ``(S(mu, k) - y_tilde)^2`` over the surrogate's inputs.

    ``y_tilde`` may be an array; each entry is an independent problem solved
    in lockstep.  Returns ``(2,)`` for a scalar target, else ``(M, 2)``.
    """
    y = np.asarray(y_tilde, dtype=np.float64)
    scalar = y.ndim == 0
    y = y.reshape(-1, 1)
    if not np.all(np.isfinite(y)):
        raise ValueError("target values must be finite")
    p = np.tile(np.asarray(init, dtype=np.float64), (len(y), 1))
    trace = Trace()
    for k in range(steps):
        out, cache = forward(surrogate, p)
        r = out - y
        with np.errstate(over="ignore", invalid="ignore"):
            value = float(np.mean(r * r))
        if not math.isfinite(value):
            raise DivergenceError(f"parameter estimation diverged at step {k}", trace)
        trace.k.append(k)
        trace.gamma.append(lr)
        trace.t.append(float("nan"))
        trace.batch_loss.append(value)
        _, d_in = backward(surrogate, cache, 2.0 * r)
        p -= lr * d_in
    if not np.all(np.isfinite(p)):
        raise DivergenceError("parameter estimation produced non-finite estimates", trace)
    return p[0] if scalar else p


def mean_distance(samples, optima) -> float:
    s = np.asarray(samples, dtype=np.float64)
    o = np.asarray(optima, dtype=np.float64)
    return float(np.mean(np.linalg.norm(o - s, axis=1)))


def estimate_all(surrogate: Mlp, samples, y_tilde=None, **kw) -> EstimationResult:
    """Estimate every sample; targets default to the ODE truth ``y(1)``."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if y_tilde is None:
        y_tilde, _ = D.vdp_rk4(samples[:, 0], samples[:, 1])
    optima = param_estimate(surrogate, np.asarray(y_tilde).ravel(), **kw).reshape(-1, 2)
    return EstimationResult(samples, optima)


def err_pe(surrogate: Mlp, samples, y_tilde=None, **kw) -> float:
    return estimate_all(surrogate, samples, y_tilde, **kw).err_pe


def sub_grid(samples: np.ndarray, count: int) -> np.ndarray:
    """Every ``len/count``-th sample, evenly spread; ``count >= len`` keeps all."""
    if count >= len(samples):
        return samples
    idx = np.linspace(0, len(samples) - 1, count).round().astype(int)
    return samples[idx]


# -- structure search --------------------------------------------------------


def teacher_dataset(widths=(10, 10), n: int = 4, samples: int = 2000, seed: int = 0) -> D.Dataset:
    """Regression data from a random ReLU teacher with the given hidden widths."""
    rng = Rng(seed)
    teacher = Mlp.random([n, *widths, 1], "relu", rng.spawn(0))
    x = rng.spawn(1).uniform(-1.0, 1.0, (samples, n))
    return D.Dataset(x, teacher(x), {"kind": "teacher", "widths": list(widths), "dim": n, "seed": seed})


def _outgoing_rms(net: Mlp, layer: int, cols: slice) -> float:
    w = net.weights[layer + 1][:, cols]
    return float(np.sqrt(np.mean(w * w))) if w.size else 0.0


def osf_search(ds: D.Dataset, base=(10, 10), quantum: int = 10, eps_zero: float = 1e-3, epochs: int = 50,
               opt: TrainConfig = TrainConfig(epochs=50), delta_t: float = 0.5, max_rounds: int = 20,
               max_width: int = 512, hidden: str = "relu") -> StructureResult:
    """Grow hidden layers one batch of ``quantum`` nodes at a time.

    After each homotopy solve the outgoing weights of the new nodes are
    compared with those of the existing nodes; if their RMS ratio is below
    ``eps_zero`` the batch is reverted and the search moves to the next
    layer.  Stops when the last layer's batch is rejected, when
    ``max_rounds`` growth attempts are spent, or at ``max_width``.
    """
    m = ds.output_dim
    if any(w < m for w in base):
        raise ValueError(f"base widths {tuple(base)} must be >= output dim {m}")
    rng = Rng(opt.seed).spawn(11)
    net = Mlp.random([ds.input_dim, *base, m], hidden, rng.spawn(0))
    plain_train(net, ds.inputs, ds.targets, opt.replace(epochs=epochs, track_full_loss=False))
    history = []
    layer = 0
    stop = "converged"
    for round_ in range(max_rounds):
        width = net.sizes[layer + 1]
        if width + quantum > max_width:
            stop = "max_width"
            break
        large, view = widen(net, layer, quantum, rng.spawn(round_ + 1))
        blend = HomotopyBlend(large, view, 0.0)
        hta_train(blend, ds.inputs, ds.targets, HtaSchedule(delta_t, epochs),
                  opt.replace(seed=rng.spawn(1000 + round_).seed, track_full_loss=False), stage=round_ + 1)
        new = _outgoing_rms(large, layer, slice(width, width + quantum))
        ref = _outgoing_rms(large, layer, slice(0, width))
        accepted = not new < eps_zero * ref
        if accepted:
            net = large
        history.append(GrowthStep(layer, quantum, new, ref, accepted, net.hidden_widths))
        if not accepted:
            layer += 1
            if layer == len(base):
                break
    else:
        stop = "budget"
    return StructureResult(net.hidden_widths, history, stop)


# -- three-state classification head -------------------------------------------


def synthetic_features(samples: int = 2000, dim: int = 512, classes: int = 10, spread: float = 1.0,
                       seed: int = 0) -> D.Dataset:
    """Gaussian class clusters standing in for backbone features."""
    rng = Rng(seed)
    centers = rng.spawn(0).uniform(-1.0, 1.0, (classes, dim))
    labels = rng.spawn(1).next_u64(samples) % np.uint64(classes)
    labels = labels.astype(np.int64)
    # Box-Muller for normal noise from the project generator
    u1, u2 = rng.spawn(2).random((samples, dim)), rng.spawn(3).random((samples, dim))
    noise = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
    x = centers[labels] + spread * noise
    return D.Dataset(x, labels.astype(np.float64), {"kind": "synthetic_features", "dim": dim, "classes": classes,
                                                    "spread": spread, "seed": seed})


def fc_head_three_state(w1: int = 64, w2: int = 32, ds: D.Dataset | None = None,
                        opt: TrainConfig = TrainConfig(epochs=5, restarts=1, schedule=Constant(0.01)),
                        delta_t: float = 0.5, width: int = 512) -> tuple:
    """Grow a cross-entropy head (w1, w2) -> (width, w2) -> (width, width).

    Returns ``(report, final_net, trace)``; the report's extra fields carry the
    state losses and endpoint-identity residuals of both homotopic paths.
    """
    if not (w1 <= width and w2 <= width):
        raise ValueError(f"widths ({w1}, {w2}) must not exceed {width}")
    ds = ds if ds is not None else synthetic_features(dim=width)
    x, y = ds.inputs, ds.targets
    labels = y.astype(np.int64).ravel()
    classes = int(labels.max()) + 1
    start = time.perf_counter()
    rng = Rng(opt.seed)
    net = Mlp.random([ds.input_dim, w1, w2, classes], "relu", rng.spawn(0))
    kind = LossKind.CROSS_ENTROPY
    initial = loss(net, kind, x, labels)
    trace = plain_train(net, x, y, opt, kind=kind)[1]
    state_losses = [loss(net, kind, x, labels)]
    endpoints = []
    shapes = [[list(w.shape) for w in net.weights]]
    for stage, (layer, added) in enumerate(((0, width - w1), (1, width - w2)), start=1):
        if added == 0:
            state_losses.append(state_losses[-1])
            shapes.append([list(w.shape) for w in net.weights])
            continue
        large, view = widen(net, layer, added, rng.spawn(stage))
        blend = HomotopyBlend(large, view, 0.0)
        probe = x[:64]
        endpoints.append(float(np.max(np.abs(blend_forward(blend, probe) - net(probe)))))
        blend.set_t(1.0)
        endpoints.append(float(np.max(np.abs(blend_forward(blend, probe) - large(probe)))))
        _, part = hta_train(blend, x, y, HtaSchedule(delta_t, opt.epochs), opt, kind=kind, stage=stage,
                            k0=trace.n_steps)
        trace.extend(part)
        net = large
        state_losses.append(loss(net, kind, x, labels))
        shapes.append([list(w.shape) for w in net.weights])
    wall = time.perf_counter() - start
    cfg = {"experiment": "head", "w1": w1, "w2": w2, "width": width, "delta_t": delta_t, "train": opt.to_dict(),
           "dataset": ds.meta, "loss": kind.value}
    report = ExperimentReport(HTA, "head", [opt.seed], [state_losses[-1]], [state_losses[-1]], cfg, wall,
                              {"initial_loss": initial, "state_losses": state_losses, "endpoint_residuals": endpoints,
                               "state_shapes": shapes, "sgd_steps": trace.n_steps})
    return report, net, trace


# -- reporting ---------------------------------------------------------------


def roi(err_trad: float, err_hta: float) -> float:
    """Relative improvement ``(trad - hta) / trad``."""
    if err_trad == 0:
        raise ValueError("traditional error is zero; improvement rate undefined")
    return (err_trad - err_hta) / err_trad


def compare_report(pairs: Sequence) -> list:
    """``pairs`` of (hta, traditional) reports or plain error values -> rows with ROI."""
    rows = []
    for i, (h, t) in enumerate(pairs):
        eh = h.best_test_loss if isinstance(h, ExperimentReport) else float(h)
        et = t.best_test_loss if isinstance(t, ExperimentReport) else float(t)
        name = h.experiment if isinstance(h, ExperimentReport) else f"pair{i}"
        rows.append({"experiment": name, "traditional": et, "hta": eh, "roi": roi(et, eh)})
    return rows


def write_rows_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["experiment", "traditional", "hta", "roi"])
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def paired_metrics(hta: ExperimentReport, trad: ExperimentReport, config: dict | None = None,
                   extra: dict | None = None) -> dict:
    """Document written to ``metrics.json`` for a paired experiment."""
    return _jsonable({
        "experiment": hta.experiment,
        "config": config or {},
        "methods": {HTA: hta.to_dict(), TRADITIONAL: trad.to_dict()},
        "comparison": compare_report([(hta, trad)])[0],
        **({"extra": extra} if extra else {}),
    })


def write_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
