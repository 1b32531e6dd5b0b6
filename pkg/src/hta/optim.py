"""Mini-batch SGD, step-size schedules, restarts and convergence diagnostics."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .linalg import Rng


class DivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite; carries the trace so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class Constant:
    gamma: float = 0.05

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("step size must be positive")

    def __call__(self, k: int) -> float:
        return self.gamma


@dataclass(frozen=True)
class Diminishing:
    """``gamma_k = gamma0 / (k + 1)``: divergent sum, summable squares."""

    gamma0: float = 1.0

    def __post_init__(self):
        if not self.gamma0 > 0:
            raise ValueError("step size must be positive")

    def __call__(self, k: int) -> float:
        return self.gamma0 / (k + 1)


def schedule_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    return {"constant": Constant, "diminishing": Diminishing}[kind](**d)


def schedule_to_dict(s) -> dict:
    return {"kind": type(s).__name__.lower(), **asdict(s)}


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings; defaults are the standard experiment settings."""

    schedule: Constant | Diminishing = Constant(0.05)
    batch_size: int = 128
    epochs: int = 380
    seed: int = 0
    restarts: int = 15
    max_steps: int | None = None
    retain_every: int = 0  # keep theta_k every s steps (0 = off; diagnostics use 10)
    track_full_loss: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = schedule_to_dict(self.schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["schedule"] = schedule_from_dict(d["schedule"])
        return cls(**d)


@dataclass
class Trace:
    """Per-step and per-epoch records of one or more consecutive training runs."""

    k: list = field(default_factory=list)
    t: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    batch_loss: list = field(default_factory=list)
    # (step, stage, t, epoch, full_loss) at each epoch end
    epochs: list = field(default_factory=list)
    # (step, value) from an optional evaluation callback
    evals: list = field(default_factory=list)
    # (k, gamma, t, theta) every retain_every steps
    retained: list = field(default_factory=list)

    def __len__(self):
        return len(self.k)

    @property
    def n_steps(self) -> int:
        return len(self.k)

    def extend(self, other: "Trace") -> None:
        off = self.n_steps
        self.k += other.k
        self.t += other.t
        self.gamma += other.gamma
        self.batch_loss += other.batch_loss
        self.epochs += [(s + off, *rest) for s, *rest in other.epochs]
        self.evals += [(s + off, v) for s, v in other.evals]
        self.retained += other.retained

    def write_csv(self, path) -> None:
        """Columns ``step,k,t,gamma,batch_loss,full_loss``; full_loss only at epoch ends."""
        full = {s: fl for s, _, _, _, fl in self.epochs}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "k", "t", "gamma", "batch_loss", "full_loss"])
            for i in range(self.n_steps):
                fl = full.get(i + 1)
                w.writerow([i, self.k[i], repr(self.t[i]), repr(self.gamma[i]), repr(self.batch_loss[i]),
                            "" if fl is None else repr(fl)])


def sgd_step(theta: np.ndarray, grad: np.ndarray, k: int, schedule) -> np.ndarray:
    """``theta - gamma_k * grad`` as a new array."""
    theta = np.asarray(theta)
    grad = np.asarray(grad)
    if theta.shape != grad.shape:
        raise ValueError(f"parameter shape {theta.shape} != gradient shape {grad.shape}")
    return theta - schedule(k) * grad


def train(
    loss_oracle: Callable,
    theta: np.ndarray,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    *,
    k0: int = 0,
    t: float = float("nan"),
    stage: int = 0,
    full_loss: Callable | None = None,
    evaluate: Callable | None = None,
    eval_every: int = 0,
) -> tuple:
    """Shuffled mini-batch SGD.

    ``loss_oracle(theta, x_batch, y_batch) -> (loss, grad)`` must read the
    parameters from ``theta``; updates are applied to ``theta`` in place
    (single writer) and the same array is returned with the trace.  ``k``
    counts global steps starting at ``k0`` so schedules continue across
    consecutive calls.  ``evaluate(theta)`` is recorded every
    ``eval_every`` steps and at the end.
    """
    n = len(inputs)
    if n == 0:
        raise ValueError("training set is empty")
    batch = min(cfg.batch_size, n)
    rng = Rng(cfg.seed)
    trace = Trace()
    step = 0
    k = k0
    limit = cfg.max_steps if cfg.max_steps is not None else math.inf
    for epoch in range(cfg.epochs):
        if step >= limit:
            break
        order = rng.permutation(n)
        for start in range(0, n, batch):
            if step >= limit:
                break
            idx = order[start : start + batch]
            value, grad = loss_oracle(theta, inputs[idx], targets[idx])
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at step k={k}", trace)
            gamma = cfg.schedule(k)
            if cfg.retain_every and step % cfg.retain_every == 0:
                trace.retained.append((k, gamma, t, theta.copy()))
            theta -= gamma * grad
            trace.k.append(k)
            trace.t.append(t)
            trace.gamma.append(gamma)
            trace.batch_loss.append(value)
            step += 1
            k += 1
            if evaluate is not None and eval_every and step % eval_every == 0:
                trace.evals.append((step, evaluate(theta)))
        if cfg.track_full_loss and full_loss is not None:
            value = full_loss(theta)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite full-batch loss at epoch {epoch}", trace)
            trace.epochs.append((step, stage, t, epoch, value))
        else:
            trace.epochs.append((step, stage, t, epoch, float("nan")))
    if evaluate is not None and (not trace.evals or trace.evals[-1][0] != step):
        trace.evals.append((step, evaluate(theta)))
    return theta, trace


@dataclass
class RestartSummary:
    seed: int
    train_loss: float
    test_loss: float


@dataclass
class SweepResult:
    best_index: int
    best: object
    summaries: list

    @property
    def best_test_loss(self) -> float:
        return self.summaries[self.best_index].test_loss


def restart_seeds(seed: int, restarts: int) -> list:
    root = Rng(seed)
    return [root.spawn(r).seed for r in range(restarts)]


def restart_sweep(run: Callable, cfg: TrainConfig, workers: int = 1) -> SweepResult:
    """Run ``run(seed) -> (train_loss, test_loss, payload)`` for each restart.

    Picks the restart with the lowest test loss.  Restarts are independent,
    so ``workers > 1`` runs them on a thread pool without changing results.
    """
    seeds = restart_seeds(cfg.seed, cfg.restarts)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(s) for s in seeds]
    summaries = [RestartSummary(s, float(tr), float(te)) for s, (tr, te, _) in zip(seeds, results)]
    test = [s.test_loss if math.isfinite(s.test_loss) else math.inf for s in summaries]
    best = int(np.argmin(test))
    return SweepResult(best, results[best][2], summaries)


def theorem1_metric(trace: Trace, full_grad: Callable) -> list:
    """Running ``(1/A_K) sum_{k<=K} gamma_k ||grad f(theta_k)||^2``.

    Evaluated over the retained iterates only, so with subsampling it is
    an approximation of the all-steps quantity.
    """
    out = []
    num = 0.0
    den = 0.0
    for k, gamma, _, theta in trace.retained:
        g = np.asarray(full_grad(theta))
        num += gamma * float(g @ g)
        den += gamma
        out.append((k, num / den))
    return out


def averaged_iterates(trace: Trace) -> tuple:
    """gamma-weighted averages of the retained ``theta_k`` and ``t_k``."""
    if not trace.retained:
        raise ValueError("trace has no retained iterates (set retain_every > 0)")
    gammas = np.array([r[1] for r in trace.retained])
    thetas = np.stack([r[3] for r in trace.retained])
    ts = np.array([r[2] for r in trace.retained])
    total = gammas.sum()
    return gammas @ thetas / total, float(gammas @ ts / total)


def partial_sums(schedule, K: int) -> tuple:
    """``(sum_{k<K} gamma_k, sum_{k<K} gamma_k^2)``."""
    g = schedule_array(schedule, K)
    return float(math.fsum(g)), float(math.fsum(g * g))


def schedule_array(schedule, K: int) -> np.ndarray:
    k = np.arange(K, dtype=np.float64)
    if isinstance(schedule, Diminishing):
        return schedule.gamma0 / (k + 1.0)
    if isinstance(schedule, Constant):
        return np.full(K, schedule.gamma)
    return np.array([schedule(int(i)) for i in range(K)])
