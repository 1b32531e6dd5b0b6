"""Training sets: sin-sum targets on uniform and sparse grids, Van der Pol
surrogate data, seeded splitting, and CSV persistence."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .linalg import Rng

DEFAULT_DOMAIN = (-math.pi, math.pi)
MAX_GRID_POINTS = 10**7


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, n)
    targets: np.ndarray  # (N, m)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if len(self.inputs) == 0:
            raise ValueError("dataset must contain at least one sample")
        if len(self.inputs) != len(self.targets):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("dataset contains non-finite values")

    def __len__(self):
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.targets.shape[1]

    def subset(self, idx, **meta) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], {**self.meta, **meta})


def sin_target(x: np.ndarray) -> np.ndarray:
    """``sin(x_1 + ... + x_n)``; vectorised over leading axes."""
    return np.sin(np.sum(np.asarray(x, dtype=np.float64), axis=-1))


def _apply(fn, points: np.ndarray) -> np.ndarray:
    y = np.asarray(fn(points), dtype=np.float64)
    return y.reshape(len(points), -1)


def uniform_grid(n: int, points_per_dim: int, domain=DEFAULT_DOMAIN) -> np.ndarray:
    if points_per_dim < 2:
        raise ValueError("points_per_dim must be >= 2")
    total = points_per_dim**n
    if total > MAX_GRID_POINTS:
        raise ValueError(f"uniform grid with {points_per_dim}^{n} = {total} points is too large; use a sparse grid")
    axis = np.linspace(domain[0], domain[1], points_per_dim)
    mesh = np.meshgrid(*([axis] * n), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def uniform_grid_dataset(n: int, points_per_dim: int = 100, domain=DEFAULT_DOMAIN, target=sin_target) -> Dataset:
    x = uniform_grid(n, points_per_dim, domain)
    meta = {"kind": "uniform_grid", "dim": n, "points_per_dim": points_per_dim, "domain": list(domain),
            "target": getattr(target, "__name__", "custom"), "normalized": False}
    return Dataset(x, _apply(target, x), meta)


# -- sparse grids ----------------------------------------------------------
#
# Regular sparse grid without boundary points: hierarchical level l >= 1 in
# one dimension contributes the 2^(l-1) points (2i-1)/2^l on (0, 1), and the
# grid of level L in n dimensions is the union of the hierarchical
# subspaces with |l|_1 <= L + n - 1.  The 1-d rules are nested.


def _level_vectors(n: int, total: int):
    """Multi-indices l >= 1 (componentwise) with |l|_1 <= total."""
    if n == 1:
        for l in range(1, total + 1):
            yield (l,)
        return
    for l in range(1, total - (n - 1) + 1):
        for rest in _level_vectors(n - 1, total - l):
            yield (l,) + rest


def _hier_points(level: int) -> np.ndarray:
    return (2.0 * np.arange(1, 2 ** (level - 1) + 1) - 1.0) / 2.0**level


def sparse_grid_count(n: int, level: int) -> int:
    return sum(math.prod(2 ** (l - 1) for l in ls) for ls in _level_vectors(n, level + n - 1))


@lru_cache(maxsize=32)
def _sparse_unit(n: int, level: int) -> np.ndarray:
    # hierarchical subspaces are disjoint, so the union needs no deduplication
    blocks = []
    for ls in _level_vectors(n, level + n - 1):
        axes = [_hier_points(l) for l in ls]
        mesh = np.meshgrid(*axes, indexing="ij")
        blocks.append(np.stack([m.ravel() for m in mesh], axis=1))
    pts = np.concatenate(blocks)
    order = np.lexsort(pts.T[::-1])
    return pts[order]


@dataclass(frozen=True)
class SparseGridSpec:
    dim: int
    level: int = 6
    construction: str = "interior-equidistant"

    def __post_init__(self):
        if self.dim < 1 or self.level < 1:
            raise ValueError("sparse grid needs dim >= 1 and level >= 1")


def sparse_grid(spec: SparseGridSpec, domain=DEFAULT_DOMAIN) -> np.ndarray:
    """Points of the regular sparse grid, lexicographically sorted."""
    unit = _sparse_unit(spec.dim, spec.level)
    return domain[0] + (domain[1] - domain[0]) * unit


def sparse_grid_dataset(n: int, level: int = 6, domain=DEFAULT_DOMAIN, target=sin_target) -> Dataset:
    x = sparse_grid(SparseGridSpec(n, level), domain)
    meta = {"kind": "sparse_grid", "dim": n, "level": level, "construction": "interior-equidistant",
            "domain": list(domain), "target": getattr(target, "__name__", "custom"), "normalized": False,
            "points": len(x)}
    return Dataset(x, _apply(target, x), meta)


def sin_dataset(n: int, domain=DEFAULT_DOMAIN, points_per_dim: int = 100, level: int = 6) -> Dataset:
    """Uniform grid for n <= 3, level-6 sparse grid above, as in the experiments."""
    if n <= 3:
        return uniform_grid_dataset(n, points_per_dim, domain)
    return sparse_grid_dataset(n, level, domain)


def split(ds: Dataset, train_fraction: float = 0.9, seed: int = 0) -> tuple:
    """Seeded random partition into (train, test)."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = int(round(train_fraction * len(ds)))
    if n_train == 0 or n_train == len(ds):
        raise ValueError(f"split of {len(ds)} samples at {train_fraction} leaves one side empty")
    perm = Rng(seed).permutation(len(ds))
    train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return (ds.subset(train_idx, split="train", split_seed=seed),
            ds.subset(test_idx, split="test", split_seed=seed))


# -- Van der Pol -----------------------------------------------------------


@dataclass(frozen=True)
class VdpConfig:
    mu: float
    k: float
    t_end: float = 1.0
    h: float = 1e-3
    y0: float = 2.0
    v0: float = 0.0

    @property
    def steps(self) -> int:
        if self.h <= 0:
            raise ValueError("step size must be positive")
        n = round(self.t_end / self.h)
        if abs(n * self.h - self.t_end) > 1e-9 * max(1.0, self.t_end):
            raise ValueError(f"t_end={self.t_end} is not a multiple of h={self.h}")
        return n


def vdp_rk4(mu, k, t_end: float = 1.0, h: float = 1e-3, y0: float = 2.0, v0: float = 0.0) -> tuple:
    """Classical RK4 for ``y'' - mu (k - y^2) y' + y = 0``.

    ``mu`` and ``k`` may be arrays; every parameter pair is integrated in
    lockstep.  Returns ``(y(t_end), y'(t_end))``.
    """
    steps = VdpConfig(0.0, 0.0, t_end, h).steps
    mu = np.asarray(mu, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    y = np.full(np.broadcast(mu, k).shape, y0, dtype=np.float64)
    v = np.full_like(y, v0)

    def acc(y, v):
        return mu * (k - y * y) * v - y

    for _ in range(steps):
        k1y, k1v = v, acc(y, v)
        y2, v2 = y + 0.5 * h * k1y, v + 0.5 * h * k1v
        k2y, k2v = v2, acc(y2, v2)
        y3, v3 = y + 0.5 * h * k2y, v + 0.5 * h * k2v
        k3y, k3v = v3, acc(y3, v3)
        y4, v4 = y + h * k3y, v + h * k3v
        k4y, k4v = v4, acc(y4, v4)
        y = y + (h / 6.0) * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
        v = v + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(v))):
        raise FloatingPointError("Van der Pol integration produced non-finite values")
    return y, v


def vdp_solve(cfg: VdpConfig) -> float:
    """``y(t_end)`` for a single parameter pair."""
    y, _ = vdp_rk4(cfg.mu, cfg.k, cfg.t_end, cfg.h, cfg.y0, cfg.v0)
    return float(y)


def grid_axis(lo: float, hi: float, mesh: float) -> np.ndarray:
    if hi < lo:
        raise ValueError(f"range [{lo}, {hi}] is not ordered")
    count = int(round((hi - lo) / mesh)) + 1
    return lo + mesh * np.arange(count)


def vdp_dataset(mu_range=(1.0, 10.0), k_range=(1.0, 10.0), mesh: float = 0.1, h: float = 1e-3) -> Dataset:
    """Inclusive ``(mu, k)`` grid with ``y(1)`` targets, mu-major order."""
    mus = grid_axis(*mu_range, mesh)
    ks = grid_axis(*k_range, mesh)
    mu, k = (a.ravel() for a in np.meshgrid(mus, ks, indexing="ij"))
    y, _ = vdp_rk4(mu, k, h=h)
    meta = {"kind": "vdp", "mu_range": list(mu_range), "k_range": list(k_range), "mesh": mesh, "h": h,
            "t_end": 1.0, "y0": 2.0, "v0": 0.0, "normalized": False}
    return Dataset(np.stack([mu, k], axis=1), y[:, None], meta)


# -- CSV persistence ---------------------------------------------------------


def save(ds: Dataset, path) -> None:
    """Header ``# dims=<n>,<m> provenance=<json>``; then inputs and targets per row."""
    with open(path, "w") as fh:
        fh.write(f"# dims={ds.input_dim},{ds.output_dim} provenance={json.dumps(ds.meta, sort_keys=True)}\n")
        for x, y in zip(ds.inputs, ds.targets):
            fh.write(",".join(repr(float(v)) for v in itertools.chain(x, y)) + "\n")


def load(path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: line 1: empty file")
    head = lines[0]
    if not head.startswith("# dims="):
        raise ValueError(f"{path}: line 1: expected '# dims=<n>,<m> provenance=...' header")
    dims, _, prov = head[len("# dims="):].partition(" provenance=")
    try:
        n, m = (int(d) for d in dims.split(","))
        meta = json.loads(prov) if prov else {}
    except ValueError as exc:
        raise ValueError(f"{path}: line 1: bad header ({exc})") from None
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            vals = [float(v) for v in line.split(",")]
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: non-numeric value") from None
        if len(vals) != n + m:
            raise ValueError(f"{path}: line {lineno}: expected {n + m} values, got {len(vals)}")
        rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.array(rows)
    return Dataset(arr[:, :n], arr[:, n:], meta)
