"""Time grids, grid paths and Hölder norms."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class TimeGrid:
    """Partition ``0 = t_0 < ... < t_n = T`` of ``[0, T]``."""

    T: float
    n: int
    nodes: np.ndarray = field(repr=False)
    uniform: bool = True

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size != self.n + 1:
            raise InvalidArgument("nodes must have length n + 1")
        if nodes[0] != 0.0 or nodes[-1] != self.T:
            raise InvalidArgument("nodes must start at 0 and end at T")
        if np.any(np.diff(nodes) <= 0):
            raise InvalidArgument("nodes must be strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def step(self) -> float:
        """Uniform step ``T / n``."""
        return self.T / self.n

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.nodes[1:] + self.nodes[:-1])

    def index_of(self, t: float, atol: float = 1e-12) -> int:
        """Index of the node equal to ``t``; raises if ``t`` is not a node."""
        k = int(np.searchsorted(self.nodes, t - atol))
        if k > self.n or abs(self.nodes[k] - t) > atol * max(1.0, self.T):
            raise InvalidArgument(f"t={t} is not a grid node")
        return k

    def subsample(self, factor: int) -> "TimeGrid":
        if factor < 1 or self.n % factor:
            raise InvalidArgument("factor must divide n")
        return TimeGrid(self.T, self.n // factor, self.nodes[::factor].copy(), self.uniform)

    def __eq__(self, other):
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return self.n == other.n and self.T == other.T and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash((self.T, self.n))


def make_uniform_grid(T: float, n: int) -> TimeGrid:
    """Uniform grid with ``n`` intervals on ``[0, T]``.

    Nodes are ``k * (T / n)`` with the last node pinned to ``T``.
    """
    if not np.isfinite(T) or T <= 0:
        raise InvalidArgument(f"horizon must be positive, got {T}")
    if int(n) != n or n < 2:
        raise InvalidArgument(f"need n >= 2 intervals, got {n}")
    n = int(n)
    h = T / n
    nodes = np.arange(n + 1, dtype=float) * h
    nodes[-1] = T
    return TimeGrid(float(T), n, nodes, True)


def make_graded_grid(T: float, n: int, exponent: float = 2.0) -> TimeGrid:
    """Grid ``t_k = T (k/n)^exponent``, refined toward 0."""
    if T <= 0 or n < 2 or exponent < 1:
        raise InvalidArgument("graded grid needs T > 0, n >= 2, exponent >= 1")
    nodes = T * (np.arange(n + 1) / n) ** exponent
    nodes[-1] = T
    return TimeGrid(float(T), int(n), nodes, False)


@dataclass(frozen=True)
class SamplePath:
    """Grid function with ``d``-dimensional values at every node.

    ``values`` has shape ``(n + 1, d)``. Operators designed on the staggered
    grid may also attach ``cells``, the exact averages over each of the ``n``
    intervals, shape ``(n, d)``. ``meta`` holds diagnostics.
    """

    grid: TimeGrid
    values: np.ndarray
    cells: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.n + 1:
            raise InvalidArgument(f"values must have {self.grid.n + 1} rows, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("path values must be finite")
        object.__setattr__(self, "values", v)
        if self.cells is not None:
            c = np.asarray(self.cells, dtype=float)
            if c.ndim == 1:
                c = c[:, None]
            if c.shape != (self.grid.n, v.shape[1]):
                raise InvalidArgument("cells must have shape (n, d)")
            object.__setattr__(self, "cells", c)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def t(self) -> np.ndarray:
        return self.grid.nodes

    def component(self, i: int = 0) -> np.ndarray:
        return self.values[:, i]

    def __call__(self, t):
        """Piecewise-linear evaluation between nodes."""
        t = np.asarray(t, dtype=float)
        out = np.stack([np.interp(t, self.grid.nodes, self.values[:, i]) for i in range(self.d)], axis=-1)
        return out

    def to_csv(self, path):
        write_path_csv(self, path)


def from_function(grid: TimeGrid, func) -> SamplePath:
    """Sample ``func`` (vectorized over time) at the nodes of ``grid``."""
    return SamplePath(grid, np.asarray(func(grid.nodes), dtype=float))


def write_path_csv(path: SamplePath, filename) -> None:
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"v{i + 1}" for i in range(path.d)])
        for t, row in zip(path.grid.nodes, path.values):
            w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])


def read_path_csv(filename) -> SamplePath:
    data = np.loadtxt(filename, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    grid = TimeGrid(float(t[-1]), len(t) - 1, t, bool(np.allclose(np.diff(t), t[-1] / (len(t) - 1))))
    return SamplePath(grid, data[:, 1:])


@dataclass(frozen=True)
class HolderReport:
    beta: float
    seminorm: float
    supnorm: float
    argpair: tuple  # (r, theta) with theta < r


def holder_seminorm_array(x: np.ndarray, nodes: np.ndarray, beta: float) -> np.ndarray:
    """Hölder-β seminorm over all node pairs, vectorized over leading axes.

    ``x`` has time on the last axis. Returns an array of the leading shape.
    The cost is O(n^2) per path, done as a loop over lags.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    best = np.zeros(x.shape[:-1])
    for lag in range(1, n):
        dt = (nodes[lag:] - nodes[:-lag]) ** beta
        r = np.abs(x[..., lag:] - x[..., :-lag]) / dt
        np.maximum(best, r.max(axis=-1), out=best)
    return best


def holder_norm(x: SamplePath, beta: float, a: float | None = None, b: float | None = None) -> HolderReport:
    """Hölder-β seminorm and sup norm of ``x`` restricted to ``[a, b]``.

    The seminorm is the maximum of ``|x_r - x_θ| / (r - θ)^β`` over node
    pairs in the interval; vector values use the Euclidean norm.
    """
    if not 0 < beta < 1:
        raise InvalidArgument("beta must lie in (0, 1)")
    a = 0.0 if a is None else float(a)
    b = x.grid.T if b is None else float(b)
    if a >= b:
        raise InvalidArgument("need a < b")
    nodes = x.grid.nodes
    tol = 1e-12 * max(1.0, x.grid.T)
    mask = (nodes >= a - tol) & (nodes <= b + tol)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        raise InvalidArgument("no grid nodes in [a, b]")
    t = nodes[idx]
    v = x.values[idx]
    supnorm = float(np.max(np.linalg.norm(v, axis=1)))
    best, pair = 0.0, (float(t[-1]), float(t[0]))
    for lag in range(1, idx.size):
        r = np.linalg.norm(v[lag:] - v[:-lag], axis=1) / (t[lag:] - t[:-lag]) ** beta
        j = int(np.argmax(r))
        if r[j] > best:
            best, pair = float(r[j]), (float(t[j + lag]), float(t[j]))
    return HolderReport(beta, best, supnorm, pair)


def estimate_holder_exponent(x, nodes: np.ndarray, max_levels: int = 8) -> float:
    """Hölder exponent from the scaling of increments with the lag.

    Regresses the log root-mean-square increment on the log lag over dyadic
    lags of 1, 2, 4, ... grid steps. Smooth paths give about 1 and fBm
    paths about H.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0] - 1
    lags, amps = [], []
    lag = 1
    while lag <= max(n // 32, 4) and len(lags) < max_levels:
        inc = np.linalg.norm(x[lag:] - x[:-lag], axis=1)
        rms = float(np.sqrt(np.mean(inc ** 2)))
        span = float(np.mean(nodes[lag:] - nodes[:-lag]))
        if rms > 0:
            lags.append(np.log(span))
            amps.append(np.log(rms))
        lag *= 2
    if len(lags) < 2:
        return 1.0
    slope = np.polyfit(lags, amps, 1)[0]
    return float(min(slope, 1.0))
