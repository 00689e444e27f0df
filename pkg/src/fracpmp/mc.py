"""Deterministic parallel ensembles, statistics and least-squares conditioning."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import FracPMPError, InvalidArgument

DEFAULT_CHUNK = 256


def path_rng(seed: int, path_id: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for one path.

    Philox keyed by ``(seed, stream, path_id)``; the draw sequence of a path
    never depends on which worker produces it.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(path_id)))
    return np.random.Generator(np.random.Philox(ss))


def chunk_bounds(path_count: int, chunk_size: int = DEFAULT_CHUNK):
    return [(s, min(s + chunk_size, path_count)) for s in range(0, path_count, chunk_size)]


def map_chunks(fn, path_count: int, workers: int = 1, chunk_size: int = DEFAULT_CHUNK) -> list:
    """Apply ``fn(start, stop)`` to fixed path chunks, results in chunk order.

    Chunk boundaries depend only on ``path_count`` and ``chunk_size``, so the
    outputs are identical for any number of workers.
    """
    bounds = chunk_bounds(path_count, chunk_size)
    if workers <= 1 or len(bounds) == 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=int(workers)) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))


def pairwise_sum(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sum along ``axis`` with a fixed binary tree (independent of layout)."""
    x = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    n = x.shape[0]
    if n == 0:
        return np.zeros(x.shape[1:])
    if n <= 8:
        acc = x[0].copy()
        for i in range(1, n):
            acc = acc + x[i]
        return acc
    mid = n // 2
    return pairwise_sum(x[:mid]) + pairwise_sum(x[mid:])


def pairwise_mean(x: np.ndarray, axis: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return pairwise_sum(x, axis) / x.shape[axis]


@dataclass
class EnsembleStats:
    mean: np.ndarray
    stderr: np.ndarray
    count: int
    min: np.ndarray
    max: np.ndarray
    reduction: str = "pairwise"
    samples: np.ndarray | None = field(default=None, repr=False)
    failures: list = field(default_factory=list)


def summarize(samples: np.ndarray) -> EnsembleStats:
    """Mean, standard error (sample std / sqrt(count)), min and max along axis 0."""
    samples = np.asarray(samples, dtype=float)
    count = samples.shape[0]
    mean = pairwise_mean(samples)
    if count > 1:
        var = pairwise_sum((samples - mean) ** 2) / (count - 1)
        se = np.sqrt(var / count)
    else:
        se = np.zeros_like(mean)
    return EnsembleStats(mean, se, count, samples.min(axis=0), samples.max(axis=0), samples=samples)


def run_ensemble(task, path_count: int, seed: int, workers: int = 1, chunk_size: int = DEFAULT_CHUNK, max_failure_rate: float = 1e-3) -> EnsembleStats:
    """Run ``task(path_ids, seed)`` over all paths and reduce.

    ``task`` must return an array whose first axis matches ``path_ids``.
    Paths with non-finite outputs count as failures and are excluded; the
    run aborts when more than ``max_failure_rate`` of the paths fail.
    """
    if path_count < 1:
        raise InvalidArgument("path_count must be positive")

    def fn(a, b):
        ids = np.arange(a, b)
        out = np.asarray(task(ids, seed), dtype=float)
        if out.shape[0] != ids.size:
            raise InvalidArgument("task output must have one row per path")
        return out

    parts = map_chunks(fn, path_count, workers, chunk_size)
    samples = np.concatenate(parts, axis=0)
    flat = samples.reshape(path_count, -1)
    bad = ~np.all(np.isfinite(flat), axis=1)
    failures = [int(i) for i in np.nonzero(bad)[0]]
    if len(failures) > max_failure_rate * path_count:
        raise FracPMPError(f"{len(failures)} of {path_count} paths failed (first: {failures[:5]})")
    stats = summarize(samples[~bad])
    stats.failures = failures
    return stats


# ---------------------------------------------------------------------------
# regression


@dataclass(frozen=True)
class RegressionSpec:
    """Feature basis for least-squares conditional expectations.

    Polynomials up to ``degree`` in each state component, cross products up
    to ``cross_degree``, plus linear (and squared) extra driver features when
    ``include_driver`` is set. ``ridge`` is the fallback penalty relative to
    the mean feature energy.
    """

    degree: int = 3
    cross_degree: int = 2
    include_driver: bool = False
    ridge: float = 1e-8
    constant_only: bool = False


def polynomial_features(x: np.ndarray, spec: RegressionSpec, extra: np.ndarray | None = None) -> np.ndarray:
    """Feature matrix ``(P, k)`` with the constant column first."""
    P = x.shape[0]
    cols = [np.ones(P)]
    if spec.constant_only:
        return np.stack(cols, axis=1)
    x = x.reshape(P, -1)
    for i in range(x.shape[1]):
        for p in range(1, spec.degree + 1):
            cols.append(x[:, i] ** p)
    if spec.cross_degree >= 2:
        for i in range(x.shape[1]):
            for j in range(i + 1, x.shape[1]):
                cols.append(x[:, i] * x[:, j])
    if spec.include_driver and extra is not None:
        e = extra.reshape(P, -1)
        for i in range(e.shape[1]):
            cols.append(e[:, i])
            cols.append(e[:, i] ** 2)
            for j in range(x.shape[1]):
                cols.append(e[:, i] * x[:, j])
    return np.stack(cols, axis=1)


@dataclass
class RegressionFit:
    coef: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    keep: np.ndarray
    ridge_lambda: float
    rank_deficient: bool

    def predict(self, features: np.ndarray) -> np.ndarray:
        z = (features[:, self.keep] - self.shift) / self.scale
        return z @ self.coef


def condition_on(samples: np.ndarray, features: np.ndarray, spec: RegressionSpec | None = None):
    """Least-squares projection of ``samples`` onto the span of ``features``.

    Parameters
    ----------
    samples : (P,) or (P, q) array
    features : (P, k) array whose first column is the constant.

    Returns
    -------
    fitted : array like ``samples``
    fit : RegressionFit
        Coefficients in standardized coordinates; ``fit.predict`` evaluates
        the frozen regression at new feature rows.

    Constant non-leading columns are dropped. When the sample count is
    below ten times the feature count or the standardized design is
    numerically rank deficient, a ridge penalty is added and recorded.
    """
    spec = spec or RegressionSpec()
    y = np.asarray(samples, dtype=float)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    X = np.asarray(features, dtype=float)
    P, k = X.shape
    if y.shape[0] != P:
        raise InvalidArgument("samples and features must have the same number of rows")
    spread = X.std(axis=0)
    keep = np.ones(k, dtype=bool)
    keep[1:] = spread[1:] > 1e-12 * (1.0 + np.abs(X[:, 1:]).max(axis=0))
    Xk = X[:, keep]
    shift = Xk.mean(axis=0)
    shift[0] = 0.0
    scale = Xk.std(axis=0)
    scale[0] = 1.0
    Z = (Xk - shift) / scale
    kk = Z.shape[1]
    G = Z.T @ Z
    rhs = Z.T @ y
    lam = 0.0
    deficient = False
    cond = np.linalg.cond(G) if kk > 1 else 1.0
    if P < 10 * kk or not np.isfinite(cond) or cond > 1e12:
        deficient = True
        lam = spec.ridge * np.trace(G) / kk
    coef = np.linalg.solve(G + lam * np.eye(kk), rhs)
    if lam == 0.0:
        # one refinement step keeps the normal equations residual at rounding level
        coef += np.linalg.solve(G, rhs - G @ coef)
    fitted = Z @ coef
    fit = RegressionFit(coef, scale, shift, keep, float(lam), deficient)
    if squeeze:
        return fitted[:, 0], fit
    return fitted, fit
