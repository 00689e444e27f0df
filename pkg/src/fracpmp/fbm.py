"""Fractional Brownian motion: constants, the Volterra kernel and path generators.

Brownian and fBm paths are built from the same increments through
``B^H(t) = ∫_0^t Z_H(t, s) dW(s)``, so functionals of both can be
differentiated with respect to a single noise source.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import beta, betainc, gamma, roots_jacobi

from .errors import InvalidArgument
from .grid import SamplePath, TimeGrid
from .mc import DEFAULT_CHUNK, map_chunks, path_rng

W_STREAM = 0
CHOLESKY_STREAM = 1
_ROW_BLOCK = 256
_CACHE_LIMIT_N = 2048


def kappa_h(H: float) -> float:
    """Normalizing constant of the Volterra kernel.

    ``sqrt(2H Γ(3/2-H) / (Γ(H+1/2) Γ(2-2H)))``; equals 1 at H = 1/2.
    """
    H = float(H)
    if not 0.5 <= H < 1.0:
        raise InvalidArgument(f"H must lie in [0.5, 1), got {H}")
    if H == 0.5:
        return 1.0
    return float(np.sqrt(2 * H * gamma(1.5 - H) / (gamma(H + 0.5) * gamma(2 - 2 * H))))


@dataclass(frozen=True)
class HurstParam:
    """Hurst index with derived constants.

    ``kappa_1`` is ``1/(2H Γ(H-1/2) Γ(3/2-H))`` (its limit 0 is stored at
    H = 1/2). ``kappa_1_inverse`` is ``(H-1/2) kappa_1``, the constant that
    makes the fBm-to-Brownian transfer operator the inverse of ``Γ*``;
    it equals 1 at H = 1/2.
    """

    H: float
    kappa_H: float = field(init=False)
    kappa_1: float = field(init=False)
    kappa_1_inverse: float = field(init=False)

    def __post_init__(self):
        H = float(self.H)
        if not 0.5 <= H < 1.0:
            raise InvalidArgument(f"H must lie in [0.5, 1), got {H}")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "kappa_H", kappa_h(H))
        if H == 0.5:
            k1 = 0.0
        else:
            k1 = 1.0 / (2 * H * gamma(H - 0.5) * gamma(1.5 - H))
        object.__setattr__(self, "kappa_1", float(k1))
        object.__setattr__(self, "kappa_1_inverse", float(1.0 / (2 * H * gamma(H + 0.5) * gamma(1.5 - H))))

    @property
    def is_brownian(self) -> bool:
        return self.H == 0.5


def as_hurst(H) -> HurstParam:
    return H if isinstance(H, HurstParam) else HurstParam(H)


def _inner_integral(H: float, x: np.ndarray) -> np.ndarray:
    """``∫_x^1 v^{-2H}(1-v)^{H-1/2} dv`` for ``0 < x < 1``, ``H > 1/2``.

    An incomplete beta function with a negative parameter, reduced to the
    regularized ``betainc`` by one integration by parts.
    """
    a, b = H + 0.5, 1.0 - 2.0 * H
    y = 1.0 - x
    return (a + b) / b * betainc(a, b + 1.0, y) * beta(a, b + 1.0) - y ** a * x ** b / b


def _kernel_closed_form(H: float, t: np.ndarray, s: np.ndarray) -> np.ndarray:
    a = H - 0.5
    return kappa_h(H) * ((t / s) ** a * (t - s) ** a - a * s ** a * _inner_integral(H, s / t))


def volterra_kernel(H, t, s):
    """Kernel ``Z_H(t, s)`` mapping Brownian motion to fBm, for ``0 < s < t``.

    The inner integral ``∫_s^t u^{H-3/2}(u-s)^{H-1/2} du`` equals
    ``s^{2H-1}`` times an incomplete beta function, evaluated in closed form.
    Accepts scalars or broadcastable arrays.
    """
    Hp = as_hurst(H)
    t_arr = np.asarray(t, dtype=float)
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr <= 0) or np.any(s_arr >= t_arr):
        raise InvalidArgument("volterra_kernel needs 0 < s < t")
    if Hp.is_brownian:
        out = np.ones(np.broadcast(t_arr, s_arr).shape)
    else:
        out = _kernel_closed_form(Hp.H, t_arr, s_arr)
    return float(out) if out.ndim == 0 else out


def _first_cell_mean_square(H: float, k: np.ndarray, order: int = 40) -> np.ndarray:
    """``∫_0^1 Z_H(k, σ)^2 dσ`` for integer ``k >= 1`` (unit spacing).

    Gauss-Jacobi quadrature with weight ``σ^{1-2H}`` absorbs the endpoint
    singularity; k = 1 is exactly 1 (the full variance at the first node).
    """
    x, w = roots_jacobi(order, 0.0, 1.0 - 2.0 * H)
    sig = 0.5 * (1.0 + x)
    wt = w * 0.5 ** (2.0 - 2.0 * H)
    out = np.ones(k.shape)
    big = k >= 2
    kk = k[big][:, None].astype(float)
    z = _kernel_closed_form(H, kk, sig[None, :]) * sig[None, :] ** (H - 0.5)
    out[big] = (z ** 2) @ wt
    return out


def _weight_rows(H: float, grid: TimeGrid, rows: np.ndarray) -> np.ndarray:
    """Rows ``k`` of the discrete Volterra map; shape ``(len(rows), n)``.

    Entry ``[k, i]`` weights the increment on cell ``i`` in ``B^H(t_k)``:
    the kernel at the cell midpoint, except cell 0 which gets the RMS
    kernel value over the cell so the variance of that cell matches.
    """
    n = grid.n
    h = grid.step
    out = np.zeros((rows.size, n))
    if rows.size == 0:
        return out
    scale = h ** (H - 0.5)
    ii = np.arange(n) + 0.5
    for r, k in enumerate(rows):
        if k < 2:
            continue
        out[r, 1:k] = scale * _kernel_closed_form(H, float(k), ii[1:k])
    first = _first_cell_mean_square(H, np.maximum(rows, 1))
    out[:, 0] = np.where(rows >= 1, np.sqrt(first) * h ** H / np.sqrt(h), 0.0)
    return out


@lru_cache(maxsize=8)
def _cached_matrix(H: float, T: float, n: int) -> np.ndarray:
    from .grid import make_uniform_grid

    grid = make_uniform_grid(T, n)
    m = _weight_rows(H, grid, np.arange(n + 1))
    m.setflags(write=False)
    return m


def volterra_matrix(H, grid: TimeGrid) -> np.ndarray:
    """Full ``(n+1, n)`` Volterra weight matrix (cached for n <= 2048)."""
    Hp = as_hurst(H)
    if not grid.uniform:
        raise InvalidArgument("Volterra discretization needs a uniform grid")
    if Hp.is_brownian:
        return np.tril(np.ones((grid.n + 1, grid.n)), -1)
    if grid.n <= _CACHE_LIMIT_N:
        return _cached_matrix(Hp.H, grid.T, grid.n)
    return _weight_rows(Hp.H, grid, np.arange(grid.n + 1))


def volterra_image(dW: np.ndarray, H, grid: TimeGrid) -> np.ndarray:
    """fBm values at the nodes from Brownian increments.

    ``dW`` has shape ``(P, n, m)``; returns ``(P, n+1, m)``. At H = 1/2 the
    result is the cumulative sum, i.e. identical to W.
    """
    Hp = as_hurst(H)
    P, n, m = dW.shape
    if Hp.is_brownian:
        return cumulative(dW)
    out = np.empty((P, n + 1, m))
    if n <= _CACHE_LIMIT_N:
        M = volterra_matrix(Hp, grid)
        for j in range(m):
            out[:, :, j] = dW[:, :, j] @ M.T
        return out
    for k0 in range(0, n + 1, _ROW_BLOCK):
        rows = np.arange(k0, min(k0 + _ROW_BLOCK, n + 1))
        Mb = _weight_rows(Hp.H, grid, rows)
        for j in range(m):
            out[:, rows, j] = dW[:, :, j] @ Mb.T
    return out


def cumulative(dW: np.ndarray) -> np.ndarray:
    """Running sums with a leading zero along the time axis."""
    P, n, m = dW.shape
    out = np.zeros((P, n + 1, m))
    np.cumsum(dW, axis=1, out=out[:, 1:, :])
    return out


@dataclass
class DriverEnsemble:
    """Matched Brownian and fBm paths, arrays of shape ``(P, n+1, m)``."""

    grid: TimeGrid
    m: int
    W: np.ndarray = field(repr=False)
    BH: np.ndarray = field(repr=False)
    H: HurstParam
    seed: int | None
    path_count: int
    path_ids: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.W.shape != self.BH.shape or self.W.shape != (self.path_count, self.grid.n + 1, self.m):
            raise InvalidArgument("W and BH must both have shape (P, n+1, m)")
        if self.path_ids is None:
            self.path_ids = np.arange(self.path_count)

    @property
    def dW(self) -> np.ndarray:
        return np.diff(self.W, axis=1)

    @property
    def dBH(self) -> np.ndarray:
        return np.diff(self.BH, axis=1)

    def increments(self, regime: str) -> np.ndarray:
        return self.dW if regime == "brownian" else self.dBH

    def subset(self, idx) -> "DriverEnsemble":
        idx = np.atleast_1d(np.arange(self.path_count)[idx])
        return DriverEnsemble(self.grid, self.m, self.W[idx], self.BH[idx], self.H, self.seed, idx.size, self.path_ids[idx])

    def regenerate_bh(self, workers: int = 1, chunk_size: int = DEFAULT_CHUNK) -> np.ndarray:
        """fBm paths recomputed from the stored Brownian paths.

        Uses the same chunking as :func:`sample_joint`, so the result is
        bitwise equal to the stored ``BH`` of a generated ensemble.
        """
        return bh_from_w(self.W, self.H, self.grid, workers, chunk_size)

    def bumped(self, component: int, cell: int, eps: float) -> "DriverEnsemble":
        """Ensemble with the increment of ``component`` on ``cell`` shifted by ``eps``.

        The fBm paths move by ``eps`` times the corresponding column of the
        Volterra map, so W and B^H stay coupled.
        """
        W = self.W.copy()
        W[:, cell + 1 :, component] += eps
        BH = self.BH.copy()
        if self.H.is_brownian:
            BH[:, cell + 1 :, component] += eps
        else:
            col = volterra_column(self.H, self.grid, cell)
            BH[:, :, component] += eps * col
        return DriverEnsemble(self.grid, self.m, W, BH, self.H, self.seed, self.path_count, self.path_ids)

    def sample_path(self, path: int, kind: str = "BH", component: int = 0) -> SamplePath:
        arr = self.BH if kind == "BH" else self.W
        return SamplePath(self.grid, arr[path, :, component])

    def to_csv(self, directory) -> list:
        """Write one CSV per component and kind plus ``manifest.txt``."""
        os.makedirs(directory, exist_ok=True)
        written = []
        t = self.grid.nodes
        for kind, arr in (("W", self.W), ("BH", self.BH)):
            for j in range(self.m):
                fn = os.path.join(directory, f"{kind}_{j + 1}.csv")
                with open(fn, "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["path_id", "t", "value"])
                    for p in range(self.path_count):
                        pid = int(self.path_ids[p])
                        for k in range(self.grid.n + 1):
                            w.writerow([pid, f"{t[k]:.17g}", f"{arr[p, k, j]:.17g}"])
                written.append(fn)
        fn = os.path.join(directory, "manifest.txt")
        with open(fn, "w") as fh:
            fh.write(f"H={self.H.H!r}\nT={self.grid.T!r}\nn={self.grid.n}\nm={self.m}\nseed={self.seed}\npath_count={self.path_count}\n")
        written.append(fn)
        return written


def volterra_column(H, grid: TimeGrid, cell: int) -> np.ndarray:
    """Column ``cell`` of the Volterra map: response of B^H at all nodes."""
    Hp = as_hurst(H)
    if grid.n <= _CACHE_LIMIT_N:
        return np.asarray(volterra_matrix(Hp, grid)[:, cell])
    return _weight_rows(Hp.H, grid, np.arange(grid.n + 1))[:, cell]


def brownian_increments(grid: TimeGrid, m: int, path_ids, seed: int, stream: int = W_STREAM) -> np.ndarray:
    """Increments of shape ``(len(path_ids), n, m)``, one Philox stream per path."""
    sq = np.sqrt(grid.steps)[:, None]
    out = np.empty((len(path_ids), grid.n, m))
    for r, pid in enumerate(path_ids):
        out[r] = path_rng(seed, pid, stream).standard_normal((grid.n, m)) * sq
    return out


def sample_joint(H, grid: TimeGrid, m: int, path_count: int, seed: int, workers: int = 1, chunk_size: int = DEFAULT_CHUNK) -> DriverEnsemble:
    """Matched Brownian and fBm ensembles built from the same increments.

    ``W`` is the running sum of independent N(0, step) increments. ``B^H``
    applies the discrete Volterra map (midpoint kernel values, RMS weight on
    the first cell). At H = 1/2 the fBm array is the Brownian array itself.
    """
    Hp = as_hurst(H)
    if path_count < 1 or m < 1:
        raise InvalidArgument("need path_count >= 1 and m >= 1")
    if not grid.uniform:
        raise InvalidArgument("path generation needs a uniform grid")
    if not Hp.is_brownian and grid.n <= _CACHE_LIMIT_N:
        volterra_matrix(Hp, grid)  # build the cache once, outside the workers

    def fn(a, b):
        return cumulative(brownian_increments(grid, m, range(a, b), seed))

    W = np.concatenate(map_chunks(fn, path_count, workers, chunk_size), axis=0)
    BH = bh_from_w(W, Hp, grid, workers, chunk_size)
    return DriverEnsemble(grid, m, W, BH, Hp, seed, path_count)


def bh_from_w(W: np.ndarray, H, grid: TimeGrid, workers: int = 1, chunk_size: int = DEFAULT_CHUNK) -> np.ndarray:
    """Volterra image of stored Brownian paths ``(P, n+1, m)``, chunk by chunk."""
    Hp = as_hurst(H)
    if Hp.is_brownian:
        return W

    def fn(a, b):
        return volterra_image(np.diff(W[a:b], axis=1), Hp, grid)

    return np.concatenate(map_chunks(fn, W.shape[0], workers, chunk_size), axis=0)


@dataclass
class FbmEnsemble:
    """fBm paths ``(P, n+1, m)`` without a Brownian companion."""

    grid: TimeGrid
    BH: np.ndarray = field(repr=False)
    H: HurstParam
    seed: int | None
    jitter: float = 0.0

    @property
    def path_count(self) -> int:
        return self.BH.shape[0]


def fbm_covariance(H: float, t, s):
    """``½(t^{2H} + s^{2H} - |t-s|^{2H})``."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    return 0.5 * (t ** (2 * H) + s ** (2 * H) - np.abs(t - s) ** (2 * H))


def cholesky_fbm_oracle(H, grid: TimeGrid, path_count: int, seed: int, m: int = 1, workers: int = 1, chunk_size: int = DEFAULT_CHUNK) -> FbmEnsemble:
    """Exact-covariance fBm by dense Cholesky factorization (n <= 2048).

    Uses an RNG stream independent of :func:`sample_joint`. If the
    factorization fails, diagonal jitter 1e-12 is added and recorded.
    """
    Hp = as_hurst(H)
    n = grid.n
    if n > 2048:
        raise InvalidArgument("Cholesky oracle is limited to n <= 2048")
    t = grid.nodes[1:]
    C = fbm_covariance(Hp.H, t[:, None], t[None, :])
    jitter = 0.0
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        jitter = 1e-12
        L = np.linalg.cholesky(C + jitter * np.eye(n))

    def fn(a, b):
        out = np.zeros((b - a, n + 1, m))
        for r, pid in enumerate(range(a, b)):
            z = path_rng(seed, pid, CHOLESKY_STREAM).standard_normal((n, m))
            out[r, 1:, :] = L @ z
        return out

    BH = np.concatenate(map_chunks(fn, path_count, workers, chunk_size), axis=0)
    return FbmEnsemble(grid, BH, Hp, seed, jitter)


def empirical_covariance(ensemble, component, t: float, s: float, kind: str = "BH"):
    """Sample ``E[X_i(t) X_j(s)]`` with its jackknife standard error.

    ``component`` is an index ``i`` (same component at both times) or a
    pair ``(i, j)``. For a sample mean the jackknife error is the sample
    standard deviation over ``sqrt(count)``.
    """
    grid = ensemble.grid
    kt, ks = grid.index_of(t), grid.index_of(s)
    arr = ensemble.BH if kind == "BH" else ensemble.W
    i, j = (component, component) if np.isscalar(component) else component
    prod = arr[:, kt, i] * arr[:, ks, j]
    P = prod.size
    est = float(prod.mean())
    if P < 2:
        return est, 0.0
    loo = (prod.sum() - prod) / (P - 1)
    se = float(np.sqrt((P - 1) / P * np.sum((loo - loo.mean()) ** 2)))
    return est, se
