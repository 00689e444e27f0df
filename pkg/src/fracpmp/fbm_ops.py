"""Transfer operators between Brownian and fractional integrals, and Malliavin numerics.

Conventions
-----------
``a = H - 1/2`` throughout. Operators that differentiate a product-integrated
antiderivative produce *cell averages* (one value per grid interval); such
outputs carry them in ``SamplePath.cells`` and the consumers integrate their
kernels exactly against that piecewise-constant data. Malliavin derivatives
obtained by bumping the increment of cell ``k`` are likewise cell data.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import beta, gamma, roots_jacobi

from .errors import DivergenceError, InvalidArgument, UnsupportedError
from .fbm import DriverEnsemble, HurstParam, as_hurst
from .frac import RIGHT, frac_integral_array
from .grid import SamplePath, TimeGrid

BROWNIAN = "brownian"
FBM_FRECHET = "fbm-frechet"
FBM_PHI = "fbm-phi"


def _require_fractional(Hp: HurstParam, what: str):
    if Hp.is_brownian:
        raise UnsupportedError(f"{what} is undefined at H = 1/2 (phi vanishes); use the Brownian machinery")


# ---------------------------------------------------------------------------
# kernel matrices on uniform grids


def _right_cell_matrix(n: int, h: float, beta: float) -> np.ndarray:
    """``R[k, i] = ∫_{t_i}^{t_{i+1}} (u - t_k)^{β-1} du`` for ``i >= k``, else 0."""
    d = np.arange(n)[None, :] - np.arange(n + 1)[:, None]
    dd = np.clip(d, 0, None).astype(float)
    R = h ** beta * ((dd + 1.0) ** beta - dd ** beta) / beta
    R[d < 0] = 0.0
    return R


def _abs_cell_matrix(n: int, h: float, gam: float) -> np.ndarray:
    """``K[k, i] = ∫_{t_i}^{t_{i+1}} |t_k - s|^{γ-1} ds`` (γ in (0, 1])."""
    d = np.arange(n)[None, :] - np.arange(n + 1)[:, None]
    right = np.clip(d, 0, None).astype(float)
    left = np.clip(-d - 1, 0, None).astype(float)
    lag = np.where(d >= 0, right, left)
    return h ** gam * ((lag + 1.0) ** gam - lag ** gam) / gam


def _cell_mean_power(nodes: np.ndarray, p: float) -> np.ndarray:
    """Average of ``t^p`` over each cell (``p > -1``)."""
    t0, t1 = nodes[:-1], nodes[1:]
    return (t1 ** (p + 1) - t0 ** (p + 1)) / ((p + 1) * (t1 - t0))


def integrate_singular(regular: np.ndarray, nodes: np.ndarray, exponent: float) -> np.ndarray:
    """``∫_0^T t^{-exponent} g(t) dt`` for nodal ``g`` (time on the last axis).

    ``g`` is interpolated linearly; the weight is integrated exactly per cell.
    """
    t0, t1 = nodes[:-1], nodes[1:]
    h = t1 - t0
    q = 1.0 - exponent
    m0 = (t1 ** q - t0 ** q) / q
    m1 = (t1 ** (q + 1) - t0 ** (q + 1)) / (q + 1)
    wr = (m1 - t0 * m0) / h
    wl = m0 - wr
    return regular[..., :-1] @ wl + regular[..., 1:] @ wr


# ---------------------------------------------------------------------------
# phi kernel


@dataclass(frozen=True)
class PhiKernel:
    """``φ(s) = H(2H-1)|s|^{2H-2}`` and the transform constant ``c_{1,H}``."""

    H: HurstParam

    def __post_init__(self):
        _require_fractional(self.H, "phi kernel")

    def __call__(self, s):
        H = self.H.H
        return H * (2 * H - 1) * np.abs(np.asarray(s, dtype=float)) ** (2 * H - 2)

    @property
    def c1(self) -> float:
        """``-2H^2(2H-1) κ₁/κ_H`` with the inverse-consistent ``κ₁``."""
        H = self.H.H
        return -2 * H * H * (2 * H - 1) * self.H.kappa_1_inverse / self.H.kappa_H

    def phi1(self, s, t):
        H = self.H.H
        s = np.asarray(s, dtype=float)
        return self.c1 * s ** (0.5 - H) * np.abs(np.asarray(t, dtype=float) - s) ** (2 * H - 2)

    def double_integral(self, f_cells: np.ndarray, g_cells: np.ndarray, grid: TimeGrid) -> float:
        """``∫∫ f(s) g(t) φ(s-t) ds dt`` for piecewise-constant ``f`` and ``g``.

        The kernel is integrated exactly over every pair of cells, including
        the singular diagonal ones.
        """
        H = self.H.H
        x = grid.nodes
        big = lambda z: np.abs(z) ** (2 * H)  # second antiderivative of φ is |z|^{2H}/2
        X1, X0 = x[1:, None], x[:-1, None]
        Y1, Y0 = x[None, 1:], x[None, :-1]
        K = 0.5 * (big(X1 - Y0) + big(X0 - Y1) - big(X1 - Y1) - big(X0 - Y0))
        return float(np.asarray(f_cells) @ K @ np.asarray(g_cells))


# ---------------------------------------------------------------------------
# Γ* and B*


def _cells_or_nodes(f: SamplePath):
    return f.cells


def gamma_star(f: SamplePath, H, T: float | None = None) -> SamplePath:
    """Operator ``Γ*`` with ``∫ f dB^H = ∫ (Γ* f) dW`` for deterministic ``f``.

    ``(Γ*f)(t) = (H-1/2) κ_H t^{1/2-H} ∫_t^T u^{H-1/2}(u-t)^{H-3/2} f(u) du``.

    The integral is a right Riemann-Liouville integral of order ``H - 1/2``
    of ``u^{H-1/2} f``; product weights are exact for piecewise-linear data,
    or for piecewise-constant data when ``f.cells`` is present. The
    regular factor ``t^{H-1/2} Γ*f(t)`` is returned in ``meta["regular"]``;
    the value at t = 0 is the first-cell average of the ``t^{1/2-H}`` blow-up.
    At H = 1/2 the operator is the identity.
    """
    Hp = as_hurst(H)
    _check_horizon(f.grid, T)
    if Hp.is_brownian:
        return SamplePath(f.grid, f.values.copy(), None if f.cells is None else f.cells.copy(), {"regular": f.values.copy(), "exponent": 0.0})
    a = Hp.H - 0.5
    grid = f.grid
    h = grid.step
    t = grid.nodes
    const = Hp.kappa_H * gamma(Hp.H + 0.5)
    if f.cells is not None:
        # Cell data from B* carries a (T-u)^{-a} endpoint profile that piecewise
        # constants cannot resolve. Split off that profile, matched to the last
        # cell, and integrate it exactly; the remainder is treated as constant per cell.
        T_end = grid.T
        lead = f.cells[-1] * (1.0 - a) * h ** a
        prof = ((T_end - t[:-1]) ** (1 - a) - (T_end - t[1:]) ** (1 - a)) / ((1 - a) * h)
        rest = f.cells - prof[:, None] * lead[None, :]
        g = grid.midpoints[:, None] ** a * rest
        # B* output also blows up like u^{-a} at 0, where u^a D(u) is then flat
        g[0] = (1.0 - a) * h ** a * rest[0]
        R = _right_cell_matrix(grid.n, h, a)
        regular = const * ((R @ g) / gamma(a) + _endpoint_profile_integral(t, T_end, a)[:, None] * lead[None, :])
    else:
        g = t[:, None] ** a * f.values
        regular = const * frac_integral_array(g, h, a, RIGHT)
    vals = np.empty_like(regular)
    vals[1:] = regular[1:] * t[1:, None] ** (-a)
    # first-cell average of t^{-a} times the linear interpolant of the regular factor
    vals[0] = h ** (-a) * (regular[0] * (1.0 / (1.0 - a) - 1.0 / (2.0 - a)) + regular[1] / (2.0 - a))
    return SamplePath(grid, vals, meta={"regular": regular, "exponent": a})


def _endpoint_profile_integral(t: np.ndarray, T: float, a: float, order: int = 24) -> np.ndarray:
    """``(1/Γ(a)) ∫_t^T u^a (u-t)^{a-1} (T-u)^{-a} du`` at every node, by Gauss-Jacobi."""
    with np.errstate(invalid="ignore", divide="ignore"):  # benign 0/0 at exponent sum -1
        x, w = roots_jacobi(order, -a, a - 1.0)
    y = 0.5 * (1.0 + x)  # the exponents sum to -1, so the rescaled weights are unchanged
    u = t[:, None] + (T - t[:, None]) * y[None, :]
    out = (u ** a) @ w / gamma(a)
    out[t == 0] = T ** a * beta(2 * a, 1 - a) / gamma(a)  # u^a is not smooth at u = 0
    return out


def gamma_star_energy(f: SamplePath, H) -> float:
    """``∫_0^T (Γ*f)(t)^2 dt`` with the ``t^{1-2H}`` factor integrated exactly."""
    Hp = as_hurst(H)
    gs = gamma_star(f, Hp)
    reg = gs.meta["regular"]
    return float(np.sum(integrate_singular((reg ** 2).T, f.grid.nodes, 2 * gs.meta["exponent"])))


def gamma_star_pairing(f: SamplePath, g: SamplePath, H) -> float:
    """``∫_0^T (Γ*f)(t) g(t) dt`` summed over components."""
    Hp = as_hurst(H)
    gs = gamma_star(f, Hp)
    reg = gs.meta["regular"]
    return float(np.sum(integrate_singular((reg * g.values).T, f.grid.nodes, gs.meta["exponent"])))


def _check_horizon(grid: TimeGrid, T):
    if T is not None and abs(T - grid.T) > 1e-12 * max(1.0, grid.T):
        raise InvalidArgument("operator horizon must equal the grid horizon")


def _bstar_cells_from_nodes(values: np.ndarray, Hp: HurstParam, grid: TimeGrid) -> np.ndarray:
    a = Hp.H - 0.5
    h = grid.step
    t = grid.nodes
    g = t[:, None] ** a * values
    A = gamma(1.0 - a) * frac_integral_array(g, h, 1.0 - a, RIGHT)
    return _bstar_finish(A, Hp, grid)


def _bstar_finish(A: np.ndarray, Hp: HurstParam, grid: TimeGrid) -> np.ndarray:
    """Cell averages ``-C <t^{-a}> (A_{i+1} - A_i)/h`` from nodal antiderivative ``A``.

    ``A`` has time on axis 0 (``(n+1, ...)``) or on axis 1 for batches.
    """
    a = Hp.H - 0.5
    C = 2 * Hp.H * Hp.kappa_1_inverse / Hp.kappa_H
    w = _cell_mean_power(grid.nodes, -a)
    dA = np.diff(A, axis=0) / grid.step
    return -C * w.reshape((-1,) + (1,) * (dA.ndim - 1)) * dA


def _cells_to_nodes(cells: np.ndarray, grid: TimeGrid, last_zero: bool = True) -> np.ndarray:
    """Nodal values from cell averages: mean of neighbours inside, edge cells at the ends."""
    n = grid.n
    out = np.empty((n + 1,) + cells.shape[1:])
    out[1:n] = 0.5 * (cells[1:] + cells[:-1])
    out[0] = cells[0]
    out[n] = 0.0 if last_zero else cells[-1]
    return out


def b_star(f: SamplePath, H, T: float | None = None) -> SamplePath:
    """Operator ``B*`` with ``∫ f dW = ∫ (B* f) dB^H``; inverse of :func:`gamma_star`.

    ``(B*f)(t) = -(2Hκ₁/κ_H) t^{1/2-H} d/dt ∫_t^T (u-t)^{1/2-H} u^{H-1/2} f(u) du``
    with ``κ₁ = 1/(2H Γ(H+1/2) Γ(3/2-H))``.

    The inner integral is product-integrated at the nodes and differenced
    across each cell, which yields exact cell averages of the derivative
    (``cells``). Nodal values are central differences; the value at ``T``
    is reported as 0. Identity at H = 1/2.
    """
    Hp = as_hurst(H)
    _check_horizon(f.grid, T)
    if Hp.is_brownian:
        return SamplePath(f.grid, f.values.copy(), None if f.cells is None else f.cells.copy())
    grid = f.grid
    if f.cells is not None:
        cells = _bstar_cells_from_cells(f.cells[None], Hp, grid)[0]
    else:
        cells = _bstar_cells_from_nodes(f.values, Hp, grid)
    return SamplePath(grid, _cells_to_nodes(cells, grid), cells, {"op": "b_star"})


def _bstar_cells_from_cells(D: np.ndarray, Hp: HurstParam, grid: TimeGrid) -> np.ndarray:
    """Batched ``B*`` of piecewise-constant data ``D`` with shape ``(P, n, ...)``."""
    a = Hp.H - 0.5
    R = _right_cell_matrix(grid.n, grid.step, 1.0 - a)
    mids = grid.midpoints ** a
    # first cell: the cell value is read as the RMS of a c*u^{-a} profile, which
    # is how the Volterra generator weights that cell, so u^a D(u) = c there
    mids[0] = np.sqrt(1.0 - 2.0 * a) * grid.step ** a
    shape = D.shape
    g = (D * mids.reshape((1, -1) + (1,) * (D.ndim - 2))).reshape(shape[0], shape[1], -1)
    A = np.einsum("ki,pir->kpr", R, g)  # (n+1, P, r)
    cells = _bstar_finish(A, Hp, grid)  # (n, P, r)
    return np.moveaxis(cells, 0, 1).reshape(shape)


# ---------------------------------------------------------------------------
# Malliavin fields


@dataclass
class MalliavinField:
    """Malliavin derivative of a per-path functional with respect to one driver.

    ``values`` has shape ``(P, n+1, ...)``: node ``k < n`` holds the
    derivative associated with the increment on ``[t_k, t_{k+1}]`` (for
    ``kind="brownian"``) and the last node repeats the last cell. ``cells``
    holds the per-cell data ``(P, n, ...)`` when the field is cell based.
    """

    grid: TimeGrid
    component: int
    values: np.ndarray = field(repr=False)
    kind: str
    bump_size: float | None
    cells: np.ndarray | None = field(default=None, repr=False)
    H: float | None = None

    def __post_init__(self):
        if self.kind not in (BROWNIAN, FBM_FRECHET, FBM_PHI):
            raise InvalidArgument(f"unknown field kind {self.kind!r}")
        if self.kind == FBM_PHI and self.H is not None and self.H <= 0.5:
            raise InvalidArgument("fbm-phi fields need H > 1/2")

    def to_csv(self, directory, name="field"):
        os.makedirs(directory, exist_ok=True)
        fn = os.path.join(directory, f"{name}.csv")
        s = self.grid.nodes
        vals = self.values.reshape(self.values.shape[0], self.values.shape[1], -1)
        with open(fn, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "s", "value"] if vals.shape[2] == 1 else ["path_id", "s"] + [f"value{j + 1}" for j in range(vals.shape[2])])
            for p in range(vals.shape[0]):
                for k in range(vals.shape[1]):
                    w.writerow([p, f"{s[k]:.17g}"] + [f"{v:.17g}" for v in vals[p, k]])
        with open(os.path.join(directory, f"{name}_manifest.txt"), "w") as fh:
            fh.write(f"kind={self.kind}\nbump_size={self.bump_size!r}\nH={self.H!r}\ncomponent={self.component}\n")
        return fn


def default_bump(grid: TimeGrid) -> float:
    return 1e-4 * np.sqrt(grid.step)


def malliavin_brownian(F, paths: DriverEnsemble, l: int, bump: float | None = None, restart=None, cells=None) -> MalliavinField:
    """Finite-difference Malliavin derivative ``D^l F`` with respect to ``W_l``.

    For each cell ``k`` the increment ``ΔW_{l,k}`` of every path is shifted by
    ``±ε`` (fBm paths follow through the Volterra coupling) and
    ``(F(+ε) - F(-ε)) / 2ε`` is recorded. This is the derivative against the
    indicator of the cell, i.e. the cell average of ``D_s F``.

    Parameters
    ----------
    F : callable
        ``F(ensemble) -> array (P, ...)``.
    restart : callable, optional
        ``restart(ensemble, k) -> array (P, ...)``; same value as ``F`` but
        allowed to skip work that does not depend on cells ``>= k``.
    cells : iterable of int, optional
        Restrict the bumps to these cells (others are left at zero).
    """
    if not 0 <= l < paths.m:
        raise InvalidArgument(f"driver component {l} out of range")
    grid = paths.grid
    eps = default_bump(grid) if bump is None else float(bump)
    if eps <= 0:
        raise InvalidArgument("bump size must be positive")
    ev = restart if restart is not None else (lambda ens, k: F(ens))
    base_shape = None
    out = None
    for k in (range(grid.n) if cells is None else cells):
        fp = np.asarray(ev(paths.bumped(l, k, eps), k), dtype=float)
        fm = np.asarray(ev(paths.bumped(l, k, -eps), k), dtype=float)
        d = (fp - fm) / (2 * eps)
        if out is None:
            base_shape = d.shape
            out = np.zeros((base_shape[0], grid.n) + base_shape[1:])
        bad = ~np.isfinite(d.reshape(d.shape[0], -1)).all(axis=1)
        if bad.any():
            raise DivergenceError(f"non-finite perturbed functional on path {int(paths.path_ids[np.argmax(bad)])}", step=k, path=int(np.argmax(bad)))
        out[:, k] = d
    values = np.concatenate([out, out[:, -1:]], axis=1)
    return MalliavinField(grid, l, values, BROWNIAN, eps, cells=out, H=paths.H.H)


def transform_cells(D: np.ndarray, H, grid: TimeGrid):
    """``(D^H F cells, 𝔻F nodes)`` from Brownian cell derivatives ``D (P, n, ...)``."""
    Hp = as_hurst(H)
    _require_fractional(Hp, "fBm Malliavin transforms")
    dh = _bstar_cells_from_cells(D, Hp, grid)
    K = _abs_cell_matrix(grid.n, grid.step, 2 * Hp.H - 1)
    c = Hp.H * (2 * Hp.H - 1)
    flat = dh.reshape(dh.shape[0], dh.shape[1], -1)
    phi = c * np.einsum("ki,pir->pkr", K, flat).reshape((dh.shape[0], grid.n + 1) + dh.shape[2:])
    return dh, phi


def malliavin_transforms(DF: MalliavinField, H=None):
    """Fractional derivatives ``D^H F`` and ``𝔻F`` from a Brownian field.

    ``D^{H,l}_s F`` is ``B*`` applied to ``s ↦ D^l_s F`` (cell averages).
    ``𝔻^l_t F = ∫ φ(t-s) D^{H,l}_s F ds`` is evaluated at every node with
    the ``|t-s|^{2H-2}`` kernel integrated exactly per cell, which is the
    kernel form with constant ``c_{1,H}``.
    """
    if DF.kind != BROWNIAN:
        raise InvalidArgument("malliavin_transforms expects a Brownian field")
    Hp = as_hurst(DF.H if H is None else H)
    _require_fractional(Hp, "fBm Malliavin transforms")
    D = DF.cells if DF.cells is not None else DF.values[:, :-1]
    dh, phi = transform_cells(D, Hp, DF.grid)
    dh_nodes = np.stack([_cells_to_nodes(c, DF.grid) for c in dh]) if dh.ndim == 2 else np.stack([_cells_to_nodes(c, DF.grid) for c in dh])
    f1 = MalliavinField(DF.grid, DF.component, dh_nodes, FBM_FRECHET, DF.bump_size, cells=dh, H=Hp.H)
    f2 = MalliavinField(DF.grid, DF.component, phi, FBM_PHI, DF.bump_size, H=Hp.H)
    return f1, f2


# ---------------------------------------------------------------------------
# duality and the pathwise/divergence correction


def pathwise_integral(psi: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Trapezoid Stieltjes sums ``Σ ½(ψ_k + ψ_{k+1})(x_{k+1} - x_k)`` along axis 1.

    For piecewise-linear interpolants this is their exact Young integral.
    """
    dx = np.diff(x, axis=1)
    return np.sum(0.5 * (psi[:, 1:] + psi[:, :-1]) * dx, axis=1)


def _interval_mask(grid: TimeGrid, a: float, b: float):
    ka, kb = grid.index_of(a), grid.index_of(b)
    if ka >= kb:
        raise InvalidArgument("need a < b on the grid")
    return ka, kb


def _trapz_nodes(y: np.ndarray, grid: TimeGrid, ka: int, kb: int) -> np.ndarray:
    dt = np.diff(grid.nodes[ka : kb + 1])
    seg = y[..., ka : kb + 1]
    return np.sum(0.5 * (seg[..., 1:] + seg[..., :-1]) * dt, axis=-1)


def strat_to_divergence(psi, paths: DriverEnsemble, j: int, a: float, b: float, chunk: int = 128, bump: float | None = None) -> np.ndarray:
    """Per-path trace ``∫_a^b 𝔻^j_t ψ(t) dt`` (pathwise minus divergence integral).

    Parameters
    ----------
    psi : array or callable
        Deterministic values ``(n+1,)`` (correction is zero) or a callable
        ``psi(ensemble) -> (P, n+1)`` evaluated on perturbed drivers.
    """
    grid = paths.grid
    ka, kb = _interval_mask(grid, a, b)
    if not callable(psi):
        psi = np.asarray(psi, dtype=float)
        if psi.ndim == 1 or psi.shape[0] == 1:
            return np.zeros(paths.path_count)
        raise InvalidArgument("random integrands must be given as a callable of the ensemble")
    _require_fractional(paths.H, "divergence correction")
    out = np.empty(paths.path_count)
    for s0 in range(0, paths.path_count, chunk):
        sub = paths.subset(slice(s0, min(s0 + chunk, paths.path_count)))
        DF = malliavin_brownian(psi, sub, j, bump)  # cells (Pc, n, n+1): D_{cell r} ψ(t)
        D = np.moveaxis(DF.cells, 2, 1)  # (Pc, n+1 [t], n [r])
        Pc = D.shape[0]
        _, phi = transform_cells(D.reshape(Pc * (grid.n + 1), grid.n), paths.H, grid)
        phi = phi.reshape(Pc, grid.n + 1, grid.n + 1)  # [path, t, s]
        diag = np.einsum("ptt->pt", phi)
        out[s0 : s0 + Pc] = _trapz_nodes(diag, grid, ka, kb)
    return out


@dataclass
class DualityResult:
    lhs: float
    rhs: float
    lhs_stderr: float
    rhs_stderr: float
    meta: dict = field(default_factory=dict)

    @property
    def joint_stderr(self) -> float:
        return float(np.hypot(self.lhs_stderr, self.rhs_stderr))


def duality_check(F, psi, paths: DriverEnsemble, j: int, a: float, b: float, variant: str = "divergence", bump: float | None = None, chunk: int = 128) -> DualityResult:
    """Both sides of the fBm duality formula on an ensemble.

    ``variant="divergence"``: ``E[F ∫_a^b ψ dB^H] = ∫_a^b E[𝔻_t F ψ_t] dt``,
    with the divergence integral realized as pathwise integral minus the
    trace correction. ``variant="pathwise"``: ``E[F ∫ ψ d°B^H] = ∫ E[𝔻_t(Fψ_t)] dt``.

    ``F`` is a callable ``F(ensemble) -> (P,)``; ``psi`` is deterministic
    ``(n+1,)`` or a callable ``psi(ensemble) -> (P, n+1)``.
    """
    _require_fractional(paths.H, "duality formula")
    grid = paths.grid
    ka, kb = _interval_mask(grid, a, b)
    P = paths.path_count
    Fv = np.asarray(F(paths), dtype=float)
    psiv = np.broadcast_to(np.asarray(psi(paths) if callable(psi) else psi, dtype=float), (P, grid.n + 1))
    x = paths.BH[:, ka : kb + 1, j]
    pw = pathwise_integral(psiv[:, ka : kb + 1], x)
    if variant == "divergence":
        corr = strat_to_divergence(psi, paths, j, a, b, chunk, bump) if callable(psi) else np.zeros(P)
        lhs_s = Fv * (pw - corr)
        DF = malliavin_brownian(F, paths, j, bump)
        _, phi = transform_cells(DF.cells, paths.H, grid)
        rhs_s = _trapz_nodes(phi * psiv, grid, ka, kb)
    elif variant == "pathwise":
        lhs_s = Fv * pw
        rhs_s = np.empty(P)
        prod = lambda ens: np.asarray(F(ens), dtype=float)[:, None] * np.broadcast_to(np.asarray(psi(ens) if callable(psi) else psi, dtype=float), (ens.path_count, grid.n + 1))
        for s0 in range(0, P, chunk):
            sub = paths.subset(slice(s0, min(s0 + chunk, P)))
            DF = malliavin_brownian(prod, sub, j, bump)
            D = np.moveaxis(DF.cells, 2, 1)
            Pc = D.shape[0]
            _, phi = transform_cells(D.reshape(Pc * (grid.n + 1), grid.n), paths.H, grid)
            diag = np.einsum("ptt->pt", phi.reshape(Pc, grid.n + 1, grid.n + 1))
            rhs_s[s0 : s0 + Pc] = _trapz_nodes(diag, grid, ka, kb)
    else:
        raise InvalidArgument(f"unknown variant {variant!r}")
    se = lambda v: float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return DualityResult(float(lhs_s.mean()), float(rhs_s.mean()), se(lhs_s), se(rhs_s), {"variant": variant})
