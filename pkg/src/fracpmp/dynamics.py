"""Controlled SDEs driven by Brownian motion or fBm, linearizations and presets.

Array layouts used throughout (``P`` paths, ``n`` steps):

* state ``x``: ``(P, n+1, nx)``
* control values: ``(1, n+1, d)`` for deterministic controls or ``(P, n+1, d)``
* ``b_x``: ``(P, nx, nx)``; ``b_u``: ``(P, nx, d)``
* ``sigma``: ``(P, nx, m)``; ``sigma_x``: ``(P, m, nx, nx)``; ``sigma_u``: ``(P, m, nx, d)``

Both regimes use left-point Euler steps. In the Brownian regime this is
Euler-Maruyama (Itô); in the fBm regime it is the left-point Young sum of
the pathwise integral.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, IllConditioned, InvalidArgument
from .fbm import DriverEnsemble
from .grid import SamplePath, TimeGrid, holder_seminorm_array
from .mc import map_chunks

BROWNIAN = "brownian"
FBM = "fbm"
REGIMES = (BROWNIAN, FBM)


def _regime(regime: str) -> str:
    if regime in ("classical", "brownian", "brownian-ito"):
        return BROWNIAN
    if regime in ("fbm", "fbm-pathwise"):
        return FBM
    raise InvalidArgument(f"unknown regime {regime!r}")


# ---------------------------------------------------------------------------
# systems


@dataclass
class ControlSystem:
    """Coefficients of ``dx = b dt + Σ_j σ^j dZ_j`` and the cost ``∫ l dt + h(x_T)``.

    Every callback takes ``(t, x, u)`` with ``x`` of shape ``(P, nx)`` and
    ``u`` of shape ``(P, d)`` and is vectorized over the leading axis;
    ``h`` and ``h_x`` take ``x`` only. Second derivatives of ``σ`` are
    optional and used only by :meth:`check_hypotheses`.
    """

    name: str
    nx: int
    d: int
    m: int
    x0: np.ndarray
    b: object
    sigma: object
    l: object
    h: object
    b_x: object
    b_u: object
    sigma_x: object
    sigma_u: object
    l_x: object
    l_u: object
    h_x: object
    sigma_xx: object = None
    sigma_uu: object = None
    sigma_xu: object = None
    sigma_control_free: bool = False
    holder_time: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(self.nx)

    def check_derivatives(self, seed: int = 0, probes: int = 8, rtol: float = 1e-5, warn: bool = True) -> dict:
        """Compare derivative callbacks with central differences at random probes.

        Returns the worst relative discrepancy per callback. Discrepancies
        above ``rtol`` produce a warning (never an exception).
        """
        rng = np.random.default_rng(seed)
        t = float(rng.uniform(0, 1))
        x = rng.normal(size=(probes, self.nx))
        u = rng.normal(size=(probes, self.d))
        eps = 1e-6
        out = {}

        def rel(a, b):
            scale = max(1.0, float(np.max(np.abs(b))))
            return float(np.max(np.abs(a - b))) / scale

        def fd(fun, wrt, size):
            cols = []
            for i in range(size):
                e = np.zeros(size)
                e[i] = eps
                if wrt == "x":
                    cols.append((fun(t, x + e, u) - fun(t, x - e, u)) / (2 * eps))
                else:
                    cols.append((fun(t, x, u + e) - fun(t, x, u - e)) / (2 * eps))
            return np.stack(cols, axis=-1)

        out["b_x"] = rel(self.b_x(t, x, u), fd(self.b, "x", self.nx))
        out["b_u"] = rel(self.b_u(t, x, u), fd(self.b, "u", self.d))
        sx = np.moveaxis(fd(self.sigma, "x", self.nx), 2, 1)  # (P, m, nx, nx)
        su = np.moveaxis(fd(self.sigma, "u", self.d), 2, 1)
        out["sigma_x"] = rel(self.sigma_x(t, x, u), sx)
        out["sigma_u"] = rel(self.sigma_u(t, x, u), su)
        out["l_x"] = rel(self.l_x(t, x, u), fd(self.l, "x", self.nx))
        out["l_u"] = rel(self.l_u(t, x, u), fd(self.l, "u", self.d))
        hx = np.stack([(self.h(x + e) - self.h(x - e)) / (2 * eps) for e in np.eye(self.nx) * eps], axis=-1)
        out["h_x"] = rel(self.h_x(x), hx)
        bad = {k: v for k, v in out.items() if v > rtol}
        if bad and warn:
            warnings.warn(f"{self.name}: derivative callbacks disagree with finite differences: {bad}", RuntimeWarning, stacklevel=2)
        return out

    def check_hypotheses(self, seed: int = 0, probes: int = 8, rtol: float = 1e-4) -> dict:
        """Runtime probes of the smoothness hypotheses (warn, never fail).

        First derivatives are checked against differences of the values and
        the optional second derivatives of ``σ`` against differences of
        ``sigma_x`` and ``sigma_u``.
        """
        report = self.check_derivatives(seed, probes, warn=False)
        rng = np.random.default_rng(seed + 1)
        t = float(rng.uniform(0, 1))
        x = rng.normal(size=(probes, self.nx))
        u = rng.normal(size=(probes, self.d))
        eps = 1e-5
        for name, fun, base, n_dir, wrt in (
            ("sigma_xx", self.sigma_xx, self.sigma_x, self.nx, "x"),
            ("sigma_uu", self.sigma_uu, self.sigma_u, self.d, "u"),
            ("sigma_xu", self.sigma_xu, self.sigma_x, self.d, "u"),
        ):
            if fun is None:
                continue
            cols = []
            for i in range(n_dir):
                e = np.zeros(n_dir)
                e[i] = eps
                if wrt == "x":
                    cols.append((base(t, x + e, u) - base(t, x - e, u)) / (2 * eps))
                else:
                    cols.append((base(t, x, u + e) - base(t, x, u - e)) / (2 * eps))
            ref = np.stack(cols, axis=-1)
            got = fun(t, x, u)
            report[name] = float(np.max(np.abs(got - ref))) / max(1.0, float(np.max(np.abs(ref))))
        bad = {k: v for k, v in report.items() if v > rtol}
        if bad:
            warnings.warn(f"{self.name}: hypothesis self-check flagged {bad}", RuntimeWarning, stacklevel=2)
        return report


# ---------------------------------------------------------------------------
# controls


@dataclass
class ControlProcess:
    """Control values on the grid, deterministic ``(1, n+1, d)`` or per path ``(P, n+1, d)``."""

    grid: TimeGrid
    values: np.ndarray
    adapted: object = "full"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[None, :, None]
        elif v.ndim == 2:
            v = v[None]
        if v.shape[1] != self.grid.n + 1:
            raise InvalidArgument(f"control needs {self.grid.n + 1} time nodes, got {v.shape[1]}")
        self.values = v

    @property
    def d(self) -> int:
        return self.values.shape[2]

    @property
    def deterministic(self) -> bool:
        return self.values.shape[0] == 1

    def subset(self, idx) -> "ControlProcess":
        if self.deterministic:
            return self
        return ControlProcess(self.grid, self.values[idx], self.adapted, self.meta)

    def holder(self, mu: float) -> np.ndarray:
        """Hölder-μ seminorm per row (Euclidean over components)."""
        return _vector_holder(self.values, self.grid.nodes, mu)

    def __add__(self, other):
        return ControlProcess(self.grid, self.values + _values(other), self.adapted)

    def __sub__(self, other):
        return ControlProcess(self.grid, self.values - _values(other), self.adapted)

    def scaled(self, c: float) -> "ControlProcess":
        return ControlProcess(self.grid, c * self.values, self.adapted)


def _values(u):
    return u.values if isinstance(u, ControlProcess) else np.asarray(u, dtype=float)


def constant_control(grid: TimeGrid, value) -> ControlProcess:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    return ControlProcess(grid, np.broadcast_to(value, (1, grid.n + 1, value.size)).copy())


def function_control(grid: TimeGrid, func) -> ControlProcess:
    """Deterministic control ``t ↦ func(t)`` (vectorized, returns ``(n+1,)`` or ``(n+1, d)``)."""
    v = np.asarray(func(grid.nodes), dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    return ControlProcess(grid, v[None])


def _vector_holder(values: np.ndarray, nodes: np.ndarray, mu: float) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.shape[-1] == 1:
        return holder_seminorm_array(v[..., 0], nodes, mu)
    best = np.zeros(v.shape[0])
    n = v.shape[1]
    for lag in range(1, n):
        r = np.linalg.norm(v[:, lag:] - v[:, :-lag], axis=-1) / (nodes[lag:] - nodes[:-lag]) ** mu
        np.maximum(best, r.max(axis=1), out=best)
    return best


# ---------------------------------------------------------------------------
# solvers


@dataclass
class StatePaths:
    grid: TimeGrid
    x: np.ndarray = field(repr=False)
    regime: str = BROWNIAN
    path_ids: np.ndarray | None = field(default=None, repr=False)

    @property
    def path_count(self) -> int:
        return self.x.shape[0]

    def sample_path(self, p: int) -> SamplePath:
        return SamplePath(self.grid, self.x[p])

    def to_csv(self, filename):
        with open(filename, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "t"] + [f"x{i + 1}" for i in range(self.x.shape[2])])
            ids = np.arange(self.path_count) if self.path_ids is None else self.path_ids
            for p in range(self.path_count):
                for k, t in enumerate(self.grid.nodes):
                    w.writerow([int(ids[p]), f"{t:.17g}"] + [f"{v:.17g}" for v in self.x[p, k]])


def _control_at(u: ControlProcess, k: int, P: int) -> np.ndarray:
    return np.broadcast_to(u.values[:, k], (P, u.d))


def _check_dims(system: ControlSystem, u: ControlProcess, drivers: DriverEnsemble):
    if u.d != system.d:
        raise InvalidArgument(f"control has dimension {u.d}, system expects {system.d}")
    if drivers.m != system.m:
        raise InvalidArgument(f"system has {system.m} drivers, ensemble has {drivers.m}")
    if u.grid.n != drivers.grid.n:
        raise InvalidArgument("control and drivers live on different grids")
    if not u.deterministic and u.values.shape[0] != drivers.path_count:
        raise InvalidArgument("per-path control must have one row per driver path")


def _euler(system: ControlSystem, u: ControlProcess, dZ: np.ndarray, grid: TimeGrid, path_ids, start: int = 0, x_start=None) -> np.ndarray:
    P = dZ.shape[0]
    n = grid.n
    x = np.empty((P, n + 1, system.nx))
    if x_start is None:
        x[:, 0] = system.x0
    else:
        x[:, : start + 1] = x_start[:, : start + 1]
    hs = grid.steps
    t = grid.nodes
    for k in range(start, n):
        xk = x[:, k]
        uk = _control_at(u, k, P)
        x[:, k + 1] = xk + system.b(t[k], xk, uk) * hs[k] + np.einsum("pij,pj->pi", system.sigma(t[k], xk, uk), dZ[:, k])
        if not np.all(np.isfinite(x[:, k + 1])):
            bad = int(np.nonzero(~np.all(np.isfinite(x[:, k + 1]), axis=1))[0][0])
            pid = int(path_ids[bad]) if path_ids is not None else bad
            raise DivergenceError(f"state became non-finite at step {k + 1} on path {pid}", step=k + 1, path=pid)
    return x


def solve_sde(system: ControlSystem, u: ControlProcess, drivers: DriverEnsemble, regime: str, workers: int = 1) -> StatePaths:
    """Left-point Euler solve on every driver path (chunked, bitwise independent of ``workers``)."""
    regime = _regime(regime)
    _check_dims(system, u, drivers)
    dZ = drivers.increments(regime)

    def fn(a, b):
        return _euler(system, u.subset(slice(a, b)), dZ[a:b], drivers.grid, drivers.path_ids[a:b])

    x = np.concatenate(map_chunks(fn, drivers.path_count, workers), axis=0)
    return StatePaths(drivers.grid, x, regime, drivers.path_ids)


def solve_sde_bm(system: ControlSystem, u: ControlProcess, drivers: DriverEnsemble, workers: int = 1) -> StatePaths:
    """Euler-Maruyama: ``x_{k+1} = x_k + b Δt + Σ_j σ^j ΔW_{j,k}``."""
    return solve_sde(system, u, drivers, BROWNIAN, workers)


def solve_sde_fbm(system: ControlSystem, u: ControlProcess, drivers: DriverEnsemble, workers: int = 1, mu: float | None = None) -> StatePaths:
    """Pathwise Euler: ``x_{k+1} = x_k + b Δt + Σ_j σ^j ΔB^H_{j,k}`` with no Itô correction.

    When ``mu`` is given, a control failing the Hölder-``mu`` refinement
    check triggers a warning.
    """
    if mu is not None:
        rep = check_admissible(u, drivers, mu, min(mu, drivers.H.H - 1e-3))
        if np.any(rep.not_holder):
            warnings.warn("control fails the Hölder refinement check", RuntimeWarning, stacklevel=2)
    return solve_sde(system, u, drivers, FBM, workers)


# ---------------------------------------------------------------------------
# linearization along a trajectory


@dataclass
class Linearization:
    """Coefficient derivatives along ``(x*, u*)`` at the left node of every cell.

    Arrays have a time axis of length ``n+1`` in position 1.
    """

    b_x: np.ndarray = field(repr=False)
    b_u: np.ndarray = field(repr=False)
    sigma_x: np.ndarray = field(repr=False)
    sigma_u: np.ndarray = field(repr=False)
    l_x: np.ndarray = field(repr=False)
    l_u: np.ndarray = field(repr=False)
    h_x: np.ndarray = field(repr=False)


def linearize(system: ControlSystem, x: np.ndarray, u: ControlProcess, grid: TimeGrid, start: int = 0, base: "Linearization | None" = None) -> Linearization:
    """Evaluate the derivative callbacks at every node ``k >= start``.

    Nodes before ``start`` are copied from ``base`` (used when only the
    tail of a trajectory changed).
    """
    P = x.shape[0]
    t = grid.nodes
    names = ("b_x", "b_u", "sigma_x", "sigma_u", "l_x", "l_u")
    arr = {}
    for name in names:
        out = np.empty((P, grid.n + 1) + _shape(system, name, P)[1:])
        if start > 0:
            out[:, :start] = getattr(base, name)[:, :start]
        arr[name] = out
    for k in range(start, grid.n + 1):
        uk = _control_at(u, k, P)
        for name in names:
            arr[name][:, k] = getattr(system, name)(t[k], x[:, k], uk)
    return Linearization(h_x=np.asarray(system.h_x(x[:, -1])), **arr)


def _shape(s: ControlSystem, name: str, P: int):
    return {
        "b_x": (P, s.nx, s.nx),
        "b_u": (P, s.nx, s.d),
        "sigma_x": (P, s.m, s.nx, s.nx),
        "sigma_u": (P, s.m, s.nx, s.d),
        "l_x": (P, s.nx),
        "l_u": (P, s.d),
    }[name]


@dataclass
class StarPair:
    """A control with its state trajectory on a fixed driver ensemble."""

    u: ControlProcess
    state: StatePaths
    drivers: DriverEnsemble
    lin: Linearization | None = None

    @property
    def regime(self) -> str:
        return self.state.regime


def star_pair(system: ControlSystem, u: ControlProcess, drivers: DriverEnsemble, regime: str, workers: int = 1) -> StarPair:
    st = solve_sde(system, u, drivers, regime, workers)
    return StarPair(u, st, drivers, linearize(system, st.x, u, drivers.grid))


@dataclass
class FundamentalPair:
    """Fundamental matrix ``Φ`` and its inverse, each ``(P, n+1, nx, nx)``."""

    grid: TimeGrid
    Phi: np.ndarray = field(repr=False)
    PhiInv: np.ndarray = field(repr=False)
    regime: str
    defect_series: np.ndarray = field(repr=False)
    product_defect: float
    median_defect: float

    def sample_path(self, p: int, which: str = "Phi") -> SamplePath:
        arr = self.Phi if which == "Phi" else self.PhiInv
        return SamplePath(self.grid, arr[p].reshape(self.grid.n + 1, -1))

    def to_csv(self, directory, p: int = 0) -> list:
        os.makedirs(directory, exist_ok=True)
        out = []
        for which in ("Phi", "PhiInv"):
            fn = os.path.join(directory, f"{which}.csv")
            self.sample_path(p, which).to_csv(fn)
            out.append(fn)
        fn = os.path.join(directory, "defect.csv")
        SamplePath(self.grid, self.defect_series[p]).to_csv(fn)
        out.append(fn)
        return out


def _phi_recursion(lin: Linearization, dZ: np.ndarray, grid: TimeGrid, regime: str, start: int = 0, base=None):
    P, n1, nx = lin.b_x.shape[:3]
    Phi = np.empty((P, n1, nx, nx))
    Pinv = np.empty_like(Phi)
    if start == 0:
        Phi[:, 0] = np.eye(nx)
        Pinv[:, 0] = np.eye(nx)
    else:
        Phi[:, : start + 1] = base[0][:, : start + 1]
        Pinv[:, : start + 1] = base[1][:, : start + 1]
    hs = grid.steps
    for k in range(start, grid.n):
        bx = lin.b_x[:, k]
        sx = lin.sigma_x[:, k]  # (P, m, nx, nx)
        noise = np.einsum("pjab,pj->pab", sx, dZ[:, k])
        Phi[:, k + 1] = Phi[:, k] + (bx @ Phi[:, k]) * hs[k] + noise @ Phi[:, k]
        drift = -bx
        if regime == BROWNIAN:
            drift = drift + np.einsum("pjab,pjbc->pac", sx, sx)
        Pinv[:, k + 1] = Pinv[:, k] + (Pinv[:, k] @ drift) * hs[k] - Pinv[:, k] @ noise
    return Phi, Pinv


@dataclass
class ForwardBundle:
    """State, linearization and fundamental pair on one driver ensemble."""

    x: np.ndarray = field(repr=False)
    lin: Linearization = field(repr=False)
    Phi: np.ndarray = field(repr=False)
    PhiInv: np.ndarray = field(repr=False)


def forward_bundle(system: ControlSystem, u: ControlProcess, drivers: DriverEnsemble, regime: str, start: int = 0, base: ForwardBundle | None = None) -> ForwardBundle:
    """Solve state, linearization and ``(Φ, Φ⁻¹)`` together.

    With ``start > 0`` the first ``start + 1`` nodes are taken from ``base``,
    which is valid when ``drivers`` differs from the base ensemble only in
    increments of cells ``>= start`` (Malliavin bumps). The control is held
    fixed.
    """
    regime = _regime(regime)
    grid = drivers.grid
    dZ = drivers.increments(regime)
    x = _euler(system, u, dZ, grid, drivers.path_ids, start, None if base is None else base.x)
    lin = linearize(system, x, u, grid, start + 1 if start > 0 else 0, None if base is None else base.lin)
    Phi, Pinv = _phi_recursion(lin, dZ, grid, regime, start, None if base is None else (base.Phi, base.PhiInv))
    return ForwardBundle(x, lin, Phi, Pinv)


def fundamental_pair(system: ControlSystem, sp: StarPair, regime: str | None = None, tol: float = 1e-2) -> FundamentalPair:
    """Integrate ``Φ`` and ``Φ⁻¹`` forward by the regime's left-point scheme.

    ``dΦ = b_x Φ dt + Σ_j σ_x^j Φ dZ_j`` and, independently,
    ``dΦ⁻¹ = Φ⁻¹(-b_x + Σ_j (σ_x^j)^2) dt - Σ_j Φ⁻¹ σ_x^j dW_j`` (Itô) or
    ``dΦ⁻¹ = -Φ⁻¹ b_x dt - Σ_j Φ⁻¹ σ_x^j d°B^H_j`` (pathwise).

    ``product_defect`` is the maximum of ``‖Φ Φ⁻¹ - I‖`` over time and paths;
    :class:`IllConditioned` is raised when the median per-path defect exceeds
    ``10 * tol``.
    """
    regime = _regime(regime or sp.regime)
    grid = sp.drivers.grid
    Phi, Pinv = _phi_recursion(sp.lin, sp.drivers.increments(regime), grid, regime)
    I = np.eye(system.nx)
    nx = system.nx
    if not (np.all(np.isfinite(Phi)) and np.all(np.isfinite(Pinv))):
        raise DivergenceError("fundamental matrix became non-finite")
    defect = np.linalg.norm(Phi @ Pinv - I, ord=2, axis=(2, 3)) if nx > 1 else np.abs(Phi[..., 0, 0] * Pinv[..., 0, 0] - 1.0)
    per_path = defect.max(axis=1)
    med = float(np.median(per_path))
    if med > 10 * tol:
        raise IllConditioned(f"median product defect {med:.3g} exceeds {10 * tol:.3g}")
    return FundamentalPair(grid, Phi, Pinv, regime, defect, float(per_path.max()), med)


# ---------------------------------------------------------------------------
# variational equation


def _direction_at(v: ControlProcess, k: int, P: int):
    return np.broadcast_to(v.values[:, k], (P, v.d))


def variational_path_direct(system: ControlSystem, sp: StarPair, v: ControlProcess, regime: str | None = None) -> np.ndarray:
    """Euler solve of ``dy = (b_x y + b_u v)dt + Σ_j (σ_x^j y + σ_u^j v) dZ_j``, ``y(0) = 0``.

    Returns ``y`` with shape ``(P, n+1, nx)``.
    """
    regime = _regime(regime or sp.regime)
    lin = sp.lin
    grid = sp.drivers.grid
    dZ = sp.drivers.increments(regime)
    P = lin.b_x.shape[0]
    y = np.zeros((P, grid.n + 1, system.nx))
    hs = grid.steps
    for k in range(grid.n):
        vk = _direction_at(v, k, P)
        yk = y[:, k]
        drift = np.einsum("pab,pb->pa", lin.b_x[:, k], yk) + np.einsum("pab,pb->pa", lin.b_u[:, k], vk)
        vol = np.einsum("pjab,pb->paj", lin.sigma_x[:, k], yk) + np.einsum("pjab,pb->paj", lin.sigma_u[:, k], vk)
        y[:, k + 1] = yk + drift * hs[k] + np.einsum("paj,pj->pa", vol, dZ[:, k])
    return y


def variational_path_explicit(fund: FundamentalPair, system: ControlSystem, sp: StarPair, v: ControlProcess, regime: str | None = None) -> np.ndarray:
    """Explicit variational solution through the fundamental pair.

    Brownian: ``y = Φ ∫ Φ⁻¹ (b_u - Σ σ_x^j σ_u^j) v ds + Σ_j Φ ∫ Φ⁻¹ σ_u^j v dW_j``.
    fBm: ``y = Φ ∫ Φ⁻¹ b_u v ds + Σ_j Φ ∫ Φ⁻¹ σ_u^j v d°B^H_j``.
    Integrals are left-point sums.
    """
    regime = _regime(regime or sp.regime)
    if fund.regime != regime:
        raise InvalidArgument("fundamental pair regime does not match the requested regime")
    lin = sp.lin
    grid = sp.drivers.grid
    dZ = sp.drivers.increments(regime)
    P = lin.b_x.shape[0]
    vv = np.broadcast_to(v.values, (P, grid.n + 1, v.d))
    drift = lin.b_u
    if regime == BROWNIAN:
        drift = drift - np.einsum("ptjab,ptjbc->ptac", lin.sigma_x, lin.sigma_u)
    dv = np.einsum("ptab,ptb->pta", drift, vv)[:, :-1] * grid.steps[None, :, None]
    sv = np.einsum("ptjab,ptb->ptaj", lin.sigma_u, vv)[:, :-1]
    incr = dv + np.einsum("ptaj,ptj->pta", sv, dZ)
    integrand = np.einsum("ptab,ptb->pta", fund.PhiInv[:, :-1], incr)
    acc = np.zeros((P, grid.n + 1, system.nx))
    np.cumsum(integrand, axis=1, out=acc[:, 1:])
    return np.einsum("ptab,ptb->pta", fund.Phi, acc)


# ---------------------------------------------------------------------------
# admissibility


@dataclass
class AdmissibilityReport:
    mu: float
    beta: float
    control_seminorm: np.ndarray = field(repr=False)
    driver_seminorm: np.ndarray = field(repr=False)
    fitted_C: float
    fitted_c: float
    violations: np.ndarray = field(repr=False)
    refinement_ratio: np.ndarray = field(repr=False)
    not_holder: np.ndarray = field(repr=False)

    @property
    def constant_across_paths(self) -> bool:
        s = self.control_seminorm
        return bool(np.allclose(s, s[0], rtol=1e-12, atol=0))


def check_admissible(u: ControlProcess, drivers: DriverEnsemble, mu: float, beta: float, envelope: tuple | None = None) -> AdmissibilityReport:
    """Growth diagnostics for ``‖u‖_μ ≤ C exp(c Σ_j ‖B^H_j‖_β)``.

    Fits ``log ‖u‖_μ = log C + c S`` by least squares over paths and flags
    paths outside a supplied ``(C, c)`` envelope. A control whose
    μ-seminorm grows by more than ``2^μ`` from the grid subsampled by four
    to the full grid is flagged as not Hölder (jumps scale as ``4^μ``).
    """
    if not 0 < mu < 1 or not 0 < beta < 1:
        raise InvalidArgument("mu and beta must lie in (0, 1)")
    if not drivers.H.is_brownian and mu <= 1 - drivers.H.H:
        warnings.warn("mu <= 1 - H: admissible class requires mu > 1 - H", RuntimeWarning, stacklevel=2)
    nodes = drivers.grid.nodes
    useminorm = np.broadcast_to(u.holder(mu), (drivers.path_count,))
    S = np.zeros(drivers.path_count)
    for j in range(drivers.m):
        S += holder_seminorm_array(drivers.BH[:, :, j], nodes, beta)
    y = np.log(np.maximum(useminorm, 1e-300))
    if np.ptp(S) > 0 and np.ptp(y) > 0:
        c, logC = np.polyfit(S, y, 1)
    else:
        c, logC = 0.0, float(np.max(y))
    if envelope is not None:
        C0, c0 = envelope
        viol = useminorm > C0 * np.exp(c0 * S)
    else:
        viol = np.zeros(drivers.path_count, dtype=bool)
    coarse = nodes[::4]
    cs = _vector_holder(u.values[:, ::4], coarse, mu) if coarse.size > 2 else u.holder(mu)
    ratio = u.holder(mu) / np.maximum(cs, 1e-300)
    return AdmissibilityReport(mu, beta, useminorm.copy(), S, float(np.exp(logC)), float(c), viol, ratio, ratio > 2.0 ** mu)


def holder_growth_regression(x: np.ndarray, drivers: DriverEnsemble, beta: float) -> dict:
    """Regress ``log sup|x|`` on ``(Σ_j ‖B^H_j‖_β)^{1/β}`` across paths; returns slope and R²."""
    S = np.zeros(drivers.path_count)
    for j in range(drivers.m):
        S += holder_seminorm_array(drivers.BH[:, :, j], drivers.grid.nodes, beta)
    z = S ** (1.0 / beta)
    y = np.log(np.max(np.linalg.norm(x, axis=-1), axis=1))
    slope, icpt = np.polyfit(z, y, 1)
    resid = y - (slope * z + icpt)
    r2 = 1.0 - resid.var() / y.var() if y.var() > 0 else 1.0
    return {"slope": float(slope), "intercept": float(icpt), "r2": float(r2)}


# ---------------------------------------------------------------------------
# presets


def _zeros(*shape):
    return lambda t, x, u: np.zeros((x.shape[0],) + shape)


def _scalar(name, b, bx, bu, s, sx, su, l, lx, lu, h, hx, x0, sxx=None, suu=None, sxu=None, control_free=False, params=None):
    """Scalar system (nx = d = m = 1) from elementwise functions of (t, x, u)."""

    def wrap(f, shape):
        return lambda t, x, u: np.asarray(f(t, x[:, 0], u[:, 0]), dtype=float).reshape((-1,) + shape) * np.ones((x.shape[0],) + shape)

    return ControlSystem(
        name, 1, 1, 1, np.array([x0]),
        b=wrap(b, (1,)), sigma=wrap(s, (1, 1)),
        l=wrap(l, ()), h=lambda x: np.asarray(h(x[:, 0]), dtype=float) * np.ones(x.shape[0]),
        b_x=wrap(bx, (1, 1)), b_u=wrap(bu, (1, 1)),
        sigma_x=wrap(sx, (1, 1, 1)), sigma_u=wrap(su, (1, 1, 1)),
        l_x=wrap(lx, (1,)), l_u=wrap(lu, (1,)),
        h_x=lambda x: np.asarray(hx(x[:, 0]), dtype=float).reshape(-1, 1) * np.ones((x.shape[0], 1)),
        sigma_xx=None if sxx is None else wrap(sxx, (1, 1, 1, 1)),
        sigma_uu=None if suu is None else wrap(suu, (1, 1, 1, 1)),
        sigma_xu=None if sxu is None else wrap(sxu, (1, 1, 1, 1)),
        sigma_control_free=control_free, params=params or {},
    )


Z = lambda t, x, u: 0.0 * x
ONE = lambda t, x, u: 1.0 + 0.0 * x


def zero_system(x0: float = 0.0) -> ControlSystem:
    return _scalar("zero", Z, Z, Z, Z, Z, Z, Z, Z, Z, lambda x: 0 * x, lambda x: 0 * x, x0, control_free=True)


def pure_noise(x0: float = 0.0, terminal: str = "none") -> ControlSystem:
    """``dx = dZ``; ``terminal="linear"`` sets ``h(x) = x``."""
    h, hx = (lambda x: x, lambda x: 1 + 0 * x) if terminal == "linear" else (lambda x: 0 * x, lambda x: 0 * x)
    return _scalar("pure-noise", Z, Z, Z, ONE, Z, Z, Z, Z, Z, h, hx, x0, control_free=True)


def unit_running_cost(x0: float = 0.0) -> ControlSystem:
    """``dx = dZ`` with ``l ≡ 1`` and ``h ≡ 0`` (cost equals T)."""
    return _scalar("unit-cost", Z, Z, Z, ONE, Z, Z, ONE, Z, Z, lambda x: 0 * x, lambda x: 0 * x, x0, control_free=True)


def control_drift(x0: float = 0.0) -> ControlSystem:
    """``dx = u dt`` with no noise."""
    return _scalar("control-drift", lambda t, x, u: u, Z, ONE, Z, Z, Z, Z, Z, Z, lambda x: 0 * x, lambda x: 0 * x, x0, control_free=True)


def geometric(a: float = 0.0, c: float = 1.0, x0: float = 1.0, terminal: str = "none") -> ControlSystem:
    """``dx = a x dt + c x dZ`` (control-free). ``terminal="quadratic"`` sets ``h = x²/2``."""
    h, hx = (lambda x: 0.5 * x * x, lambda x: x) if terminal == "quadratic" else (lambda x: 0 * x, lambda x: 0 * x)
    return _scalar(
        "geometric", lambda t, x, u: a * x, lambda t, x, u: a + 0 * x, Z,
        lambda t, x, u: c * x, lambda t, x, u: c + 0 * x, Z,
        Z, Z, Z, h, hx, x0, sxx=Z, suu=Z, sxu=Z, control_free=True, params={"a": a, "c": c},
    )


def lq_drift(x0: float = 1.0, sigma: float = 1.0, q: float = 1.0, r: float = 1.0) -> ControlSystem:
    """``dx = u dt + σ dZ``, ``l = q x² + r u²``, ``h = 0`` (σ independent of u)."""
    return _scalar(
        "lq-drift", lambda t, x, u: u, Z, ONE, lambda t, x, u: sigma + 0 * x, Z, Z,
        lambda t, x, u: q * x * x + r * u * u, lambda t, x, u: 2 * q * x, lambda t, x, u: 2 * r * u,
        lambda x: 0 * x, lambda x: 0 * x, x0, sxx=Z, suu=Z, sxu=Z, control_free=True,
        params={"sigma": sigma, "q": q, "r": r},
    )


def bilinear(a: float = 0.5, c: float = 0.3, e: float = 0.4, x0: float = 1.0) -> ControlSystem:
    """``dx = (a x + u) dt + (c x + e u) dZ``, ``l = x² + u²``, ``h = x²/2``."""
    return _scalar(
        "bilinear", lambda t, x, u: a * x + u, lambda t, x, u: a + 0 * x, ONE,
        lambda t, x, u: c * x + e * u, lambda t, x, u: c + 0 * x, lambda t, x, u: e + 0 * x,
        lambda t, x, u: x * x + u * u, lambda t, x, u: 2 * x, lambda t, x, u: 2 * u,
        lambda x: 0.5 * x * x, lambda x: x, x0, sxx=Z, suu=Z, sxu=Z, params={"a": a, "c": c, "e": e},
    )


def scalar_nonlinear(a: float = 0.8, beta: float = 1.0, c: float = 0.3, e: float = 0.2, x0: float = 0.5) -> ControlSystem:
    """``dx = (a sin x + β u) dt + (c x + e u) dZ``, ``l = x² + u²``, ``h = x²/2``."""
    return _scalar(
        "scalar-nonlinear", lambda t, x, u: a * np.sin(x) + beta * u, lambda t, x, u: a * np.cos(x), lambda t, x, u: beta + 0 * x,
        lambda t, x, u: c * x + e * u, lambda t, x, u: c + 0 * x, lambda t, x, u: e + 0 * x,
        lambda t, x, u: x * x + u * u, lambda t, x, u: 2 * x, lambda t, x, u: 2 * u,
        lambda x: 0.5 * x * x, lambda x: x, x0, sxx=Z, suu=Z, sxu=Z,
    )


def lq_feedback(a: float = 0.0, b: float = 1.0, q: float = 1.0, r: float = 1.0, sigma: float = 1.0, x0: float = 1.0) -> ControlSystem:
    """LQ regulator with the control parametrized by gains ``θ = (k, c)``, ``u = k x + c``.

    ``dx = (a x + b(k x + c)) dt + σ dW``, ``l = q x² + r (k x + c)²``, ``h = 0``.
    The optimum over deterministic gains is the Riccati feedback
    (see :func:`riccati_oracle`).
    """

    def act(x, u):
        return u[:, 0] * x[:, 0] + u[:, 1]

    P = lambda x: x.shape[0]
    return ControlSystem(
        "lq-feedback", 1, 2, 1, np.array([x0]),
        b=lambda t, x, u: (a * x[:, 0] + b * act(x, u))[:, None],
        sigma=lambda t, x, u: np.full((P(x), 1, 1), sigma),
        l=lambda t, x, u: q * x[:, 0] ** 2 + r * act(x, u) ** 2,
        h=lambda x: np.zeros(P(x)),
        b_x=lambda t, x, u: (a + b * u[:, 0])[:, None, None] * np.ones((P(x), 1, 1)),
        b_u=lambda t, x, u: b * np.stack([x[:, 0], np.ones(P(x))], axis=1)[:, None, :],
        sigma_x=lambda t, x, u: np.zeros((P(x), 1, 1, 1)),
        sigma_u=lambda t, x, u: np.zeros((P(x), 1, 1, 2)),
        l_x=lambda t, x, u: (2 * q * x[:, 0] + 2 * r * act(x, u) * u[:, 0])[:, None],
        l_u=lambda t, x, u: 2 * r * act(x, u)[:, None] * np.stack([x[:, 0], np.ones(P(x))], axis=1),
        h_x=lambda x: np.zeros((P(x), 1)),
        sigma_control_free=True,
        params={"a": a, "b": b, "q": q, "r": r, "sigma": sigma},
    )


def riccati_oracle(a: float, b: float, q: float, r: float, sigma: float, x0: float, T: float, terminal: float = 0.0, nodes=None):
    """Riccati ODE for ``V(t, x) = S(t) x² + β(t)``.

    ``-S' = 2aS + q - b²S²/r``, ``S(T) = terminal``; ``J* = S(0) x0² + σ² ∫ S dt``.
    Returns ``(S at nodes, J*, optimal gain k = -b S / r at nodes)``.
    """
    from scipy.integrate import solve_ivp

    def rhs(tau, y):  # reversed time τ = T - t
        S = y[0]
        return [2 * a * S + q - b * b * S * S / r, sigma * sigma * S]

    sol = solve_ivp(rhs, (0.0, T), [terminal, 0.0], rtol=1e-12, atol=1e-14, dense_output=True)
    nodes = np.linspace(0, T, 2) if nodes is None else np.asarray(nodes)
    S = sol.sol(T - nodes)[0]
    end = sol.sol(T)
    J = end[0] * x0 * x0 + end[1]
    return S, float(J), -b * S / r


PRESETS = {
    "zero": zero_system,
    "pure-noise": pure_noise,
    "unit-cost": unit_running_cost,
    "control-drift": control_drift,
    "geometric": geometric,
    "lq-drift": lq_drift,
    "lq-feedback": lq_feedback,
    "bilinear": bilinear,
    "scalar-nonlinear": scalar_nonlinear,
}


def make_system(name: str, **params) -> ControlSystem:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise InvalidArgument(f"unknown system preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**params)
