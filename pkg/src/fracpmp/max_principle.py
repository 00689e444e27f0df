"""Maximum-principle residuals, a gradient-descent optimizer and the ρ(ε) quadrature.

Residual paths ``r(t)`` are in units of ``l_u``. All norms are taken over
the nodes ``t_0, ..., t_{n-1}`` (``q`` has no increment after ``T``) and
normalized by ``sup_t E|l_u(t)|`` along the trajectory, with fallback 1
when ``l_u`` vanishes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_legendre

from .adjoint import (
    AdjointSolution,
    NodeBasis,
    _P_raw,
    _row_tail,
    adjoint_kernel_psi,
    adjoint_kernels_fbm,
    path_costs,
)
from .dynamics import BROWNIAN, FBM, ControlProcess, ControlSystem, StarPair, _regime, forward_bundle, solve_sde, star_pair
from .errors import InvalidArgument, StallError, UnsupportedError
from .fbm import DriverEnsemble, as_hurst
from .fbm_ops import malliavin_brownian, transform_cells
from .mc import RegressionSpec, condition_on, pairwise_mean, pairwise_sum


@dataclass
class MPResidual:
    """Residual of a stationarity condition.

    ``per_path`` is ``(P, n+1, d)`` (``None`` for purely averaged residuals),
    ``mean`` its ensemble mean ``(n+1, d)``. ``sup`` and ``l2`` are the time
    sup and L² norm of ``mean`` divided by ``scale``. ``components`` holds
    extra residual paths (``r_sigma`` in the fBm regime, the Hamiltonian
    gradient in the classical one).
    """

    regime: str
    mean: np.ndarray = field(repr=False)
    sup: float
    l2: float
    scale: float
    per_path: np.ndarray | None = field(default=None, repr=False)
    components: dict = field(default_factory=dict, repr=False)

    def to_csv(self, filename, grid):
        cols = [f"r{i + 1}" for i in range(self.mean.shape[1])]
        with open(filename, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + cols)
            for t, row in zip(grid.nodes, self.mean):
                w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])


def residual_scale(l_u: np.ndarray) -> float:
    s = float(np.max(np.mean(np.abs(l_u[:, :-1]), axis=0)))
    return s if s > 1e-12 else 1.0


def _report(regime, per_path, grid, scale, components=None, mean=None) -> MPResidual:
    mean = pairwise_mean(per_path) if mean is None else mean
    body = mean[:-1]
    sup = float(np.max(np.abs(body))) / scale if body.size else 0.0
    l2 = float(np.sqrt(np.sum(np.sum(body ** 2, axis=1) * grid.steps))) / scale
    return MPResidual(regime, mean, sup, l2, scale, per_path, components or {})


def hamiltonian_gradient(lin, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``∂H/∂u`` for ``H(t, x, u, p, q) = b·p + Σ_j σ^j·q_j + l``, ``(P, n+1, d)``."""
    return np.einsum("ptab,pta->ptb", lin.b_u, p) + np.einsum("ptjab,ptja->ptb", lin.sigma_u, q) + lin.l_u


def mp_residual_classical(system: ControlSystem, sp: StarPair, adj: AdjointSolution) -> MPResidual:
    """``r(t) = b_u^T p + Σ_j σ_u^{jT} q_j + l_u`` per path.

    The Hamiltonian gradient is evaluated with the same arithmetic and
    asserted equal as a regression guard.
    """
    if _regime(sp.regime) != BROWNIAN:
        raise InvalidArgument("mp_residual_classical needs the classical regime")
    lin = adj.bundle.lin
    r = lin.l_u.copy()
    r += np.einsum("ptab,pta->ptb", lin.b_u, adj.p)
    r += np.einsum("ptjab,ptja->ptb", lin.sigma_u, adj.q)
    dH = hamiltonian_gradient(lin, adj.p, adj.q)
    assert np.array_equal(r, dH), "Hamiltonian gradient differs from the residual"
    return _report(BROWNIAN, r, sp.drivers.grid, residual_scale(lin.l_u), {"hamiltonian_u": dH})


# ---------------------------------------------------------------------------
# partial information


FULL = "full"
COARSE_TIME = "coarse-time"
COMPONENT_SUBSET = "component-subset"
TRIVIAL = "trivial"


@dataclass(frozen=True)
class FiltrationSpec:
    """Sub-filtration used by the partial-information condition.

    ``kind`` is one of ``full``, ``coarse-time`` (``G_t = F_{⌊t/Δ⌋Δ}``,
    parameter ``delta``), ``component-subset`` (generated by the driver
    components in ``components``) or ``trivial`` (``G_t`` trivial,
    constant-only features).
    """

    kind: str = FULL
    delta: float | None = None
    components: tuple = ()

    def __post_init__(self):
        if self.kind not in (FULL, COARSE_TIME, COMPONENT_SUBSET, TRIVIAL):
            raise InvalidArgument(f"unknown filtration kind {self.kind!r}")
        if self.kind == COARSE_TIME and (self.delta is None or self.delta <= 0):
            raise InvalidArgument("coarse-time filtration needs delta > 0")

    def anchor_nodes(self, grid) -> np.ndarray:
        """Node whose information generates ``G_{t_k}`` for every ``k``."""
        k = np.arange(grid.n + 1)
        if self.kind != COARSE_TIME:
            return k
        ratio = self.delta / grid.step
        stride = int(round(ratio))
        if stride < 1 or abs(ratio - stride) > 1e-9 * max(1.0, ratio):
            raise InvalidArgument("coarse-time delta must be a multiple of the grid step")
        return (k // stride) * stride

    def features(self, k_anchor: int, x: np.ndarray, drivers: DriverEnsemble, regime: str, spec: RegressionSpec) -> np.ndarray:
        P = x.shape[0]
        if self.kind == TRIVIAL or spec.constant_only:
            return np.ones((P, 1))
        base_spec = RegressionSpec(spec.degree, spec.cross_degree, False, spec.ridge, False)
        if self.kind == COMPONENT_SUBSET:
            comps = [int(c) for c in self.components]
            if not comps:
                raise InvalidArgument("component-subset filtration with no visible components has an empty feature set")
            if any(c < 0 or c >= drivers.m for c in comps):
                raise InvalidArgument("visible component out of range")
            src = drivers.W if regime == BROWNIAN else drivers.BH
            z = src[:, k_anchor, comps]
            return NodeBasis.fit(z, base_spec)(z)
        xk = x[:, k_anchor]
        if regime == FBM:
            e = drivers.BH[:, k_anchor]
            fspec = RegressionSpec(spec.degree, spec.cross_degree, True, spec.ridge, False)
            return NodeBasis.fit(xk, fspec, e)(xk, e)
        return NodeBasis.fit(xk, base_spec)(xk)


def condition_kernel(kernel: np.ndarray, x: np.ndarray, drivers: DriverEnsemble, regime: str, gspec: FiltrationSpec, spec: RegressionSpec | None = None) -> np.ndarray:
    """``E[kernel(t) | G_t]`` node by node, ``kernel`` of shape ``(P, n+1, d)``."""
    spec = spec or RegressionSpec()
    grid = drivers.grid
    anchors = gspec.anchor_nodes(grid)
    out = np.empty_like(kernel)
    for k in range(grid.n + 1):
        X = gspec.features(int(anchors[k]), x, drivers, regime, spec)
        out[:, k], _ = condition_on(kernel[:, k], X, spec)
    return out


def mp_residual_partial(system: ControlSystem, sp: StarPair, gspec: FiltrationSpec, spec: RegressionSpec | None = None, kernels=None) -> MPResidual:
    """``E[b_u^T P + Σ_j σ_u^{jT} Q_j + l_u | G_t]`` per path.

    The un-conditioned kernel equals ``Ψ(T, t)`` in the classical regime and
    ``F̃(T, t)`` in the fBm regime; it is projected onto ``G_t``-measurable
    features. ``mean`` is the ensemble mean of the projection and
    ``components["rms"]`` the path-wise root mean square over time.
    """
    regime = _regime(sp.regime)
    grid = sp.drivers.grid
    if kernels is None:
        kernels = adjoint_kernel_psi(system, sp) if regime == BROWNIAN else adjoint_kernels_fbm(system, sp)
    K = kernels.Psi if regime == BROWNIAN else kernels.Ftilde
    b = forward_bundle(system, sp.u, sp.drivers, regime)
    r = condition_kernel(K, b.x, sp.drivers, regime, gspec, spec)
    scale = residual_scale(b.lin.l_u)
    rms = float(np.sqrt(np.mean(np.sum(r[:, :-1] ** 2, axis=2)))) / scale
    return _report(regime, r, grid, scale, {"rms": rms, "filtration": gspec.kind})


# ---------------------------------------------------------------------------
# fBm regime


def _frozen_p(adj: AdjointSolution, x: np.ndarray, BH: np.ndarray) -> np.ndarray:
    """Re-evaluate the node regressions of ``p`` at (possibly perturbed) inputs."""
    P, n1, nx = x.shape
    out = np.empty((P, n1, nx))
    for k in range(n1):
        out[:, k] = adj.fits[k].predict(adj.meta["bases"][k](x[:, k], BH[:, k])).reshape(P, nx)
    out[:, -1] = adj.p[:, -1] if x is adj.bundle.x else out[:, -1]
    return out


def fbm_correction(system: ControlSystem, sp: StarPair, adj: AdjointSolution, bump: float | None = None) -> np.ndarray:
    """``Σ_j 𝔻_t^j`` of the field ``1_{r<t} D_r(p σ_u^j)(t) + 1_{r≥t} σ_u^j(t)^T E[D_r P(t) | F_t]``.

    Returns ``(P, n+1, d)``. ``D_r(p σ_u)`` uses the frozen regressions of
    ``p`` evaluated on bumped paths. The cost is ``O(P n^2)`` memory per
    driver component, so keep ``P`` moderate.
    """
    grid = sp.drivers.grid
    H = sp.drivers.H
    n = grid.n
    base = adj.bundle
    P = base.x.shape[0]
    out = np.zeros((P, n + 1, system.d))
    before = np.arange(n)[:, None] < np.arange(n + 1)[None, :]  # cell r ends by node t
    for j in range(system.m):
        def raw(ens, k):
            bb = forward_bundle(system, sp.u, ens, FBM, start=k, base=base)
            S, _ = _row_tail(system, bb, grid)
            Pr = _P_raw(bb, S)
            pr = _frozen_p(adj, bb.x, ens.BH)
            psig = np.einsum("pta,ptab->ptb", pr, bb.lin.sigma_u[:, :, j])
            return np.concatenate([Pr, psig], axis=2)

        D = malliavin_brownian(None, sp.drivers, j, bump, restart=raw).cells  # (P, n[r], n+1[t], nx + d)
        DP, Dps = D[..., : system.nx], D[..., system.nx :]
        cond = np.empty_like(DP)
        for k in range(n + 1):
            X = NodeBasis.fit(base.x[:, k], adj.spec, sp.drivers.BH[:, k])(base.x[:, k], sp.drivers.BH[:, k])
            later = ~before[:, k]
            if later.any():
                y = DP[:, later, k].reshape(P, -1)
                fitted, _ = condition_on(y, X, adj.spec)
                cond[:, later, k] = fitted.reshape(P, int(later.sum()), system.nx)
        sig = base.lin.sigma_u[:, :, j]  # (P, n+1, nx, d)
        future = np.einsum("prta,ptab->prtb", cond, sig)
        fieldv = np.where(before[None, :, :, None], Dps, future)
        _, phi = transform_cells(fieldv, H, grid)  # (P, n+1[t'], n+1[t], d)
        out += np.einsum("pkkd->pkd", phi)
    return out


def mp_residual_fbm(system: ControlSystem, sp: StarPair, adj: AdjointSolution, bump: float | None = None) -> MPResidual:
    """fBm stationarity: ``r_σ = Σ_j σ_u^{jT} p`` and ``r_b = b_u^T p + l_u + correction``.

    The correction (see :func:`fbm_correction`) vanishes identically when
    ``σ`` does not depend on the control, and is skipped in that case.
    ``sup``/``l2``/``mean`` refer to ``r_b``; ``components`` carries
    ``r_sigma`` and the correction.
    """
    if _regime(sp.regime) != FBM:
        raise InvalidArgument("mp_residual_fbm needs the fBm regime")
    if sp.drivers.H.is_brownian:
        raise UnsupportedError("H = 1/2: use mp_residual_classical")
    lin = adj.bundle.lin
    r_sigma = np.einsum("ptjab,pta->ptb", lin.sigma_u, adj.p)
    r_b = np.einsum("ptab,pta->ptb", lin.b_u, adj.p) + lin.l_u
    if system.sigma_control_free or not np.any(lin.sigma_u):
        corr = np.zeros_like(r_b)
    else:
        corr = fbm_correction(system, sp, adj, bump)
    r_b = r_b + corr
    scale = residual_scale(lin.l_u)
    grid = sp.drivers.grid
    sig_mean = pairwise_mean(r_sigma)
    rep = _report(FBM, r_b, grid, scale, {"r_sigma": r_sigma, "r_sigma_sup": float(np.max(np.abs(sig_mean[:-1]))) / scale, "correction": corr})
    return rep


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerTrace:
    """One row per accepted iterate: ``iter, J, grad_norm, mp_residual, step``."""

    rows: list = field(default_factory=list)

    def append(self, it, J, gnorm, mp, step):
        self.rows.append((int(it), float(J), float(gnorm), float(mp), float(step)))

    @property
    def J(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def to_csv(self, filename):
        with open(filename, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "J", "grad_norm", "mp_residual", "step"])
            for r in self.rows:
                w.writerow([r[0]] + [f"{v:.17g}" for v in r[1:]])


def fd_gradient(system: ControlSystem, u: ControlProcess, drivers: DriverEnsemble, regime: str, eps: float = 1e-4, workers: int = 1) -> np.ndarray:
    """Gradient density by central differences on nodal hat bumps, ``(n+1, d)``.

    Node ``k`` of a deterministic control only enters through the left-point
    sums of cell ``k``, so the derivative is divided by that cell's length.
    The last node does not enter the cost and gets 0.
    """
    grid = drivers.grid
    g = np.zeros((grid.n + 1, u.d))
    for k in range(grid.n):
        for i in range(u.d):
            e = np.zeros_like(u.values)
            e[:, k, i] = eps
            jp = pairwise_mean(path_costs(system, u + e, solve_sde(system, u + e, drivers, regime, workers).x, grid))
            jm = pairwise_mean(path_costs(system, u - e, solve_sde(system, u - e, drivers, regime, workers).x, grid))
            g[k, i] = (jp - jm) / (2 * eps * grid.steps[k])
    return g


def kernel_gradient(system: ControlSystem, u: ControlProcess, drivers: DriverEnsemble, regime: str, chunk: int = 8192):
    """``E[Ψ(T, ·)]`` or ``E[F̃(T, ·)]`` over the ensemble, processed in path chunks.

    Returns ``(gradient (n+1, d), scale)`` with ``scale`` the residual
    normalization ``sup_t E|l_u|``. Chunk sums are combined by pairwise
    summation, so the result does not depend on memory layout.
    """
    regime = _regime(regime)
    P = drivers.path_count
    sums, lus = [], []
    for s0 in range(0, P, chunk):
        sl = slice(s0, min(s0 + chunk, P))
        sub = drivers.subset(sl)
        sp = star_pair(system, u.subset(sl), sub, regime)
        K = adjoint_kernel_psi(system, sp) if regime == BROWNIAN else adjoint_kernels_fbm(system, sp)
        sums.append(pairwise_sum(K.Psi if regime == BROWNIAN else K.Ftilde))
        lus.append(pairwise_sum(np.abs(K.l_u)))
    g = pairwise_sum(np.stack(sums)) / P
    lu = pairwise_sum(np.stack(lus)) / P
    s = float(np.max(lu[:-1]))
    return g, (s if s > 1e-12 else 1.0)


def _gradient_and_residual(system, u, drivers, regime, source):
    if source == "fd":
        g = fd_gradient(system, u, drivers, regime)
        scale = residual_scale(forward_bundle(system, u, drivers, regime).lin.l_u)
    else:
        g, scale = kernel_gradient(system, u, drivers, regime)
    return g, float(np.max(np.abs(g[:-1]))) / scale, scale


def optimize_control(system: ControlSystem, u0: ControlProcess, drivers: DriverEnsemble, regime: str, gradient_source: str = "adjoint", step: float = 1.0, max_iters: int = 100, gtol: float = 1e-2, max_backtracks: int = 30, grow: float = 2.0, trace_path=None):
    """Steepest descent on ``J`` over deterministic controls.

    ``u ← u - η E[Ψ(T, ·)]`` (classical) or ``u ← u - η E[F̃(T, ·)]`` (fBm);
    ``gradient_source="fd"`` uses :func:`fd_gradient` instead. The step is
    halved until ``J`` does not increase (at most ``max_backtracks`` times,
    then :class:`StallError`) and grown by ``grow`` after each success.
    Iteration stops when ``sup_t |E grad(t)| / scale <= gtol``. The common
    random numbers in ``drivers`` are used throughout.

    Returns ``(u, trace)``; ``trace.rows`` records ``iter, J, grad_norm,
    mp_residual, step`` where ``grad_norm`` is the L² norm of the gradient
    and ``mp_residual`` its normalized sup.
    """
    regime = _regime(regime)
    if gradient_source not in ("adjoint", "fd"):
        raise InvalidArgument("gradient_source must be 'adjoint' or 'fd'")
    if not u0.deterministic:
        raise InvalidArgument("optimize_control acts on deterministic controls")
    grid = drivers.grid
    u = u0
    trace = OptimizerTrace()
    J = float(pairwise_mean(path_costs(system, u, solve_sde(system, u, drivers, regime).x, grid)))
    eta = float(step)
    for it in range(max_iters + 1):
        g, mp, _ = _gradient_and_residual(system, u, drivers, regime, gradient_source)
        gnorm = float(np.sqrt(np.sum(np.sum(g[:-1] ** 2, axis=1) * grid.steps)))
        trace.append(it, J, gnorm, mp, eta if it else 0.0)
        if mp <= gtol or it == max_iters:
            break
        for _ in range(max_backtracks):
            cand = u - ControlProcess(grid, eta * g[None])
            Jc = float(pairwise_mean(path_costs(system, cand, solve_sde(system, cand, drivers, regime).x, grid)))
            if Jc <= J:
                break
            eta *= 0.5
        else:
            if trace_path is not None:
                trace.to_csv(trace_path)
            raise StallError(f"no descent after {max_backtracks} backtracks at iteration {it}", trace=trace)
        u, J = cand, Jc
        eta *= grow
    if trace_path is not None:
        trace.to_csv(trace_path)
    return u, trace


# ---------------------------------------------------------------------------
# ρ(ε)


def _graded_nodes(a: float, eps: float, per_decade: int = 24) -> np.ndarray:
    """Nodes in ``σ = a - s ∈ [0, a]`` graded toward 0 (scale ε) and toward ``a``."""
    lo = min(eps, a) * 1e-4
    k = max(int(np.ceil(np.log10(a / 2 / lo) * per_decade)), 4)
    left = np.concatenate([[0.0], np.geomspace(lo, a / 2, k)])
    right = a - left[::-1]
    return np.unique(np.concatenate([left, right]))


def _pair_cell_integrals(nodes: np.ndarray, gam: float) -> np.ndarray:
    """``K[i, j] = ∫_{I_i} ∫_{I_j} |σ - τ|^{γ-1} dτ dσ`` exactly (γ in (0, 1))."""
    F = lambda z: np.abs(z) ** (gam + 1) / (gam * (gam + 1))
    x = nodes
    D = x[:, None] - x[None, :]
    V = F(D)
    return V[1:, :-1] + V[:-1, 1:] - V[1:, 1:] - V[:-1, :-1]


def rho_quadrature(H: float, a: float, eps: float, per_decade: int = 24, order: int = 8) -> float:
    """``ρ(ε) = ∫_0^a ∫_0^a |t-s|^{2H-2} g(s) g(t) ds dt`` with ``g(s) = s^{1/2-H} (a-s+ε)^{-H-1/2}``.

    Written in ``σ = a - s``; the mesh is graded geometrically toward
    ``σ = 0`` (the ε-scale corner) and toward ``σ = a`` (the ``s^{1/2-H}``
    singularity). On each pair of cells the kernel is integrated exactly and
    ``g`` is replaced by its cell average (Gauss-Legendre of ``order``
    points, graded cells keep ``g`` nearly constant per cell). The
    diagonal blocks carry the ``|t-s|^{2H-2}`` singularity exactly.
    """
    Hp = as_hurst(H)
    if Hp.is_brownian:
        raise InvalidArgument("rho_quadrature needs H in (1/2, 1)")
    if a <= 0:
        raise InvalidArgument("a must be positive")
    if not eps > 0:
        raise InvalidArgument("eps must be positive")
    H = Hp.H
    x = _graded_nodes(a, eps, per_decade)
    z, w = roots_legendre(order)
    lo, hi = x[:-1], x[1:]
    sig = 0.5 * (hi - lo)[:, None] * (z[None, :] + 1) + lo[:, None]
    g = (a - sig) ** (0.5 - H) * (sig + eps) ** (-H - 0.5)
    gbar = 0.5 * (g @ w)
    # the endpoint cell at σ = a carries (a-σ)^{1/2-H}; integrate it exactly against the smooth factor
    c = len(lo) - 1
    L = hi[c] - lo[c]
    gbar[c] = L ** (0.5 - H) / (1.5 - H) * float(np.mean((sig[c] + eps) ** (-H - 0.5)))
    K = _pair_cell_integrals(x, 2 * H - 1)
    return float(gbar @ K @ gbar)
