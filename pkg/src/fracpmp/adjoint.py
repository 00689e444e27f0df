"""Cost functional, Gâteaux derivatives, adjoint kernels and the adjoint pair.

Discrete conventions. The cost is ``Σ_{k<n} l(t_k, x_k, u_k) Δt + h(x_n)``.
Tail sums that define the adjoint quantities run over ``k < i < n`` so that
the kernels reproduce the exact gradient of this discrete cost as the grid
is refined. Row vectors such as ``l_x^T Φ`` are stored as arrays ``(P, nx)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    BROWNIAN,
    FBM,
    ControlProcess,
    ControlSystem,
    ForwardBundle,
    StarPair,
    _control_at,
    _phi_recursion,
    _regime,
    forward_bundle,
    solve_sde,
)
from .errors import InvalidArgument, UnsupportedError
from .fbm import DriverEnsemble
from .fbm_ops import malliavin_brownian, transform_cells
from .mc import RegressionSpec, condition_on, pairwise_mean, polynomial_features


# ---------------------------------------------------------------------------
# cost and finite-difference derivatives


@dataclass
class CostEstimate:
    J: float
    stderr: float
    path_count: int
    samples: np.ndarray = field(repr=False, default=None)


def path_costs(system: ControlSystem, u: ControlProcess, x: np.ndarray, grid) -> np.ndarray:
    """Per-path ``Σ_{k<n} l(t_k, x_k, u_k) Δt_k + h(x_n)``."""
    P = x.shape[0]
    hs = grid.steps
    acc = np.zeros(P)
    for k in range(grid.n):
        acc += system.l(grid.nodes[k], x[:, k], _control_at(u, k, P)) * hs[k]
    return acc + system.h(x[:, -1])


def _estimate(samples: np.ndarray) -> CostEstimate:
    P = samples.size
    mean = float(pairwise_mean(samples))
    se = float(samples.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    return CostEstimate(mean, se, P, samples)


def cost(system: ControlSystem, u: ControlProcess, drivers: DriverEnsemble, regime: str, workers: int = 1) -> CostEstimate:
    """Monte Carlo estimate of the cost functional on the given drivers."""
    st = solve_sde(system, u, drivers, regime, workers)
    return _estimate(path_costs(system, u, st.x, drivers.grid))


@dataclass
class GateauxEstimate:
    """Central-difference Gâteaux derivative with a Richardson table.

    ``table[i][0]`` is the plain central difference at ``eps_ladder[i]``;
    column ``c`` removes the ``eps^{2c}`` error term. ``noise_floor`` is four
    standard errors of the per-path difference quotient at the smallest step.
    """

    value: float
    stderr: float
    noise_floor: float
    table: list
    eps_ladder: tuple
    unreliable: bool


def gateaux_fd(system: ControlSystem, u: ControlProcess, v: ControlProcess, drivers: DriverEnsemble, regime: str, eps_ladder=(0.1, 0.05, 0.025), workers: int = 1) -> GateauxEstimate:
    """``d/dε J(u + ε v)`` at 0 by central differences on common random numbers."""
    eps = tuple(float(e) for e in eps_ladder)
    if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise InvalidArgument("eps ladder must be positive and strictly decreasing")
    grid = drivers.grid
    quotients = []
    for e in eps:
        up = u + v.scaled(e)
        dn = u - v.scaled(e)
        jp = path_costs(system, up, solve_sde(system, up, drivers, regime, workers).x, grid)
        jm = path_costs(system, dn, solve_sde(system, dn, drivers, regime, workers).x, grid)
        quotients.append((jp - jm) / (2 * e))
    means = [float(pairwise_mean(q)) for q in quotients]
    ses = [float(q.std(ddof=1) / np.sqrt(q.size)) if q.size > 1 else 0.0 for q in quotients]
    table = [[m] for m in means]
    for i in range(1, len(eps)):
        for c in range(1, i + 1):
            r = (eps[i - c] / eps[i]) ** (2 * c)
            table[i].append((r * table[i][c - 1] - table[i - 1][c - 1]) / (r - 1))
    value = table[-1][-1]
    floor = 4 * ses[-1]
    col = [row[0] for row in table]
    diffs = np.diff(col)
    unreliable = bool(len(diffs) > 1 and np.any(np.abs(diffs[1:]) > np.abs(diffs[:-1]) + floor))
    return GateauxEstimate(value, ses[-1], floor, table, eps, unreliable)


# ---------------------------------------------------------------------------
# adjoint kernels


def _bundle(system: ControlSystem, sp: StarPair, regime: str) -> ForwardBundle:
    if sp.lin is None:
        return forward_bundle(system, sp.u, sp.drivers, regime)
    Phi, Pinv = _phi_recursion(sp.lin, sp.drivers.increments(regime), sp.drivers.grid, regime)
    return ForwardBundle(sp.state.x, sp.lin, Phi, Pinv)


def _row_tail(system: ControlSystem, b: ForwardBundle, grid) -> tuple:
    """Return ``(S, G)``: ``S[:, k] = Σ_{k<i<n} l_x^T Φ_i Δt + h_x^T Φ_n`` and the full sum ``G``."""
    lxphi = np.einsum("pta,ptab->ptb", b.lin.l_x, b.Phi)  # (P, n+1, nx)
    hterm = np.einsum("pa,pab->pb", b.lin.h_x, b.Phi[:, -1])
    w = np.zeros(grid.n + 1)
    w[: grid.n] = grid.steps
    contrib = lxphi * w[None, :, None]
    S = np.empty_like(lxphi)
    S[:, -1] = hterm
    run = hterm.copy()
    for k in range(grid.n - 1, -1, -1):
        S[:, k] = run
        run = run + contrib[:, k]
    return S, run


def _tail_functional(system, u, regime, base: ForwardBundle):
    """Callables for the Malliavin FD of ``G = Σ_{i<n} l_x^T Φ_i Δt + h_x^T Φ_n``."""

    def restart(ens, k):
        b = forward_bundle(system, u, ens, regime, start=k, base=base)
        return _row_tail(system, b, ens.grid)[1]

    return restart


@dataclass
class AdjointKernels:
    """Per-path kernels, arrays ``(P, n+1, d)``.

    Brownian regime: ``Psi``. fBm regime: ``F``, ``G`` (``(P, n+1, m, d)``)
    and ``Ftilde = F + Σ_j 𝔻_s^j G_j``. ``DG`` holds the Brownian Malliavin
    derivatives of the tail functional (``(P, m, n, nx)``), when computed.
    """

    regime: str
    Psi: np.ndarray | None = field(default=None, repr=False)
    F: np.ndarray | None = field(default=None, repr=False)
    G: np.ndarray | None = field(default=None, repr=False)
    Ftilde: np.ndarray | None = field(default=None, repr=False)
    DG: np.ndarray | None = field(default=None, repr=False)
    S: np.ndarray | None = field(default=None, repr=False)
    l_u: np.ndarray | None = field(default=None, repr=False)

    def gradient(self) -> np.ndarray:
        """Ensemble-mean kernel, the gradient of J over deterministic directions (``(n+1, d)``)."""
        K = self.Psi if self.regime == BROWNIAN else self.Ftilde
        return pairwise_mean(K)

    def pairing(self, v: ControlProcess, grid) -> float:
        """``E ∫ K(T, s) v(s) ds`` as a left-point sum."""
        K = self.Psi if self.regime == BROWNIAN else self.Ftilde
        vv = np.broadcast_to(v.values, K.shape)
        per = np.sum(np.sum(K[:, :-1] * vv[:, :-1], axis=2) * grid.steps[None, :], axis=1)
        return float(pairwise_mean(per))


def _sigma_u_zero(system: ControlSystem, b: ForwardBundle) -> bool:
    return system.sigma_control_free or not np.any(b.lin.sigma_u)


def adjoint_kernel_psi(system: ControlSystem, sp: StarPair, fund=None, bump: float | None = None) -> AdjointKernels:
    """Classical kernel ``Ψ(T, s)`` in the Fubini-collapsed form.

    ``Ψ = S Φ⁻¹(s)(b_u - Σ_j σ_x^j σ_u^j) + l_u + Σ_j D_s^j(G) Φ⁻¹(s) σ_u^j``
    with ``S`` the tail of ``l_x^T Φ`` plus ``h_x^T Φ(T)``. The Malliavin
    term is computed by bumping ``ΔW_{j,k}`` and re-solving from step ``k``;
    it is skipped when ``σ`` does not depend on the control.
    """
    if _regime(sp.regime) != BROWNIAN:
        raise InvalidArgument("adjoint_kernel_psi is the classical kernel; use adjoint_kernels_fbm")
    grid = sp.drivers.grid
    b = _bundle(system, sp, BROWNIAN)
    S, _ = _row_tail(system, b, grid)
    lin = b.lin
    comp = lin.b_u - np.einsum("ptjab,ptjbc->ptac", lin.sigma_x, lin.sigma_u)
    SPhi = np.einsum("pta,ptab->ptb", S, b.PhiInv)
    Psi = np.einsum("pta,ptab->ptb", SPhi, comp) + lin.l_u
    DG = None
    if not _sigma_u_zero(system, b):
        restart = _tail_functional(system, sp.u, BROWNIAN, b)
        DG = np.zeros((b.x.shape[0], system.m, grid.n, system.nx))
        for j in range(system.m):
            field_ = malliavin_brownian(None, sp.drivers, j, bump, restart=restart)
            DG[:, j] = field_.cells
            DPhi = np.einsum("pta,ptab->ptb", DG[:, j], b.PhiInv[:, :-1])
            Psi[:, :-1] += np.einsum("pta,ptab->ptb", DPhi, lin.sigma_u[:, :-1, j])
    return AdjointKernels(BROWNIAN, Psi=Psi, DG=DG, S=S, l_u=lin.l_u)


def adjoint_kernels_fbm(system: ControlSystem, sp: StarPair, fund=None, chunk: int = 64, bump: float | None = None) -> AdjointKernels:
    """fBm kernels ``F``, ``G_j`` and ``F̃ = F + Σ_j 𝔻_s^j G_j(T, s)``.

    ``F = S Φ⁻¹ b_u + l_u`` and ``G_j = S Φ⁻¹ σ_u^j``. The trace term needs
    ``D_r G_j(T, s)`` for all pairs ``(r, s)``; it is computed per path
    chunk by Malliavin bumps followed by the φ transform, and vanishes when
    ``σ`` does not depend on the control.
    """
    if _regime(sp.regime) != FBM:
        raise InvalidArgument("adjoint_kernels_fbm needs the fBm regime")
    if sp.drivers.H.is_brownian:
        raise UnsupportedError("fBm kernels need H > 1/2; route H = 1/2 through the classical kernel")
    grid = sp.drivers.grid
    b = _bundle(system, sp, FBM)
    S, _ = _row_tail(system, b, grid)
    SPhi = np.einsum("pta,ptab->ptb", S, b.PhiInv)
    F = np.einsum("pta,ptab->ptb", SPhi, b.lin.b_u) + b.lin.l_u
    G = np.einsum("pta,ptjab->ptjb", SPhi, b.lin.sigma_u)
    Ft = F.copy()
    if not _sigma_u_zero(system, b):
        P = b.x.shape[0]
        for s0 in range(0, P, chunk):
            sl = slice(s0, min(s0 + chunk, P))
            sub = sp.drivers.subset(sl)
            usub = sp.u.subset(sl)
            base = forward_bundle(system, usub, sub, FBM)
            for j in range(system.m):
                def restart(ens, k, j=j):
                    bb = forward_bundle(system, usub, ens, FBM, start=k, base=base)
                    SS, _ = _row_tail(system, bb, ens.grid)
                    rows = np.einsum("pta,ptab->ptb", SS, bb.PhiInv)
                    return np.einsum("pta,ptab->ptb", rows, bb.lin.sigma_u[:, :, j])

                D = malliavin_brownian(None, sub, j, bump, restart=restart).cells  # (Pc, n [r], n+1 [s], d)
                _, phi = transform_cells(D, sp.drivers.H, grid)  # (Pc, n+1 [t], n+1 [s], d)
                Ft[sl] += np.einsum("pkkd->pkd", phi)
    return AdjointKernels(FBM, F=F, G=G, Ftilde=Ft, S=S, l_u=b.lin.l_u)


# ---------------------------------------------------------------------------
# adjoint pair


@dataclass
class AdjointSolution:
    """``p`` ``(P, n+1, nx)`` and ``q`` ``(P, n+1, m, nx)`` (last node of ``q`` is 0)."""

    regime: str
    p: np.ndarray = field(repr=False)
    q: np.ndarray = field(repr=False)
    P_raw: np.ndarray = field(repr=False)
    Q_raw: np.ndarray | None = field(repr=False, default=None)
    spec: RegressionSpec = field(default_factory=RegressionSpec)
    terminal_check: float = 0.0
    fits: list = field(default_factory=list, repr=False)
    bundle: ForwardBundle | None = field(default=None, repr=False)
    meta: dict = field(default_factory=dict)


@dataclass
class NodeBasis:
    """Polynomial features of the state standardized with frozen node statistics.

    Powers of ``(x - mean) / std`` span the same polynomial space as powers
    of ``x`` but keep the normal equations well conditioned when the
    ensemble is concentrated (early times).
    """

    mean: np.ndarray
    std: np.ndarray
    spec: RegressionSpec
    extra_mean: np.ndarray | None = None
    extra_std: np.ndarray | None = None

    @classmethod
    def fit(cls, x_k, spec, extra=None):
        def stats(a):
            a = a.reshape(a.shape[0], -1)
            sd = a.std(axis=0)
            return a.mean(axis=0), np.where(sd > 1e-12 * (1 + np.abs(a).max(axis=0)), sd, 1.0)

        m, s = stats(x_k)
        em, es = stats(extra) if extra is not None else (None, None)
        return cls(m, s, spec, em, es)

    def __call__(self, x_k, extra=None):
        z = (x_k.reshape(x_k.shape[0], -1) - self.mean) / self.std
        e = None if extra is None or self.extra_mean is None else (extra.reshape(extra.shape[0], -1) - self.extra_mean) / self.extra_std
        return polynomial_features(z, self.spec, e)


def _p_regression(P_raw, x, spec, extra):
    """Condition ``P_raw[:, k]`` on features at every node; returns fitted values, fits and bases."""
    Pn, n1, nx = P_raw.shape
    p = np.empty_like(P_raw)
    fits, bases = [], []
    for k in range(n1):
        ek = None if extra is None else extra[:, k]
        basis = NodeBasis.fit(x[:, k], spec, ek)
        fitted, fit = condition_on(P_raw[:, k], basis(x[:, k], ek), spec)
        p[:, k] = fitted.reshape(Pn, nx)
        fits.append(fit)
        bases.append(basis)
    return p, fits, bases


def _slope_regression(target_next, x, dW, spec, extra, h):
    """Coefficient of ``ΔW_{j,k}`` when regressing ``target_{k+1}`` on ``[φ_k, φ_k ΔW_k]``.

    Returns ``(P, n+1, m, nx)``; the coefficient is a per-path function of
    the features at node ``k``.
    """
    Pn, n1, nx = target_next.shape
    m = dW.shape[2]
    out = np.zeros((Pn, n1, m, nx))
    for k in range(n1 - 1):
        ek = None if extra is None else extra[:, k]
        phi = NodeBasis.fit(x[:, k], spec, ek)(x[:, k], ek)
        X = np.concatenate([phi] + [phi * dW[:, k, j : j + 1] for j in range(m)], axis=1)
        _, fit = condition_on(target_next[:, k + 1], X, spec)
        zero = np.concatenate([phi] + [np.zeros_like(phi)] * m, axis=1)
        base = fit.predict(zero)
        for j in range(m):
            blocks = [phi] + [phi if i == j else np.zeros_like(phi) for i in range(m)]
            out[:, k, j] = (fit.predict(np.concatenate(blocks, axis=1)) - base).reshape(Pn, nx)
    return out


def _P_raw(b: ForwardBundle, S: np.ndarray) -> np.ndarray:
    return np.einsum("ptba,ptb->pta", b.PhiInv, S)


def adjoint_pair_bm(system: ControlSystem, sp: StarPair, fund=None, spec: RegressionSpec | None = None, with_Q: bool = False, bump: float | None = None) -> AdjointSolution:
    """Classical adjoint pair by least-squares Monte Carlo.

    ``p(t_k)`` is the regression of ``P(t_k) = Φ^{-T}(t_k) S_k`` on
    polynomial features of ``x_k``; ``p(T) = h_x(x(T))`` is imposed.
    ``q_j(t_k)`` is the coefficient of ``ΔW_{j,k}`` in the regression of
    ``p(t_{k+1})`` on ``[φ(x_k), φ(x_k) ΔW_{j,k}]``. With ``with_Q`` the
    pathwise kernels ``Q_j = -σ_x^{jT} P + Φ^{-T} D^j G`` are also
    returned (Malliavin FD).
    """
    if _regime(sp.regime) != BROWNIAN:
        raise InvalidArgument("adjoint_pair_bm needs the classical regime")
    spec = spec or RegressionSpec()
    grid = sp.drivers.grid
    b = _bundle(system, sp, BROWNIAN)
    S, _ = _row_tail(system, b, grid)
    P_raw = _P_raw(b, S)
    p, fits, bases = _p_regression(P_raw, b.x, spec, None)
    p[:, -1] = b.lin.h_x
    q = _slope_regression(p, b.x, sp.drivers.dW, spec, None, grid.step)
    Q_raw = None
    if with_Q:
        restart = _tail_functional(system, sp.u, BROWNIAN, b)
        Q_raw = np.zeros((b.x.shape[0], grid.n + 1, system.m, system.nx))
        for j in range(system.m):
            fld = malliavin_brownian(None, sp.drivers, j, bump, restart=restart)
            Q_raw[:, :-1, j] = np.einsum("ptba,ptb->pta", b.PhiInv[:, :-1], fld.cells)
            Q_raw[:, :, j] -= np.einsum("ptba,ptb->pta", b.lin.sigma_x[:, :, j], P_raw)
    check = float(np.max(np.abs(p[:, -1] - system.h_x(b.x[:, -1]))))
    return AdjointSolution(BROWNIAN, p, q, P_raw, Q_raw, spec, check, fits, b, {"bases": bases})


def adjoint_pair_fbm(system: ControlSystem, sp: StarPair, fund=None, spec: RegressionSpec | None = None) -> AdjointSolution:
    """fBm adjoint pair.

    ``p`` is the regression of ``P(t) = Φ^{-T}(t) S_t`` on features of
    ``(x_k, B^H(t_k))``. With the martingale ``M_k = Φ_k^T p_k + A_k``
    (``A`` the running sum of ``Φ^T l_x Δt``), ``q_j = Φ_k^{-T}`` times the
    coefficient of ``ΔW_{j,k}`` in the regression of ``M_{k+1}``.
    """
    if _regime(sp.regime) != FBM:
        raise InvalidArgument("adjoint_pair_fbm needs the fBm regime")
    spec = spec or RegressionSpec(include_driver=True)
    if not spec.include_driver:
        spec = RegressionSpec(spec.degree, spec.cross_degree, True, spec.ridge, spec.constant_only)
    grid = sp.drivers.grid
    b = _bundle(system, sp, FBM)
    S, _ = _row_tail(system, b, grid)
    P_raw = _P_raw(b, S)
    extra = sp.drivers.BH
    p, fits, bases = _p_regression(P_raw, b.x, spec, extra)
    p[:, -1] = b.lin.h_x
    lxphi = np.einsum("pta,ptab->ptb", b.lin.l_x, b.Phi)
    w = np.zeros(grid.n + 1)
    w[: grid.n] = grid.steps
    A = np.cumsum(lxphi * w[None, :, None], axis=1)  # A_k = Σ_{i<=k}
    M = np.einsum("ptba,ptb->pta", b.Phi, p) + A
    slope = _slope_regression(M, b.x, sp.drivers.dW, spec, extra, grid.step)
    q = np.einsum("ptba,ptjb->ptja", b.PhiInv, slope)
    check = float(np.max(np.abs(p[:, -1] - system.h_x(b.x[:, -1]))))
    return AdjointSolution(FBM, p, q, P_raw, None, spec, check, fits, b, {"features": "x, B^H(t)", "bases": bases})


# ---------------------------------------------------------------------------
# residuals of the backward equations


@dataclass
class BackwardResidual:
    """Integrated residual ``R_k`` (ensemble mean per node) and its summaries.

    ``R_k = p_k - [h_x(x_n) + Σ_{i>=k} (drift_i Δt - noise_i)]`` accumulated
    backward from ``T``; ``sup_mean = sup_k |mean R_k| / scale`` with
    ``scale = max(1, sup_k mean |p_k|)``.
    """

    series: np.ndarray = field(repr=False)
    sup_mean: float
    mean_square: float
    scale: float

    def to_csv(self, filename, grid):
        with open(filename, "w") as fh:
            fh.write("t," + ",".join(f"r{i + 1}" for i in range(self.series.shape[1])) + "\n")
            for t, row in zip(grid.nodes, self.series):
                fh.write(f"{t:.17g}," + ",".join(f"{v:.17g}" for v in row) + "\n")


def _integrated(p, terminal, steps_drift, noise, grid):
    P, n1, nx = p.shape
    R = np.empty_like(p)
    acc = terminal.copy()
    R[:, -1] = p[:, -1] - acc
    for k in range(grid.n - 1, -1, -1):
        acc = acc + steps_drift[:, k] - noise[:, k]
        R[:, k] = p[:, k] - acc
    # Σ q ΔW has mean exactly zero (q_k is known at t_k, ΔW_k is independent of
    # it), so the mean residual is formed without it: a martingale control variate.
    mean = pairwise_mean(R - _noise_tail(noise, n1))
    scale = max(1.0, float(np.max(np.mean(np.abs(p), axis=0))))
    return BackwardResidual(mean, float(np.max(np.abs(mean))) / scale, float(np.mean(R ** 2)), scale)


def _noise_tail(noise, n1):
    """``Σ_{i>=k} noise_i`` per node (zero at the last node)."""
    out = np.zeros(noise.shape[:1] + (n1,) + noise.shape[2:])
    out[:, :-1] = np.cumsum(noise[:, ::-1], axis=1)[:, ::-1]
    return out


def bsde_residual(system: ControlSystem, sp: StarPair, adj: AdjointSolution, terminal=None) -> BackwardResidual:
    """Residual of ``-dp = (b_x^T p + Σ σ_x^{jT} q_j + l_x) dt - Σ q_j dW_j``, ``p(T) = h_x``."""
    grid = sp.drivers.grid
    lin = adj.bundle.lin if adj.bundle is not None else sp.lin
    p, q = adj.p, adj.q
    drift = np.einsum("ptba,ptb->pta", lin.b_x, p) + np.einsum("ptjba,ptjb->pta", lin.sigma_x, q) + lin.l_x
    sd = drift[:, :-1] * grid.steps[None, :, None]
    noise = np.einsum("ptja,ptj->pta", q[:, :-1], sp.drivers.dW)
    term = system.h_x(sp.state.x[:, -1]) if terminal is None else terminal
    return _integrated(p, np.asarray(term, dtype=float), sd, noise, grid)


def fbm_backward_residual(system: ControlSystem, sp: StarPair, adj: AdjointSolution, terminal=None) -> BackwardResidual:
    """Residual of ``dp = -b_x^T p dt - l_x dt - σ_x^T p d°B^H + Σ q_j dW_j``, ``p(T) = h_x``.

    The ``d°B^H`` term is the left-point pathwise sum.
    """
    grid = sp.drivers.grid
    lin = adj.bundle.lin if adj.bundle is not None else sp.lin
    p, q = adj.p, adj.q
    drift = np.einsum("ptba,ptb->pta", lin.b_x, p) + lin.l_x
    sd = drift[:, :-1] * grid.steps[None, :, None]
    sd = sd + np.einsum("ptjba,ptb,ptj->pta", lin.sigma_x[:, :-1], p[:, :-1], sp.drivers.dBH)
    noise = np.einsum("ptja,ptj->pta", q[:, :-1], sp.drivers.dW)
    term = system.h_x(sp.state.x[:, -1]) if terminal is None else terminal
    return _integrated(p, np.asarray(term, dtype=float), sd, noise, grid)


def q_malliavin_check(system: ControlSystem, sp: StarPair, adj: AdjointSolution, eps: float = 1e-4) -> np.ndarray:
    """``D^j_{t_k} p(t_{k+1})`` through the frozen regressions, ``(P, n+1, m, nx)``.

    The increment ``ΔW_{j,k}`` is bumped, which moves ``x_{k+1}`` by
    ``ε σ^j(x_k)``, and the fitted regression of node ``k+1`` is
    re-evaluated. This is the right limit of ``D_t p(s)`` as ``s ↓ t`` on the
    grid, aligned with ``q`` at node ``k``; the last node is 0 like ``q``.
    """
    if adj.regime != BROWNIAN:
        raise InvalidArgument("the q = D p check is the classical lemma")
    grid = sp.drivers.grid
    x = adj.bundle.x
    P = x.shape[0]
    out = np.zeros((P, grid.n + 1, system.m, system.nx))
    for k in range(grid.n):
        sig = system.sigma(grid.nodes[k], x[:, k], _control_at(sp.u, k, P))  # (P, nx, m)
        fit, basis = adj.fits[k + 1], adj.meta["bases"][k + 1]
        for j in range(system.m):
            fp = fit.predict(basis(x[:, k + 1] + eps * sig[:, :, j]))
            fm = fit.predict(basis(x[:, k + 1] - eps * sig[:, :, j]))
            out[:, k, j] = ((fp - fm) / (2 * eps)).reshape(P, system.nx)
    return out
