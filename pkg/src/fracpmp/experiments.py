"""Registered experiments, their default settings and tolerances.

Each experiment maps an :class:`ExperimentConfig` to an
:class:`ExperimentResult`: a list of checks (measured value against a
registered tolerance) and plot-ready tables. Verdicts only ever consult the
tolerances stored in the config, which start from the registry values.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .adjoint import adjoint_pair_bm, adjoint_pair_fbm, bsde_residual, cost, fbm_backward_residual, gateaux_fd, q_malliavin_check
from .dynamics import (
    ControlProcess,
    constant_control,
    fundamental_pair,
    function_control,
    make_system,
    riccati_oracle,
    solve_sde_fbm,
    star_pair,
    variational_path_direct,
    variational_path_explicit,
)
from .errors import InvalidArgument
from .fbm import bh_from_w, cholesky_fbm_oracle, empirical_covariance, fbm_covariance, kappa_h, sample_joint
from .fbm_ops import gamma_star_energy, duality_check, pathwise_integral, strat_to_divergence
from .frac import FracOrder, default_young_alpha, frac_integral, weyl_derivative, young_integral_ibp, young_integral_riemann
from .grid import SamplePath, from_function, make_uniform_grid
from .max_principle import kernel_gradient, mp_residual_classical, mp_residual_fbm, optimize_control, rho_quadrature

CLASSICAL = "classical"
FBM = "fbm"
BOTH = "both"

GLOBAL_DEFAULTS = {
    "H": 0.75,
    "T": 1.0,
    "n": 1024,
    "paths": 20000,
    "seed": 42,
    "workers": 1,
    "regime": BOTH,
    "system": "none",
    "out": "out",
}


@dataclass
class ExperimentConfig:
    """Fully resolved run configuration."""

    experiment: str
    H: float = GLOBAL_DEFAULTS["H"]
    T: float = GLOBAL_DEFAULTS["T"]
    n: int = GLOBAL_DEFAULTS["n"]
    paths: int = GLOBAL_DEFAULTS["paths"]
    seed: int = GLOBAL_DEFAULTS["seed"]
    workers: int = GLOBAL_DEFAULTS["workers"]
    regime: str = GLOBAL_DEFAULTS["regime"]
    system: str = GLOBAL_DEFAULTS["system"]
    out: str = GLOBAL_DEFAULTS["out"]
    tolerances: dict = field(default_factory=dict)

    def tol(self, name: str) -> float:
        return float(self.tolerances[name])


@dataclass
class Check:
    name: str
    measured: float
    threshold: float
    relation: str = "<="

    @property
    def passed(self) -> bool:
        m = float(self.measured)
        if not np.isfinite(m):
            return False
        return m <= self.threshold if self.relation == "<=" else m >= self.threshold

    def line(self) -> str:
        return f"{self.name}: measured={self.measured:.6g} {self.relation} {self.threshold:.6g} {'PASS' if self.passed else 'FAIL'}"


@dataclass
class Table:
    header: list
    rows: list = field(default_factory=list)

    def add(self, *row):
        self.rows.append(row)

    def to_csv(self, filename):
        with open(filename, "w", newline="") as fh:
            fh.write(",".join(self.header) + "\n")
            for row in self.rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


@dataclass
class ExperimentResult:
    checks: list
    tables: dict
    info: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


@dataclass
class Experiment:
    name: str
    description: str
    runner: object = field(repr=False)
    defaults: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    quick: dict = field(default_factory=dict)
    regimes: tuple = (BOTH,)
    systems: tuple = ("none",)
    fixed: dict = field(default_factory=dict)

    def validate(self, cfg: ExperimentConfig):
        """Experiment-specific rules on a resolved config; raises InvalidArgument."""
        for key, val in self.fixed.items():
            if getattr(cfg, key) != val:
                raise InvalidArgument(f"{self.name} runs with {key}={val} only (got {getattr(cfg, key)})")
        if cfg.regime not in self.regimes:
            raise InvalidArgument(f"{self.name} supports regime {' or '.join(self.regimes)} (got {cfg.regime})")
        if cfg.system not in self.systems:
            raise InvalidArgument(f"{self.name} supports system {' or '.join(self.systems)} (got {cfg.system})")
        extra = set(cfg.tolerances) - set(self.tolerances)
        if extra:
            raise InvalidArgument(f"unknown tolerance(s) for {self.name}: {sorted(extra)}; known: {sorted(self.tolerances)}")

    def run(self, cfg: ExperimentConfig) -> ExperimentResult:
        return self.runner(cfg)


def _with_companion(H: float, companion: float) -> list:
    return [companion, H] if abs(H - companion) > 1e-12 else [H]


# ---------------------------------------------------------------------------
# 1. fBm covariance

COV_PAIRS = ((1, 1), (1, 0.5), (0.5, 0.5), (0.25, 0.75), (1, 0.25), (0.125, 0.125), (0.0625, 1), (0.75, 0.75), (0.5, 1), (0.0625, 0.0625))


def _fbm_covariance(cfg: ExperimentConfig) -> ExperimentResult:
    start = time.perf_counter()
    grid = make_uniform_grid(cfg.T, cfg.n)
    tab = Table(["H", "t", "s", "exact", "volterra", "volterra_se", "cholesky", "cholesky_se", "z_volterra", "z_cholesky", "z_joint"])
    zv = zc = zj = 0.0
    for H in _with_companion(cfg.H, 0.6):
        ens = sample_joint(H, grid, 1, cfg.paths, cfg.seed, cfg.workers)
        chol = cholesky_fbm_oracle(H, grid, cfg.paths, cfg.seed, workers=cfg.workers)
        for ft, fs in COV_PAIRS:
            t = grid.nodes[int(round(ft * cfg.n))]
            s = grid.nodes[int(round(fs * cfg.n))]
            exact = float(fbm_covariance(H, t, s))
            ev, se_v = empirical_covariance(ens, 0, t, s)
            ec, se_c = empirical_covariance(chol, 0, t, s)
            z1, z2 = (ev - exact) / se_v, (ec - exact) / se_c
            z3 = (ev - ec) / np.hypot(se_v, se_c)
            zv, zc, zj = max(zv, abs(z1)), max(zc, abs(z2)), max(zj, abs(z3))
            tab.add(H, t, s, exact, ev, se_v, ec, se_c, z1, z2, z3)
    elapsed = time.perf_counter() - start
    z = cfg.tol("z_max")
    checks = [Check("z_volterra_max", zv, z), Check("z_cholesky_max", zc, z), Check("z_joint_max", zj, z), Check("runtime_s", elapsed, cfg.tol("runtime_s"))]
    return ExperimentResult(checks, {"covariance": tab})


# ---------------------------------------------------------------------------
# 2. H = 1/2


def _h_half(cfg: ExperimentConfig) -> ExperimentResult:
    grid = make_uniform_grid(cfg.T, cfg.n)
    ens = sample_joint(0.5, grid, 2, cfg.paths, cfg.seed, cfg.workers)
    mismatch = int(np.count_nonzero(ens.W != ens.BH))
    regen = int(np.count_nonzero(bh_from_w(ens.W, 0.5, grid, cfg.workers) != ens.W))
    kdiff = abs(kappa_h(0.5) - 1.0)
    tab = Table(["check", "value"])
    tab.add("bh_w_mismatches", mismatch)
    tab.add("regenerated_mismatches", regen)
    tab.add("kappa_half_minus_one", kdiff)
    tab.add("W_checksum", float(np.sum(ens.W)))
    tol = cfg.tol("mismatches")
    checks = [Check("bh_w_mismatches", mismatch, tol), Check("regenerated_mismatches", regen, tol), Check("kappa_half_minus_one", kdiff, cfg.tol("kappa"))]
    return ExperimentResult(checks, {"degeneration": tab})


# ---------------------------------------------------------------------------
# 3. fractional calculus


def _frac_calculus(cfg: ExperimentConfig) -> ExperimentResult:
    grid = make_uniform_grid(cfg.T, cfg.n)
    t = grid.nodes
    f = from_function(grid, lambda s: s)
    i34 = frac_integral(frac_integral(f, FracOrder(0.3)), FracOrder(0.4))
    i7 = frac_integral(f, FracOrder(0.7))
    semigroup = float(np.max(np.abs(i34.values - i7.values)))
    inv = weyl_derivative(frac_integral(f, FracOrder(0.4)), FracOrder(0.4))
    inversion = float(np.max(np.abs(inv.values[:, 0] - t)))
    sq, cube = from_function(grid, lambda s: s * s), from_function(grid, lambda s: s ** 3)
    exact = 0.6 * cfg.T ** 5
    ibp = young_integral_ibp(sq, cube, 0.3, with_bound=False).value
    riem = young_integral_riemann(sq, cube).value
    scalars = Table(["quantity", "value", "reference"])
    scalars.add("semigroup_sup", semigroup, 0.0)
    scalars.add("inversion_sup", inversion, 0.0)
    scalars.add("young_ibp", ibp, exact)
    scalars.add("young_riemann", riem, exact)

    # ibp against Riemann on fBm-driven pairs, one fine sample subsampled to coarser grids
    fine = make_uniform_grid(cfg.T, 2 * cfg.n)
    ens = sample_joint(cfg.H, fine, 1, cfg.paths, cfg.seed, cfg.workers)
    alpha = default_young_alpha(cfg.H)
    gaps = Table(["path", "n", "ibp", "riemann", "relative_gap"])
    worst = {}
    for p in range(cfg.paths):
        for factor in (4, 2, 1):
            g = fine.subsample(factor)
            B = SamplePath(g, ens.BH[p, ::factor, 0])
            fp = from_function(g, np.sin)
            vi = young_integral_ibp(fp, B, alpha, check=False, with_bound=False).value
            vr = young_integral_riemann(fp, B).value
            scale = float(np.sum(np.abs(fp.values[:-1, 0] * np.diff(B.values[:, 0]))))
            rel = abs(vi - vr) / scale
            gaps.add(p, g.n, vi, vr, rel)
            worst[g.n] = max(worst.get(g.n, 0.0), rel)
    levels = sorted(worst)
    shrink_violations = sum(1 for a, b in zip(levels, levels[1:]) if worst[b] >= worst[a])
    checks = [
        Check("semigroup_sup", semigroup, cfg.tol("semigroup")),
        Check("inversion_sup", inversion, cfg.tol("inversion")),
        Check("young_ibp_error", abs(ibp - exact), cfg.tol("young")),
        Check("young_riemann_error", abs(riem - exact), cfg.tol("young")),
        Check("fbm_pair_gap", worst[levels[-1]], cfg.tol("pair_gap")),
        Check("gap_shrink_violations", shrink_violations, 0.0),
    ]
    return ExperimentResult(checks, {"scalars": scalars, "pair_gaps": gaps})


# ---------------------------------------------------------------------------
# 4. operator isometry and duality

DUALITY_N = 64
TRACE_PATHS = 32


def _operator_duality(cfg: ExperimentConfig) -> ExperimentResult:
    grid = make_uniform_grid(cfg.T, cfg.n)
    energy = gamma_star_energy(SamplePath(grid, np.ones(grid.n + 1)), cfg.H)
    target = cfg.T ** (2 * cfg.H)
    iso = abs(energy - target) / target

    coarse = make_uniform_grid(cfg.T, DUALITY_N)
    ens = sample_joint(cfg.H, coarse, 1, cfg.paths, cfg.seed, cfg.workers)
    dual = duality_check(lambda e: e.BH[:, -1, 0], np.ones(coarse.n + 1), ens, 0, 0.0, cfg.T)
    gap = abs(dual.lhs - dual.rhs)
    allowed = cfg.tol("duality_se") * dual.joint_stderr + cfg.tol("duality_abs")

    BH = ens.BH[:, :, 0]
    trace_exact = 0.5 * cfg.T ** (2 * cfg.H)
    div = pathwise_integral(BH, BH) - trace_exact
    div_mean = float(np.mean(div))
    div_se = float(np.std(div, ddof=1) / np.sqrt(div.size))
    small = ens.subset(slice(0, min(TRACE_PATHS, ens.path_count)))
    trace = strat_to_divergence(lambda e: e.BH[:, :, 0], small, 0, 0.0, cfg.T)
    trace_rel = float(np.max(np.abs(trace - trace_exact))) / trace_exact

    tab = Table(["quantity", "value", "reference", "stderr"])
    tab.add("gamma_star_energy", energy, target, 0.0)
    tab.add("duality_lhs", dual.lhs, dual.rhs, dual.lhs_stderr)
    tab.add("duality_rhs", dual.rhs, dual.lhs, dual.rhs_stderr)
    tab.add("divergence_mean", div_mean, 0.0, div_se)
    tab.add("trace_mean", float(np.mean(trace)), trace_exact, 0.0)
    checks = [
        Check("isometry_relative", iso, cfg.tol("isometry")),
        Check("duality_gap", gap, allowed),
        Check("divergence_mean_abs", abs(div_mean), cfg.tol("divergence_se") * div_se),
        Check("trace_relative", trace_rel, cfg.tol("trace")),
    ]
    return ExperimentResult(checks, {"operators": tab})


# ---------------------------------------------------------------------------
# 5. SDE solver


def _sde_solver(cfg: ExperimentConfig) -> ExperimentResult:
    levels = [cfg.n * f for f in (1, 2, 4, 8)]
    geo = make_system("geometric", a=0.0, c=1.0, x0=1.0)
    conv = Table(["n", "mean_sup_relative_error"])
    errs = []
    for n in levels:
        grid = make_uniform_grid(cfg.T, n)
        ens = sample_joint(cfg.H, grid, 1, cfg.paths, cfg.seed, cfg.workers)
        x = solve_sde_fbm(geo, constant_control(grid, 0.0), ens, cfg.workers).x[:, :, 0]
        exact = np.exp(ens.BH[:, :, 0])
        err = float(np.mean(np.max(np.abs(x - exact) / exact, axis=1)))
        errs.append(err)
        conv.add(n, err)
    order = -float(np.polyfit(np.log(levels), np.log(errs), 1)[0])

    n4 = levels[2]
    grid = make_uniform_grid(cfg.T, n4)
    lin = make_system("geometric", a=0.3, c=0.5, x0=1.0)
    defects = Table(["regime", "n", "mean_sup_defect", "median_sup_defect", "max_sup_defect"])
    dvals = {}
    for H, regime in ((0.5, CLASSICAL), (cfg.H, FBM)):
        ens = sample_joint(H, grid, 1, cfg.paths, cfg.seed, cfg.workers)
        sp = star_pair(lin, constant_control(grid, 0.0), ens, regime, cfg.workers)
        fp = fundamental_pair(lin, sp)
        # per-path sup over time, averaged over paths (same metric as the geometric error)
        dvals[regime] = float(np.mean(fp.defect_series.max(axis=1)))
        defects.add(regime, n4, dvals[regime], fp.median_defect, fp.product_defect)
    checks = [
        Check("geometric_error_4n", errs[2], cfg.tol("geometric")),
        Check("refinement_order", order, cfg.tol("order"), ">="),
        Check("defect_classical", dvals[CLASSICAL], cfg.tol("defect")),
        Check("defect_fbm", dvals[FBM], cfg.tol("defect")),
    ]
    return ExperimentResult(checks, {"convergence": conv, "defects": defects})


# ---------------------------------------------------------------------------
# 6. variational equation


def _variational(cfg: ExperimentConfig) -> ExperimentResult:
    grid = make_uniform_grid(cfg.T, cfg.n)
    system = make_system("scalar-nonlinear")
    u = function_control(grid, lambda t: np.sin(2 * t))
    v = function_control(grid, lambda t: np.cos(3 * t))
    eps = 1e-3
    tab = Table(["regime", "fd_sup_error", "explicit_sup_error", "y_sup"])
    checks = []
    for H, regime in ((0.5, CLASSICAL), (cfg.H, FBM)):
        ens = sample_joint(H, grid, 1, cfg.paths, cfg.seed, cfg.workers)
        sp = star_pair(system, u, ens, regime, cfg.workers)
        y = variational_path_direct(system, sp, v)
        xe = star_pair(system, u + v.scaled(eps), ens, regime, cfg.workers).state.x
        fd = float(np.max(np.abs((xe - sp.state.x) / eps - y)))
        ye = variational_path_explicit(fundamental_pair(system, sp), system, sp, v)
        ex = float(np.max(np.abs(ye - y)))
        tab.add(regime, fd, ex, float(np.max(np.abs(y))))
        checks += [Check(f"fd_error_{regime}", fd, cfg.tol("fd")), Check(f"explicit_error_{regime}", ex, cfg.tol("explicit"))]
    return ExperimentResult(checks, {"variational": tab})


# ---------------------------------------------------------------------------
# 7. adjoint gradient identity

DIRECTIONS = (
    ("one", lambda t: np.ones_like(t)),
    ("cos2t", lambda t: np.cos(2 * t)),
    ("t", lambda t: t),
    ("sin_pi_t", lambda t: np.sin(np.pi * t)),
    ("exp_minus_t", lambda t: np.exp(-t)),
)


def _adjoint_gradient(cfg: ExperimentConfig) -> ExperimentResult:
    start = time.perf_counter()
    grid = make_uniform_grid(cfg.T, cfg.n)
    system = make_system(cfg.system)
    ens = sample_joint(0.5, grid, 1, cfg.paths, cfg.seed, cfg.workers)
    u = constant_control(grid, np.full(system.d, 0.2))
    grad, _ = kernel_gradient(system, u, ens, CLASSICAL)
    tab = Table(["direction", "adjoint_pairing", "fd_derivative", "fd_stderr", "relative_error"])
    worst = 0.0
    for name, fn in DIRECTIONS:
        v = function_control(grid, lambda t: np.outer(fn(t), np.ones(system.d)))
        pairing = float(np.sum(np.sum(grad[:-1] * v.values[0, :-1], axis=1) * grid.steps))
        fd = gateaux_fd(system, u, v, ens, CLASSICAL, workers=cfg.workers)
        rel = abs(pairing - fd.value) / abs(fd.value)
        worst = max(worst, rel)
        tab.add(name, pairing, fd.value, fd.stderr, rel)
    elapsed = time.perf_counter() - start
    checks = [Check("max_relative_error", worst, cfg.tol("relative")), Check("runtime_s", elapsed, cfg.tol("runtime_s"))]
    return ExperimentResult(checks, {"gradient_identity": tab})


# ---------------------------------------------------------------------------
# 8. LQ regulator against the Riccati oracle


def _lq_riccati(cfg: ExperimentConfig) -> ExperimentResult:
    grid = make_uniform_grid(cfg.T, cfg.n)
    system = make_system(cfg.system)
    prm = system.params
    x0 = float(system.x0[0])
    ens = sample_joint(0.5, grid, 1, cfg.paths, cfg.seed, cfg.workers)
    S, J_exact, gain = riccati_oracle(prm["a"], prm["b"], prm["q"], prm["r"], prm["sigma"], x0, cfg.T, nodes=grid.nodes)
    oracle = ControlProcess(grid, np.stack([gain, np.zeros_like(gain)], axis=1)[None])
    zero = ControlProcess(grid, np.zeros((1, grid.n + 1, 2)))
    J_oracle = cost(system, oracle, ens, CLASSICAL, cfg.workers)
    u, trace = optimize_control(system, zero, ens, CLASSICAL, gtol=cfg.tol("gtol"))
    J_opt = float(trace.J[-1])
    gap = abs(J_opt - J_oracle.J) / abs(J_oracle.J)

    def mp(ctrl):
        sp = star_pair(system, ctrl, ens, CLASSICAL, cfg.workers)
        return mp_residual_classical(system, sp, adjoint_pair_bm(system, sp)).sup

    mp_end, mp_zero, mp_oracle = mp(u), mp(zero), mp(oracle)
    summary = Table(["quantity", "value"])
    for k, v in (("J_optimizer", J_opt), ("J_oracle_common_numbers", J_oracle.J), ("J_oracle_stderr", J_oracle.stderr), ("J_riccati", J_exact),
                 ("relative_gap_common_numbers", gap), ("relative_gap_riccati", (J_opt - J_exact) / J_exact),
                 ("mp_residual_endpoint", mp_end), ("mp_residual_zero", mp_zero), ("mp_residual_oracle", mp_oracle), ("iterations", len(trace.rows) - 1)):
        summary.add(k, v)
    gains = Table(["t", "gain_optimizer", "offset_optimizer", "gain_riccati"])
    for k in range(grid.n + 1):
        gains.add(grid.nodes[k], u.values[0, k, 0], u.values[0, k, 1], gain[k])
    tr = Table(["iter", "J", "grad_norm", "mp_residual", "step"], [tuple(r) for r in trace.rows])
    checks = [
        Check("J_relative_gap", gap, cfg.tol("J_relative")),
        Check("mp_residual_endpoint", mp_end, cfg.tol("mp_endpoint")),
        Check("mp_residual_zero", mp_zero, cfg.tol("mp_zero"), ">="),
        Check("mp_residual_oracle", mp_oracle, cfg.tol("mp_endpoint")),
    ]
    return ExperimentResult(checks, {"summary": summary, "gains": gains, "trace": tr})


# ---------------------------------------------------------------------------
# 9. q against the Malliavin derivative of p


def _q_malliavin(cfg: ExperimentConfig) -> ExperimentResult:
    grid = make_uniform_grid(cfg.T, cfg.n)
    a, c = 0.2, 0.3
    system = make_system("geometric", a=a, c=c, x0=1.0, terminal="quadratic")
    ens = sample_joint(0.5, grid, 1, cfg.paths, cfg.seed, cfg.workers)
    sp = star_pair(system, constant_control(grid, 0.0), ens, CLASSICAL, cfg.workers)
    adj = adjoint_pair_bm(system, sp)
    q = adj.q[:, :-1, 0, 0]
    dp = q_malliavin_check(system, sp, adj)[:, :-1, 0, 0]
    rel = float(np.sqrt(np.mean((q - dp) ** 2) / np.mean(dp ** 2)))
    res = bsde_residual(system, sp, adj)
    x = sp.state.x[:, :, 0]
    p_exact = x * np.exp((2 * a + c * c) * (cfg.T - grid.nodes))
    tab = Table(["t", "mean_p", "mean_p_exact", "mean_q", "mean_Dp", "mean_q_exact", "rms_q_minus_Dp", "bsde_residual_mean"])
    mq, md, mqe = q.mean(0), dp.mean(0), c * p_exact[:, :-1].mean(0)
    rms = np.sqrt(np.mean((q - dp) ** 2, axis=0))
    mp, mpe = adj.p[:, :, 0].mean(0), p_exact.mean(0)
    for k in range(grid.n):
        tab.add(grid.nodes[k], mp[k], mpe[k], mq[k], md[k], mqe[k], rms[k], float(res.series[k, 0]))
    checks = [Check("q_relative_l2", rel, cfg.tol("q_relative")), Check("bsde_residual", res.sup_mean, cfg.tol("bsde"))]
    return ExperimentResult(checks, {"adjoint": tab})


# ---------------------------------------------------------------------------
# 10. fBm maximum principle


def _fbm_mp(cfg: ExperimentConfig) -> ExperimentResult:
    grid = make_uniform_grid(cfg.T, cfg.n)
    system = make_system(cfg.system)
    ens = sample_joint(cfg.H, grid, 1, cfg.paths, cfg.seed, cfg.workers)
    zero = ControlProcess(grid, np.zeros((1, grid.n + 1, system.d)))

    def report(ctrl):
        sp = star_pair(system, ctrl, ens, FBM, cfg.workers)
        adj = adjoint_pair_fbm(system, sp)
        return mp_residual_fbm(system, sp, adj), fbm_backward_residual(system, sp, adj)

    r0, b0 = report(zero)
    u, trace = optimize_control(system, zero, ens, FBM, gtol=cfg.tol("gtol"))
    r1, b1 = report(u)
    reduction = r0.sup / r1.sup if r1.sup > 0 else np.inf
    sigma_max = max(float(np.max(np.abs(r0.components["r_sigma"]))), float(np.max(np.abs(r1.components["r_sigma"]))))
    summary = Table(["quantity", "value"])
    for k, v in (("r_b_zero", r0.sup), ("r_b_endpoint", r1.sup), ("reduction", reduction), ("r_sigma_max", sigma_max),
                 ("backward_residual_zero", b0.sup_mean), ("backward_residual_endpoint", b1.sup_mean), ("iterations", len(trace.rows) - 1)):
        summary.add(k, v)
    tr = Table(["iter", "J", "grad_norm", "mp_residual", "step"], [tuple(r) for r in trace.rows])
    control = Table(["t", "u"], [(grid.nodes[k], u.values[0, k, 0]) for k in range(grid.n + 1)])
    checks = [
        Check("r_b_reduction", reduction, cfg.tol("reduction"), ">="),
        Check("r_sigma_max", sigma_max, cfg.tol("r_sigma")),
        Check("backward_residual", max(b0.sup_mean, b1.sup_mean), cfg.tol("backward")),
    ]
    return ExperimentResult(checks, {"summary": summary, "trace": tr, "control": control})


# ---------------------------------------------------------------------------
# 11. ρ(ε)

RHO_EPS = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2)


def _log_slope(eps, vals) -> float:
    return float(np.polyfit(np.log(eps), np.log(vals), 1)[0])


def _rho(cfg: ExperimentConfig) -> ExperimentResult:
    a = cfg.T
    tab = Table(["H", "eps", "rho"])
    slopes = {}
    monotone_violations = 0
    for H in _with_companion(cfg.H, 0.51):
        vals = [rho_quadrature(H, a, e) for e in RHO_EPS]
        for e, r in zip(RHO_EPS, vals):
            tab.add(H, e, r)
        monotone_violations += int(np.sum(np.diff(vals) >= 0))
        slopes[H] = _log_slope(RHO_EPS, vals)
    slope_tab = Table(["H", "slope"], [(H, s) for H, s in slopes.items()])
    s_main = slopes[cfg.H]
    checks = [
        Check("slope_lower", s_main, cfg.tol("slope_min"), ">="),
        Check("slope_upper", s_main, cfg.tol("slope_max")),
        Check("monotone_violations", monotone_violations, 0.0),
        Check("slope_near_half", abs(slopes[0.51]), cfg.tol("slope_near_half")),
    ]
    return ExperimentResult(checks, {"rho": tab, "slopes": slope_tab})


# ---------------------------------------------------------------------------
# 12. determinism across worker counts

WORKER_COUNTS = (1, 2, 8)


def write_tables(result: ExperimentResult, directory) -> list:
    os.makedirs(directory, exist_ok=True)
    files = []
    for name, tab in result.tables.items():
        fn = os.path.join(directory, f"result_{name}.csv")
        tab.to_csv(fn)
        files.append(fn)
    return files


def quick_config(name: str, seed: int, workers: int) -> ExperimentConfig:
    exp = REGISTRY[name]
    base = dict(GLOBAL_DEFAULTS)
    base.update(exp.defaults)
    quick = dict(exp.quick)
    tols = dict(exp.tolerances)
    tols.update(quick.pop("tolerances", {}))
    base.update(quick)
    base.update(seed=seed, workers=workers)
    return ExperimentConfig(experiment=name, tolerances=tols, **base)


def _determinism(cfg: ExperimentConfig) -> ExperimentResult:
    tab = Table(["experiment", "workers", "file", "sha256", "matches_workers_1"])
    mismatches = 0
    with tempfile.TemporaryDirectory() as tmp:
        for name in REGISTRY:
            if name == cfg.experiment:
                continue
            digests = {}
            for w in WORKER_COUNTS:
                qc = quick_config(name, cfg.seed, w)
                res = REGISTRY[name].run(qc)
                files = write_tables(res, os.path.join(tmp, f"{name}-{w}"))
                digests[w] = {os.path.basename(f): hashlib.sha256(open(f, "rb").read()).hexdigest() for f in files}
            for w in WORKER_COUNTS:
                for fname, dig in sorted(digests[w].items()):
                    same = digests[1].get(fname) == dig
                    mismatches += int(not same)
                    tab.add(name, w, fname, dig, same)
                mismatches += len(set(digests[1]) - set(digests[w]))
    return ExperimentResult([Check("csv_mismatches", mismatches, cfg.tol("mismatches"))], {"determinism": tab})


# ---------------------------------------------------------------------------
# registry

REGISTRY = {
    e.name: e
    for e in (
        Experiment("fbm-covariance", "fBm covariance of the Volterra and Cholesky generators at fixed time pairs (H=0.6 and the configured H)",
                   _fbm_covariance, {"n": 64}, {"z_max": 4.0, "runtime_s": 60.0}, {"n": 16, "paths": 256}),
        Experiment("h-half-degeneration", "at H=1/2 the fBm driver equals the Brownian driver bitwise and kappa_H = 1",
                   _h_half, {"H": 0.5, "paths": 2000}, {"mismatches": 0.0, "kappa": 0.0}, {"n": 32, "paths": 64}, fixed={"H": 0.5}),
        Experiment("frac-calculus", "fractional integral semigroup, inversion, and Young integrals by ibp and Riemann sums",
                   _frac_calculus, {"n": 2048, "paths": 8}, {"semigroup": 1e-4, "inversion": 1e-3, "young": 1e-3, "pair_gap": 1e-3}, {"n": 256, "paths": 2}),
        Experiment("operator-duality", "Gamma* isometry (grid n), duality formula and divergence trace (n=64 ensemble)",
                   _operator_duality, {"n": 2048, "paths": 2000, "regime": FBM}, {"isometry": 1e-2, "duality_se": 4.0, "duality_abs": 1e-2, "divergence_se": 4.0, "trace": 1e-2},
                   {"n": 128, "paths": 64}, regimes=(FBM,)),
        Experiment("sde-solver", "geometric fBm Euler error and refinement order over n..8n, fundamental-matrix product defect at 4n",
                   _sde_solver, {"paths": 200}, {"geometric": 1e-2, "order": 0.4, "defect": 1e-2}, {"n": 64, "paths": 8}),
        Experiment("variational", "variational equation against finite differences and the explicit formula, both regimes",
                   _variational, {"n": 4096, "paths": 100}, {"fd": 1e-2, "explicit": 1e-2}, {"n": 64, "paths": 8}),
        Experiment("adjoint-gradient", "adjoint pairing against central-difference derivatives on common random numbers, 5 directions",
                   _adjoint_gradient, {"n": 64, "paths": 50000, "regime": CLASSICAL, "system": "bilinear"}, {"relative": 2e-2, "runtime_s": 300.0},
                   {"n": 16, "paths": 512}, regimes=(CLASSICAL,), systems=("bilinear", "scalar-nonlinear")),
        Experiment("lq-classical-riccati", "LQ regulator optimized from zero gains against the Riccati oracle, with MP residuals",
                   _lq_riccati, {"n": 512, "regime": CLASSICAL, "system": "lq-feedback"}, {"J_relative": 5e-3, "mp_endpoint": 1e-2, "mp_zero": 0.1, "gtol": 1e-2},
                   {"n": 16, "paths": 512, "tolerances": {"gtol": 0.1}}, regimes=(CLASSICAL,), systems=("lq-feedback",)),
        Experiment("adjoint-q-malliavin", "q from the BSDE regression against the Malliavin derivative of p, and the BSDE residual",
                   _q_malliavin, {"regime": CLASSICAL}, {"q_relative": 5e-2, "bsde": 2e-2}, {"n": 32, "paths": 512}, regimes=(CLASSICAL,)),
        Experiment("fbm-mp-residual", "fBm maximum principle residuals on the drift-control LQ benchmark",
                   _fbm_mp, {"n": 256, "regime": FBM, "system": "lq-drift"}, {"reduction": 10.0, "r_sigma": 0.0, "backward": 5e-2, "gtol": 1e-2},
                   {"n": 16, "paths": 512, "tolerances": {"gtol": 0.1}}, regimes=(FBM,), systems=("lq-drift",)),
        Experiment("rho-divergence", "log-log slope and monotonicity of rho(eps) for eps in [1e-4, 1e-2] (configured H and H=0.51)",
                   _rho, {"regime": FBM}, {"slope_min": -0.75, "slope_max": -0.4, "slope_near_half": 0.1}, {}, regimes=(FBM,)),
        Experiment("determinism", "every other experiment at reduced size reproduces its CSVs bitwise for 1, 2 and 8 workers",
                   _determinism, {}, {"mismatches": 0.0}, {}),
    )
}


def list_experiments() -> list:
    """``(name, description)`` in registry order."""
    return [(e.name, e.description) for e in REGISTRY.values()]


def get_experiment(name: str) -> Experiment:
    try:
        return REGISTRY[name]
    except KeyError:
        raise InvalidArgument(f"unknown experiment {name!r}; valid names: {', '.join(REGISTRY)}") from None


def resolve(name: str, overrides: dict | None = None, tolerances: dict | None = None) -> ExperimentConfig:
    """Global defaults, then experiment defaults, then ``overrides``."""
    exp = get_experiment(name)
    vals = dict(GLOBAL_DEFAULTS)
    vals.update(exp.defaults)
    vals.update(overrides or {})
    tols = dict(exp.tolerances)
    for k, v in (tolerances or {}).items():
        if k not in exp.tolerances:
            raise InvalidArgument(f"unknown tolerance {k!r} for {name}; known: {sorted(exp.tolerances)}")
        tols[k] = float(v)
    cfg = ExperimentConfig(experiment=name, tolerances=tols, **vals)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    exp = get_experiment(cfg.experiment)
    if not 0.5 <= cfg.H < 1.0:
        raise InvalidArgument(f"H must lie in [0.5, 1) (got {cfg.H})")
    if exp.regimes == (FBM,) and cfg.H == 0.5:
        raise InvalidArgument(f"{exp.name} needs H > 0.5; at H = 0.5 use the classical regime (lq-classical-riccati, adjoint-gradient, adjoint-q-malliavin)")
    if cfg.T <= 0:
        raise InvalidArgument("T must be positive")
    if cfg.n < 2:
        raise InvalidArgument("n must be at least 2")
    if cfg.paths < 2:
        raise InvalidArgument("paths must be at least 2")
    if cfg.workers < 1:
        raise InvalidArgument("workers must be at least 1")
    if cfg.seed < 0:
        raise InvalidArgument("seed must be non-negative")
    exp.validate(cfg)
