import numpy as np
import pytest
from scipy.integrate import quad

from fracpmp.adjoint import adjoint_pair_bm, adjoint_pair_fbm
from fracpmp.dynamics import BROWNIAN, FBM, _scalar, constant_control, function_control, make_system, riccati_oracle, star_pair
from fracpmp.errors import InvalidArgument, UnsupportedError
from fracpmp.fbm import sample_joint
from fracpmp.grid import make_uniform_grid
from fracpmp.max_principle import (
    COARSE_TIME,
    COMPONENT_SUBSET,
    FULL,
    TRIVIAL,
    FiltrationSpec,
    fbm_correction,
    fd_gradient,
    hamiltonian_gradient,
    kernel_gradient,
    mp_residual_classical,
    mp_residual_fbm,
    mp_residual_partial,
    optimize_control,
    rho_quadrature,
)

Z = lambda t, x, u: 0.0 * x


def drivers(H, n, P, seed=13):
    return sample_joint(H, make_uniform_grid(1.0, n), 1, P, seed)


def oracle_gains(grid):
    _, _, k = riccati_oracle(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, nodes=grid.nodes)
    return function_control(grid, lambda t: np.stack([np.interp(t, grid.nodes, k), 0 * t], axis=1))


def test_zero_system_all_residuals():
    s = make_system("zero")
    for regime, H in ((BROWNIAN, 0.5), (FBM, 0.75)):
        ens = drivers(H, 16, 40)
        sp = star_pair(s, constant_control(ens.grid, 0.0), ens, regime)
        if regime == BROWNIAN:
            r = mp_residual_classical(s, sp, adjoint_pair_bm(s, sp))
        else:
            r = mp_residual_fbm(s, sp, adjoint_pair_fbm(s, sp))
            assert r.components["r_sigma_sup"] == 0.0
        assert r.sup == 0.0 and r.scale == 1.0
        assert mp_residual_partial(s, sp, FiltrationSpec(FULL)).sup == 0.0


@pytest.fixture(scope="module")
def lq_pair():
    ens = drivers(0.5, 256, 20000)
    s = make_system("lq-feedback")
    return s, ens


def test_classical_residual_at_oracle_and_zero(lq_pair):
    s, ens = lq_pair
    sp = star_pair(s, oracle_gains(ens.grid), ens, BROWNIAN)
    adj = adjoint_pair_bm(s, sp)
    r = mp_residual_classical(s, sp, adj)
    # the continuous-time oracle is off by O(h): about 0.011 at n=256 and 0.006 at n=512
    assert r.sup <= 2e-2
    assert np.array_equal(r.per_path, hamiltonian_gradient(adj.bundle.lin, adj.p, adj.q))
    sp0 = star_pair(s, constant_control(ens.grid, [0.0, 0.0]), ens, BROWNIAN)
    assert mp_residual_classical(s, sp0, adjoint_pair_bm(s, sp0)).sup >= 0.1


def test_partial_full_matches_classical(lq_pair):
    s, ens = lq_pair
    sub = ens.subset(slice(0, 2000))
    sp = star_pair(s, constant_control(sub.grid, [-0.5, 0.1]), sub, BROWNIAN)
    full = mp_residual_partial(s, sp, FiltrationSpec(FULL))
    cl = mp_residual_classical(s, sp, adjoint_pair_bm(s, sp))
    assert np.max(np.abs(full.mean - cl.mean))[()] / cl.scale < 2e-2


def test_partial_trivial_at_deterministic_optimum():
    ens = drivers(0.5, 256, 20000)
    g = ens.grid
    s = make_system("lq-drift")
    # deterministic-control optimum: u = -m tanh(T - t) with m(t) = cosh(T - t)/cosh(T)
    u = function_control(g, lambda t: -np.sinh(1 - t) / np.cosh(1.0))
    sp = star_pair(s, u, ens, BROWNIAN)
    r = mp_residual_partial(s, sp, FiltrationSpec(TRIVIAL))
    assert r.sup <= 2e-2
    assert np.allclose(r.per_path, r.per_path[:1])


def test_filtration_spec_errors_and_anchors():
    with pytest.raises(InvalidArgument):
        FiltrationSpec("whatever")
    with pytest.raises(InvalidArgument):
        FiltrationSpec(COARSE_TIME)
    g = make_uniform_grid(1.0, 8)
    assert list(FiltrationSpec(COARSE_TIME, delta=0.25).anchor_nodes(g)) == [0, 0, 2, 2, 4, 4, 6, 6, 8]
    with pytest.raises(InvalidArgument):
        FiltrationSpec(COARSE_TIME, delta=0.3).anchor_nodes(g)
    ens = drivers(0.5, 8, 20)
    s = make_system("lq-drift")
    sp = star_pair(s, constant_control(g, 0.0), ens, BROWNIAN)
    from fracpmp.mc import RegressionSpec

    with pytest.raises(InvalidArgument):
        FiltrationSpec(COMPONENT_SUBSET).features(3, sp.state.x, ens, BROWNIAN, RegressionSpec())
    with pytest.raises(InvalidArgument):
        FiltrationSpec(COMPONENT_SUBSET, components=(2,)).features(3, sp.state.x, ens, BROWNIAN, RegressionSpec())
    X = FiltrationSpec(COMPONENT_SUBSET, components=(0,)).features(3, sp.state.x, ens, BROWNIAN, RegressionSpec())
    assert X.shape[0] == 20


def test_fbm_gating():
    s = make_system("lq-drift")
    ens = drivers(0.5, 16, 20)
    sp = star_pair(s, constant_control(ens.grid, 0.0), ens, FBM)
    with pytest.raises(UnsupportedError):
        mp_residual_fbm(s, sp, adjoint_pair_fbm(s, sp))
    ens = drivers(0.75, 16, 20)
    spb = star_pair(s, constant_control(ens.grid, 0.0), ens, BROWNIAN)
    with pytest.raises(InvalidArgument):
        mp_residual_fbm(s, spb, adjoint_pair_bm(s, spb))
    with pytest.raises(InvalidArgument):
        mp_residual_classical(s, star_pair(s, constant_control(ens.grid, 0.0), ens, FBM), adjoint_pair_bm(s, spb))


def test_fbm_control_free_noise():
    s = make_system("lq-drift")
    ens = drivers(0.75, 32, 200)
    sp = star_pair(s, function_control(ens.grid, np.sin), ens, FBM)
    r = mp_residual_fbm(s, sp, adjoint_pair_fbm(s, sp))
    assert not np.any(r.components["r_sigma"]) and not np.any(r.components["correction"])


def test_correction_vanishes_for_deterministic_adjoint():
    e = 0.3
    s = _scalar("det", lambda t, x, u: u, Z, lambda t, x, u: 1 + 0 * x, lambda t, x, u: 1 + e * u, Z, lambda t, x, u: e + 0 * x,
                Z, Z, Z, lambda x: x, lambda x: 1 + 0 * x, 0.0)
    ens = drivers(0.75, 16, 30)
    sp = star_pair(s, function_control(ens.grid, np.cos), ens, FBM)
    adj = adjoint_pair_fbm(s, sp)
    assert np.allclose(adj.p, 1.0)
    assert np.max(np.abs(fbm_correction(s, sp, adj))) < 1e-8


def test_kernel_gradient_matches_fd_gradient():
    # pointwise densities differ by sampling noise of (ΔW_k^2 / h - 1), so many paths are needed
    ens = drivers(0.75, 16, 20000)
    s = make_system("bilinear")
    u = constant_control(ens.grid, 0.2)
    for regime in (BROWNIAN, FBM):
        g, scale = kernel_gradient(s, u, ens, regime)
        fd = fd_gradient(s, u, ens, regime)
        assert scale > 0
        assert np.max(np.abs(g[:-1] - fd[:-1])) / np.max(np.abs(fd)) < 5e-2


def test_kernel_gradient_chunking_invariant():
    ens = drivers(0.5, 16, 300)
    s = make_system("bilinear")
    u = constant_control(ens.grid, 0.1)
    a, _ = kernel_gradient(s, u, ens, BROWNIAN, chunk=300)
    b, _ = kernel_gradient(s, u, ens, BROWNIAN, chunk=64)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-14)


def test_optimizer_descent_and_fbm_reduction():
    ens = drivers(0.75, 32, 1000)
    s = make_system("lq-drift")
    u, trace = optimize_control(s, constant_control(ens.grid, 0.0), ens, FBM, gtol=2e-2, max_iters=40)
    J = trace.J
    assert np.all(np.diff(J) <= 0)
    assert trace.rows[-1][3] * 10 <= trace.rows[0][3]


def test_optimizer_stops_at_stationary_start(lq_pair):
    s, ens = lq_pair
    _, trace = optimize_control(s, oracle_gains(ens.grid), ens, BROWNIAN, gtol=2e-2)
    assert len(trace.rows) == 1 and trace.rows[0][0] == 0


def test_optimizer_argument_checks():
    ens = drivers(0.75, 8, 10)
    s = make_system("lq-drift")
    with pytest.raises(InvalidArgument):
        optimize_control(s, constant_control(ens.grid, 0.0), ens, FBM, gradient_source="magic")


def scaled_lq(lam):
    return _scalar("lq-scaled", lambda t, x, u: u, Z, lambda t, x, u: 1 + 0 * x, lambda t, x, u: 1 + 0 * x, Z, Z,
                   lambda t, x, u: lam * (x * x + u * u), lambda t, x, u: lam * 2 * x, lambda t, x, u: lam * 2 * u,
                   lambda x: lam * 0.5 * x * x, lambda x: lam * x, 1.0)


def test_scaling_of_cost():
    ens = drivers(0.5, 32, 800)
    u = function_control(ens.grid, lambda t: -0.3 + 0 * t)
    res = []
    for lam in (1.0, 3.0):
        s = scaled_lq(lam)
        sp = star_pair(s, u, ens, BROWNIAN)
        res.append(mp_residual_classical(s, sp, adjoint_pair_bm(s, sp)))
    assert np.allclose(res[1].mean, 3.0 * res[0].mean, rtol=1e-9, atol=1e-12)
    assert res[1].sup == pytest.approx(res[0].sup, rel=1e-9)
    ends = [optimize_control(scaled_lq(lam), constant_control(ens.grid, 0.0), ens, BROWNIAN, step=1.0 / lam, gtol=1e-3, max_iters=200)[0] for lam in (1.0, 3.0)]
    assert np.max(np.abs(ends[0].values - ends[1].values)) < 1e-2


def rho_oracle(H, a, eps):
    g = lambda s: s ** (0.5 - H) * (a - s + eps) ** (-H - 0.5)
    smooth = lambda s: (a - s + eps) ** (-H - 0.5)

    def inner(t):
        left, _ = quad(smooth, 0.0, t, weight="alg", wvar=(0.5 - H, 2 * H - 2))
        right, _ = quad(lambda s: g(s), t, a, weight="alg", wvar=(2 * H - 2, 0.0))
        return left + right

    val, _ = quad(lambda t: g(t) * inner(t), 0.0, a, limit=200, points=[a / 2])
    return val


@pytest.mark.parametrize("eps", [0.3, 0.05])
def test_rho_against_adaptive_quadrature(eps):
    assert rho_quadrature(0.75, 1.0, eps) == pytest.approx(rho_oracle(0.75, 1.0, eps), rel=1e-3)


def test_rho_monotone_and_invalid():
    vals = [rho_quadrature(0.75, 1.0, e) for e in (1e-4, 1e-3, 1e-2, 1e-1)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    for args in ((0.5, 1.0, 0.1), (0.75, 0.0, 0.1), (0.75, 1.0, 0.0)):
        with pytest.raises(InvalidArgument):
            rho_quadrature(*args)


@pytest.mark.parametrize("H", [0.51, 0.75])
def test_rho_grows_at_least_like_the_lower_bound(H):
    # the lower bound C eps^{1-2H}: rho(eps) eps^{2H-1} must not decrease as eps shrinks
    eps = np.array([1e-4, 1e-3, 1e-2])
    scaled = np.array([rho_quadrature(H, 1.0, e) for e in eps]) * eps ** (2 * H - 1)
    assert np.all(np.diff(scaled) < 0)
    # the corner of the square gives the actual rate eps^{-1}
    slope = np.polyfit(np.log(eps), np.log(scaled / eps ** (2 * H - 1)), 1)[0]
    assert -1.05 < slope < -0.95
