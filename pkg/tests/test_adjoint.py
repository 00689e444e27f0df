import numpy as np
import pytest

from fracpmp.adjoint import (
    adjoint_kernel_psi,
    adjoint_kernels_fbm,
    adjoint_pair_bm,
    adjoint_pair_fbm,
    bsde_residual,
    cost,
    fbm_backward_residual,
    gateaux_fd,
    q_malliavin_check,
)
from fracpmp.dynamics import BROWNIAN, FBM, _scalar, constant_control, function_control, make_system, riccati_oracle, star_pair
from fracpmp.errors import InvalidArgument, UnsupportedError
from fracpmp.fbm import sample_joint
from fracpmp.grid import make_uniform_grid

Z = lambda t, x, u: 0.0 * x
ONE = lambda t, x, u: 1.0 + 0.0 * x


def drivers(H, n, P, seed=5):
    return sample_joint(H, make_uniform_grid(1.0, n), 1, P, seed)


def drift_noise_linear_terminal(a=0.0):
    """``dx = (a x + u) dt + dZ``, ``l = 0``, ``h = x``: deterministic linearization."""
    return _scalar("test", lambda t, x, u: a * x + u, lambda t, x, u: a + 0 * x, ONE, ONE, Z, Z, Z, Z, Z, lambda x: x, lambda x: 1 + 0 * x, 0.0)


def quadratic_control_cost():
    """``dx = dZ`` with ``l = u²``: the cost derivative is ``2∫u v dt``."""
    return _scalar("quad", Z, Z, Z, ONE, Z, Z, lambda t, x, u: u * u, Z, lambda t, x, u: 2 * u, lambda x: 0 * x, lambda x: 0 * x, 0.0)


def test_cost_examples():
    ens = drivers(0.75, 128, 4000)
    u = constant_control(ens.grid, 0.0)
    c = cost(make_system("pure-noise", terminal="linear"), u, ens, BROWNIAN)
    assert abs(c.J) <= 4 * c.stderr
    c = cost(make_system("unit-cost"), u, ens, FBM)
    assert c.J == pytest.approx(1.0, abs=1e-12) and c.stderr == pytest.approx(0.0, abs=1e-12)
    c = cost(make_system("lq-drift", x0=0.0), u, ens, BROWNIAN)
    assert abs(c.J - 0.5) <= 4 * c.stderr


def test_cost_stderr_scaling():
    ens = drivers(0.75, 32, 16000)
    s = make_system("lq-drift")
    u = constant_control(ens.grid, 0.0)
    small = cost(s, u, ens.subset(slice(0, 4000)), BROWNIAN).stderr
    big = cost(s, u, ens, BROWNIAN).stderr
    assert 2 / 1.6 <= small / big <= 2 * 1.6


def test_gateaux_examples():
    ens = drivers(0.75, 64, 200)
    g = ens.grid
    u = function_control(g, np.sin)
    s = quadratic_control_cost()
    zero = gateaux_fd(s, u, constant_control(g, 0.0), ens, FBM)
    assert zero.value == 0.0
    v = function_control(g, lambda t: 1 + t)
    est = gateaux_fd(s, u, v, ens, FBM)
    exact = float(np.sum(2 * np.sin(g.nodes[:-1]) * (1 + g.nodes[:-1]) * g.step))
    assert est.value == pytest.approx(exact, rel=1e-3)
    assert len(est.table) == 3 and len(est.table[-1]) == 3
    with pytest.raises(InvalidArgument):
        gateaux_fd(s, u, v, ens, FBM, eps_ladder=(0.1, 0.2))


def test_gateaux_stationary_at_riccati_optimum():
    n = 128
    ens = drivers(0.5, n, 4000, seed=21)
    g = ens.grid
    _, _, k = riccati_oracle(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, nodes=g.nodes)
    theta = function_control(g, lambda t: np.stack([np.interp(t, g.nodes, k), 0 * t], axis=1))
    s = make_system("lq-feedback")
    rng = np.random.default_rng(0)
    Jscale = cost(s, theta, ens, BROWNIAN).J
    for _ in range(5):
        coef = rng.normal(size=(3, 2))
        v = function_control(g, lambda t: np.stack([coef[0, i] + coef[1, i] * t + coef[2, i] * np.cos(3 * t) for i in range(2)], axis=1))
        est = gateaux_fd(s, theta, v, ens, BROWNIAN)
        # the discrete optimum differs from the continuous one by O(1/n)
        assert abs(est.value) <= est.noise_floor + 2.0 / n * Jscale


def test_psi_is_one_for_linear_terminal():
    ens = drivers(0.75, 32, 10)
    s = drift_noise_linear_terminal()
    sp = star_pair(s, constant_control(ens.grid, 0.3), ens, BROWNIAN)
    K = adjoint_kernel_psi(s, sp)
    assert np.allclose(K.Psi, 1.0, atol=1e-14)
    with pytest.raises(InvalidArgument):
        adjoint_kernel_psi(s, star_pair(s, constant_control(ens.grid, 0.3), ens, FBM))


@pytest.mark.parametrize("regime", [BROWNIAN, FBM])
def test_kernel_pairing_matches_gateaux(regime):
    ens = drivers(0.75, 32, 4000)
    g = ens.grid
    s = make_system("bilinear")
    u = constant_control(g, 0.2)
    sp = star_pair(s, u, ens, regime)
    K = adjoint_kernel_psi(s, sp) if regime == BROWNIAN else adjoint_kernels_fbm(s, sp)
    for v in (constant_control(g, 1.0), function_control(g, lambda t: np.cos(2 * t))):
        fd = gateaux_fd(s, u, v, ens, regime).value
        assert K.pairing(v, g) == pytest.approx(fd, rel=2e-2)


def test_pairing_linear():
    ens = drivers(0.75, 32, 200)
    g = ens.grid
    s = make_system("bilinear")
    K = adjoint_kernel_psi(s, star_pair(s, constant_control(g, 0.2), ens, BROWNIAN))
    v1, v2 = function_control(g, np.sin), function_control(g, lambda t: t * t)
    combo = v1.scaled(2.0) + v2.scaled(-0.5)
    assert K.pairing(combo, g) == pytest.approx(2 * K.pairing(v1, g) - 0.5 * K.pairing(v2, g), rel=1e-12, abs=1e-14)
    assert np.allclose(K.gradient(), K.Psi.mean(axis=0))


def test_fbm_kernels_need_fractional_drivers():
    ens = drivers(0.5, 16, 4)
    s = make_system("bilinear")
    with pytest.raises(UnsupportedError):
        adjoint_kernels_fbm(s, star_pair(s, constant_control(ens.grid, 0.0), ens, FBM))


def test_adjoint_pair_deterministic_linear():
    a = 0.4
    ens = drivers(0.75, 256, 5000)
    s = drift_noise_linear_terminal(a)
    sp = star_pair(s, function_control(ens.grid, np.sin), ens, BROWNIAN)
    adj = adjoint_pair_bm(s, sp)
    exact = (1 + a * ens.grid.step) ** (ens.grid.n - np.arange(ens.grid.n + 1))
    assert np.max(np.abs(adj.p[:, :, 0] - exact) / exact) < 2e-2
    assert adj.terminal_check == 0.0
    assert np.max(np.abs(adj.q)) < 5e-2
    assert np.max(np.abs(q_malliavin_check(s, sp, adj))) < 5e-2
    assert bsde_residual(s, sp, adj).sup_mean < 2e-2
    wrong = bsde_residual(s, sp, adj, terminal=s.h_x(sp.state.x[:, -1]) + 1.0)
    assert wrong.sup_mean > 0.2


def test_fbm_pair_deterministic_linear():
    a = 0.4
    ens = drivers(0.75, 256, 5000)
    s = drift_noise_linear_terminal(a)
    sp = star_pair(s, function_control(ens.grid, np.sin), ens, FBM)
    adj = adjoint_pair_fbm(s, sp)
    exact = (1 + a * ens.grid.step) ** (ens.grid.n - np.arange(ens.grid.n + 1))
    assert np.max(np.abs(adj.p[:, :, 0] - exact) / exact) < 2e-2
    assert adj.terminal_check == 0.0
    assert fbm_backward_residual(s, sp, adj).sup_mean < 2e-2
    with pytest.raises(InvalidArgument):
        q_malliavin_check(s, sp, adj)


@pytest.mark.parametrize("regime", [BROWNIAN, FBM])
def test_zero_system_residuals(regime):
    ens = drivers(0.75, 32, 50)
    s = make_system("zero")
    sp = star_pair(s, constant_control(ens.grid, 0.0), ens, regime)
    if regime == BROWNIAN:
        adj = adjoint_pair_bm(s, sp)
        r = bsde_residual(s, sp, adj)
    else:
        adj = adjoint_pair_fbm(s, sp)
        r = fbm_backward_residual(s, sp, adj)
    assert not np.any(adj.p) and not np.any(r.series) and r.sup_mean == 0.0


def test_regime_mismatch_errors():
    ens = drivers(0.75, 16, 20)
    s = make_system("lq-drift")
    sp = star_pair(s, constant_control(ens.grid, 0.0), ens, FBM)
    with pytest.raises(InvalidArgument):
        adjoint_pair_bm(s, sp)
    with pytest.raises(InvalidArgument):
        adjoint_pair_fbm(s, star_pair(s, constant_control(ens.grid, 0.0), ens, BROWNIAN))


def test_fbm_residual_lq_drift():
    ens = drivers(0.75, 256, 5000)
    s = make_system("lq-drift")
    sp = star_pair(s, function_control(ens.grid, lambda t: -0.5 + 0 * t), ens, FBM)
    adj = adjoint_pair_fbm(s, sp)
    assert fbm_backward_residual(s, sp, adj).sup_mean < 5e-2


@pytest.mark.parametrize("regime", [BROWNIAN, FBM])
def test_residual_shrinks_under_refinement(regime):
    # with σ_x = 0 the regression is exact and the residual is the O(h) defect of the scheme;
    # with random q the mean residual sits at a sampling floor that does not move with n
    pair, residual = (adjoint_pair_bm, bsde_residual) if regime == BROWNIAN else (adjoint_pair_fbm, fbm_backward_residual)
    s = drift_noise_linear_terminal(0.4)
    res = []
    for n in (512, 2048):
        ens = drivers(0.75, n, 500)
        sp = star_pair(s, function_control(ens.grid, np.sin), ens, regime)
        res.append(residual(s, sp, pair(s, sp)).sup_mean)
    assert res[0] >= 1.5 * res[1]
