import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fracpmp.dynamics import (
    PRESETS,
    BROWNIAN,
    FBM,
    ControlProcess,
    check_admissible,
    constant_control,
    function_control,
    fundamental_pair,
    holder_growth_regression,
    make_system,
    riccati_oracle,
    solve_sde,
    solve_sde_bm,
    solve_sde_fbm,
    star_pair,
    variational_path_direct,
    variational_path_explicit,
)
from fracpmp.errors import DivergenceError, InvalidArgument
from fracpmp.fbm import DriverEnsemble, bh_from_w, sample_joint
from fracpmp.grid import make_uniform_grid


def drivers(H, n, P, seed=3, T=1.0):
    return sample_joint(H, make_uniform_grid(T, n), 1, P, seed)


def mean_sup_rel(x, ref):
    return float(np.mean(np.max(np.abs(x - ref) / np.abs(ref), axis=1)))


def test_pure_noise_and_ode():
    ens = drivers(0.75, 64, 20)
    u = constant_control(ens.grid, 0.7)
    x = solve_sde_bm(make_system("pure-noise", x0=2.0), u, ens).x[:, :, 0]
    assert np.allclose(x, 2.0 + ens.W[:, :, 0], atol=1e-14)
    y = solve_sde_fbm(make_system("control-drift", x0=1.0), constant_control(ens.grid, 1.0), ens).x[:, :, 0]
    assert np.max(np.abs(y - (1.0 + ens.grid.nodes))) < 1e-13


def test_geometric_mean():
    ens = drivers(0.75, 512, 20000, seed=8)
    x = solve_sde_bm(make_system("geometric", a=0.5, c=0.3), constant_control(ens.grid, 0.0), ens).x[:, -1, 0]
    assert abs(x.mean() - np.exp(0.5)) <= 4 * x.std(ddof=1) / np.sqrt(x.size)


def test_geometric_fbm_exponential():
    ens = drivers(0.75, 4096, 20)
    x = solve_sde_fbm(make_system("geometric", a=0.0, c=1.0), constant_control(ens.grid, 0.0), ens).x[:, :, 0]
    assert mean_sup_rel(x, np.exp(ens.BH[:, :, 0])) < 1e-2


def test_geometric_fbm_refinement():
    errs = []
    fine = drivers(0.75, 2048, 20)
    for n in (256, 512, 1024, 2048):
        # the same Brownian paths observed on coarser grids
        W = fine.W[:, :: 2048 // n]
        g = make_uniform_grid(1.0, n)
        coarse = DriverEnsemble(g, 1, W, bh_from_w(W, 0.75, g), fine.H, fine.seed, fine.path_count)
        x = solve_sde_fbm(make_system("geometric", a=0.0, c=1.0), constant_control(g, 0.0), coarse).x[:, :, 0]
        errs.append(mean_sup_rel(x, np.exp(coarse.BH[:, :, 0])))
    order = -np.polyfit(np.log([256, 512, 1024, 2048]), np.log(errs), 1)[0]
    assert order >= 0.4


def test_no_noise_reduces_to_ode():
    ens = drivers(0.75, 64, 3)
    sys0 = make_system("lq-drift", sigma=0.0)
    u = function_control(ens.grid, np.cos)
    a = solve_sde_fbm(sys0, u, ens).x
    b = solve_sde_bm(sys0, u, ens).x
    assert np.array_equal(a, b) and np.allclose(a, a[:1])


def test_brownian_branch_matches_bm_bitwise():
    ens = drivers(0.5, 128, 30)
    sysn = make_system("lq-drift", sigma=0.7)
    u = function_control(ens.grid, np.sin)
    assert np.array_equal(solve_sde_fbm(sysn, u, ens).x, solve_sde_bm(sysn, u, ens).x)


def test_workers_bitwise():
    ens = drivers(0.7, 64, 300)
    s = make_system("bilinear")
    u = function_control(ens.grid, np.sin)
    ref = solve_sde(s, u, ens, FBM).x
    for w in (2, 8):
        assert np.array_equal(solve_sde(s, u, ens, FBM, workers=w).x, ref)


def test_dimension_and_regime_errors():
    ens = drivers(0.7, 16, 2)
    with pytest.raises(InvalidArgument):
        solve_sde(make_system("lq-feedback"), constant_control(ens.grid, 0.0), ens, FBM)
    with pytest.raises(InvalidArgument):
        solve_sde(make_system("bilinear"), constant_control(ens.grid, 0.0), ens, "ito")
    with pytest.raises(InvalidArgument):
        ControlProcess(ens.grid, np.zeros(5))
    with pytest.raises(InvalidArgument):
        make_system("nope")


def test_divergence_reports_path_and_step():
    ens = drivers(0.7, 64, 4)
    blow = make_system("geometric", a=1e300, c=0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergenceError) as err:
            solve_sde(blow, constant_control(ens.grid, 0.0), ens, FBM)
    assert err.value.step is not None and err.value.path == 0


def test_trivial_fundamental_pair():
    ens = drivers(0.7, 32, 4)
    s = make_system("lq-drift")
    fp = fundamental_pair(s, star_pair(s, constant_control(ens.grid, 0.0), ens, FBM))
    assert np.all(fp.Phi == 1.0) and np.all(fp.PhiInv == 1.0) and fp.product_defect == 0.0


@pytest.mark.parametrize("regime", [BROWNIAN, FBM])
def test_fundamental_pair_closed_form(regime):
    ens = drivers(0.75, 4096, 50)
    a, c = 0.3, 0.5
    s = make_system("geometric", a=a, c=c)
    fp = fundamental_pair(s, star_pair(s, constant_control(ens.grid, 0.0), ens, regime))
    t = ens.grid.nodes
    if regime == BROWNIAN:
        ref = np.exp((a - c * c / 2) * t + c * ens.W[:, :, 0])
    else:
        ref = np.exp(a * t + c * ens.BH[:, :, 0])
    assert np.array_equal(fp.Phi[:, 0, 0, 0], np.ones(50))
    assert mean_sup_rel(fp.Phi[:, :, 0, 0], ref) < 1e-2
    assert np.mean(fp.defect_series.max(axis=1)) < 1e-2
    assert fp.median_defect < 1e-2


@pytest.mark.parametrize("regime", [BROWNIAN, FBM])
def test_variational_zero_direction(regime):
    ens = drivers(0.75, 64, 4)
    s = make_system("scalar-nonlinear")
    sp = star_pair(s, function_control(ens.grid, np.sin), ens, regime)
    zero = constant_control(ens.grid, 0.0)
    assert not np.any(variational_path_direct(s, sp, zero))
    assert not np.any(variational_path_explicit(fundamental_pair(s, sp), s, sp, zero))


@pytest.mark.parametrize("name", ["lq-drift", "scalar-nonlinear"])
@pytest.mark.parametrize("regime", [BROWNIAN, FBM])
def test_variational_finite_difference(name, regime):
    ens = drivers(0.75, 2048, 20)
    s = make_system(name)
    u = function_control(ens.grid, lambda t: np.sin(2 * t))
    v = function_control(ens.grid, lambda t: np.cos(3 * t))
    sp = star_pair(s, u, ens, regime)
    eps = 1e-3
    xe = solve_sde(s, u + v.scaled(eps), ens, regime).x
    fd = (xe - sp.state.x) / eps
    y = variational_path_direct(s, sp, v)
    assert np.mean(np.max(np.abs(fd - y), axis=1)) < 1e-2


@pytest.mark.parametrize("regime", [BROWNIAN, FBM])
def test_explicit_matches_direct(regime):
    ens = drivers(0.75, 4096, 20)
    s = make_system("bilinear")
    sp = star_pair(s, function_control(ens.grid, lambda t: 0.2 + 0 * t), ens, regime)
    v = function_control(ens.grid, np.cos)
    y1 = variational_path_direct(s, sp, v)
    y2 = variational_path_explicit(fundamental_pair(s, sp), s, sp, v)
    assert np.mean(np.max(np.abs(y1 - y2), axis=1)) < 1e-2


def test_explicit_regime_mismatch():
    ens = drivers(0.75, 16, 2)
    s = make_system("bilinear")
    sp = star_pair(s, constant_control(ens.grid, 0.0), ens, FBM)
    fp = fundamental_pair(s, sp)
    with pytest.raises(InvalidArgument):
        variational_path_explicit(fp, s, sp, constant_control(ens.grid, 1.0), BROWNIAN)


@settings(max_examples=10)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_variational_linearity(a, b):
    ens = drivers(0.7, 32, 3)
    s = make_system("scalar-nonlinear")
    sp = star_pair(s, function_control(ens.grid, np.sin), ens, FBM)
    v1, v2 = function_control(ens.grid, np.cos), function_control(ens.grid, lambda t: t)
    lhs = variational_path_direct(s, sp, v1.scaled(a) + v2.scaled(b))
    rhs = a * variational_path_direct(s, sp, v1) + b * variational_path_direct(s, sp, v2)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_admissibility_examples():
    ens = drivers(0.75, 256, 200)
    rep = check_admissible(function_control(ens.grid, np.sin), ens, 0.6, 0.6)
    assert rep.constant_across_paths and not rep.not_holder.any()
    u = ControlProcess(ens.grid, ens.BH[:, :, :1].copy())
    rep = check_admissible(u, ens, 0.6, 0.6, envelope=(1.0, 1.0))
    assert not rep.violations.any()
    assert np.allclose(rep.control_seminorm, rep.driver_seminorm)
    rep = check_admissible(function_control(ens.grid, lambda t: np.where(t > 0.5, 1.0, 0.0)), ens, 0.6, 0.6)
    assert rep.not_holder.all()
    with pytest.raises(InvalidArgument):
        check_admissible(u, ens, 1.2, 0.5)


def test_holder_growth_regression():
    ens = drivers(0.75, 256, 2000)
    x = solve_sde_fbm(make_system("geometric", a=0.0, c=1.0), constant_control(ens.grid, 0.0), ens).x
    fit = holder_growth_regression(x, ens, 0.6)
    assert np.isfinite(fit["slope"]) and 0 <= fit["r2"] <= 1


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_preset_derivatives(name):
    s = make_system(name)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = s.check_derivatives()
        assert max(rep.values()) <= 1e-5
        s.check_hypotheses()


def test_wrong_derivative_warns():
    s = make_system("bilinear")
    s.b_x = lambda t, x, u: np.full((x.shape[0], 1, 1), 7.0)
    with pytest.warns(RuntimeWarning):
        s.check_derivatives()


def test_riccati_oracle_scalar():
    S, J, k = riccati_oracle(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, nodes=np.array([0.0, 1.0]))
    assert S[0] == pytest.approx(np.tanh(1.0), rel=1e-9) and S[1] == 0.0
    assert J == pytest.approx(np.tanh(1.0) + np.log(np.cosh(1.0)), rel=1e-9)
    assert k[0] == pytest.approx(-np.tanh(1.0))
