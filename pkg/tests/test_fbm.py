import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad
from scipy.special import gamma

from fracpmp.errors import InvalidArgument
from fracpmp.fbm import (
    HurstParam,
    cholesky_fbm_oracle,
    empirical_covariance,
    fbm_covariance,
    kappa_h,
    sample_joint,
    volterra_kernel,
)
from fracpmp.grid import make_uniform_grid


def kernel_by_quadrature(H, t, s):
    a = H - 0.5
    inner, _ = quad(lambda u: u ** (H - 1.5), s, t, weight="alg", wvar=(a, 0.0))
    # weight 'alg' multiplies by (u-s)^a (t-u)^0
    return kappa_h(H) * ((t / s) ** a * (t - s) ** a - a * s ** (-a) * inner)


def test_kappa_values():
    assert kappa_h(0.5) == 1.0
    assert kappa_h(0.75) == pytest.approx(1.0697, abs=1e-4)
    with pytest.raises(InvalidArgument):
        kappa_h(1.0)
    with pytest.raises(InvalidArgument):
        kappa_h(0.4)


def test_kappa_against_gamma_expression():
    for H in (0.55, 0.7, 0.9):
        ref = np.sqrt(2 * H * gamma(1.5 - H) / (gamma(H + 0.5) * gamma(2 - 2 * H)))
        assert kappa_h(H) == pytest.approx(ref, rel=1e-14)


def test_hurst_param():
    hp = HurstParam(0.5)
    assert hp.kappa_H == 1.0 and hp.is_brownian
    hp = HurstParam(0.75)
    assert hp.kappa_1 == pytest.approx(1 / (1.5 * gamma(0.25) * gamma(0.75)))
    with pytest.raises(InvalidArgument):
        HurstParam(1.2)


@pytest.mark.parametrize("H", [0.55, 0.75, 0.9])
@pytest.mark.parametrize("t,s", [(1.0, 0.5), (1.0, 0.01), (0.3, 0.29), (2.0, 1.2)])
def test_kernel_against_quadrature(H, t, s):
    assert volterra_kernel(H, t, s) == pytest.approx(kernel_by_quadrature(H, t, s), rel=1e-7, abs=1e-10)


def test_kernel_brownian_and_limits():
    assert volterra_kernel(0.5, 1.0, 0.3) == 1.0
    assert 0 < volterra_kernel(0.75, 1.0, 0.5)
    near = [volterra_kernel(0.75, 1.0, 1.0 - e) for e in (1e-2, 1e-4, 1e-6)]
    assert near[0] > near[1] > near[2] and near[2] < 0.05
    for s, t in ((0.5, 0.5), (0.0, 1.0), (0.7, 0.5)):
        with pytest.raises(InvalidArgument):
            volterra_kernel(0.75, t, s)


@pytest.mark.parametrize("t,tp", [(1.0, 1.0), (1.0, 0.5), (0.8, 0.3)])
def test_kernel_square_integrates_to_covariance(t, tp):
    H = 0.75
    lo = min(t, tp)
    val, _ = quad(lambda u: volterra_kernel(H, t, u) * volterra_kernel(H, tp, u) if u < lo else 0.0, 0.0, lo, limit=400)
    assert val == pytest.approx(float(fbm_covariance(H, t, tp)), abs=1e-3)


def test_brownian_branch_bitwise():
    ens = sample_joint(0.5, make_uniform_grid(1.0, 32), 2, 50, 3)
    assert np.array_equal(ens.W, ens.BH)
    assert not np.any(ens.W[:, 0, :])


def test_increment_variance_brownian():
    g = make_uniform_grid(2.0, 16)
    ens = sample_joint(0.6, g, 1, 4000, 5)
    dW = ens.dW[:, :, 0]
    assert abs(dW.var() / g.step - 1) < 0.02


def _within(est, se, target, k=4.0):
    return abs(est - target) <= k * se


def test_variance_and_covariance_examples():
    g = make_uniform_grid(1.0, 64)
    ens = sample_joint(0.75, g, 1, 20000, 42)
    assert _within(*empirical_covariance(ens, 0, 1.0, 1.0), 1.0)
    assert _within(*empirical_covariance(ens, 0, 1.0, 0.5), 0.5)
    ens6 = sample_joint(0.6, g, 1, 20000, 43)
    assert _within(*empirical_covariance(ens6, 0, 1.0, 1.0), 1.0)
    assert _within(*empirical_covariance(ens6, 0, 1.0, 0.5), 0.5)


def test_cross_component_independent():
    ens = sample_joint(0.7, make_uniform_grid(1.0, 32), 2, 20000, 9)
    est, se = empirical_covariance(ens, (0, 1), 1.0, 1.0)
    assert se > 0 and _within(est, se, 0.0)


def test_zero_time_covariance():
    ens = sample_joint(0.7, make_uniform_grid(1.0, 8), 1, 10, 1)
    assert empirical_covariance(ens, 0, 0.0, 0.0) == (0.0, 0.0)
    with pytest.raises(InvalidArgument):
        empirical_covariance(ens, 0, 0.33, 0.5)


def test_cholesky_oracle():
    g = make_uniform_grid(2.0, 32)
    ens = cholesky_fbm_oracle(0.75, g, 20000, 7)
    assert _within(*empirical_covariance(ens, 0, 2.0, 2.0), 2 ** 1.5)
    assert not np.any(ens.BH[:, 0])
    b = cholesky_fbm_oracle(0.5, g, 20000, 7)
    d = np.diff(b.BH[:, :, 0], axis=1)
    assert abs(d.var() / g.step - 1) < 0.02
    assert abs(np.corrcoef(d[:, 3], d[:, 4])[0, 1]) < 0.04
    with pytest.raises(InvalidArgument):
        cholesky_fbm_oracle(0.75, make_uniform_grid(1.0, 4096), 1, 0)


def test_regenerate_bitwise_and_workers():
    g = make_uniform_grid(1.0, 64)
    ens = sample_joint(0.8, g, 2, 300, 11)
    assert np.array_equal(ens.regenerate_bh(), ens.BH)
    for w in (2, 8):
        other = sample_joint(0.8, g, 2, 300, 11, workers=w)
        assert np.array_equal(other.W, ens.W) and np.array_equal(other.BH, ens.BH)


def test_path_identity_independent_of_count():
    g = make_uniform_grid(1.0, 16)
    a = sample_joint(0.7, g, 1, 10, 4)
    b = sample_joint(0.7, g, 1, 300, 4)
    assert np.array_equal(a.BH, b.BH[:10])


def test_bumped_keeps_coupling():
    g = make_uniform_grid(1.0, 32)
    ens = sample_joint(0.7, g, 1, 5, 2).bumped(0, 10, 1e-3)
    assert np.allclose(ens.regenerate_bh(), ens.BH, atol=1e-13)


def test_ensemble_csv(tmp_path):
    ens = sample_joint(0.7, make_uniform_grid(1.0, 4), 2, 3, 2)
    files = ens.to_csv(tmp_path)
    assert len(files) == 5
    rows = (tmp_path / "BH_2.csv").read_text().splitlines()
    assert rows[0] == "path_id,t,value" and len(rows) == 1 + 3 * 5
    assert "seed=2" in (tmp_path / "manifest.txt").read_text()


@given(st.floats(0.5, 0.99), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_covariance_symmetric_psd_2x2(H, t, s):
    c = fbm_covariance(H, t, s)
    assert c == pytest.approx(float(fbm_covariance(H, s, t)))
    assert c * c <= fbm_covariance(H, t, t) * fbm_covariance(H, s, s) * (1 + 1e-12)


@pytest.mark.slow
def test_ten_pair_covariance_both_generators():
    g = make_uniform_grid(1.0, 64)
    pairs = [(1.0, 1.0), (1.0, 0.5), (0.5, 0.5), (0.25, 0.75), (0.125, 1.0), (0.875, 0.375), (0.625, 0.625), (0.0625, 0.0625), (0.3125, 0.9375), (0.75, 0.5)]
    for H in (0.6, 0.75):
        for ens in (sample_joint(H, g, 1, 20000, 1), cholesky_fbm_oracle(H, g, 20000, 1)):
            for t, s in pairs:
                assert _within(*empirical_covariance(ens, 0, t, s), float(fbm_covariance(H, t, s)))
