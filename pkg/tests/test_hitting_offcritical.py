import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bbm4lab import hitting_offcritical as ho
from bbm4lab.hitting_offcritical import DimensionParams


def test_beta_values():
    assert ho.beta_of(1) == 1.0
    assert ho.beta_of(2) == pytest.approx(2 * (math.sqrt(2) - 1), rel=1e-15)
    assert ho.beta_of(5) == 1.0
    assert ho.beta_of(7) == 3.0
    with pytest.raises(ValueError, match="degenerates"):
        ho.beta_of(4)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_gamma_hypothesis(d):
    assert DimensionParams.of(d).gamma >= 3 + 2 * math.sqrt(2) - 1e-12


def test_alpha_d5_by_hand():
    a = ho.alpha_seq(5, 10).alphas
    assert a[0] == 0
    assert a[1] == 1
    assert a[2] == Fraction(1, 4)
    assert a[3] == Fraction(1, 20)


def test_alpha0_low_dim():
    for d in (1, 2, 3):
        assert float(ho.alpha_seq(d, 5).alphas[0]) == 8 - 2 * d


@pytest.mark.parametrize("d", [1, 2, 3, 5, 6, 7, 8])
def test_alpha_bound(d):
    assert ho.alpha_bound_violations(ho.alpha_seq(d, 50)) == []


def test_alpha_exact_vs_float():
    exact = ho.alpha_seq(5, 30).as_float()
    np.testing.assert_allclose(ho._float_alphas(5, 30), exact, rtol=1e-13)


def test_mu_highdim():
    mu1 = ho.mu_s(5, 1.0)
    assert 0 < mu1 < 1
    a = ho.alpha_seq(5, 60).as_float()
    assert abs(sum(a[l] * mu1**l for l in range(1, len(a))) - 1) <= 1e-12
    assert ho.mu_s(5, 0.5) < mu1
    assert ho.mu_s(5, 0.0) == 0.0
    with pytest.raises(ValueError):
        ho.mu_s_highdim(5, 1.5)


@settings(max_examples=20)
@given(st.floats(0.01, 0.99), st.floats(0.001, 0.5))
def test_mu_monotone_in_s(s, gap):
    t = min(s + gap, 1.0)
    assert ho.mu_s_highdim(6, s) < ho.mu_s_highdim(6, t)


def test_b_roots_d1():
    b1, b2 = ho.b_roots(DimensionParams.of(1).gamma)
    assert (b1, b2) == pytest.approx((2.0, 3.0), abs=1e-12)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_b_root_identities(d):
    g = DimensionParams.of(d).gamma
    b1, b2 = ho.b_roots(g)
    assert abs(b1 * b2 - g) <= 1e-12 * g
    assert abs(b1 + b2 + 1 - g) <= 1e-12 * g


def test_f_mu_zero_is_constant():
    for d in (1, 2, 3):
        tr = ho.f_mu_lowdim(DimensionParams.of(d), 0.0, 10.0)
        assert np.all(tr.samples[:, 1] == 8 - 2 * d)


def test_f_mu_d2_curve():
    params = DimensionParams.of(2)
    tr = ho.f_mu_lowdim(params, -1.0, 15.0)
    x, f, fp = tr.samples.T
    assert f[0] == params.q and fp[0] == -1.0
    assert np.all(f > 0) and np.all(np.diff(f) < 0) and np.all(f[1:] < params.q)


def test_f_mu_monotone_in_mu():
    params = DimensionParams.of(3)
    curves = [ho.f_mu_lowdim(params, mu, 5.0).samples[1:, 1] for mu in (-3.0, -2.0, -1.0, -0.5)]
    for lo, hi in zip(curves, curves[1:]):
        assert np.all(lo < hi)


def test_f_mu_vanishes_pointwise():
    params = DimensionParams.of(3)
    vals = [ho.f_mu_at(params, mu, 1.0)[0] for mu in (-1.0, -10.0, -100.0)]
    assert vals[0] > vals[1] > vals[2] > 0
    assert vals[2] < 0.1 * vals[0]


def test_f_mu_rejects():
    with pytest.raises(ValueError):
        ho.f_mu_lowdim(DimensionParams.of(5), -1.0, 1.0)
    with pytest.raises(ValueError):
        ho.f_mu_lowdim(DimensionParams.of(2), 0.5, 1.0)


def test_mu_of_s_lowdim():
    params = DimensionParams.of(3)
    assert ho.mu_of_s_lowdim(params, 2.0) == 0.0
    mu = ho.mu_of_s_lowdim(params, 1.0)
    assert mu < 0 and abs(ho.f_mu_at(params, mu, 1.0)[0] - 1.0) <= 1e-10
    assert ho.mu_of_s_lowdim(params, 0.5) < mu
    for bad in (0.0, 2.5):
        with pytest.raises(ValueError):
            ho.mu_of_s_lowdim(params, bad)


def test_hitting_zero_s():
    for d in (1, 3, 5):
        assert ho.hitting_series(d, 0.0, 7.0) == 0.0


def test_hitting_d5_self_consistency():
    mu = ho.mu_s(5, 1.0)
    v = ho.hitting_series(5, 1.0, 10.0)
    a = ho._float_alphas(5, 200)
    twice = math.fsum(a[l] * mu**l * 10.0 ** (-2 - l) for l in range(1, 201))
    assert abs(v - twice) <= 1e-12
    assert v == pytest.approx(mu * 1e-3, rel=0.1)


@pytest.mark.parametrize("d", [1, 2, 3])
@pytest.mark.parametrize("r", [5.0, 20.0, 100.0])
def test_series_matches_fmu(d, r):
    assert abs(ho.hitting_series(d, 1.0, r) - ho.hitting_via_fmu(d, 1.0, r)) <= 1e-8


def test_d2_leading_order():
    r = 1e6
    assert r * r * ho.hitting_series(2, 1.0, r) == pytest.approx(4.0, rel=1e-3)


@pytest.mark.parametrize("d", [1, 2, 3, 5, 6])
def test_radial_residual(d):
    mu = abs(ho.mu_s(d, 1.0))
    B = DimensionParams.of(d).radius_bound
    r0 = max(2.0, 2 * (mu / B) ** (1 / DimensionParams.of(d).beta)) if d <= 3 else 1.0
    for r in np.geomspace(r0, 100 * r0, 20):
        assert abs(ho.radial_residual(d, 1.0, r)) <= 1e-7


def test_divergence_region():
    with pytest.raises(ho.DivergenceRegion):
        ho.hitting_series(3, 1.0, 1e-3)
    with pytest.raises(ho.DivergenceRegion):
        ho.hitting_series(5, 1.0, 0.5)


def test_csv(tmp_path):
    ho.write_alpha_csv(tmp_path / "a.csv", [ho.alpha_seq(5, 3)])
    assert (tmp_path / "a.csv").read_text().splitlines() == ["d,l,alpha_l", "5,0,0.0", "5,1,1.0", "5,2,0.25",
                                                             "5,3,0.05"]
