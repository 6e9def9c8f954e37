import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from bbm4lab import ode_engine as oe
from bbm4lab.ode_engine import GLambdaSpec, SolveConfig


def solve(lam, x_max, **kw):
    return oe.solve_g_lambda(GLambdaSpec(lam, x_max), SolveConfig(**kw))


@pytest.fixture(scope="module")
def small_lambda():
    return solve(1e-3, 60.0)


def test_tableau_consistency():
    # row sums equal the nodes, weights sum to one, error weights sum to zero
    np.testing.assert_allclose(oe._A.sum(axis=1), oe._C, atol=1e-15)
    assert oe._B.sum() == pytest.approx(1.0, abs=1e-15)
    assert oe._E.sum() == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("lam", [0.3, 0.9, 1.7])
def test_against_scipy_rk45(lam):
    traj = solve(lam, 30.0)
    ref = solve_ivp(lambda x, y: [y[1], y[0] ** 2 - 2 * y[1]], (0, 30), [0.0, -lam], method="DOP853",
                    rtol=1e-12, atol=1e-14, dense_output=True)
    g_ref = ref.sol(traj.xs)[0]
    np.testing.assert_allclose(traj.g, g_ref, rtol=0, atol=1e-9)


def test_lambda_zero_is_fixed_point():
    traj = solve(0.0, 10.0)
    assert traj.blowup_at is None
    assert not traj.g.any() and not traj.gp.any()


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        GLambdaSpec(-0.1, 10.0)
    with pytest.raises(ValueError):
        GLambdaSpec(0.1, 0.0)


def test_residual_bound():
    traj = solve(0.5, 200.0)
    assert traj.max_residual <= 10 * traj.rel_tol
    assert np.all(np.diff(traj.xs) > 0) and traj.xs[0] == 0.0


def test_g_at_1000():
    g, _ = oe.g_at(0.5, 1000.0)
    want = -2 / 1000 + (2 * math.log(1000) + 9.209) / 1000**2
    assert abs(g - want) <= 1e-5


def test_phase1_x0(small_lambda):
    pm = oe.phase_markers(small_lambda)
    assert abs(pm.x0 - 0.5 * math.log(8 / 1e-3)) <= 0.05
    assert -5.0e-4 <= pm.g_x0 <= -4.95e-4


def test_phase2_gap(small_lambda):
    pm = oe.phase_markers(small_lambda)
    assert 0 < pm.x0 < pm.x1
    assert pm.x1 - pm.x0 <= 0.5 * math.log(1 / 1e-3) + 5


def test_delta_decay():
    traj = solve(0.5, 600.0)
    assert oe.delta_at(traj, 500.0) * 500**3 == pytest.approx(4.0, rel=0.15)


def test_horizon_too_short():
    with pytest.raises(oe.HorizonTooShort):
        oe.phase_markers(solve(1e-3, 3.0))


def test_delta_nonnegative_after_x1():
    traj = solve(0.5, 300.0)
    pm = oe.phase_markers(traj)
    xs, d = pm.delta_samples[:, 0], pm.delta_samples[:, 1]
    assert np.all(d[xs >= pm.x1] >= -1e-12)


@settings(max_examples=15)
@given(st.floats(0.05, 1.95))
def test_small_lambda_bounds(lam):
    traj = solve(lam, 50.0)
    assert traj.blowup_at is None
    assert np.all(traj.g <= 1e-12)
    assert np.max(np.abs(traj.g)) <= lam / 2 + 1e-12
    assert np.max(np.abs(traj.gp)) <= 2 * lam + 1e-12


@settings(max_examples=10)
@given(st.floats(0.05, 1.95))
def test_unimodal(lam):
    traj = solve(lam, 80.0)
    pm = oe.phase_markers(traj)
    xs, g, gp = traj.xs, traj.g, traj.gp
    gpp = g**2 - 2 * gp
    before, after = xs < pm.x0, xs > pm.x0
    assert np.all(np.diff(g[before]) < 0) and np.all(np.diff(g[after]) > 0)
    assert np.all(gpp[xs < pm.x1] > -1e-14) and np.all(gpp[xs > pm.x1 + 1e-6] < 1e-14)


@settings(max_examples=10)
@given(st.floats(0.01, 1.0))
def test_gronwall_sandwich(lam):
    traj = solve(lam, 40.0)
    lower, upper = oe.gronwall_envelope(lam, traj.xs)
    assert np.all(traj.g >= lower - 1e-12)
    assert np.all(traj.g <= upper + 1e-12)


@settings(max_examples=10)
@given(st.floats(0.02, 0.98), st.floats(0.01, 0.5))
def test_monotone_in_lambda(l1, gap):
    l2 = min(l1 + gap, 0.99)
    xs = np.linspace(0.1, 100, 400)
    g1, _ = oe.g_at(l1, xs)
    g2, _ = oe.g_at(l2, xs)
    assert np.all(g2 < g1)


@pytest.mark.parametrize("lam", [0.02, 0.01])
@pytest.mark.parametrize("t", [1, 2, 4])
def test_small_lambda_profile(lam, t):
    x = t / lam
    g, _ = oe.g_at(lam, x)
    assert abs(g / (-2 * lam / (lam * x + 4)) - 1) <= 0.1


@pytest.mark.parametrize("lam", [0.3, 0.5, 0.75, 1.0])
def test_first_order_tail(lam):
    g, _ = oe.g_at(lam, 1000.0)
    assert -2.2 <= 1000 * g <= -1.8


def test_h_tail_value():
    traj = oe.solve_h_tail(200.0, 3)
    h, _ = traj(200.0)
    assert abs(float(h) - (2 / 200 + 2 * math.log(200) / 200**2)) <= 2e-4


def test_h_tail_sign_pattern():
    traj = oe.solve_h_tail(200.0, 3)
    h, hp = traj.g, traj.gp
    hpp = 2 * hp + h**2
    hppp = 2 * hpp + 2 * h * hp
    assert np.all(h > 0) and np.all(hp < 0) and np.all(hpp > 0) and np.all(hppp < 0)
    assert traj.max_residual <= 10 * traj.rel_tol


def test_h_tail_first_order():
    traj = oe.solve_h_tail(200.0, 3, x_end=800.0)
    xh = [x * float(traj(x)[0]) for x in (200.0, 400.0, 800.0)]
    assert all(abs(v - 2) <= 0.2 for v in xh)
    gaps = [abs(v - 2) for v in xh]
    assert gaps[0] > gaps[1] > gaps[2]


def test_h_tail_preconditions():
    with pytest.raises(ValueError):
        oe.solve_h_tail(10.0, 3)
    with pytest.raises(ValueError):
        oe.solve_h_tail(200.0, 1)


def test_positivity_predicate():
    assert not oe.goes_positive(1.5)
    assert oe.goes_positive(150.0)


def test_positivity_threshold():
    est = oe.positivity_threshold(8.0, 14.0, width=0.05)
    assert abs(est.value - 11.2) <= 0.3
    assert est.width <= 0.05


def test_bracket_invalid():
    with pytest.raises(oe.BracketInvalid):
        oe.positivity_threshold(1.0, 1.5)
    with pytest.raises(oe.BracketInvalid):
        oe.positivity_threshold(3.0, 2.0)


def test_blowup_reported_for_large_lambda():
    traj = solve(150.0, 50.0)
    assert traj.blowup_at is not None


def test_export_text(tmp_path):
    traj = solve(0.5, 5.0)
    path = tmp_path / "traj.txt"
    traj.export_text(path)
    assert path.read_text().startswith("# x g gp")
    back = np.loadtxt(path)
    np.testing.assert_array_equal(back[:, 1], traj.g)
