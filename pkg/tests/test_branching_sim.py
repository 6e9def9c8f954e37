import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bbm4lab import branching_sim as bs
from bbm4lab.branching_sim import PioneerTally, SimConfig, SphereGeometry


def cfg(n=2000, **kw):
    return SimConfig(n_replicas=n, **kw)


def test_start_on_target_sphere():
    tally = bs.run_bbm_pioneers(SphereGeometry(1.0, 1.0, 10.0), cfg(200))
    assert tally.counts.tolist() == [0, 200]


def test_degenerate_r_equals_R():
    tally = bs.run_bbm_pioneers(SphereGeometry(1.0, 1.0, 1.0), cfg(50))
    assert tally.counts.tolist() == [0, 50]


def test_geometry_validation():
    with pytest.raises(ValueError):
        SphereGeometry(0.5, 1.0, 2.0)
    with pytest.raises(ValueError):
        SphereGeometry(3.0, 1.0, 2.0)
    with pytest.raises(ValueError):
        SphereGeometry(1.0, None, None)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.05)
    with pytest.raises(ValueError):
        SimConfig(n_replicas=0)
    with pytest.raises(ValueError):
        SimConfig(mode="lattice-walk", d=3)
    with pytest.raises(ValueError):
        SimConfig(mode="euler")


def test_dt_must_resolve_annulus():
    with pytest.raises(ValueError, match="too large"):
        bs.run_bbm_pioneers(SphereGeometry(1.05, 1.0, 1.1), cfg(10))


def test_determinism():
    geom = SphereGeometry(3.0, 1.0, 8.0)
    a = bs.run_bbm_pioneers(geom, cfg(3000, seed=7))
    b = bs.run_bbm_pioneers(geom, cfg(3000, seed=7))
    c = bs.run_bbm_pioneers(geom, cfg(3000, seed=8))
    assert a == b
    assert a != c


def test_threads_match_serial():
    geom = SphereGeometry(3.0, 1.0, 8.0)
    assert bs.run_bbm_pioneers(geom, cfg(3000, seed=3, threads=3)) == bs.run_bbm_pioneers(geom, cfg(3000, seed=3))


@settings(max_examples=10)
@given(st.lists(st.integers(1, 599), min_size=1, max_size=4, unique=True))
def test_partition_merge(cuts):
    geom = SphereGeometry(2.5, 1.0, 6.0)
    c = cfg(600, seed=11)

    def tally(lo, hi):
        n, work = bs.simulate_counts(geom, c, lo, hi)
        return PioneerTally.from_samples(n, int(work.sum()))

    full = tally(0, 600)
    edges = [0, *sorted(cuts), 600]
    parts = [tally(lo, hi) for lo, hi in zip(edges, edges[1:])]
    merged = parts[0]
    for p in reversed(parts[1:]):
        merged = p.merge(merged)
    assert merged == full


@settings(max_examples=30)
@given(st.lists(st.integers(0, 12), max_size=40), st.lists(st.integers(0, 12), max_size=40))
def test_tally_merge_commutes(a, b):
    ta, tb = PioneerTally.from_samples(a), PioneerTally.from_samples(b)
    assert ta.merge(tb) == tb.merge(ta)
    assert ta.merge(tb).n_replicas == len(a) + len(b)


def test_tail_monotone():
    tally = bs.run_bbm_pioneers(SphereGeometry(2.0, 1.0, 20.0), cfg(5000))
    tails = [tally.tail(k)[0] for k in range(1, tally.counts.size + 1)]
    assert all(x >= y for x, y in zip(tails, tails[1:]))
    assert tally.hit_indicator_mean[0] == pytest.approx(1 - tally.counts[0] / 5000)


def test_harmonic_oracle_shapes():
    g = SphereGeometry(math.e**5, math.e**3, math.e**6)
    s, r, R = g.start_radius, g.target_radius, g.kill_radius
    want = (s**-2 - R**-2) / (r**-2 - R**-2)
    assert bs.harmonic_first_moment(g, 4) == pytest.approx(want, rel=1e-14)
    assert bs.harmonic_first_moment(SphereGeometry(2.0, 1.0, 4.0), 2) == pytest.approx(0.5, rel=1e-14)


@pytest.mark.parametrize("mode", ["radial-bessel", "full-cartesian"])
def test_first_moment_small(mode):
    rep = bs.first_moment_check(SphereGeometry(3.0, 2.0, 6.0), cfg(20000, mode=mode))
    assert rep["passed"], rep


def test_exact_and_euler_agree():
    geom = SphereGeometry(3.0, 2.0, 6.0)
    a = bs.run_bbm_pioneers(geom, cfg(20000)).mean_count
    b = bs.run_bbm_pioneers(geom, cfg(20000, seed=1, scheme="euler", dt=1e-3)).mean_count
    assert abs(a[0] - b[0]) <= 3 * math.hypot(a[1], b[1])


def test_macro_steps_agree_with_direct():
    geom = SphereGeometry(12.0, 1.0, 40.0)
    a = bs.run_bbm_pioneers(geom, cfg(20000)).mean_count
    b = bs.run_bbm_pioneers(geom, cfg(20000, seed=1, macro_steps=False)).mean_count
    exact = bs.harmonic_first_moment(geom)
    for m, se in (a, b):
        assert abs(m - exact) <= 3 * se


def gillespie(T, rng):
    """Direct event-driven critical binary BBM in 1d: survivor positions at T."""
    alive = [(0.0, 0.0)]  # (time, position)
    out = []
    while alive:
        t, x = alive.pop()
        life = rng.exponential()
        if t + life >= T:
            out.append(x + rng.normal() * math.sqrt(T - t))
            continue
        x += rng.normal() * math.sqrt(life)
        if rng.random() < 0.5:
            alive += [(t + life, x), (t + life, x)]
    return out


def test_macro_genealogy_matches_direct():
    T, n = 2.0, 20000
    rng = np.random.default_rng(5)
    direct = [gillespie(T, rng) for _ in range(n)]
    macro = [bs.macro_survivors(T, [0.0], seed=5, replica=k)[:, 0] for k in range(n)]

    def stats(runs):
        N = np.array([len(r) for r in runs], dtype=float)
        S2 = np.array([float(np.sum(r)) ** 2 for r in runs])
        Q = np.array([float(np.sum(np.square(r))) for r in runs])
        return [(v.mean(), v.std() / math.sqrt(n)) for v in (N > 0, N, N * N, S2, Q)]

    for (a, sa), (b, sb) in zip(stats(direct), stats(macro)):
        assert abs(a - b) <= 4 * math.hypot(sa, sb)
    # exact: P(alive) = 2/(2+T), E N = 1, E N² = 1+T, E Σx² = T
    m = stats(macro)
    assert abs(m[0][0] - 2 / (2 + T)) <= 4 * m[0][1]
    assert abs(m[2][0] - (1 + T)) <= 4 * m[2][1]
    assert abs(m[4][0] - T) <= 4 * m[4][1]


def test_identity_trivial_and_rejects():
    rep = bs.generating_identity_check(0.0, 1.0, 2.0, cfg(100))
    assert rep["mc_value"] == 0.0 and rep["ode_value"] == 0.0
    with pytest.raises(ValueError):
        bs.generating_identity_check(1.0, 1.0, 2.0, cfg(10))
    with pytest.raises(ValueError):
        bs.generating_identity_check(0.5, 3.0, 2.0, cfg(10))


def test_identity_mid_point():
    rep = bs.generating_identity_check(0.5, 1.0, 3.0, cfg(20000))
    assert rep["passed"], rep


def test_scale_invariance_zero_and_band():
    rep = bs.scale_invariance_check(0.0, 0.5, 8.0, 16.0, cfg(500))
    assert rep["values"] == (0.0, 0.0)
    with pytest.raises(bs.OutsideLaplaceBand):
        bs.scale_invariance_check(-400.0, 0.5, 8.0, 16.0, cfg(2000))


def test_hitting_oracles():
    inf = bs.hitting_probability_ode(math.e**2)
    fin = bs.hitting_probability_ode(math.e**2, math.e**8)
    assert inf == pytest.approx(0.010232, abs=2e-6)
    assert fin <= inf
    assert bs.hitting_probability_ode(1.0, 5.0) == pytest.approx(1.0, abs=1e-9)


def test_psi_examples():
    assert bs.psi(1.0) == 1.0
    assert bs.psi(8.0) == pytest.approx(6.0, rel=1e-15)
    assert bs.psi(8.0, 1.0) == 8.0
    with pytest.raises(ValueError):
        bs.psi(0.0)


@settings(max_examples=50)
@given(st.floats(0.01, 50), st.floats(1, 20))
def test_psi_is_infimum(a, s):
    ts = np.linspace(1, s, 2001)
    assert bs.psi(a, s) <= np.min(2 * (ts - 1) + a / ts) + 1e-12
    assert bs.psi(a, s) <= a + 1e-12
    assert bs.psi(a) <= bs.psi(a, s) + 1e-12


def test_tail_probe_zero_threshold():
    probe = bs.tail_exponent_probe(0.0, [math.e**1.5, math.e**2], cfg(3000))
    assert probe.probabilities == (1.0, 1.0)
    assert probe.slope == 0.0


def test_tail_probe_insufficient():
    with pytest.raises(bs.InsufficientStatistics) as err:
        bs.tail_exponent_probe(3.0, [math.e**3, math.e**4], cfg(50))
    assert err.value.partial is not None


def test_green_kernel():
    for rho in (0.3, 1.0, 2.5):
        assert bs.green_4d(rho) == pytest.approx(bs.green_4d_closed(rho), rel=1e-10)


def test_m1_quadrature():
    a = bs.m1_quadrature()
    b = bs.m1_quadrature(np.array([0.5, -0.5, 0.5, 0.5]))
    assert abs(a - b) <= 1e-10
    assert a == pytest.approx(0.25, abs=1e-10)


def test_m1_mc_matches_quadrature():
    mc, se = bs.m1_monte_carlo(10**8, seed=0)
    assert abs(mc / bs.m1_quadrature() - 1) <= 1e-3
    with pytest.raises(ValueError):
        bs.m1_constant("simpson")


def test_single_vertex_field():
    c = SimConfig(mode="lattice-walk", n_replicas=1)
    for seed in range(20):
        run = bs.run_brw_thick_points(4, [1.0], c.replace(seed=seed), condition="none", keep_sites=True)
        f = run.fields[0]
        if f.total == 1:
            assert f.at((0, 0, 0, 0)) == 1 and f.at((1, 0, 0, 0)) == 0
            assert f.visits.sum() == 1
            return
    pytest.fail("no seed in 0..19 gave a one-vertex tree")


def brw_vertices(seed, attempt, R):
    """Pure-Python replay of one BRW attempt, counting vertices inside B(0,R)."""
    from bbm4lab import _rng
    st_ = _rng.new_state(np.uint64(seed), attempt)
    cur, count = [(0, 0, 0, 0)], 1
    while cur:
        nxt = []
        for v in cur:
            if _rng.uniform(st_) < 0.5:
                continue
            for _ in range(2):
                k = int(_rng.randint(st_, 8))
                w = list(v)
                w[k // 2] += 1 if k % 2 == 0 else -1
                if sum(t * t for t in w) >= R * R:
                    continue
                nxt.append(tuple(w))
                count += 1
        cur = nxt
    return count


def test_local_times_sum_to_tree_size():
    c = SimConfig(mode="lattice-walk", n_replicas=30, seed=2)
    run = bs.run_brw_thick_points(6, [0.5, 1.0], c, condition="none", keep_sites=True)
    for k, f in enumerate(run.fields):
        assert f.visits.sum() == f.total == brw_vertices(2, k, 6.0)
        assert f.max_local_time == f.visits.max()


def test_thick_counts_monotone_in_a():
    c = SimConfig(mode="lattice-walk", n_replicas=5)
    run = bs.run_brw_thick_points(8, [0.25, 0.5, 1.0, 2.0], c)
    for f in run.fields:
        t = [f.thick[a] for a in (0.25, 0.5, 1.0, 2.0)]
        assert t == sorted(t, reverse=True)
    assert 0 < run.acceptance < 1


def test_thick_rejects():
    with pytest.raises(ValueError):
        bs.run_brw_thick_points(8, [1.0], SimConfig())
    with pytest.raises(ValueError):
        bs.run_brw_thick_points(8, [1.0], SimConfig(mode="lattice-walk"), start=(5, 0, 0, 0))
    with pytest.raises(bs.AcceptanceTooLow):
        bs.run_brw_thick_points(16, [1.0], SimConfig(mode="lattice-walk", n_replicas=5), max_attempts=50)


def test_csv_writers(tmp_path):
    tally = PioneerTally.from_samples([0, 0, 1, 3])
    bs.write_histogram_csv(tmp_path / "h.csv", tally)
    bs.write_summary_csv(tmp_path / "s.csv", [("E[N]", *tally.mean_count)])
    assert (tmp_path / "h.csv").read_text().splitlines() == ["k,count", "0,2", "1,1", "3,1"]
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "estimator,value,stderr"
