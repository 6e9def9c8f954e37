"""Monte Carlo for critical branching Brownian motion and branching random walk.

Particles live Exp(1) and leave 0 or 2 children with probability 1/2 each.
Motion is standard Brownian motion (generator Δ/2), so the generating function
v = 1 - E[(1-s)^N] solves Δv = v², which is what the ODE side integrates.

Three motion modes share one replica driver:

* ``radial-bessel``: the radius is a Bessel(d) process. Transitions are drawn
  exactly as |ρe₁ + √h·Z| (``scheme="exact"``) or by Euler–Maruyama.
* ``full-cartesian``: the d-vector position takes Gaussian steps.
* ``lattice-walk``: nearest-neighbour branching random walk on Z⁴ with
  generation time (used for local times and thick points).

Continuous modes step by h = clamp((κ·dist)², dt, remaining life), where dist
is the distance to the nearest sphere, so a particle far from every sphere
moves in one exact step per lifetime. Crossings inside a step are caught by
the Brownian-bridge probability exp(-2Δ₁Δ₂/h) when ``bridge_correction`` is on.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, stats

from . import _rng
from ._accel import njit
from .ode_engine import g_at

RADIAL, CARTESIAN, LATTICE = "radial-bessel", "full-cartesian", "lattice-walk"
MODES = (RADIAL, CARTESIAN, LATTICE)
SCHEMES = ("exact", "euler")

STEP_FRACTION = 0.25  # κ: one step moves ~κ·dist, so a single-step crossing is a 4σ event
BIAS_REL = 0.02  # discretisation allowance for the identity check, relative to |target|
ESS_MIN = 100.0
MIN_HITS = 30
# Far from every sphere a particle's whole subtree is advanced by T = (dist/MACRO_SEP)²
# in one exact draw; reaching a sphere would need an 8σ excursion of some lineage.
MACRO_SEP = 8.0
MACRO_MIN_T = 0.25

OUTER_NONE, OUTER_KILL, OUTER_FREEZE = 0, 1, 2


class StatisticalCheckFailed(RuntimeError):
    """A Monte Carlo comparison did not pass; carries the report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class OutsideLaplaceBand(ValueError):
    pass


class InsufficientStatistics(RuntimeError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class AcceptanceTooLow(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    d: int = 4
    dt: float = 1e-2
    seed: int = 0
    n_replicas: int = 1000
    mode: str = RADIAL
    bridge_correction: bool = True
    scheme: str = "exact"
    macro_steps: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError("d must be a positive integer")
        if self.n_replicas < 1:
            raise ValueError("n_replicas must be at least 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.mode == RADIAL and self.dt > 1e-2:
            raise ValueError("dt must be <= 1e-2 in radial-bessel mode")
        if self.mode == LATTICE and self.d != 4:
            raise ValueError("lattice-walk mode is implemented on Z^4 only")
        _rng.seed_key(self.seed)

    def replace(self, **kw) -> "SimConfig":
        return SimConfig(**{**self.__dict__, **kw})


@dataclass(frozen=True)
class SphereGeometry:
    """Concentric spheres around the origin.

    ``target_radius`` is the freezing sphere (None for outer-pioneer runs);
    ``kill_radius`` removes particles, or freezes and counts them when
    ``outer_freeze`` is set.
    """

    start_radius: float
    target_radius: float | None = 1.0
    kill_radius: float | None = None
    outer_freeze: bool = False

    def __post_init__(self):
        r, s, R = self.target_radius, self.start_radius, self.kill_radius
        if r is None and R is None:
            raise ValueError("need a target sphere or an outer sphere")
        if r is not None and not 0 < r <= s:
            raise ValueError("need 0 < target_radius <= start_radius")
        if R is not None and not (s <= R and (r is None or r < R or r == s == R)):
            raise ValueError("need start_radius <= kill_radius and target_radius < kill_radius")
        if self.outer_freeze and R is None:
            raise ValueError("outer_freeze needs kill_radius")
        if s < 0:
            raise ValueError("start_radius must be nonnegative")

    @property
    def annulus_width(self) -> float:
        lo = self.target_radius or 0.0
        hi = self.kill_radius if self.kill_radius is not None else math.inf
        return hi - lo


@dataclass
class PioneerTally:
    """Histogram of pioneer counts; every estimator is a function of it, so merging is exact."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    work: int = 0

    @classmethod
    def from_samples(cls, n: np.ndarray, work: int = 0) -> "PioneerTally":
        return cls(np.bincount(np.asarray(n, dtype=np.int64), minlength=1).astype(np.int64), int(work))

    @property
    def n_replicas(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "PioneerTally") -> "PioneerTally":
        m = max(self.counts.size, other.counts.size)
        c = np.zeros(m, dtype=np.int64)
        c[: self.counts.size] += self.counts
        c[: other.counts.size] += other.counts
        return PioneerTally(c, self.work + other.work)

    def __eq__(self, other):
        if not isinstance(other, PioneerTally):
            return NotImplemented
        a, b = np.trim_zeros(self.counts, "b"), np.trim_zeros(other.counts, "b")
        return self.work == other.work and np.array_equal(a, b)

    def _ks(self):
        return np.arange(self.counts.size, dtype=float)

    def mean_of(self, values: np.ndarray) -> tuple[float, float]:
        """Mean and standard error of f(N) given the table values[k] = f(k)."""
        n = self.n_replicas
        w = self.counts.astype(float)
        mu = float(w @ values) / n
        var = float(w @ (values - mu) ** 2) / max(n - 1, 1)
        return mu, math.sqrt(var / n)

    @property
    def hit_indicator_mean(self) -> tuple[float, float]:
        return self.mean_of((self._ks() > 0).astype(float))

    @property
    def mean_count(self) -> tuple[float, float]:
        return self.mean_of(self._ks())

    def weighted_sum(self, s: float) -> tuple[float, float]:
        """Mean of (1-s)^N with its standard error."""
        return self.mean_of((1.0 - s) ** self._ks())

    def ess(self, s: float) -> float:
        w = (1.0 - s) ** self._ks()
        c = self.counts.astype(float)
        return float((c @ w) ** 2 / (c @ (w * w)))

    def tail(self, k: int) -> tuple[float, float]:
        """P(N >= k) with standard error."""
        return self.mean_of((self._ks() >= k).astype(float))

    def samples(self) -> np.ndarray:
        return np.repeat(np.arange(self.counts.size), self.counts)


# ---------------------------------------------------------------- kernels


@njit
def _radial_move(rho, h, dm1, euler, st):
    if euler:
        x = rho + math.sqrt(h) * _rng.normal(st) + 0.5 * dm1 * h / rho
        return abs(x)
    w = -2.0 * math.log(_rng.uniform(st))
    c = math.cos(_rng.TWO_PI * _rng.uniform(st))
    x = rho + math.sqrt(h * w) * c
    if dm1 == 0:
        return abs(x)
    rest = w * (1.0 - c * c)
    k = dm1 - 1
    while k >= 2:
        rest -= 2.0 * math.log(_rng.uniform(st))
        k -= 2
    if k == 1:
        z = _rng.normal(st)
        rest += z * z
    return math.sqrt(x * x + h * rest)


@njit
def _crossed(a, b, h, bridge, st):
    """Bridge crossing between distances a, b > 0 from a barrier over time h."""
    if not bridge:
        return False
    e = -2.0 * a * b / h
    if e < -40.0:
        return False
    return _rng.uniform(st) < math.exp(e)


@njit
def _gaussian_fill(st, out, k, scale):
    """out[:k] = scale·Z with Z iid standard normal."""
    j = 0
    while j + 1 < k:
        z0, z1 = _rng.normal_pair(st)
        out[j] = scale * z0
        out[j + 1] = scale * z1
        j += 2
    if j < k:
        out[j] = scale * _rng.normal(st)


@njit
def _draw_genealogy(st, T, hbuf):
    """Critical binary BBM run for time T: returns (alive count, depths, buffer).

    Rates are 1/2 for splitting and 1/2 for dying, so P(alive at T) = 2/(2+T).
    Given survival the reduced genealogy is a coalescent point process: node
    depths are iid with P(H > t) = 1/(1 + t/2), stopped at the first depth > T;
    with k alive, hbuf[:k-1] holds the k-1 node depths.
    """
    if _rng.uniform(st) * (2.0 + T) < T:
        return 0, hbuf
    cut = 1.0 - 1.0 / (1.0 + 0.5 * T)
    n = 0
    while True:
        u = _rng.uniform(st)
        if u >= cut:
            return n + 1, hbuf
        if n == hbuf.size:
            h2 = np.empty(2 * n)
            h2[:n] = hbuf
            hbuf = h2
        hbuf[n] = 2.0 * u / (1.0 - u)
        n += 1


@njit
def _comb_positions(st, T, x0, hbuf, k, sd, sx, z, out):
    """Positions of the k survivors along the comb given by the depths hbuf[:k-1].

    Lineage i+1 leaves lineage i at depth H_i. The stack (sd, sx) holds the
    current lineage at fixed depths, deepest first; a new branch point is a
    Brownian-bridge draw between its two stack neighbours. Needs stack room
    for 2k entries and out room for k rows.
    """
    d = x0.size
    sd[0] = T
    sd[1] = 0.0
    _gaussian_fill(st, z, d, math.sqrt(T))
    for j in range(d):
        sx[0, j] = x0[j]
        sx[1, j] = x0[j] + z[j]
        out[0, j] = sx[1, j]
    top = 1
    for i in range(k - 1):
        H = hbuf[i]
        while sd[top] < H:
            top -= 1
        a = top + 1  # shallower neighbour, still stored just above
        db, da = sd[top], sd[a]
        w = (db - H) / (db - da)
        _gaussian_fill(st, z, 2 * d, 1.0)
        sdev = math.sqrt((db - H) * (H - da) / (db - da))
        sh = math.sqrt(H)
        for j in range(d):
            xb = sx[top, j]
            xh = xb + w * (sx[a, j] - xb) + sdev * z[j]
            sx[top + 1, j] = xh
            sx[top + 2, j] = xh + sh * z[d + j]
            out[i + 1, j] = sx[top + 2, j]
        sd[top + 1] = H
        sd[top + 2] = 0.0
        top += 2


def macro_survivors(T: float, x0, seed: int = 0, replica: int = 0) -> np.ndarray:
    """Survivor positions after time T for one particle at x0 (testing helper)."""
    x0 = np.asarray(x0, dtype=float)
    with np.errstate(over="ignore"):
        st = _rng.new_state(np.uint64(seed), replica)
        k, hbuf = _draw_genealogy(st, float(T), np.empty(8))
        d = x0.size
        out = np.empty((max(k, 1), d))
        if k:
            _comb_positions(st, float(T), x0, hbuf, k, np.empty(2 * k + 2), np.empty((2 * k + 2, d)),
                            np.empty(2 * d), out)
    return out[:k]


@njit
def _continuous_replicas(seed, lo, hi, d, cartesian, start, r_in, r_out, outer,
                         dt, bridge, euler, macro, stop_at, out_n, out_work):
    """Grow replicas lo..hi-1; writes pioneer counts and particle segments simulated."""
    cap = 256
    pos = np.empty((cap, d))
    life = np.empty(cap)
    p = np.empty(d)
    x0 = np.empty(d)
    z = np.empty(2 * d)
    hbuf = np.empty(64)
    sd = np.empty(130)
    sx = np.empty((130, d))
    surv = np.empty((65, d))
    has_in = r_in > 0.0
    has_out = outer != 0
    dm1 = d - 1
    macro_dist = MACRO_SEP * math.sqrt(MACRO_MIN_T)
    for rep in range(lo, hi):
        st = _rng.new_state(seed, rep)
        frozen = 0
        work = 0
        out_n[rep - lo] = 0
        out_work[rep - lo] = 0
        if has_in and start <= r_in:
            out_n[rep - lo] = 1
            continue
        if has_out and start >= r_out:
            out_n[rep - lo] = 1 if outer == 2 else 0
            continue
        top = 1
        for j in range(d):
            pos[0, j] = 0.0
        pos[0, 0] = start
        life[0] = _rng.exponential(st)
        while top > 0:
            top -= 1
            work += 1
            t_left = life[top]
            for j in range(d):
                p[j] = pos[top, j]
            rho = 0.0
            for j in range(d):
                rho += p[j] * p[j]
            rho = math.sqrt(rho)
            while True:
                dist = math.inf
                if has_in:
                    dist = rho - r_in
                if has_out and r_out - rho < dist:
                    dist = r_out - rho
                if macro and dist >= macro_dist:
                    # memoryless lifetimes: restart this particle's subtree for time T
                    T = (dist / MACRO_SEP) ** 2
                    k, hbuf = _draw_genealogy(st, T, hbuf)
                    if k == 0:
                        break
                    if 2 * k + 2 > sd.size:
                        sd = np.empty(4 * k + 4)
                        sx = np.empty((4 * k + 4, d))
                        surv = np.empty((2 * k + 2, d))
                    if top + k > cap:
                        while top + k > cap:
                            cap *= 2
                        pos2 = np.empty((cap, d))
                        pos2[:top] = pos[:top]
                        pos = pos2
                        life2 = np.empty(cap)
                        life2[:top] = life[:top]
                        life = life2
                    if k == 1 and not cartesian:
                        if top == cap:
                            cap *= 2
                            pos2 = np.empty((cap, d))
                            pos2[:top] = pos[:top]
                            pos = pos2
                            life2 = np.empty(cap)
                            life2[:top] = life[:top]
                            life = life2
                        pos[top, 0] = _radial_move(rho, T, dm1, False, st)
                        for j in range(1, d):
                            pos[top, j] = 0.0
                        life[top] = _rng.exponential(st)
                        top += 1
                        break
                    if cartesian:
                        for j in range(d):
                            x0[j] = p[j]
                    else:
                        x0[:] = 0.0
                        x0[0] = rho
                    _comb_positions(st, T, x0, hbuf, k, sd, sx, z, surv)
                    for i in range(k):
                        if cartesian:
                            for j in range(d):
                                pos[top, j] = surv[i, j]
                        else:
                            q = 0.0
                            for j in range(d):
                                q += surv[i, j] * surv[i, j]
                            pos[top, 0] = math.sqrt(q)
                            for j in range(1, d):
                                pos[top, j] = 0.0
                        life[top] = _rng.exponential(st)
                        top += 1
                    break
                h = (STEP_FRACTION * dist) ** 2
                if h < dt:
                    h = dt
                dies = h >= t_left
                if dies:
                    h = t_left
                if cartesian:
                    _gaussian_fill(st, z, d, math.sqrt(h))
                    new = 0.0
                    for j in range(d):
                        p[j] += z[j]
                        new += p[j] * p[j]
                    new = math.sqrt(new)
                else:
                    new = _radial_move(rho, h, dm1, euler, st)
                if has_in and (new <= r_in or _crossed(rho - r_in, new - r_in, h, bridge, st)):
                    frozen += 1
                    break
                if has_out and (new >= r_out or _crossed(r_out - rho, r_out - new, h, bridge, st)):
                    if outer == 2:
                        frozen += 1
                    break
                rho = new
                if not dies:
                    t_left -= h
                    continue
                if _rng.uniform(st) < 0.5:
                    break
                if top == cap:
                    cap *= 2
                    pos2 = np.empty((cap, d))
                    pos2[:top] = pos[:top]
                    pos = pos2
                    life2 = np.empty(cap)
                    life2[:top] = life[:top]
                    life = life2
                if cartesian:
                    for j in range(d):
                        pos[top, j] = p[j]
                else:
                    pos[top, 0] = rho
                    for j in range(1, d):
                        pos[top, j] = 0.0
                life[top] = _rng.exponential(st)
                top += 1
                t_left = _rng.exponential(st)
            if stop_at > 0 and frozen >= stop_at:
                break
        out_n[rep - lo] = frozen
        out_work[rep - lo] = work


def _run_chunks(n_total, threads, run_chunk):
    """Split [0, n_total) into contiguous chunks and merge the results in order."""
    threads = max(1, int(threads))
    edges = np.linspace(0, n_total, min(threads, n_total) + 1).astype(np.int64)
    chunks = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    if len(chunks) == 1:
        return [run_chunk(*chunks[0])]
    with ThreadPoolExecutor(len(chunks)) as ex:
        return list(ex.map(lambda c: run_chunk(*c), chunks))


def simulate_counts(geom: SphereGeometry, cfg: SimConfig, lo: int = 0, hi: int | None = None,
                    stop_at: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-replica pioneer counts and simulated segment counts (a work measure) for replicas lo..hi-1."""
    hi = cfg.n_replicas if hi is None else hi
    if cfg.mode == LATTICE:
        raise ValueError("continuous geometry needs radial-bessel or full-cartesian mode")
    out_n = np.zeros(hi - lo, dtype=np.int64)
    out_p = np.zeros(hi - lo, dtype=np.int64)
    r_in = geom.target_radius or 0.0
    if geom.kill_radius is None:
        outer, r_out = OUTER_NONE, 0.0
    else:
        outer = OUTER_FREEZE if geom.outer_freeze else OUTER_KILL
        r_out = float(geom.kill_radius)
    with np.errstate(over="ignore"):
        _continuous_replicas(np.uint64(cfg.seed), lo, hi, int(cfg.d), cfg.mode == CARTESIAN,
                             float(geom.start_radius), float(r_in), r_out, outer, float(cfg.dt),
                             bool(cfg.bridge_correction), cfg.scheme == "euler", bool(cfg.macro_steps), int(stop_at),
                             out_n, out_p)
    return out_n, out_p


def _check_dt(geom: SphereGeometry, cfg: SimConfig) -> None:
    w = geom.annulus_width
    if math.isfinite(w) and w > 0 and cfg.dt > w * w / 100:
        raise ValueError(f"dt={cfg.dt} too large to resolve the annulus: need dt <= (R-r)^2/100 = {w * w / 100:g}")


def run_bbm_pioneers(geom: SphereGeometry, cfg: SimConfig, stop_at: int = 0) -> PioneerTally:
    """Tally N_r over cfg.n_replicas independent replicas.

    With ``stop_at`` > 0 a replica stops growing once it has that many
    pioneers; the histogram is then exact for events {N >= k}, k <= stop_at.
    """
    _check_dt(geom, cfg)
    if geom.kill_radius is None and geom.target_radius is not None and cfg.d <= 2:
        raise ValueError("without an outer sphere the process is recurrent in d <= 2; give kill_radius")

    def chunk(lo, hi):
        n, work = simulate_counts(geom, cfg, lo, hi, stop_at)
        return PioneerTally.from_samples(n, int(work.sum()))

    parts = _run_chunks(cfg.n_replicas, cfg.threads, chunk)
    out = parts[0]
    for t in parts[1:]:
        out = out.merge(t)
    return out


# ---------------------------------------------------------------- exact oracles


def harmonic_first_moment(geom: SphereGeometry, d: int = 4) -> float:
    """E[N_r] = P(Brownian motion hits r before R), since the branching is critical."""
    s, r, R = geom.start_radius, geom.target_radius, geom.kill_radius
    if d == 2:
        f = math.log
        if R is None:
            raise ValueError("d=2 needs a kill radius")
        return (f(R) - f(s)) / (f(R) - f(r))
    k = 2 - d

    def f(x):
        return x ** k if d != 1 else x

    if R is None:
        if d <= 2:
            raise ValueError("recurrent dimension needs a kill radius")
        return (s / r) ** k
    return (f(s) - f(R)) / (f(r) - f(R))


def hitting_probability_ode(start: float, R: float | None = None, r: float = 1.0) -> float:
    """P(N_r > 0) in d=4 from the autonomous ODE h'' - 2h' = h², h(x) = e^{2x}·v(r·e^x)/r^{-2}.

    With R given, solves the boundary value problem h(0)=1, h(log(R/r))=0;
    without, uses the bounded solution h(0)=1, h ~ 2/x.
    """
    x_s = math.log(start / r)
    if R is None:
        from .ode_engine import solve_h_tail
        from scipy.optimize import brentq

        tr = solve_h_tail(200.0, 6, x_end=200.0)
        c = brentq(lambda x: float(tr(x)[0]) - 1.0, 0.0, 50.0)
        return math.exp(-2 * x_s) * float(tr(x_s + c)[0])
    X = math.log(R / r)

    def rhs(x, y):
        return np.vstack([y[1], 2 * y[1] + y[0] ** 2])

    def bc(ya, yb):
        return np.array([ya[0] - 1.0, yb[0]])

    xs = np.linspace(0, X, 400)
    guess = np.vstack([1 - xs / X, -np.ones_like(xs) / X])
    sol = integrate.solve_bvp(rhs, bc, xs, guess, tol=1e-10, max_nodes=100000)
    if not sol.success:
        raise RuntimeError("boundary value solve failed: " + sol.message)
    return math.exp(-2 * x_s) * float(sol.sol(x_s)[0])


# ---------------------------------------------------------------- checks


def _pass_3sigma(a, se, b, se_b=0.0, allowance=0.0):
    return abs(a - b) <= 3 * math.hypot(se, se_b) + allowance


def generating_identity_check(lam: float, x: float, L: float, cfg: SimConfig) -> dict:
    """MC side (e^{-x}R)²·(1 - E[(1-s)^{N₁}]) with s = g_λ(L) against g_λ(x)."""
    if not 0 <= lam < 1:
        raise ValueError("the identity is only established for lambda < 1")
    if not 0 < x < L:
        raise ValueError("need 0 < x < L")
    R = math.exp(L)
    geom = SphereGeometry(start_radius=math.exp(L - x), target_radius=1.0, kill_radius=R)
    target = float(g_at(lam, x)[0]) if lam > 0 else 0.0
    s = float(g_at(lam, L)[0]) if lam > 0 else 0.0
    tally = run_bbm_pioneers(geom, cfg)
    scale = math.exp(2 * (L - x))
    m, se = tally.weighted_sum(s)
    value, value_se = scale * (1 - m), scale * se
    allowance = BIAS_REL * abs(target)
    return {
        "lambda": lam, "x": x, "L": L, "s": s,
        "mc_value": value, "mc_stderr": value_se, "ode_value": target,
        "bias_allowance": allowance, "n_replicas": tally.n_replicas,
        "hits": int(tally.counts[1:].sum()), "ess": tally.ess(s),
        "passed": _pass_3sigma(value, value_se, target, allowance=allowance),
        "tally": tally,
    }


def first_moment_check(geom: SphereGeometry, cfg: SimConfig) -> dict:
    tally = run_bbm_pioneers(geom, cfg)
    m, se = tally.mean_count
    exact = harmonic_first_moment(geom, cfg.d)
    return {"mc_value": m, "mc_stderr": se, "exact": exact,
            "passed": _pass_3sigma(m, se, exact), "tally": tally}


def mode_agreement_check(geom: SphereGeometry, cfg: SimConfig) -> dict:
    """Radial and full-cartesian runs on the same geometry, independent streams."""
    t_rad = run_bbm_pioneers(geom, cfg.replace(mode=RADIAL))
    t_car = run_bbm_pioneers(geom, cfg.replace(mode=CARTESIAN, seed=(cfg.seed + 1) % (1 << 64)))
    (a, sa), (b, sb) = t_rad.mean_count, t_car.mean_count
    return {"radial": a, "radial_stderr": sa, "cartesian": b, "cartesian_stderr": sb,
            "passed": _pass_3sigma(a, sa, b, sb), "tallies": (t_rad, t_car)}


def scale_invariance_check(s: float, y_frac: float, R1: float, R2: float, cfg: SimConfig) -> dict:
    """R²(1 - E[(1 - s/R²)^Ñ_R]) for outer pioneers at two radii."""
    if s > 1:
        raise ValueError("s must be <= 1")
    if not 0 < y_frac < 1:
        raise ValueError("y_frac must be in (0, 1)")
    rows = []
    for k, R in enumerate((R1, R2)):
        geom = SphereGeometry(start_radius=y_frac * R, target_radius=None, kill_radius=R, outer_freeze=True)
        tally = run_bbm_pioneers(geom, cfg.replace(seed=(cfg.seed + k) % (1 << 64)))
        ess = tally.ess(s / R**2)
        if ess < ESS_MIN:
            raise OutsideLaplaceBand(f"outside Laplace band: effective sample size {ess:.1f} < {ESS_MIN:g} at R={R}")
        m, se = tally.weighted_sum(s / R**2)
        rows.append((R, R * R * (1 - m), R * R * se, tally))
    (_, v1, e1, t1), (_, v2, e2, t2) = rows
    ks = stats.ks_2samp(t1.samples() / R1**2, t2.samples() / R2**2)
    return {"s": s, "values": (v1, v2), "stderrs": (e1, e2),
            "passed": _pass_3sigma(v1, e1, v2, e2),
            "mean_counts": (t1.mean_count[0], t2.mean_count[0]),
            "ks_statistic": float(ks.statistic), "ks_pvalue": float(ks.pvalue),
            "tallies": (t1, t2)}


def hitting_probability_check(start: float, R: float, cfg: SimConfig) -> dict:
    """P(N₁ > 0) by MC against the leading order 2/(r₀² log r₀) and the ODE values."""
    geom = SphereGeometry(start_radius=start, target_radius=1.0, kill_radius=R)
    tally = run_bbm_pioneers(geom, cfg, stop_at=1)
    p, se = tally.hit_indicator_mean
    return {"mc_value": p, "mc_stderr": p and se,
            "leading_order": 2 / (start**2 * math.log(start)),
            "ode_finite_R": hitting_probability_ode(start, R),
            "ode_infinite": hitting_probability_ode(start, None),
            "hits": int(tally.counts[1:].sum()), "tally": tally}


# ---------------------------------------------------------------- ψ and tail probes


def psi(a: float, s: float = math.inf) -> float:
    """inf over 1 <= t <= s of 2(t-1) + a/t."""
    if not a > 0:
        raise ValueError("a must be positive")
    if not s >= 1:
        raise ValueError("s must be >= 1")
    t = min(max(math.sqrt(a / 2), 1.0), s)
    return 2 * (t - 1) + a / t


def tail_threshold(a: float, R: float) -> int:
    """Smallest integer N with N >= (a/2)(log R)²."""
    return max(0, math.ceil(a / 2 * math.log(R) ** 2 - 1e-12))


@dataclass(frozen=True)
class TailProbe:
    a: float
    R_grid: tuple
    probabilities: tuple
    stderrs: tuple
    hits: tuple
    slope: float
    slope_ci: tuple


def tail_exponent_probe(a: float, R_grid: Sequence[float], cfg: SimConfig, x0: float = 1.0,
                        kill_factor: float | None = None) -> TailProbe:
    """Slope of log P(N₁ >= (a/2)(log R)² | N₁ > 0) against -log R.

    Start at e^{-x0}·R. ``kill_factor`` = 1 kills on ∂B(R); None approximates
    infinite volume with a kill sphere at e³·R.
    """
    if a < 0:
        raise ValueError("a must be nonnegative")
    factor = math.e**3 if kill_factor is None else kill_factor
    probs, errs, hits = [], [], []
    for k, R in enumerate(R_grid):
        thr = tail_threshold(a, R)
        geom = SphereGeometry(start_radius=math.exp(-x0) * R, target_radius=1.0, kill_radius=factor * R)
        tally = run_bbm_pioneers(geom, cfg.replace(seed=(cfg.seed + k) % (1 << 64)), stop_at=max(thr, 1))
        n_hit = int(tally.counts[1:].sum())
        n_thr = int(tally.counts[max(thr, 1):].sum())
        hits.append(n_hit)
        if n_hit == 0:
            probs.append(math.nan)
            errs.append(math.nan)
            continue
        q = n_thr / n_hit
        probs.append(q)
        errs.append(math.sqrt(max(q * (1 - q), 1.0 / n_hit) / n_hit))
    partial = TailProbe(a, tuple(R_grid), tuple(probs), tuple(errs), tuple(hits), math.nan, (math.nan, math.nan))
    if min(hits) < MIN_HITS:
        raise InsufficientStatistics(f"insufficient rare-event statistics: hits per R = {hits}", partial)
    if any(p == 0 for p in probs):
        raise InsufficientStatistics("insufficient rare-event statistics: no replica above threshold", partial)
    x = -np.log(np.asarray(R_grid, dtype=float))
    y = np.log(probs)
    sy = np.asarray(errs) / np.asarray(probs)
    w = 1 / np.maximum(sy, 1e-12) ** 2
    xm = float(np.sum(w * x) / w.sum())
    sxx = float(np.sum(w * (x - xm) ** 2))
    slope = float(np.sum(w * (x - xm) * (y - np.sum(w * y) / w.sum())) / sxx)
    half = 1.96 / math.sqrt(sxx)
    return TailProbe(a, tuple(R_grid), tuple(probs), tuple(errs), tuple(hits), slope, (slope - half, slope + half))


# ---------------------------------------------------------------- m₁


def green_4d(rho: float) -> float:
    """∫₀^∞ (2πt)^{-2} e^{-ρ²/2t} dt by quadrature."""
    val, _ = integrate.quad(lambda t: (2 * math.pi * t) ** -2 * math.exp(-rho * rho / (2 * t)), 0, math.inf,
                            epsabs=0, epsrel=1e-13, limit=500)
    return val


def green_4d_closed(rho: float) -> float:
    return 1.0 / (2 * math.pi**2 * rho * rho)


def m1_quadrature(x: Sequence[float] = (1.0, 0.0, 0.0, 0.0)) -> float:
    """∫_{B(1)} G(x, y) dy for a point x on the unit sphere.

    Polar coordinates about the axis through x: y at radius ρ and angle θ from
    x has 4-d measure 4π ρ³ sin²θ dρ dθ.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (4,) or abs(np.linalg.norm(x) - 1) > 1e-12:
        raise ValueError("x must be a unit vector in R^4")
    c = 1.0 / (2 * math.pi**2) * 4 * math.pi

    def inner(rho):
        v, _ = integrate.quad(lambda th: math.sin(th) ** 2 / (1 + rho * rho - 2 * rho * math.cos(th)),
                              0, math.pi, epsabs=0, epsrel=1e-13, limit=200)
        return rho**3 * v

    val, _ = integrate.quad(inner, 0, 1, epsabs=0, epsrel=1e-12, limit=200)
    return c * val


@njit
def _m1_mc_kernel(seed, n):
    """Hits of |e₁ + sω| < 1 with s ~ density s/2 on [0,2], ω uniform on S³."""
    st = _rng.new_state(seed, 0)
    hits = 0
    for _ in range(n):
        s = 2.0 * math.sqrt(_rng.uniform(st))
        z0 = _rng.normal(st)
        z1 = _rng.normal(st)
        z2 = _rng.normal(st)
        z3 = _rng.normal(st)
        nrm = math.sqrt(z0 * z0 + z1 * z1 + z2 * z2 + z3 * z3)
        y0 = 1.0 + s * z0 / nrm
        q = s / nrm
        if y0 * y0 + q * q * (z1 * z1 + z2 * z2 + z3 * z3) < 1.0:
            hits += 1
    return hits


def m1_monte_carlo(n: int = 10**8, seed: int = 0) -> tuple[float, float]:
    """m₁ = ∫₀² s·P(|x + sω| < 1) ds sampled with s ∝ s: estimator 2·1{hit}."""
    with np.errstate(over="ignore"):
        hits = _m1_mc_kernel(np.uint64(seed), int(n))
    p = hits / n
    return 2 * p, 2 * math.sqrt(p * (1 - p) / n)


def m1_constant(method: str = "quadrature", **kw) -> float:
    if method == "quadrature":
        return m1_quadrature(**kw)
    if method == "monte-carlo":
        return m1_monte_carlo(**kw)[0]
    raise ValueError("method must be 'quadrature' or 'monte-carlo'")


# ---------------------------------------------------------------- lattice BRW

_NBR = np.array([[1, 0, 0, 0], [-1, 0, 0, 0], [0, 1, 0, 0], [0, -1, 0, 0],
                 [0, 0, 1, 0], [0, 0, -1, 0], [0, 0, 0, 1], [0, 0, 0, -1]], dtype=np.int64)


@njit
def _brw_attempt(seed, attempt, start, R, gens_needed, max_vertices, nbr, base):
    """One BRW tree killed outside B(0,R); returns (site keys, survived, killed, overflow).

    Sites are stored as base-``base`` integer keys with offset ``base // 2``.
    The tree is grown by generations and abandoned as soon as it dies before
    ``gens_needed`` generations; accepted trees are grown to extinction.
    """
    st = _rng.new_state(seed, attempt)
    R2 = R * R
    off = base // 2
    cur = np.empty((1, 4), dtype=np.int64)
    cur[0, :] = start
    n_cur = 1
    keys = np.empty(64, dtype=np.int64)
    k0 = 0
    for j in range(3, -1, -1):
        k0 = k0 * base + start[j] + off
    keys[0] = k0
    n_sites = 1
    gen = 0
    killed = False
    while n_cur > 0:
        if n_sites > max_vertices:
            return keys[:n_sites], gen >= gens_needed, killed, True
        nxt = np.empty((2 * n_cur, 4), dtype=np.int64)
        n_nxt = 0
        for i in range(n_cur):
            if _rng.uniform(st) < 0.5:
                continue
            for _c in range(2):
                k = _rng.randint(st, 8)
                q2 = 0
                for j in range(4):
                    v = cur[i, j] + nbr[k, j]
                    nxt[n_nxt, j] = v
                    q2 += v * v
                if q2 >= R2:
                    killed = True
                    continue
                if n_sites == keys.shape[0]:
                    k2 = np.empty(2 * n_sites, dtype=np.int64)
                    k2[:n_sites] = keys[:n_sites]
                    keys = k2
                key = 0
                for j in range(3, -1, -1):
                    key = key * base + nxt[n_nxt, j] + off
                keys[n_sites] = key
                n_sites += 1
                n_nxt += 1
        cur = nxt
        n_cur = n_nxt
        gen += 1
        if n_cur == 0 and gen < gens_needed:
            return keys[:n_sites], False, killed, False
    return keys[:n_sites], gen >= gens_needed, killed, False


def _key_base(R: float) -> int:
    return 2 * int(math.ceil(R)) + 3


def _decode(keys: np.ndarray, base: int) -> np.ndarray:
    out = np.empty((keys.size, 4), dtype=np.int64)
    k = keys.copy()
    for j in range(4):
        out[:, j] = k % base - base // 2
        k //= base
    return out


@dataclass
class LocalTimeField:
    """Site → visit count for one tree, with thick-set sizes per threshold.

    ``sites`` and ``visits`` are None when the run was made without
    ``keep_sites``; the thick counts and totals are always kept.
    """

    sites: np.ndarray | None  # (m, 4) distinct sites
    visits: np.ndarray | None  # (m,) local times
    thick: dict
    R: float
    total: int
    max_local_time: int

    def at(self, site) -> int:
        if self.sites is None:
            raise ValueError("field was built without keep_sites")
        hit = np.all(self.sites == np.asarray(site), axis=1)
        return int(self.visits[hit].sum())


def thick_threshold(a: float, R: float, m1: float = 0.25) -> float:
    """a·(16 m₁/π²)(log R)²."""
    return a * 16 * m1 / math.pi**2 * math.log(R) ** 2


def local_time_field(sites: np.ndarray, R: float, a_list: Iterable[float], keep_sites: bool = True) -> LocalTimeField:
    """Local times from visited sites, given as (n, 4) points or as integer keys."""
    sites = np.asarray(sites, dtype=np.int64)
    base = _key_base(R)
    if sites.ndim == 2:
        keys = np.zeros(sites.shape[0], dtype=np.int64)
        for j in range(3, -1, -1):
            keys = keys * base + sites[:, j] + base // 2
    else:
        keys = sites
    uniq, visits = np.unique(keys, return_counts=True)
    thick = {float(a): int(np.sum(visits >= thick_threshold(a, R))) for a in a_list}
    total, mx = int(keys.size), int(visits.max()) if visits.size else 0
    if not keep_sites:
        return LocalTimeField(None, None, thick, float(R), total, mx)
    return LocalTimeField(_decode(uniq, base), visits, thick, float(R), total, mx)


@dataclass
class ThickPointRun:
    R: float
    fields: list
    attempts: int
    acceptance: float

    def mean_thick(self, a: float) -> float:
        return float(np.mean([f.thick[float(a)] for f in self.fields]))


def run_brw_thick_points(R: int, a_list: Sequence[float], cfg: SimConfig, condition: str = "survive",
                         start: Sequence[int] = (0, 0, 0, 0), max_attempts: int | None = None,
                         max_vertices: int = 1 << 31, keep_sites: bool = False) -> ThickPointRun:
    """Lattice BRW on Z⁴ killed outside B(0,R), conditioned by rejection.

    ``condition``: "survive" keeps trees alive at generation R²; "hit" keeps
    trees with a particle leaving B(0,R); "none" keeps every tree.
    """
    if cfg.mode != LATTICE:
        raise ValueError("thick points need lattice-walk mode")
    start = np.asarray(start, dtype=np.int64)
    if start.shape != (4,) or float(start @ start) >= (R / 2) ** 2:
        raise ValueError("start must be a Z^4 point in B(0, R/2)")
    gens = {"survive": int(R) ** 2, "none": 0, "hit": 0}[condition]
    cap = max_attempts if max_attempts is not None else max(10**4, int(cfg.n_replicas * 1e4))
    base = _key_base(R)
    fields, attempt = [], 0
    while len(fields) < cfg.n_replicas:
        if attempt >= cap:
            raise AcceptanceTooLow(f"acceptance {len(fields) / attempt:.2e} below 1e-4 after {attempt} attempts "
                                   f"(survival probability estimate {len(fields) / attempt:.2e})")
        keys, ok, killed, overflow = _brw_attempt(np.uint64(cfg.seed), attempt, start, float(R), gens,
                                                  max_vertices, _NBR, base)
        attempt += 1
        if overflow:
            raise RuntimeError(f"tree exceeded {max_vertices} vertices")
        if condition == "hit":
            ok = killed
        if ok:
            fields.append(local_time_field(keys, R, a_list, keep_sites))
    return ThickPointRun(float(R), fields, attempt, len(fields) / attempt)


def thick_slope(runs: Sequence[ThickPointRun], a: float) -> float:
    """Least-squares slope of log mean #thick(a) against log R."""
    xs = np.log([r.R for r in runs])
    ys = np.log([max(r.mean_thick(a), 1e-300) for r in runs])
    return float(np.polyfit(xs, ys, 1)[0])


# ---------------------------------------------------------------- output


def write_histogram_csv(path, tally: PioneerTally) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "count"])
        for k, c in enumerate(tally.counts):
            if c:
                w.writerow([k, int(c)])


def write_summary_csv(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator", "value", "stderr"])
        for name, value, err in rows:
            w.writerow([name, repr(float(value)), repr(float(err))])
