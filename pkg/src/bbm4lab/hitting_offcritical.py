"""Hitting-probability series for BBM in dimension d != 4.

For d >= 5 the generating function 1 - E[(1-s)^N] of the number of particles
reaching the unit sphere from radius r is Σ α_ℓ μ_s^ℓ r^{-2-βℓ} with
β = d - 4 and μ_s the root of Σ_{ℓ≥1} α_ℓ μ^ℓ = s. For d <= 3 the same form
holds for large r, with μ_s <= 0 obtained by shooting the singular IVP

    p x² f'' + q x f' + q f = f²,   f(0) = q,  f'(0) = μ,

with p = β², q = 8 - 2d, and matching f_μ(1) = s.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .ode_engine import SolveConfig

TAIL_TOL = 1e-14


class DivergenceRegion(ValueError):
    pass


class InvariantViolation(RuntimeError):
    pass


def beta_of(d: int) -> float:
    """Correction exponent β(d); d = 4 is rejected since β degenerates to 0."""
    if d == 4:
        raise ValueError("exponent degenerates to 0 at d=4")
    if d < 1:
        raise ValueError("dimension must be a positive integer")
    if d <= 3:
        return (d - 6 + math.sqrt(d * d - 20 * d + 68)) / 2
    return float(d - 4)


@dataclass(frozen=True)
class DimensionParams:
    d: int
    beta: float
    p: float
    q: float
    gamma: float | None

    @classmethod
    def of(cls, d: int) -> "DimensionParams":
        b = beta_of(d)
        q = float(abs(8 - 2 * d))
        p = b * b
        return cls(d, b, p, q, q / p if d <= 3 else None)

    @property
    def radius_bound(self) -> float:
        """2p + q: proved lower bound on the radius of convergence of Σ α_ℓ x^ℓ."""
        return 2 * self.p + self.q

    def _exact(self):
        # β is an integer for d = 1 and d >= 5, so α_ℓ stays rational
        if self.d == 1 or self.d >= 5:
            b = Fraction(1) if self.d == 1 else Fraction(self.d - 4)
            return b * b, Fraction(abs(8 - 2 * self.d))
        return None


@dataclass
class AlphaTable:
    params: DimensionParams
    alphas: list
    r_alpha_lower: float
    mu_cache: dict = field(default_factory=dict)

    def as_float(self) -> np.ndarray:
        return np.array([float(a) for a in self.alphas])

    def __len__(self):
        return len(self.alphas)


def _alpha_values(p, q, alpha0, n_max):
    a = [alpha0, alpha0 * 0 + 1]
    for l in range(2, n_max + 1):
        acc = a[1] * a[l - 1]
        for k in range(2, l):
            acc += a[k] * a[l - k]
        a.append(acc / ((p * l + q) * (l - 1)))
    return a[: n_max + 1]


def alpha_seq(d: int, n_max: int = 60) -> AlphaTable:
    """α_0..α_{n_max}, exact rationals when β is an integer, floats otherwise."""
    if n_max < 2:
        raise ValueError("n_max must be at least 2")
    params = DimensionParams.of(d)
    exact = params._exact()
    if exact is not None:
        p, q = exact
        alphas = _alpha_values(p, q, Fraction(max(8 - 2 * d, 0)), n_max)
    else:
        alphas = _alpha_values(params.p, params.q, float(max(8 - 2 * d, 0)), n_max)
    table = AlphaTable(params, alphas, params.radius_bound)
    bad = alpha_bound_violations(table)
    if bad:
        raise InvariantViolation(f"alpha bound fails at l={bad[:5]}")
    return table


def alpha_bound_violations(table: AlphaTable) -> list[int]:
    B = table.params.radius_bound
    out = []
    for l in range(1, len(table.alphas)):
        a = float(table.alphas[l])
        if not (0 <= a <= B ** (1 - l) * (1 + 1e-12)):
            out.append(l)
    return out


def _float_alphas(d: int, n: int) -> np.ndarray:
    """Float α table of length n+1, grown on demand (the recurrence is O(n²))."""
    params = DimensionParams.of(d)
    return np.array(_alpha_values(params.p, params.q, float(max(8 - 2 * d, 0)), n), dtype=float)


def _terms_needed(rho: float, B: float, scale: float, tol: float = TAIL_TOL) -> int:
    """Smallest n with B·scale·ρ^{n+1}/(1-ρ) < tol (geometric tail certificate)."""
    if rho <= 0:
        return 1
    if rho >= 1:
        raise DivergenceRegion(f"series ratio {rho:.6g} >= 1")
    n = math.log(tol * (1 - rho) / (B * max(scale, 1e-300))) / math.log(rho) - 1
    return max(2, int(math.ceil(n)))


def mu_s_highdim(d: int, s: float, table: AlphaTable | None = None) -> float:
    """Root μ_s ∈ [0,1) of Σ_{ℓ≥1} α_ℓ μ^ℓ = s, by bisection."""
    if d < 5:
        raise ValueError("mu_s_highdim needs d >= 5")
    if not 0 <= s <= 1:
        raise ValueError("s must lie in [0, 1]")
    if table is None:
        table = alpha_seq(d, 60)
    B = table.params.radius_bound
    n = len(table.alphas) - 1
    tail = B * (1 / B) ** (n + 1) / (1 - 1 / B)  # bound at μ = 1
    if tail >= TAIL_TOL:
        raise ValueError(f"alpha table too short: tail bound {tail:.3g} at mu=1")
    if s == 0:
        return 0.0
    if s in table.mu_cache:
        return table.mu_cache[s]
    a = table.as_float()[1:]

    def S(mu):
        return float(np.polyval(np.append(a[::-1], 0.0), mu))

    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if S(mid) < s:
            lo = mid
        else:
            hi = mid
    mu = lo if abs(S(lo) - s) <= abs(S(hi) - s) else hi
    if abs(S(mu) - s) > 1e-12:
        raise RuntimeError(f"bisection residual {abs(S(mu) - s):.3g} above 1e-12")
    table.mu_cache[s] = mu
    return mu


def series_sum(alphas: np.ndarray, z: float) -> tuple[float, float, float]:
    """(Σ α_ℓ z^ℓ, Σ ℓ α_ℓ z^{ℓ-1}, Σ ℓ(ℓ-1) α_ℓ z^{ℓ-2})."""
    c = alphas[::-1]
    f = np.polyval(c, z)
    d1 = np.polyval(np.polyder(c), z) if len(c) > 1 else 0.0
    d2 = np.polyval(np.polyder(c, 2), z) if len(c) > 2 else 0.0
    return float(f), float(d1), float(d2)


@dataclass
class FMuTrace:
    mu: float
    series_cutover_x: float
    samples: np.ndarray  # columns x, f, f'
    params: DimensionParams | None = None

    def at(self, x: float) -> float:
        return float(np.interp(x, self.samples[:, 0], self.samples[:, 1]))


def _fmu_rhs(p, q):
    def rhs(x, y):
        f, fp = y
        return [fp, (f * f - q * f - q * x * fp) / (p * x * x)]
    return rhs


def _series_state(params: DimensionParams, mu: float, x: float, alphas: np.ndarray):
    f, d1, d2 = series_sum(alphas, mu * x)
    return f, mu * d1, mu * mu * d2


def _series_alphas(params: DimensionParams, n: int = 120) -> np.ndarray:
    return _float_alphas(params.d, n)


def f_mu_lowdim(params: DimensionParams, mu: float, x_max: float,
                cfg: SolveConfig = SolveConfig(rel_tol=1e-12, abs_tol=1e-14),
                n_samples: int = 401, check: bool = True) -> FMuTrace:
    """Solve the singular IVP for f_μ on [0, x_max]: series near 0, ODE beyond.

    The series is used up to x_s = 0.5·(2p+q)/|μ|, half the proved radius of
    convergence, where it converges at least like 2^{-ℓ}.
    """
    if params.d > 3:
        raise ValueError("f_mu is only defined for d in {1, 2, 3}")
    if mu > 0:
        raise ValueError("mu must be nonpositive")
    xs = np.linspace(0.0, x_max, n_samples)
    if mu == 0:
        samples = np.column_stack([xs, np.full_like(xs, params.q), np.zeros_like(xs)])
        return FMuTrace(0.0, math.inf, samples, params)
    alphas = _series_alphas(params)
    xs_cut = 0.5 * params.radius_bound / abs(mu)
    f = np.empty_like(xs)
    fp = np.empty_like(xs)
    fpp = np.empty_like(xs)
    ser = xs <= xs_cut
    for i in np.nonzero(ser)[0]:
        f[i], fp[i], fpp[i] = _series_state(params, mu, xs[i], alphas)
    if not ser.all():
        y0 = _series_state(params, mu, xs_cut, alphas)[:2]
        rest = xs[~ser]
        sol = solve_ivp(_fmu_rhs(params.p, params.q), (xs_cut, x_max), list(y0), method="DOP853",
                        t_eval=rest, rtol=cfg.rel_tol, atol=cfg.abs_tol)
        if not sol.success:
            raise RuntimeError(sol.message)
        f[~ser], fp[~ser] = sol.y
        fpp[~ser] = (f[~ser] ** 2 - params.q * f[~ser] - params.q * rest * fp[~ser]) / (params.p * rest**2)
    trace = FMuTrace(mu, xs_cut, np.column_stack([xs, f, fp]), params)
    if check:
        _check_fmu(trace, fpp)
    return trace


def _check_fmu(trace: FMuTrace, fpp: np.ndarray, tol: float = 1e-9) -> None:
    x, f, fp = trace.samples.T
    q = trace.params.q
    inner = x > 0
    problems = []
    if np.any(f[inner] <= 0):
        problems.append("f not positive")
    if np.any(fp[inner] >= 0):
        problems.append("f not strictly decreasing")
    if np.any(fpp < -tol * np.maximum(1.0, np.abs(fp))):
        problems.append("f not convex")
    if np.any(f[inner] >= q):
        problems.append("f not below q")
    if problems:
        raise InvariantViolation("f_mu invariant violated: " + ", ".join(problems))


def f_mu_at(params: DimensionParams, mu: float, x: float,
            cfg: SolveConfig = SolveConfig(rel_tol=1e-12, abs_tol=1e-14)) -> tuple[float, float]:
    """(f_μ(x), f_μ'(x)) at a single point."""
    if mu == 0:
        return params.q, 0.0
    alphas = _series_alphas(params)
    xs_cut = 0.5 * params.radius_bound / abs(mu)
    if x <= xs_cut:
        f, fp, _ = _series_state(params, mu, x, alphas)
        return f, fp
    y0 = _series_state(params, mu, xs_cut, alphas)[:2]
    sol = solve_ivp(_fmu_rhs(params.p, params.q), (xs_cut, x), list(y0), method="DOP853",
                    rtol=cfg.rel_tol, atol=cfg.abs_tol)
    if not sol.success:
        raise RuntimeError(sol.message)
    return float(sol.y[0, -1]), float(sol.y[1, -1])


def mu_of_s_lowdim(params: DimensionParams, s: float, tol: float = 1e-10) -> float:
    """μ_s <= 0 with f_μ(1) = s, by bisection on the monotone map μ ↦ f_μ(1)."""
    if params.d > 3:
        raise ValueError("mu_of_s_lowdim needs d in {1, 2, 3}")
    if not 0 < s <= params.q:
        raise ValueError(f"s must lie in (0, {params.q}]")
    if s == params.q:
        return 0.0
    lo = -1.0
    while f_mu_at(params, lo, 1.0)[0] > s:
        lo *= 2
        if lo < -1e12:
            raise RuntimeError("could not bracket mu_s")
    hi = 0.0
    while True:
        mid = 0.5 * (lo + hi)
        fm = f_mu_at(params, mid, 1.0)[0]
        if abs(fm - s) <= tol or mid in (lo, hi):
            return mid
        if fm > s:
            hi = mid
        else:
            lo = mid


def b_roots(gamma: float) -> tuple[float, float]:
    """Roots b1 <= b2 of γ + (1-γ)b + b²."""
    disc = 1 - 6 * gamma + gamma * gamma
    if disc < 0:
        # d = 2 sits exactly on gamma = 3+2√2; allow rounding below it
        if disc < -1e-12 * gamma * gamma:
            raise ValueError("complex roots: gamma below 3+2*sqrt(2)")
        disc = 0.0
    r = math.sqrt(disc)
    return (gamma - 1 - r) / 2, (gamma - 1 + r) / 2


_MU_CACHE: dict[tuple[int, float], float] = {}


def mu_s(d: int, s: float) -> float:
    key = (d, float(s))
    if key not in _MU_CACHE:
        if s == 0:
            _MU_CACHE[key] = 0.0
        elif d >= 5:
            _MU_CACHE[key] = mu_s_highdim(d, s)
        else:
            _MU_CACHE[key] = mu_of_s_lowdim(DimensionParams.of(d), s)
    return _MU_CACHE[key]


def hitting_series_terms(d: int, s: float, r: float, mu: float | None = None):
    """(v, v', v'') at r from the truncated series, derivatives termwise."""
    params = DimensionParams.of(d)
    if mu is None:
        mu = mu_s(d, s)
    if d <= 3 and not r > 0:
        raise DivergenceRegion("r must be positive")
    if d >= 5 and r < 1:
        raise DivergenceRegion("series is only certified for r >= 1 when d >= 5")
    B = params.radius_bound
    b = params.beta
    rho = abs(mu) * r ** (-b) / B
    if rho >= 1:
        raise DivergenceRegion(
            f"r={r} inside the divergence region: need r^beta > |mu_s|/(2p+q) = {abs(mu) / B:.6g}")
    n = _terms_needed(rho, B, r**-2)
    alphas = _float_alphas(d, n)
    l = np.arange(n + 1)
    k = 2 + b * l
    coef = alphas * np.power(mu, l) if mu != 0 else np.where(l == 0, alphas, 0.0)
    rk = r ** (-k)
    v = float(np.sum(coef * rk))
    v1 = float(np.sum(-k * coef * rk) / r)
    v2 = float(np.sum(k * (k + 1) * coef * rk) / r**2)
    return v, v1, v2


def hitting_series(d: int, s: float, r: float) -> float:
    """1 - E_r[(1-s)^{N_1}] from the series Σ α_ℓ μ_s^ℓ r^{-2-βℓ}."""
    if s == 0:
        return 0.0
    return hitting_series_terms(d, s, r)[0]


def radial_residual(d: int, s: float, r: float) -> float:
    v, v1, v2 = hitting_series_terms(d, s, r)
    return v2 + (d - 1) * v1 / r - v * v


def hitting_via_fmu(d: int, s: float, r: float) -> float:
    """r^{-2} f_{μ_s}(r^{-β}) for d <= 3: the ODE route to the same function."""
    params = DimensionParams.of(d)
    return r**-2 * f_mu_at(params, mu_s(d, s), r ** (-params.beta))[0]


def write_alpha_csv(path, tables: Sequence[AlphaTable]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d", "l", "alpha_l"])
        for t in tables:
            for l, a in enumerate(t.alphas):
                w.writerow([t.params.d, l, repr(float(a))])


def write_mu_csv(path, rows: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d", "s", "mu_s"])
        for d, s, m in rows:
            w.writerow([d, repr(float(s)), repr(float(m))])


def write_curve_csv(path, rows: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d", "r", "v"])
        for d, r, v in rows:
            w.writerow([d, repr(float(r)), repr(float(v))])
