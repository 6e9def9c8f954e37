"""Expansion constants of g_λ: C_λ, the λ_c proxy, and truncated asymptotic sums."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ode_engine import GLambdaSpec, SolveConfig, g_at, solve_g_lambda
from .series_engine import eval_bipoly, gen_Q


class GridTooNarrow(ValueError):
    pass


@dataclass(frozen=True)
class ClambdaEstimate:
    lam: float
    value: float
    x0_used: float
    quadrature_error: float
    x_max: float = float("nan")
    tail: float = float("nan")

    @property
    def bracket(self) -> float:
        """The integral expression before doubling; equals log-shift K in g ≈ -2/(x + log x + K)."""
        return self.value / 2


def default_x_max(lam: float) -> float:
    # the fitted tail is accurate once x >> C_λ ~ 8/λ; beyond ~1e5 the
    # cancellation in δ = 2g' - g² costs more than the tail fit saves
    return max(1e5, 400.0 / lam)


def _simpson(f, a: float, b: float, n: int) -> float:
    x = np.linspace(a, b, n + 1)
    y = f(x)
    return (b - a) / (3 * n) * (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-1:2].sum())


def simpson_refined(f, a: float, b: float, tol: float, n0: int = 64, n_max: int = 1 << 22):
    """Composite Simpson with grid doubling until the Richardson estimate is below tol."""
    n = n0
    prev = _simpson(f, a, b, n)
    while True:
        n *= 2
        cur = _simpson(f, a, b, n)
        err = abs(cur - prev) / 15
        if err <= tol or n >= n_max:
            return cur + (cur - prev) / 15, err
        prev = cur


def estimate_c_lambda(lam: float, x0: float = 1.0, x_max: float | None = None,
                      cfg: SolveConfig = SolveConfig(rel_tol=1e-12, abs_tol=1e-20, dense_grid_spacing=1.0),
                      quad_tol: float = 1e-9) -> ClambdaEstimate:
    """C_λ from the integral of δ/g² - 1/x, δ = 2g' - g².

    The integral is taken on [x0, x_max] in the variable log x, and the part
    beyond x_max is added from the fit x²·integrand ≈ a·log x + b on the last
    decade. Since ∫ δ/g² dx telescopes to -2/g - x, the bracketed expression
    equals K in g ≈ -2/(x + log x + K); the expansion constant is 2K.
    """
    if not 0 < lam < 1:
        raise ValueError("C_lambda is only defined here for lambda in (0, 1)")
    x_max = default_x_max(lam) if x_max is None else float(x_max)
    if not (1.0 <= x0 <= x_max / 10):
        raise ValueError("need 1 <= x0 <= x_max/10")
    traj = solve_g_lambda(GLambdaSpec(lam, x_max), cfg)
    if traj.blowup_at is not None:
        raise ValueError(f"g_lambda blew up at {traj.blowup_at}")
    dense = traj.dense

    def integrand(x):
        g, gp = dense(x)
        return (2 * gp - g * g) / (g * g) - 1.0 / x

    # x·F(x) in u = log x
    body, quad_err = simpson_refined(lambda u: np.exp(u) * integrand(np.exp(u)),
                                     math.log(x0), math.log(x_max), quad_tol)
    tail, tail_err = _fit_tail(integrand, x_max)
    g0 = float(dense(x0)[0])
    K = body + tail - 2.0 / g0 - x0 - math.log(x0)
    return ClambdaEstimate(float(lam), float(2 * K), float(x0), float(2 * (quad_err + tail_err)), x_max, float(2 * tail))


def _fit_tail(integrand, x_max: float):
    """∫_{x_max}^∞ of the integrand using x²F ≈ a log x + b fitted on [x_max/10, x_max]."""
    def tail_from(lo):
        xs = np.geomspace(lo, x_max, 64)
        A = np.column_stack([np.log(xs), np.ones_like(xs)])
        (a, b), *_ = np.linalg.lstsq(A, xs**2 * integrand(xs), rcond=None)
        L = math.log(x_max)
        return a * (L + 1) / x_max + b / x_max

    full = tail_from(x_max / 10)
    half = tail_from(x_max / math.sqrt(10))
    return full, abs(full - half)


def c_lambda_tailfit(lam: float, x: float = 1000.0, cfg: SolveConfig = SolveConfig()) -> float:
    """C_λ read off as x²(g + 2/x - 2 log x / x²) at one large x."""
    g, _ = g_at(lam, x, cfg)
    return x * x * (g + 2 / x - 2 * math.log(x) / x**2)


def lambda_c_objective(lam: float, x_eval: float, cfg: SolveConfig = SolveConfig()) -> float:
    g, _ = g_at(lam, x_eval, cfg)
    return -(x_eval / 2) * g


@dataclass(frozen=True)
class LambdaCScan:
    grid: np.ndarray
    objective: np.ndarray
    argmax: float

    def is_unimodal(self) -> bool:
        d = np.diff(self.objective)
        k = int(np.argmax(self.objective))
        return bool(np.all(d[:k] > 0) and np.all(d[k:] < 0))


def scan_lambda_c(x_eval: float, lambda_grid: Sequence[float], cfg: SolveConfig = SolveConfig()) -> LambdaCScan:
    if x_eval < 500:
        raise ValueError("x_eval must be at least 500")
    grid = np.asarray(lambda_grid, dtype=float)
    if grid.size < 3 or np.any(np.diff(grid) <= 0):
        raise ValueError("lambda_grid must be increasing with at least 3 points")
    obj = np.array([lambda_c_objective(l, x_eval, cfg) for l in grid])
    k = int(np.argmax(obj))
    if k == 0 or k == grid.size - 1:
        raise GridTooNarrow(f"grid too narrow: argmax at the boundary lambda={grid[k]}")
    # vertex of the parabola through the top three points
    x1, x2, x3 = grid[k - 1:k + 2]
    y1, y2, y3 = obj[k - 1:k + 2]
    den = (x1 - x2) * (x1 - x3) * (x2 - x3)
    a = (x3 * (y2 - y1) + x2 * (y1 - y3) + x1 * (y3 - y2)) / den
    b = (x3**2 * (y1 - y2) + x2**2 * (y3 - y1) + x1**2 * (y2 - y3)) / den
    peak = -b / (2 * a) if a < 0 else x2
    return LambdaCScan(grid, obj, float(peak))


def estimate_lambda_c(x_eval: float, lambda_grid: Sequence[float], cfg: SolveConfig = SolveConfig()) -> float:
    """Location of the peak of λ ↦ -(x_eval/2)·g_λ(x_eval), refined parabolically."""
    return scan_lambda_c(x_eval, lambda_grid, cfg).argmax


def eval_g_asymptotic(lam: float, C_lambda: float, x: float, n_terms: int) -> float:
    """Σ_{n≤N} Q_n(log x)/xⁿ with the free constant bound to C_lambda.

    ``lam`` only labels the call; the expansion depends on λ through C_lambda.
    """
    if n_terms < 1:
        raise ValueError("n_terms must be at least 1")
    Q = gen_Q(max(n_terms, 2))
    L = math.log(x)
    total = 0.0
    for n in range(1, n_terms + 1):
        term = eval_bipoly(Q[n], L, C_lambda) / x**n
        if not math.isfinite(term):
            raise OverflowError(f"term {n} overflows at x={x}")
        total += term
    return total


def asymptotic_terms(C_lambda: float, x: float, n_terms: int) -> list[float]:
    Q = gen_Q(max(n_terms, 2))
    L = math.log(x)
    return [eval_bipoly(Q[n], L, C_lambda) / x**n for n in range(1, n_terms + 1)]


def optimal_truncation(C_lambda: float, x: float, n_max: int = 30) -> int:
    """N minimising |term_N|: the usual stopping rule for a divergent expansion."""
    terms = asymptotic_terms(C_lambda, x, n_max)
    return 1 + int(np.argmin(np.abs(terms)))


def truncation_errors(lam: float, C_lambda: float, x: float, n_max: int,
                      cfg: SolveConfig = SolveConfig(rel_tol=1e-12, abs_tol=1e-15)) -> np.ndarray:
    """|g_λ(x) - partial sum_N| for N = 1..n_max, solver as reference."""
    g, _ = g_at(lam, x, cfg)
    terms = asymptotic_terms(C_lambda, x, n_max)
    return np.abs(g - np.cumsum(terms))


def write_clambda_csv(path, estimates: Sequence[ClambdaEstimate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "C_lambda", "err"])
        for e in estimates:
            w.writerow([repr(e.lam), repr(e.value), repr(e.quadrature_error)])


def write_objective_csv(path, scan: LambdaCScan) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "objective"])
        for l, v in zip(scan.grid, scan.objective):
            w.writerow([repr(float(l)), repr(float(v))])
