"""Solvers for g'' + 2g' = g² (initial slope -λ) and h'' - 2h' = h².

The integrator is a Dormand–Prince 5(4) pair with its quartic dense output,
compiled with numba when available. At large x the e^{-2x} mode of the
g-equation caps the explicit step near 1.6, so long horizons take many cheap
steps; a compiled loop keeps x ~ 1e5 horizons well under a second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._accel import njit

# Dormand–Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.array([
    [0, 0, 0, 0, 0, 0],
    [1 / 5, 0, 0, 0, 0, 0],
    [3 / 40, 9 / 40, 0, 0, 0, 0],
    [44 / 45, -56 / 15, 32 / 9, 0, 0, 0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
], dtype=np.float64)
_B = _A[6].copy()
_E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

BLOWUP_ABS = 1e6
MIN_STEP = 1e-12

# kernel exit codes
REACHED_END, BLOWUP, STEP_UNDERFLOW, WENT_POSITIVE, MAX_STEPS = 0, 1, 2, 3, 4


class StiffnessFailure(RuntimeError):
    def __init__(self, last_x: float):
        super().__init__(f"stiffness failure: step size underflow at x={last_x:.6g}")
        self.last_x = last_x


class HorizonTooShort(ValueError):
    pass


class BracketInvalid(ValueError):
    pass


@dataclass(frozen=True)
class GLambdaSpec:
    lam: float
    x_max: float
    direction: str = "forward-g"  # or "forward-h"

    def __post_init__(self):
        if not (self.lam >= 0):
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if not (self.x_max > 0):
            raise ValueError("x_max must be positive")
        if self.direction not in ("forward-g", "forward-h"):
            raise ValueError(f"unknown direction {self.direction!r}")


@dataclass(frozen=True)
class SolveConfig:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-13
    max_step: float = math.inf
    dense_grid_spacing: float = 0.1

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if not self.dense_grid_spacing > 0:
            raise ValueError("dense_grid_spacing must be positive")


@njit
def _rhs(sgn, y0, y1):
    return y1, y0 * y0 - 2.0 * sgn * y1


@njit
def _dp45(sgn, x0, ya, yb, x_end, rtol, atol, max_step, blow, stop_positive, max_steps):
    """Adaptive DP5(4) run. Returns step nodes, node values, stages, exit code."""
    A = np.array([
        [0.0, 0, 0, 0, 0, 0],
        [1 / 5, 0, 0, 0, 0, 0],
        [3 / 40, 9 / 40, 0, 0, 0, 0],
        [44 / 45, -56 / 15, 32 / 9, 0, 0, 0],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0],
        [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
    ])
    E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
    direction = 1.0 if x_end >= x0 else -1.0
    cap = 1024
    xs = np.empty(cap)
    ys = np.empty((cap, 2))
    ks = np.empty((cap, 7, 2))
    xs[0] = x0
    ys[0, 0] = ya
    ys[0, 1] = yb
    n = 1
    K = np.empty((7, 2))
    f0, f1 = _rhs(sgn, ya, yb)
    K[0, 0] = f0
    K[0, 1] = f1
    x = x0
    y0 = ya
    y1 = yb
    # initial step from the derivative scale
    scale = atol + rtol * max(abs(y0), abs(y1))
    d = math.sqrt(0.5 * ((f0 / scale) ** 2 + (f1 / scale) ** 2))
    h = 1e-6 if d < 1e-5 else 0.01 * math.sqrt(0.5 * ((y0 / scale) ** 2 + (y1 / scale) ** 2)) / d
    h = min(max(h, 1e-6), 1e-2, max_step)
    status = REACHED_END
    steps = 0
    while direction * (x_end - x) > 0:
        if steps >= max_steps:
            status = MAX_STEPS
            break
        h = min(h, max_step, abs(x_end - x))
        if h < MIN_STEP:
            status = STEP_UNDERFLOW
            break
        hs = direction * h
        for s in range(1, 7):
            a0 = y0
            a1 = y1
            for j in range(s):
                a0 += hs * A[s, j] * K[j, 0]
                a1 += hs * A[s, j] * K[j, 1]
            k0, k1 = _rhs(sgn, a0, a1)
            K[s, 0] = k0
            K[s, 1] = k1
        n0 = y0
        n1 = y1
        for j in range(6):
            n0 += hs * A[6, j] * K[j, 0]
            n1 += hs * A[6, j] * K[j, 1]
        # FSAL: stage 6 evaluated at the new point equals n0, n1 up to rounding
        e0 = 0.0
        e1 = 0.0
        for j in range(7):
            e0 += E[j] * K[j, 0]
            e1 += E[j] * K[j, 1]
        e0 *= hs
        e1 *= hs
        s0 = atol + rtol * max(abs(y0), abs(n0))
        s1 = atol + rtol * max(abs(y1), abs(n1))
        err = math.sqrt(0.5 * ((e0 / s0) ** 2 + (e1 / s1) ** 2))
        if not math.isfinite(err):
            h *= 0.2
            continue
        if err <= 1.0:
            steps += 1
            if n >= cap:
                cap *= 2
                xs2 = np.empty(cap)
                ys2 = np.empty((cap, 2))
                ks2 = np.empty((cap, 7, 2))
                xs2[:n] = xs[:n]
                ys2[:n] = ys[:n]
                ks2[: n - 1] = ks[: n - 1]
                xs, ys, ks = xs2, ys2, ks2
            ks[n - 1] = K
            x = x + hs
            if direction * (x_end - x) < 1e-14 * max(1.0, abs(x_end)):
                x = x_end
            xs[n] = x
            ys[n, 0] = n0
            ys[n, 1] = n1
            n += 1
            y0 = n0
            y1 = n1
            K[0, 0] = K[6, 0]
            K[0, 1] = K[6, 1]
            fac = 10.0 if err == 0.0 else min(10.0, 0.9 * err ** -0.2)
            h = h * fac
            if abs(y0) > blow:
                status = BLOWUP
                break
            if stop_positive and y0 > 0.0 and x > 0.0:
                status = WENT_POSITIVE
                break
        else:
            h = h * max(0.2, 0.9 * err ** -0.2)
    return xs[:n].copy(), ys[:n].copy(), ks[: n - 1].copy(), status


class DenseSolution:
    """Piecewise quartic interpolant built from the stored DP5 stages."""

    def __init__(self, xs, ys, ks):
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        h = np.diff(xs)
        Q = np.einsum("nsj,sk->njk", ks, _P)  # (steps, 2, 4)
        if h.size and h[0] < 0:
            # backward run: flip so segments are sorted by increasing x
            xs, ys, h, Q = xs[::-1], ys[::-1], h[::-1], Q[::-1]
            self._base_x = xs[1:]
            self._base_y = ys[1:]
        else:
            self._base_x = xs[:-1]
            self._base_y = ys[:-1]
        self._h = h
        self._Q = Q
        self.nodes = xs
        self.node_values = ys
        self.x_lo = float(xs[0])
        self.x_hi = float(xs[-1])

    def _locate(self, x):
        i = np.searchsorted(self.nodes, x, side="right") - 1
        return np.clip(i, 0, len(self._h) - 1)

    def __call__(self, x):
        """Return (g, g') at x (scalar or array)."""
        x = np.asarray(x, dtype=float)
        if len(self._h) == 0:
            return np.broadcast_to(self.node_values[0, 0], x.shape).copy(), np.broadcast_to(self.node_values[0, 1], x.shape).copy()
        i = self._locate(x)
        h = self._h[i]
        th = (x - self._base_x[i]) / h
        pw = np.stack([th, th**2, th**3, th**4], axis=-1)
        Qi = self._Q[i]
        y = self._base_y[i] + h[..., None] * np.einsum("...jk,...k->...j", Qi, pw)
        return y[..., 0], y[..., 1]

    def derivative(self, x):
        """d/dx of the interpolant, component-wise."""
        x = np.asarray(x, dtype=float)
        i = self._locate(x)
        h = self._h[i]
        th = (x - self._base_x[i]) / h
        dpw = np.stack([np.ones_like(th), 2 * th, 3 * th**2, 4 * th**3], axis=-1)
        d = np.einsum("...jk,...k->...j", self._Q[i], dpw)
        return d[..., 0], d[..., 1]


@dataclass
class Trajectory:
    """Dense-grid samples of (x, y, y'). For the h-branch ``g``/``gp`` hold h and h'."""

    xs: np.ndarray
    g: np.ndarray
    gp: np.ndarray
    blowup_at: Optional[float] = None
    family: str = "g"
    lam: Optional[float] = None
    rel_tol: float = 1e-10
    max_residual: float = 0.0
    dense: Optional[DenseSolution] = field(default=None, repr=False)
    steps: int = 0
    notes: str = ""

    @property
    def sign(self) -> float:
        return 1.0 if self.family == "g" else -1.0

    def __call__(self, x):
        if self.dense is None:
            return np.interp(x, self.xs, self.g), np.interp(x, self.xs, self.gp)
        return self.dense(x)

    def residual(self):
        """Pointwise |y'' ± 2y' - y²| / max(1, y²) on the grid, y'' from the interpolant."""
        if self.dense is None:
            return np.zeros_like(self.xs)
        _, gpp = self.dense.derivative(self.xs)
        r = np.abs(gpp + 2 * self.sign * self.gp - self.g**2)
        return r / np.maximum(1.0, self.g**2)

    def export_text(self, path) -> None:
        header = f"x g gp  family={self.family}" + (f" lambda={self.lam!r}" if self.lam is not None else "")
        np.savetxt(path, np.column_stack([self.xs, self.g, self.gp]), header=header, comments="# ", fmt="%.17g")


def _grid(lo: float, hi: float, spacing: float) -> np.ndarray:
    n = int(math.floor((hi - lo) / spacing + 1e-9))
    xs = lo + spacing * np.arange(n + 1)
    if hi - xs[-1] > 1e-9 * max(1.0, abs(hi)):
        xs = np.append(xs, hi)
    return xs


# The quartic interpolant's derivative is one order less accurate than the
# step itself, so the stepper runs this much tighter than the requested
# tolerance to keep the interpolated residual inside 10·rel_tol.
_INNER_TIGHTEN = 1e-2


def _run(sgn, x0, y0, x_end, cfg: SolveConfig, stop_positive=False, blow=BLOWUP_ABS, max_steps=50_000_000):
    rtol = max(cfg.rel_tol * _INNER_TIGHTEN, 2e-14)
    atol = cfg.abs_tol * _INNER_TIGHTEN
    return _dp45(float(sgn), float(x0), float(y0[0]), float(y0[1]), float(x_end),
                 rtol, atol, float(cfg.max_step), blow, stop_positive, max_steps)


def solve_g_lambda(spec: GLambdaSpec, cfg: SolveConfig = SolveConfig()) -> Trajectory:
    """Integrate g'' + 2g' = g², g(0) = 0, g'(0) = -λ on [0, x_max].

    Stops early at blow-up (|g| > 1e6 or step underflow with large |g|) and
    records the last valid x in ``blowup_at``.
    """
    if spec.direction != "forward-g":
        raise ValueError("use solve_h_tail for the h-branch")
    lam = float(spec.lam)
    if lam == 0.0:
        xs = _grid(0.0, spec.x_max, cfg.dense_grid_spacing)
        z = np.zeros_like(xs)
        return Trajectory(xs, z, z.copy(), None, "g", 0.0, cfg.rel_tol, 0.0, None, 0)
    nodes, vals, ks, status = _run(1.0, 0.0, (0.0, -lam), spec.x_max, cfg)
    blowup_at = None
    if status == STEP_UNDERFLOW:
        if abs(vals[-1, 0]) < 1e3:
            raise StiffnessFailure(float(nodes[-1]))
        blowup_at = float(nodes[-1])
    elif status == BLOWUP:
        blowup_at = float(nodes[-1])
    elif status == MAX_STEPS:
        raise StiffnessFailure(float(nodes[-1]))
    dense = DenseSolution(nodes, vals, ks)
    hi = float(nodes[-1])
    xs = _grid(0.0, hi, cfg.dense_grid_spacing)
    g, gp = dense(xs)
    traj = Trajectory(xs, g, gp, blowup_at, "g", lam, cfg.rel_tol, 0.0, dense, len(nodes) - 1)
    traj.max_residual = float(np.max(traj.residual())) if xs.size else 0.0
    return traj


def g_at(lam: float, x, cfg: SolveConfig = SolveConfig()):
    """Convenience: g_λ evaluated at x (scalar or array) without building the full grid."""
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    nodes, vals, ks, status = _run(1.0, 0.0, (0.0, -float(lam)), float(x_arr.max()), cfg)
    if status != REACHED_END:
        raise StiffnessFailure(float(nodes[-1])) if status in (STEP_UNDERFLOW, MAX_STEPS) else ValueError(
            f"g_lambda blew up at x={nodes[-1]:.6g} before reaching {x_arr.max():.6g}")
    g, gp = DenseSolution(nodes, vals, ks)(x_arr)
    if np.ndim(x) == 0:
        return float(g[0]), float(gp[0])
    return g, gp


def h_series_seed(x: float, n_terms: int, c: float = 0.0):
    """(h, h') at x from the truncated P-expansion with the free constant set to c."""
    from .series_engine import gen_P

    P = gen_P(max(n_terms, 2))
    L = math.log(x)
    h = 0.0
    hp = 0.0
    for n in range(1, n_terms + 1):
        p = P[n]
        val = sum(float(v) * L**i * c**j for (i, j), v in p.coeffs.items())
        dval = sum(float(v) * i * L ** (i - 1) * c**j for (i, j), v in p.coeffs.items() if i > 0)
        h += val / x**n
        hp += (dval - n * val) / x ** (n + 1)
    return h, hp


def _h_sign_ok(h, hp):
    hpp = 2 * hp + h**2
    hppp = 2 * hpp + 2 * h * hp
    return (h > 0) & (hp < 0) & (hpp > 0) & (hppp < 0)


def solve_h_tail(x_start: float, n_terms: int, cfg: SolveConfig = SolveConfig(),
                 x_end: Optional[float] = None, x_low: float = 0.0) -> Trajectory:
    """One member of the h'' - 2h' = h² family, pinned by its large-x expansion.

    Seeds (h, h') at ``x_start`` from the P-series with the free constant 0 and
    integrates backward toward ``x_low``. Forward integration of this equation
    amplifies errors like e^{2x}, so the range above ``x_start`` (up to
    ``x_end``, default 4·x_start) is covered by seeding the same truncated
    series at ``x_end`` and integrating backward onto ``x_start``.

    The returned grid is trimmed to the largest interval on which the
    total-monotonicity sign pattern (+, -, +, -) holds; ``notes`` records
    where the backward sweep left that basin.
    """
    if x_start < 50:
        raise ValueError("x_start must be at least 50 for the expansion seed to be accurate")
    if n_terms < 2:
        raise ValueError("n_terms must be at least 2")
    x_end = 4.0 * x_start if x_end is None else float(x_end)
    if x_end < x_start:
        raise ValueError("x_end must be at least x_start")
    # backward part: h grows as x decreases and may blow up
    nodes_b, vals_b, ks_b, status_b = _run(-1.0, x_start, h_series_seed(x_start, n_terms), x_low, cfg)
    dense_b = DenseSolution(nodes_b, vals_b, ks_b)
    lo = float(dense_b.x_lo)
    notes = []
    if status_b != REACHED_END:
        notes.append(f"backward sweep stopped at x={lo:.6g} (code {status_b})")
    pieces = [(dense_b, lo, x_start)]
    if x_end > x_start:
        nodes_f, vals_f, ks_f, _ = _run(-1.0, x_end, h_series_seed(x_end, n_terms), x_start, cfg)
        pieces.append((DenseSolution(nodes_f, vals_f, ks_f), x_start, x_end))
    # grid aligned at x_start so both pieces sample the same lattice
    sp = cfg.dense_grid_spacing
    k_lo = math.ceil((lo - x_start) / sp - 1e-9)
    k_hi = math.floor((x_end - x_start) / sp + 1e-9)
    xs = x_start + sp * np.arange(k_lo, k_hi + 1)
    h = np.empty_like(xs)
    hp = np.empty_like(xs)
    for dense, a, b in pieces:
        m = (xs >= a - 1e-12) & (xs <= b + 1e-12)
        h[m], hp[m] = dense(xs[m])
    ok = _h_sign_ok(h, hp)
    # largest valid interval containing x_start
    i0 = int(np.searchsorted(xs, x_start))
    if not ok[i0]:
        raise RuntimeError("sign pattern fails at the seed point; increase x_start or n_terms")
    bad_below = np.nonzero(~ok[:i0])[0]
    first = bad_below[-1] + 1 if bad_below.size else 0
    bad_above = np.nonzero(~ok[i0:])[0]
    last = i0 + bad_above[0] if bad_above.size else len(xs)
    if first > 0:
        notes.append(f"sign pattern breaks below x={xs[first]:.6g}; grid trimmed there")
    xs, h, hp = xs[first:last], h[first:last], hp[first:last]
    traj = Trajectory(xs, h, hp, None, "h", None, cfg.rel_tol, 0.0, None,
                      len(nodes_b) - 1, "; ".join(notes))
    traj.dense = _Stitched(pieces)
    traj.max_residual = float(np.max(traj.residual()))
    return traj


class _Stitched:
    """Dispatch to the dense piece covering each x."""

    def __init__(self, pieces):
        self.pieces = pieces

    def _apply(self, x, attr):
        x = np.asarray(x, dtype=float)
        out0 = np.empty_like(x)
        out1 = np.empty_like(x)
        for dense, a, b in self.pieces:
            m = (x >= a - 1e-12) & (x <= b + 1e-12)
            r0, r1 = getattr(dense, attr)(x[m]) if attr else dense(x[m])
            out0[m], out1[m] = r0, r1
        return out0, out1

    def __call__(self, x):
        return self._apply(x, None)

    def derivative(self, x):
        return self._apply(x, "derivative")


@dataclass
class PhaseMarkers:
    x0: float
    x1: float
    delta_samples: np.ndarray  # columns x, δ
    g_x0: float = float("nan")

    def delta_at(self, x: float) -> float:
        return float(np.interp(x, self.delta_samples[:, 0], self.delta_samples[:, 1]))


def _bisect_dense(fn, a: float, b: float, tol: float = 1e-8) -> float:
    fa = fn(a)
    while b - a > tol:
        m = 0.5 * (a + b)
        fm = fn(m)
        if (fm > 0) == (fa > 0):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b)


def phase_markers(traj: Trajectory) -> PhaseMarkers:
    """First zero x0 of g' and the first zero x1 of g'' after it."""
    if traj.family != "g" or traj.dense is None:
        raise ValueError("phase markers need a dense g-trajectory")
    if traj.blowup_at is not None:
        raise ValueError("trajectory blew up")
    xs, g, gp = traj.xs, traj.g, traj.gp
    gpp = g**2 - 2 * gp
    dense = traj.dense

    def first_change(arr, start):
        s = np.sign(arr[start:])
        idx = np.nonzero(s[1:] * s[:-1] <= 0)[0]
        idx = idx[s[idx] != 0] if idx.size else idx
        return None if idx.size == 0 else start + int(idx[0])

    i0 = first_change(gp, 1)
    if i0 is None:
        raise HorizonTooShort("horizon too short: g' has no sign change")
    x0 = _bisect_dense(lambda x: float(dense(x)[1]), xs[i0], xs[i0 + 1])
    j = int(np.searchsorted(xs, x0))
    i1 = first_change(gpp, j)
    if i1 is None:
        raise HorizonTooShort("horizon too short: g'' has no sign change after x0")

    def gpp_at(x):
        a, b = dense(x)
        return float(a * a - 2 * b)

    x1 = _bisect_dense(gpp_at, xs[i1], xs[i1 + 1])
    delta = 2 * gp - g**2
    return PhaseMarkers(x0, x1, np.column_stack([xs, delta]), float(dense(x0)[0]))


def delta_at(traj: Trajectory, x: float) -> float:
    g, gp = traj(x)
    return float(2 * gp - g * g)


def goes_positive(lam: float, x_max: float = 1e3, cfg: SolveConfig = SolveConfig()) -> bool:
    """Does g_λ take a positive value before x_max (or before blow-up)?"""
    nodes, vals, _, status = _run(1.0, 0.0, (0.0, -float(lam)), x_max, cfg, stop_positive=True)
    if status == WENT_POSITIVE:
        return True
    if status in (BLOWUP, STEP_UNDERFLOW):
        return bool(vals[-1, 0] > 0)
    return False


@dataclass(frozen=True)
class ThresholdEstimate:
    value: float
    lo: float
    hi: float

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def __float__(self):
        return self.value


def positivity_threshold(lambda_lo: float, lambda_hi: float, cfg: SolveConfig = SolveConfig(),
                         width: float = 0.05, x_max: float = 1e3) -> ThresholdEstimate:
    """Bisection for the smallest λ at which g_λ turns positive."""
    if not lambda_lo < lambda_hi:
        raise BracketInvalid("bracket invalid: need lambda_lo < lambda_hi")
    lo_pos = goes_positive(lambda_lo, x_max, cfg)
    hi_pos = goes_positive(lambda_hi, x_max, cfg)
    if lo_pos or not hi_pos:
        raise BracketInvalid(
            f"bracket invalid: predicate is {lo_pos} at {lambda_lo} and {hi_pos} at {lambda_hi}")
    lo, hi = float(lambda_lo), float(lambda_hi)
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if goes_positive(mid, x_max, cfg):
            hi = mid
        else:
            lo = mid
    return ThresholdEstimate(0.5 * (lo + hi), lo, hi)


def gronwall_envelope(lam: float, x):
    """Lower and upper envelopes for g_λ on [0, ∞), valid for small λ."""
    x = np.asarray(x, dtype=float)
    e2 = np.exp(-2 * x)
    lower = -lam / 2 * (1 - e2)
    upper = lower + lam**2 / 8 * (x - (1 - np.exp(-4 * x)) / 4 + 2 * x * e2 - (1 - e2))
    return lower, upper
