"""Exact-rational asymptotic expansion polynomials for the d=4 hitting function.

Two families are produced, both polynomials in ``X = log x`` whose coefficients
are polynomials in one free constant ``c``:

* ``P_n`` with ``h(x) ~ sum P_n(log x) / x**n`` solving ``h'' - 2h' = h**2``
* ``Q_n`` with ``g(x) ~ sum Q_n(log x) / x**n`` solving ``g'' + 2g' = g**2``

Each ``n >= 3`` step is a triangular linear solve with diagonal ``2n - 4``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Mapping

DEFAULT_N_MAX = 30


class BiPoly:
    """Polynomial in X with coefficients polynomial in c, stored sparsely.

    ``coeffs`` maps ``(i, j)`` (power of X, power of c) to a ``Fraction``.
    Zero coefficients are never stored.
    """

    __slots__ = ("coeffs",)

    def __init__(self, coeffs: Mapping[tuple[int, int], object] | None = None):
        clean = {}
        for (i, j), v in (coeffs or {}).items():
            v = Fraction(v)
            if i < 0 or j < 0:
                raise ValueError("negative exponent")
            if v:
                clean[(int(i), int(j))] = v
        self.coeffs = clean

    @classmethod
    def const(cls, v) -> "BiPoly":
        return cls({(0, 0): v})

    @classmethod
    def X(cls) -> "BiPoly":
        return cls({(1, 0): 1})

    @classmethod
    def c(cls) -> "BiPoly":
        return cls({(0, 1): 1})

    def __eq__(self, other):
        if isinstance(other, (int, Fraction)):
            other = BiPoly.const(other)
        if not isinstance(other, BiPoly):
            return NotImplemented
        return self.coeffs == other.coeffs

    def __hash__(self):
        return hash(frozenset(self.coeffs.items()))

    def __bool__(self):
        return bool(self.coeffs)

    def __add__(self, other):
        other = _lift(other)
        out = dict(self.coeffs)
        for k, v in other.coeffs.items():
            out[k] = out.get(k, 0) + v
        return BiPoly(out)

    __radd__ = __add__

    def __neg__(self):
        return BiPoly({k: -v for k, v in self.coeffs.items()})

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        other = _lift(other)
        out: dict[tuple[int, int], Fraction] = {}
        for (i1, j1), a in self.coeffs.items():
            for (i2, j2), b in other.coeffs.items():
                k = (i1 + i2, j1 + j2)
                out[k] = out.get(k, 0) + a * b
        return BiPoly(out)

    __rmul__ = __mul__

    def dX(self) -> "BiPoly":
        return BiPoly({(i - 1, j): i * v for (i, j), v in self.coeffs.items() if i > 0})

    @property
    def degree_X(self) -> int:
        return max((i for i, _ in self.coeffs), default=-1)

    def leading_X(self) -> "BiPoly":
        """Coefficient of the top power of X, as a polynomial in c."""
        top = self.degree_X
        return BiPoly({(0, j): v for (i, j), v in self.coeffs.items() if i == top})

    def substitute_c(self, value) -> "BiPoly":
        value = Fraction(value)
        out: dict[tuple[int, int], Fraction] = {}
        for (i, j), v in self.coeffs.items():
            out[(i, 0)] = out.get((i, 0), 0) + v * value**j
        return BiPoly(out)

    def to_text(self) -> str:
        """Monomials ``(num/den)·c^j·X^i`` ordered by X power then c power, both descending."""
        if not self.coeffs:
            return "(0/1)·c^0·X^0"
        terms = []
        for (i, j) in sorted(self.coeffs, key=lambda k: (-k[0], -k[1])):
            v = self.coeffs[(i, j)]
            terms.append(f"({v.numerator}/{v.denominator})·c^{j}·X^{i}")
        return " + ".join(terms)

    def __repr__(self):
        return f"BiPoly({self.to_text()})"


def _lift(x) -> BiPoly:
    return x if isinstance(x, BiPoly) else BiPoly.const(x)


def parse_text(line: str) -> BiPoly:
    """Inverse of :meth:`BiPoly.to_text`."""
    coeffs = {}
    for term in line.split(" + "):
        frac, cpow, xpow = term.split("·")
        num, den = frac.strip("()").split("/")
        coeffs[(int(xpow[2:]), int(cpow[2:]))] = Fraction(int(num), int(den))
    return BiPoly(coeffs)


@dataclass(frozen=True)
class SeriesFamily:
    kind: str  # "P" or "Q"
    polys: tuple[BiPoly, ...] = field(default_factory=tuple)

    def __getitem__(self, n: int) -> BiPoly:
        """1-based access, matching the expansion index."""
        if n < 1:
            raise IndexError("series index starts at 1")
        return self.polys[n - 1]

    def __len__(self):
        return len(self.polys)

    def dump(self) -> str:
        return "\n".join(p.to_text() for p in self.polys) + "\n"


def _solve_triangular(n: int, rhs: BiPoly) -> BiPoly:
    """Solve ``(2n-4) Y - 2 Y' = rhs`` for Y, top X-degree first."""
    diag = Fraction(2 * n - 4)
    top = rhs.degree_X
    cpows = sorted({j for _, j in rhs.coeffs})
    out = {}
    for j in cpows:
        above = Fraction(0)  # coefficient a_{i+1}
        for i in range(top, -1, -1):
            a = (rhs.coeffs.get((i, j), 0) + 2 * (i + 1) * above) / diag
            if a:
                out[(i, j)] = a
            above = a
    return BiPoly(out)


@lru_cache(maxsize=16)
def _generate(kind: str, n_max: int) -> SeriesFamily:
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    sign = 1 if kind == "P" else -1
    first = BiPoly.const(2 * sign)
    polys = [first]
    if n_max >= 2:
        # the order-2 equation only fixes the slope; the constant term is free
        polys.append(2 * BiPoly.X() + BiPoly.c())
    for n in range(3, n_max + 1):
        prev = polys[-1]
        conv = BiPoly()
        for k in range(2, (n + 1) // 2 + 1):
            m = n + 1 - k
            term = polys[k - 1] * polys[m - 1]
            conv = conv + (term if k == m else 2 * term)
        lin = prev.dX().dX() - (2 * n - 1) * prev.dX() + n * (n - 1) * prev
        # P: -(lin) + conv ; Q: lin - conv
        rhs = (-sign) * (lin - conv)
        polys.append(_solve_triangular(n, rhs))
    return SeriesFamily(kind, tuple(polys))


def gen_P(n_max: int = DEFAULT_N_MAX) -> SeriesFamily:
    """Expansion polynomials of the hitting function h (h'' - 2h' = h²)."""
    return _generate("P", n_max)


def gen_Q(n_max: int = DEFAULT_N_MAX) -> SeriesFamily:
    """Expansion polynomials of g_λ (g'' + 2g' = g²)."""
    return _generate("Q", n_max)


def derived_R(family_Q: SeriesFamily) -> list[BiPoly]:
    """Coefficients of g' = sum R_n(log x)/x**n for n = 2..len(Q)+1.

    Returned list is indexed so that ``out[0]`` is R_2.
    """
    if family_Q.kind != "Q":
        raise ValueError("derived_R expects the Q family")
    out = []
    for n in range(2, len(family_Q) + 2):
        q = family_Q[n - 1]
        out.append(q.dX() - (n - 1) * q)
    return out


def eval_bipoly(p: BiPoly, X: float, c: float) -> float:
    """Evaluate exactly in rationals at the binary values of X and c, then round once."""
    Xf, cf = Fraction(X), Fraction(c)
    by_x: dict[int, Fraction] = {}
    for (i, j), v in p.coeffs.items():
        by_x[i] = by_x.get(i, 0) + v * cf**j
    acc = Fraction(0)
    for i in range(p.degree_X, -1, -1):
        acc = acc * Xf + by_x.get(i, 0)
    return float(acc)


def eval_series(family: SeriesFamily, x: float, c: float, n_terms: int) -> float:
    """Partial sum of ``family[n](log x) / x**n`` for n = 1..n_terms, in floats."""
    L = math.log(x)
    return sum(_eval_float(family[n], L, c) / x**n for n in range(1, n_terms + 1))


def term_values(family: SeriesFamily, x: float, c: float, n_terms: int) -> list[float]:
    L = math.log(x)
    return [_eval_float(family[n], L, c) / x**n for n in range(1, n_terms + 1)]


def _eval_float(p: BiPoly, X: float, c: float) -> float:
    s = 0.0
    for (i, j), v in p.coeffs.items():
        s += float(v) * X**i * c**j
    return s


def ode_residual_orders(family: SeriesFamily, n_terms: int) -> dict[int, BiPoly]:
    """Expand the ODE residual of the truncated series in powers of 1/x.

    Returns ``{k: coefficient of x**-k}`` for every order present, where the
    residual is ``h'' - 2h' - h²`` (P) or ``g'' + 2g' - g²`` (Q). Computed from
    the term derivatives directly, independent of the recurrence.
    """
    sign = 1 if family.kind == "P" else -1
    polys = [family[n] for n in range(1, n_terms + 1)]
    res: dict[int, BiPoly] = {}

    def add(k, p):
        res[k] = res.get(k, BiPoly()) + p

    for n, p in enumerate(polys, start=1):
        d1 = p.dX() - n * p                                        # x^-(n+1)
        d2 = p.dX().dX() - (2 * n + 1) * p.dX() + n * (n + 1) * p  # x^-(n+2)
        add(n + 2, d2)
        add(n + 1, (-2 * sign) * d1)
    for n1, p1 in enumerate(polys, start=1):
        for n2, p2 in enumerate(polys, start=1):
            add(n1 + n2, -(p1 * p2))
    return {k: v for k, v in sorted(res.items())}


def check_ode_consistency(family: SeriesFamily, n_terms: int) -> list[int]:
    """Orders k in 2..n_terms+1 whose residual coefficient fails to vanish."""
    res = ode_residual_orders(family, n_terms)
    return [k for k in range(2, n_terms + 2) if res.get(k, BiPoly())]


def check_degree_invariant(family: SeriesFamily) -> list[int]:
    """Indices violating X-degree n-1 (and, for P, leading coefficient 2)."""
    bad = []
    for n in range(1, len(family) + 1):
        p = family[n]
        if p.degree_X != n - 1:
            bad.append(n)
        elif family.kind == "P" and p.leading_X() != BiPoly.const(2):
            bad.append(n)
    if family.kind == "Q" and len(family) and family[1] != BiPoly.const(-2):
        bad.append(1)
    return bad


def from_rows(rows: Iterable[str], kind: str) -> SeriesFamily:
    return SeriesFamily(kind, tuple(parse_text(r) for r in rows if r.strip()))
