"""Critical binary BGW trees, Horton–Strahler numbers, highway decompositions,
and a tree-indexed coupling of random walks with Brownian motion.

Trees are stored as parent arrays in breadth-first order (parent[i] < i,
root 0 with parent -1). Offspring law: 0 or 2 children with probability 1/2.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from . import _rng
from ._accel import njit

MAX_ATTEMPTS = 10**7
SIZE_CAP = 1 << 26


class RejectionCapReached(RuntimeError):
    def __init__(self, message, acceptance=0.0):
        super().__init__(message)
        self.acceptance = acceptance


@dataclass(frozen=True)
class GenealogyTree:
    parent: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.parent, dtype=np.int64)
        object.__setattr__(self, "parent", p)
        if p.size == 0 or p[0] != -1:
            raise ValueError("root must be vertex 0 with parent -1")
        if p.size > 1 and np.any((p[1:] < 0) | (p[1:] >= np.arange(1, p.size))):
            raise ValueError("parent array must satisfy 0 <= parent[i] < i for i > 0")

    @property
    def size(self) -> int:
        return int(self.parent.size)

    @cached_property
    def children(self) -> list[list[int]]:
        ch: list[list[int]] = [[] for _ in range(self.size)]
        for v in range(1, self.size):
            ch[self.parent[v]].append(v)
        return ch

    @cached_property
    def levels(self) -> np.ndarray:
        lev = np.zeros(self.size, dtype=np.int64)
        for v in range(1, self.size):
            lev[v] = lev[self.parent[v]] + 1
        return lev

    @property
    def depth(self) -> int:
        """d(T): the largest number of edges on a root-leaf path."""
        return int(self.levels.max())

    @cached_property
    def leaves(self) -> np.ndarray:
        has_child = np.zeros(self.size, dtype=bool)
        has_child[self.parent[1:]] = True
        return np.flatnonzero(~has_child)

    @property
    def n_leaves(self) -> int:
        return int(self.leaves.size)

    def path_to_root(self, v: int) -> list[int]:
        out = [v]
        while self.parent[out[-1]] >= 0:
            out.append(int(self.parent[out[-1]]))
        return out[::-1]

    def shape(self) -> str:
        """Canonical string of the plane tree: '(' + children + ')'."""
        memo = [""] * self.size
        for v in range(self.size - 1, -1, -1):
            memo[v] = "(" + "".join(memo[c] for c in self.children[v]) + ")"
        return memo[0]

    def to_text(self) -> str:
        return "".join(f"{i} {int(p)}\n" for i, p in enumerate(self.parent))

    @classmethod
    def from_text(cls, text: str) -> "GenealogyTree":
        pairs = []
        for k, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                i, p = (int(t) for t in line.split())
            except ValueError:
                raise ValueError(f"line {k}: expected 'index parent_index', got {line!r}") from None
            pairs.append((i, p))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError("indices must be 0..n-1")
        return cls(np.array([p for _, p in pairs]))

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def read(cls, path) -> "GenealogyTree":
        with open(path) as fh:
            return cls.from_text(fh.read())


def path_tree(n: int) -> GenealogyTree:
    return GenealogyTree(np.arange(-1, n - 1))


def perfect_binary(levels: int) -> GenealogyTree:
    n = 2**levels - 1
    return GenealogyTree(np.array([-1] + [(i - 1) // 2 for i in range(1, n)]))


def relabel_bfs(parent: Sequence[int]) -> GenealogyTree:
    """Tree from any parent array (root marked -1), relabelled breadth-first."""
    parent = list(parent)
    n = len(parent)
    ch: list[list[int]] = [[] for _ in range(n)]
    root = parent.index(-1)
    for v, p in enumerate(parent):
        if p >= 0:
            ch[p].append(v)
    order, new = [root], {root: 0}
    out = [-1]
    for v in order:
        for c in ch[v]:
            new[c] = len(order)
            order.append(c)
            out.append(new[v])
    if len(order) != n:
        raise ValueError("parent array is not a single rooted tree")
    return GenealogyTree(np.array(out))


# ---------------------------------------------------------------- sampling


@njit
def _size_attempt(st, n):
    """Explore one tree node by node; stop early once it exceeds n vertices."""
    pending = 1
    size = 0
    while pending > 0:
        size += 1
        if size > n:
            return size
        pending -= 1
        if _rng.uniform(st) >= 0.5:
            pending += 2
    return size


@njit
def _build(st, n_max):
    """Replay the same draws, writing the breadth-first parent array."""
    parent = np.empty(n_max, dtype=np.int64)
    parent[0] = -1
    n = 1
    i = 0
    while i < n:
        if _rng.uniform(st) >= 0.5:
            parent[n] = i
            parent[n + 1] = i
            n += 2
        i += 1
    return parent[:n]


@njit
def _find_size(seed, stream, n, max_attempts):
    st = _rng.new_state(seed, stream)
    for a in range(max_attempts):
        key, ctr = st[0], st[1]
        if _size_attempt(st, n) == n:
            st[0] = key
            st[1] = ctr
            return a + 1, _build(st, n)
    return max_attempts, np.empty(0, dtype=np.int64)


@njit
def _survive_attempt(st, m, cap):
    """Breadth-first tree; returns (parent array, survived >= m generations, capped)."""
    parent = np.empty(64, dtype=np.int64)
    parent[0] = -1
    n = 1
    gen_start = 0
    gen_end = 1
    gen = 0
    while gen_start < gen_end:
        if gen < m and n >= cap:
            return parent[:n], False, True
        for i in range(gen_start, gen_end):
            if _rng.uniform(st) >= 0.5:
                if n + 2 > parent.size:
                    p2 = np.empty(2 * parent.size, dtype=np.int64)
                    p2[:n] = parent[:n]
                    parent = p2
                parent[n] = i
                parent[n + 1] = i
                n += 2
        gen_start, gen_end = gen_end, n
        gen += 1
        if gen_start == gen_end and gen <= m:
            return parent[:n], False, False
    return parent[:n], gen > m, False


def sample_bgw(condition: tuple | None = None, seed: int = 0, stream: int = 0,
               max_attempts: int = MAX_ATTEMPTS) -> GenealogyTree:
    """Critical binary BGW tree under ``condition``: None, ("size", n) or ("survive", m).

    ("survive", m) keeps trees with at least one vertex at generation m.
    Conditioning is by rejection, so the conditional law is exact.
    """
    seed = np.uint64(_rng.seed_key(seed))
    with np.errstate(over="ignore"):
        if condition is None:
            parent, _, _ = _survive_attempt(_rng.new_state(seed, stream), 0, SIZE_CAP)
            return GenealogyTree(parent)
        kind, value = condition
        value = int(value)
        if kind == "size":
            if value < 1 or value % 2 == 0:
                raise ValueError(f"size {value} is not admissible: binary total progeny is always odd")
            used, parent = _find_size(seed, stream, value, max_attempts)
            if parent.size == 0:
                raise RejectionCapReached(f"no tree of size {value} in {used} attempts "
                                          f"(acceptance below {1 / used:.1e})", 0.0)
            return GenealogyTree(parent)
        if kind == "survive":
            if value < 0:
                raise ValueError("generations must be nonnegative")
            st = _rng.new_state(seed, stream)
            for a in range(max_attempts):
                parent, ok, capped = _survive_attempt(st, value, SIZE_CAP)
                if capped:
                    raise RuntimeError("tree exceeded the size cap")
                if ok:
                    return GenealogyTree(parent)
            raise RejectionCapReached(f"no tree surviving {value} generations in {max_attempts} attempts",
                                      0.0)
    raise ValueError(f"unknown condition {condition!r}")


def acceptance_estimate(n: int, attempts: int = 10**6, seed: int = 0) -> float:
    """Fraction of unconditioned trees with exactly n vertices."""
    with np.errstate(over="ignore"):
        st = _rng.new_state(np.uint64(seed), 1 << 40)
        hits = sum(_size_attempt(st, n) == n for _ in range(attempts))
    return hits / attempts


def exact_size_probability(n: int) -> float:
    """P(|T| = n) = Catalan(k)/2^n for n = 2k+1."""
    if n % 2 == 0:
        return 0.0
    k = (n - 1) // 2
    return math.exp(math.lgamma(2 * k + 1) - math.lgamma(k + 1) - math.lgamma(k + 2) - n * math.log(2))


# ---------------------------------------------------------------- Horton–Strahler


def horton_strahler(T: GenealogyTree) -> int:
    hs = np.ones(T.size, dtype=np.int64)
    best = np.zeros(T.size, dtype=np.int64)
    ties = np.zeros(T.size, dtype=np.int64)
    for v in range(T.size - 1, 0, -1):
        if best[v] > 0:
            hs[v] = best[v] + (ties[v] >= 2)
        p = T.parent[v]
        if hs[v] > best[p]:
            best[p], ties[p] = hs[v], 1
        elif hs[v] == best[p]:
            ties[p] += 1
    if best[0] > 0:
        hs[0] = best[0] + (ties[0] >= 2)
    return int(hs[0])


@dataclass
class HighwayDecomposition:
    paths: list  # vertex lists, root-ward first
    rounds: int
    membership: dict = field(default_factory=dict)  # child vertex v of edge (parent(v), v) -> path index

    def edges(self, k: int) -> list[tuple[int, int]]:
        p = self.paths[k]
        return list(zip(p[:-1], p[1:]))


def highways(T: GenealogyTree) -> HighwayDecomposition:
    """Peel the tree: each round erases every leaf together with the chain of
    single-child vertices above it; each erased chain plus the edge to the
    vertex it hung from is one highway. Chains are taken in depth-first order.
    """
    n = T.size
    alive_children = np.array([len(c) for c in T.children], dtype=np.int64)
    removed = np.zeros(n, dtype=bool)
    order = _dfs_order(T)
    paths: list[list[int]] = []
    membership: dict[int, int] = {}
    rounds = 0
    while not removed[0]:
        rounds += 1
        leaves = [v for v in order if not removed[v] and alive_children[v] == 0]
        chains = []
        for leaf in leaves:
            chain = [leaf]
            v = leaf
            while T.parent[v] >= 0 and alive_children[T.parent[v]] == 1:
                v = int(T.parent[v])
                chain.append(v)
            chains.append(chain)
        for chain in chains:
            top = chain[-1]
            attach = int(T.parent[top])
            path = ([attach] if attach >= 0 else []) + chain[::-1]
            k = len(paths)
            paths.append(path)
            for v in chain:
                removed[v] = True
                if T.parent[v] >= 0:
                    membership[v] = k
            if attach >= 0:
                alive_children[attach] -= 1
    return HighwayDecomposition(paths, rounds, membership)


def _dfs_order(T: GenealogyTree) -> list[int]:
    out, stack = [], [0]
    while stack:
        v = stack.pop()
        out.append(v)
        stack.extend(reversed(T.children[v]))
    return out


def highways_on_path(T: GenealogyTree, dec: HighwayDecomposition, v: int) -> int:
    """Number of distinct highways used by the root-to-v geodesic."""
    return len({dec.membership[u] for u in T.path_to_root(v)[1:]})


def check_decomposition(T: GenealogyTree, dec: HighwayDecomposition) -> list[str]:
    """Invariant violations (empty when sound)."""
    problems = []
    seen = {}
    for k, path in enumerate(dec.paths):
        for a, b in zip(path[:-1], path[1:]):
            if T.parent[b] != a:
                problems.append(f"path {k} is not monotone at ({a},{b})")
            if b in seen:
                problems.append(f"edge ({a},{b}) in paths {seen[b]} and {k}")
            seen[b] = k
    missing = set(range(1, T.size)) - set(seen)
    if missing:
        problems.append(f"{len(missing)} edges uncovered")
    H = horton_strahler(T)
    if dec.rounds != H:
        problems.append(f"rounds {dec.rounds} != H(T) {H}")
    worst = max((highways_on_path(T, dec, int(v)) for v in T.leaves), default=0)
    if worst > H:
        problems.append(f"a root-leaf path uses {worst} > H(T) = {H} highways")
    return problems


def all_trees(n_max: int) -> Iterator[GenealogyTree]:
    """Every rooted tree with 1..n_max vertices, as increasing labelled trees.

    Each unordered shape appears at least once; duplicates are harmless for
    exhaustive property checks.
    """
    for n in range(1, n_max + 1):
        yield from _increasing(n)


def _increasing(n: int) -> Iterator[GenealogyTree]:
    parent = [-1] * n

    def rec(i):
        if i == n:
            yield relabel_bfs(parent)
            return
        for p in range(i):
            parent[i] = p
            yield from rec(i + 1)

    yield from rec(1)


# ---------------------------------------------------------------- coupling


@dataclass(frozen=True)
class CouplingReport:
    sup_error: float
    H: int
    depth: int
    leaves: int
    size: int

    @property
    def bound_proxy(self) -> float:
        return self.H * math.log(1 + self.depth) + math.log(self.leaves)


@njit
def _lbinom(n, k):
    return math.lgamma(n + 1.0) - math.lgamma(k + 1.0) - math.lgamma(n - k + 1.0)


@njit
def _binom_quantile(n, u):
    """Smallest x with P(Bin(n, 1/2) <= x) >= u."""
    c = 0.0
    lh = n * math.log(0.5)
    for x in range(n + 1):
        c += math.exp(_lbinom(n, x) + lh)
        if c >= u:
            return x
    return n


@njit
def _hyper_quantile(total, succ, draws, u):
    """Smallest x with P(X <= x) >= u for X ~ Hypergeometric(total, succ, draws)."""
    lo = max(0, draws - (total - succ))
    hi = min(succ, draws)
    ln = _lbinom(total, draws)
    c = 0.0
    for x in range(lo, hi + 1):
        c += math.exp(_lbinom(succ, x) + _lbinom(total - succ, draws - x) - ln)
        if c >= u:
            return x
    return hi


@njit
def _phi(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@njit
def _kmt_walk(st, n, beta):
    """Simple ±1 walk W[0..n] coupled to the Brownian values beta[0..m] (m = 2^k >= n).

    Top level: #(+1) in m steps is the binomial quantile of Φ(β(m)/√m).
    Refinement: given the +1 count on an interval of length 2L, the count on
    its left half is the hypergeometric quantile of Φ(ξ/√(L/2)), with ξ the
    midpoint deviation of the Brownian bridge. Each Φ(...) is uniform and
    independent of coarser levels, so W is exactly a simple random walk.
    """
    m = beta.size - 1
    ups = np.zeros(m + 1, dtype=np.int64)  # cumulative +1 counts
    ups[m] = _binom_quantile(m, _phi(beta[m] / math.sqrt(m)))
    L = m
    while L > 1:
        half = L // 2
        for a in range(0, m, L):
            b = a + L
            mid = a + half
            xi = beta[mid] - 0.5 * (beta[a] + beta[b])
            u = _phi(xi / math.sqrt(L / 4.0))
            k = ups[b] - ups[a]
            ups[mid] = ups[a] + _hyper_quantile(L, k, half, u)
        L = half
    W = np.empty(n + 1, dtype=np.int64)
    for i in range(n + 1):
        W[i] = 2 * ups[i] - i
    return W


@njit
def _dyadic_bm(st, m):
    """Brownian values at 0..m (m a power of 2) by midpoint refinement."""
    b = np.zeros(m + 1)
    b[m] = math.sqrt(m) * _rng.normal(st)
    L = m
    while L > 1:
        half = L // 2
        sd = math.sqrt(L / 4.0)
        for a in range(0, m, L):
            b[a + half] = 0.5 * (b[a] + b[a + L]) + sd * _rng.normal(st)
        L = half
    return b


@njit
def _bm_at(st, grid_vals, times):
    """Brownian values at sorted real times, given exact values at integers 0..m.

    Beyond m the path continues with fresh increments. Interior points are
    Brownian-bridge draws between the last fixed point and the next integer.
    """
    m = grid_vals.size - 1
    out = np.empty(times.size)
    t_prev = 0.0
    v_prev = grid_vals[0]
    for i in range(times.size):
        t = times[i]
        if t > m:
            if t_prev < m:
                t_prev, v_prev = float(m), grid_vals[m]
            v = v_prev + math.sqrt(t - t_prev) * _rng.normal(st)
        else:
            j = int(math.ceil(t))
            if t == j:
                v = grid_vals[j]
            else:
                if t_prev < j - 1:
                    t_prev, v_prev = float(j - 1), grid_vals[j - 1]
                w = (t - t_prev) / (j - t_prev)
                sd = math.sqrt((t - t_prev) * (j - t) / (j - t_prev))
                v = v_prev + w * (grid_vals[j] - v_prev) + sd * _rng.normal(st)
        out[i] = v
        t_prev, v_prev = t, v
    return out


@njit
def _lattice_path(st, n):
    """Normalised Z⁴ walk 2·S and coupled Brownian path B at integer times 0..n."""
    d = 4
    coord = np.empty(n, dtype=np.int64)
    for i in range(n):
        coord[i] = _rng.randint(st, d)
    S = np.zeros((n + 1, d))
    B = np.zeros((n + 1, d))
    times = np.empty(n)
    for i in range(n):
        times[i] = (i + 1) / 4.0
    for j in range(d):
        nj = 0
        for i in range(n):
            if coord[i] == j:
                nj += 1
        m = 1
        while m < max(nj, 1):
            m *= 2
        beta = _dyadic_bm(st, m)
        W = _kmt_walk(st, nj, beta)
        c = 0
        for i in range(n):
            if coord[i] == j:
                c += 1
            S[i + 1, j] = 2.0 * W[c]
        Bj = _bm_at(st, beta, times)
        for i in range(n):
            B[i + 1, j] = 2.0 * Bj[i]
    return S, B


@njit
def _gauss_sub_path(st, n):
    """Increments √E·G in R⁴ sharing G with the Brownian increments."""
    d = 4
    S = np.zeros((n + 1, d))
    B = np.zeros((n + 1, d))
    for i in range(n):
        e = math.sqrt(_rng.exponential(st))
        for j in range(d):
            g = _rng.normal(st)
            S[i + 1, j] = S[i, j] + e * g
            B[i + 1, j] = B[i, j] + g
    return S, B


INCREMENTS = ("gaussian-subordinated", "lattice-nn")


def welded_fields(T: GenealogyTree, increments: str = "lattice-nn", seed: int = 0, stream: int = 0,
                  dec: HighwayDecomposition | None = None):
    """Tree-indexed (Γ^{-1/2}S_T, B_T) at every vertex, welded along highways.

    Each highway carries its own walk and Brownian path started at 0; a vertex
    value is the sum over the highways met on its root path of the value at
    the point where the path leaves that highway.
    """
    if increments not in INCREMENTS:
        raise ValueError(f"increments must be one of {INCREMENTS}")
    dec = highways(T) if dec is None else dec
    S = np.zeros((T.size, 4))
    B = np.zeros((T.size, 4))
    path_fn = _lattice_path if increments == "lattice-nn" else _gauss_sub_path
    with np.errstate(over="ignore"):
        st = _rng.new_state(np.uint64(_rng.seed_key(seed)), stream)
        # highways in discovery order are leaf-first; weld root-first so attach points are ready
        for k in sorted(range(len(dec.paths)), key=lambda k: T.levels[dec.paths[k][0]]):
            path = dec.paths[k]
            n = len(path) - 1
            if n == 0:
                continue
            s, b = path_fn(st, n)
            base = path[0]
            S[path[1:]] = S[base] + s[1:]
            B[path[1:]] = B[base] + b[1:]
    return S, B


def couple(T: GenealogyTree, increments: str = "lattice-nn", seed: int = 0, stream: int = 0) -> CouplingReport:
    dec = highways(T)
    S, B = welded_fields(T, increments, seed, stream, dec)
    err = float(np.max(np.linalg.norm(S - B, axis=1))) if T.size > 1 else 0.0
    return CouplingReport(err, horton_strahler(T), T.depth, T.n_leaves, T.size)


def path_endpoint_samples(n: int, increments: str, count: int, seed: int = 0) -> np.ndarray:
    """Endpoint of the welded walk on a path of n edges, once per stream."""
    T = path_tree(n + 1)
    return np.array([welded_fields(T, increments, seed, k)[0][-1] for k in range(count)])


def direct_endpoint_samples(n: int, increments: str, count: int, seed: int = 0) -> np.ndarray:
    """Endpoints of independently simulated normalised walks (numpy Generator)."""
    rng = np.random.default_rng(seed)
    if increments == "lattice-nn":
        coord = rng.integers(0, 4, size=(count, n))
        sign = rng.choice([-1, 1], size=(count, n))
        out = np.zeros((count, 4))
        for j in range(4):
            out[:, j] = 2 * np.sum(np.where(coord == j, sign, 0), axis=1)
        return out
    e = np.sqrt(rng.exponential(size=(count, n, 1)))
    return np.sum(e * rng.standard_normal((count, n, 4)), axis=1)


# ---------------------------------------------------------------- statistics


def hs_statistics(n_grid: Sequence[int], replicas: int, seed: int = 0) -> list[dict]:
    """Mean and quantiles of H(T_n)/log₂ n over size-conditioned trees."""
    rows = []
    for n in n_grid:
        if n < 3:
            raise ValueError("n must be at least 3")
        ratios = np.array([horton_strahler(sample_bgw(("size", n), seed, stream=k)) / math.log2(n)
                           for k in range(replicas)])
        q05, q50, q95 = np.quantile(ratios, [0.05, 0.5, 0.95])
        rows.append({"n": int(n), "mean": float(ratios.mean()), "stderr": float(ratios.std(ddof=1) / math.sqrt(replicas)),
                     "q05": float(q05), "median": float(q50), "q95": float(q95)})
    return rows


def coupling_statistics(n_grid: Sequence[int], replicas: int, increments: str = "lattice-nn",
                        seed: int = 0) -> list[dict]:
    """Median sup-error and its ratio to (ln n)² over size-conditioned trees."""
    rows = []
    for n in n_grid:
        errs = [couple(sample_bgw(("size", n), seed, stream=k), increments, seed, stream=k).sup_error
                for k in range(replicas)]
        med = float(np.median(errs))
        rows.append({"n": int(n), "median_sup_error": med, "ratio": med / math.log(n) ** 2})
    return rows


def write_rows_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("no rows")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
