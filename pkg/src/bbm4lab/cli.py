"""Command-line entry point: ``bbm4lab <subcommand> [--config F] [--seed S] [--out DIR] [--threads N]``.

Exit codes: 0 success, 1 usage error, 2 statistical check failed,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend

EXIT_OK, EXIT_USAGE, EXIT_STAT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


# name -> (type, default, help); type is float, int, str, bool, "floats", "ints" or a tuple of choices
SCHEMAS: dict[str, dict] = {
    "ode": {
        "lam": (float, 0.5, "initial slope magnitude λ"),
        "x_max": (float, 50.0, "integration horizon"),
        "rel_tol": (float, 1e-10, "relative tolerance"),
        "spacing": (float, 0.1, "dense output spacing"),
    },
    "constants": {
        "kind": (("c_lambda", "lambda_c", "positivity", "truncation"), "c_lambda", "quantity to compute"),
        "lam": ("floats", [0.5], "λ values for c_lambda and truncation"),
        "x0": (float, 1.0, "lower end of the C_λ integral"),
        "x_eval": (float, 1000.0, "evaluation point for lambda_c"),
        "grid": ("floats", [2.0, 3.0, 0.02], "λ grid (lo, hi, step) for lambda_c"),
        "bracket": ("floats", [10.0, 12.5], "λ bracket for positivity"),
        "x": (float, 40.0, "evaluation point for truncation"),
        "n_max": (int, 12, "largest truncation order"),
    },
    "series": {
        "family": (("P", "Q"), "P", "series family"),
        "n": (int, 3, "number of polynomials"),
    },
    "hitting": {
        "d": ("ints", [5], "dimensions"),
        "s": (float, 1.0, "generating-function argument"),
        "radii": ("floats", [1.0, 2.0, 5.0, 10.0, 100.0], "radii for the hitting curve"),
        "n_alpha": (int, 50, "α coefficients to tabulate"),
    },
    "simulate": {
        "check": (("pioneers", "identity", "first_moment", "mode_agreement", "scale_invariance", "hitting",
                   "tail", "thick"), "pioneers", "what to run"),
        "mode": (("radial-bessel", "full-cartesian", "lattice-walk"), "radial-bessel", "motion model"),
        "d": (int, 4, "dimension"),
        "dt": (float, 1e-2, "time step floor"),
        "n_replicas": (int, 10000, "replicas"),
        "geometry": ("object", {"start_radius": math.e**2, "target_radius": 1.0, "kill_radius": math.e**4},
                     "spheres: start_radius, target_radius, kill_radius (null for none), outer_freeze"),
        "thresholds": ("floats", [1.0], "thickness parameters a"),
        "lam": (float, 0.5, "λ for the identity check"),
        "x": (float, 3.0, "x for the identity check"),
        "L": (float, 6.0, "log of the killing radius for the identity check"),
        "s": (float, 0.5, "generating-function argument for scale invariance"),
        "y_frac": (float, 0.5, "start radius as a fraction of R for scale invariance"),
        "R_pair": ("floats", [8.0, 16.0], "radii (R1, R2) for scale invariance"),
        "R_grid": ("floats", [16.0, 32.0, 64.0], "radii for tail and thick-point probes"),
    },
    "tree": {
        "action": (("sample", "hs", "couple", "decompose"), "sample", "what to run"),
        "n": (int, 1025, "tree size"),
        "n_grid": ("ints", [65, 513, 4097], "sizes for hs and couple"),
        "replicas": (int, 100, "trees per size"),
        "increments": (("gaussian-subordinated", "lattice-nn"), "lattice-nn", "step law for couple"),
    },
    "tauberian": {
        "law": (("exp", "mixture"), "exp", "Exp(1), or 0.95·Exp(1) + 0.05·Exp(1/2)"),
        "T": ("floats", [5.0, 30.0], "T values"),
        "a": (float, 0.3, "window half-width fraction"),
        "c": (float, 1.0, "band parameter c"),
        "C": (float, 2.0, "band parameter C"),
        "delta": (float, 0.5, "band half-width δ"),
        "n_samples": (int, 100000, "Monte Carlo samples"),
        "search": (bool, False, "also search the largest passing δ"),
    },
    "report": {
        "suite": (("quick", "full"), "quick", "which acceptance criteria to run"),
    },
}

TOP_KEYS = {"subcommand", "params", "seed", "output_dir", "threads"}
GEOMETRY_KEYS = {"start_radius", "target_radius", "kill_radius", "outer_freeze"}


# ---------------------------------------------------------------- config


@dataclass
class RunConfig:
    subcommand: str
    params: dict
    seed: int = 0
    output_dir: Path = Path("out")
    threads: int = 1
    explicit: set = field(default_factory=set)


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def _coerce(name, spec, value, where):
    typ = spec[0]
    try:
        if isinstance(typ, tuple):
            if value not in typ:
                raise ValueError(f"must be one of {list(typ)}")
            return value
        if typ is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
                return value.lower() in ("true", "1")
            raise ValueError("must be a boolean")
        if typ == "object":
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, dict):
                raise ValueError("must be a JSON object")
            unknown = set(value) - GEOMETRY_KEYS
            if unknown:
                raise ValueError(f"has unknown keys {sorted(unknown)} (allowed: {sorted(GEOMETRY_KEYS)})")
            return value
        if typ in ("floats", "ints"):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            if not isinstance(value, list):
                raise ValueError("must be a list")
            conv = float if typ == "floats" else int
            return [conv(v) for v in value]
        if typ is int and isinstance(value, float) and not value.is_integer():
            raise ValueError("must be an integer")
        if isinstance(value, bool):
            raise ValueError(f"must be {typ.__name__}")
        return typ(value)
    except (TypeError, ValueError) as e:
        raise UsageError(f"{where}: parameter {name!r} {e}") from None


def load_config_file(path: str) -> tuple[dict, str]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"{path}: cannot read config: {e.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}:1: config must be a JSON object")
    for k in doc:
        if k not in TOP_KEYS:
            raise UsageError(f"{path}:{_line_of(text, k)}: unknown key {k!r} (allowed: {sorted(TOP_KEYS)})")
    if "params" in doc and not isinstance(doc["params"], dict):
        raise UsageError(f"{path}:{_line_of(text, 'params')}: 'params' must be an object")
    return doc, text


def build_config(args: argparse.Namespace) -> RunConfig:
    sub = args.subcommand
    schema = SCHEMAS[sub]
    params = {k: v[1] for k, v in schema.items()}
    explicit = set()
    seed, out, threads = 0, Path("out"), 1
    if args.config:
        doc, text = load_config_file(args.config)
        if doc.get("subcommand", sub) != sub:
            raise UsageError(f"{args.config}:{_line_of(text, 'subcommand')}: config is for "
                             f"{doc['subcommand']!r}, not {sub!r}")
        for k, v in doc.get("params", {}).items():
            if k not in schema:
                raise UsageError(f"{args.config}:{_line_of(text, k)}: unknown parameter {k!r} for {sub} "
                                 f"(allowed: {sorted(schema)})")
            params[k] = _coerce(k, schema[k], v, f"{args.config}:{_line_of(text, k)}")
            explicit.add(k)
        seed = doc.get("seed", seed)
        out = Path(doc.get("output_dir", out))
        threads = doc.get("threads", threads)
    for k in schema:
        v = getattr(args, "p_" + k, None)
        if v is not None:
            params[k] = _coerce(k, schema[k], v, "command line")
            explicit.add(k)
    seed = args.seed if args.seed is not None else seed
    out = Path(args.out) if args.out is not None else out
    threads = args.threads if args.threads is not None else threads
    try:
        seed = int(seed)
        threads = int(threads)
    except (TypeError, ValueError):
        raise UsageError("seed and threads must be integers") from None
    if not 0 <= seed < 1 << 64:
        raise UsageError("seed must be an unsigned 64-bit integer")
    if threads < 0:
        raise UsageError("threads must be >= 0")
    threads = threads or os.cpu_count() or 1
    return RunConfig(sub, params, seed, out, threads, explicit)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bbm4lab", description="Critical BBM hitting numerics and simulations.")
    p.add_argument("--version", action="version", version=f"bbm4lab {__version__}")
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name, schema in SCHEMAS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="unsigned 64-bit seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--threads", type=int, help="worker threads (0 = auto)")
        for k, (typ, default, helptext) in schema.items():
            kw = {"dest": "p_" + k, "default": None, "help": f"{helptext} (default {default})"}
            if isinstance(typ, tuple):
                kw["choices"] = typ
            elif typ in ("floats", "ints"):
                kw["nargs"] = "+"
            sp.add_argument("--" + k.replace("_", "-"), **kw)
    return p


# ---------------------------------------------------------------- outputs


class Outputs:
    """Writes deterministic files under one directory; timing goes to metadata.json only."""

    def __init__(self, cfg: RunConfig):
        self.dir = cfg.output_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def rows(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])

    def plot(self, stem, x, y, xlabel, ylabel):
        data = self.path(stem + ".dat")
        np.savetxt(data, np.column_stack([x, y]), fmt="%.17g", header=f"{xlabel} {ylabel}", comments="# ")
        script = self.path(stem + ".plot.py")
        script.write_text(
            "# plot stub: python this_file.py (needs matplotlib)\n"
            "import numpy as np\nimport matplotlib.pyplot as plt\n"
            f"x, y = np.loadtxt({data.name!r}, unpack=True)\n"
            f"plt.plot(x, y)\nplt.xlabel({xlabel!r})\nplt.ylabel({ylabel!r})\n"
            f"plt.savefig({stem + '.png'!r})\n")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# ---------------------------------------------------------------- subcommands


def run_ode(cfg, out):
    from .ode_engine import GLambdaSpec, SolveConfig, phase_markers, solve_g_lambda
    p = cfg.params
    traj = solve_g_lambda(GLambdaSpec(p["lam"], p["x_max"]),
                          SolveConfig(rel_tol=p["rel_tol"], dense_grid_spacing=p["spacing"]))
    out.rows("g.csv", ["x", "g", "gp"], zip(traj.xs, traj.g, traj.gp))
    out.plot("g", traj.xs, traj.g, "x", "g")
    rows = [("blowup_at", traj.blowup_at if traj.blowup_at is not None else "")]
    try:
        pm = phase_markers(traj)
        rows += [("x0", pm.x0), ("x1", pm.x1), ("g_x0", pm.g_x0)]
    except ValueError as e:
        rows.append(("phase_markers", str(e)))
    out.rows("markers.csv", ["quantity", "value"], rows)
    for k, v in rows:
        print(f"{k} = {v}")


def run_constants(cfg, out):
    from . import constants as cs
    from .ode_engine import positivity_threshold
    p = cfg.params
    kind = p["kind"]
    if kind == "c_lambda":
        ests = [cs.estimate_c_lambda(l, x0=p["x0"]) for l in p["lam"]]
        cs.write_clambda_csv(out.path("c_lambda.csv"), ests)
        for e in ests:
            print(f"C_{e.lam:g} = {e.value!r} ± {e.quadrature_error:.2g}")
    elif kind == "lambda_c":
        lo, hi, step = p["grid"]
        scan = cs.scan_lambda_c(p["x_eval"], np.arange(lo, hi + step / 2, step))
        cs.write_objective_csv(out.path("objective.csv"), scan)
        out.plot("objective", scan.grid, scan.objective, "lambda", "objective")
        print(f"lambda_c proxy = {scan.argmax!r}")
    elif kind == "positivity":
        est = positivity_threshold(*p["bracket"])
        out.rows("positivity.csv", ["value", "lo", "hi"], [(est.value, est.lo, est.hi)])
        print(f"positivity threshold = {est.value!r} in [{est.lo!r}, {est.hi!r}]")
    else:
        rows = []
        for l in p["lam"]:
            C = cs.estimate_c_lambda(l).value
            errs = cs.truncation_errors(l, C, p["x"], p["n_max"])
            rows += [(l, n + 1, e) for n, e in enumerate(errs)]
        out.rows("truncation.csv", ["lambda", "N", "error"], rows)


def run_series(cfg, out):
    from .series_engine import gen_P, gen_Q
    p = cfg.params
    if p["n"] < 1:
        raise UsageError("n must be at least 1")
    fam = (gen_P if p["family"] == "P" else gen_Q)(max(p["n"], 2))
    polys = fam.polys[:p["n"]]
    out.path(f"series_{p['family']}.txt").write_text("\n".join(q.to_text() for q in polys) + "\n")
    for i, q in enumerate(polys, 1):
        print(f"{p['family']}_{i} = {q.to_text()}")


def run_hitting(cfg, out):
    from . import hitting_offcritical as ho
    p = cfg.params
    tables, mus, curve = [], [], []
    for d in p["d"]:
        if d == 4:
            raise UsageError("d = 4 is the critical case; use ode or simulate")
        tables.append(ho.alpha_seq(d, p["n_alpha"]))
        mu = ho.mu_s(d, p["s"])
        mus.append((d, p["s"], mu))
        curve += [(d, r, ho.hitting_series(d, p["s"], r)) for r in p["radii"]]
    ho.write_alpha_csv(out.path("alpha.csv"), tables)
    ho.write_mu_csv(out.path("mu.csv"), mus)
    ho.write_curve_csv(out.path("curve.csv"), curve)
    for d, s, mu in mus:
        print(f"d={d}: mu_s({s:g}) = {mu!r}")


def _geometry(p):
    from .branching_sim import SphereGeometry
    g = p["geometry"]
    return SphereGeometry(g.get("start_radius", math.e**2), g.get("target_radius", 1.0), g.get("kill_radius"),
                          bool(g.get("outer_freeze", False)))


def run_simulate(cfg, out):
    from . import branching_sim as bs
    p = cfg.params
    sim = bs.SimConfig(d=p["d"], dt=p["dt"], seed=cfg.seed, n_replicas=p["n_replicas"], mode=p["mode"],
                       threads=cfg.threads)
    check = p["check"]
    if check == "pioneers":
        tally = bs.run_bbm_pioneers(_geometry(p), sim)
        bs.write_histogram_csv(out.path("histogram.csv"), tally)
        rows = [("P(N>0)", *tally.hit_indicator_mean), ("E[N]", *tally.mean_count)]
        bs.write_summary_csv(out.path("summary.csv"), rows)
        for name, v, e in rows:
            print(f"{name} = {v!r} ± {e:.3g}")
        return
    if check == "thick":
        if p["mode"] != bs.LATTICE:
            sim = sim.replace(mode=bs.LATTICE)
        runs = [bs.run_brw_thick_points(int(R), p["thresholds"], sim) for R in p["R_grid"]]
        out.rows("thick.csv", ["R", "a", "mean_thick", "acceptance"],
                 [(r.R, a, r.mean_thick(a), r.acceptance) for r in runs for a in p["thresholds"]])
        slopes = [(a, bs.thick_slope(runs, a)) for a in p["thresholds"]]
        out.rows("thick_slope.csv", ["a", "slope"], slopes)
        for a, sl in slopes:
            print(f"a = {a:g}: slope = {sl!r}")
        return
    if check == "tail":
        a = p["thresholds"][0]
        probe = bs.tail_exponent_probe(a, p["R_grid"], sim)
        out.rows("tail.csv", ["R", "probability", "stderr", "hits"],
                 zip(probe.R_grid, probe.probabilities, probe.stderrs, probe.hits))
        print(f"exponent = {probe.slope!r} CI [{probe.slope_ci[0]!r}, {probe.slope_ci[1]!r}], psi = {bs.psi(a)!r}")
        return
    if check == "identity":
        rep = bs.generating_identity_check(p["lam"], p["x"], p["L"], sim)
    elif check == "first_moment":
        rep = bs.first_moment_check(_geometry(p), sim)
    elif check == "mode_agreement":
        rep = bs.mode_agreement_check(_geometry(p), sim)
    elif check == "scale_invariance":
        R1, R2 = p["R_pair"]
        rep = bs.scale_invariance_check(p["s"], p["y_frac"], R1, R2, sim)
    else:
        g = _geometry(p)
        if g.kill_radius is None:
            raise UsageError("hitting needs geometry.kill_radius")
        rep = bs.hitting_probability_check(g.start_radius, g.kill_radius, sim)
    scalar = {k: v for k, v in rep.items() if isinstance(v, (int, float, bool, np.number, np.bool_))}
    out.rows("check.csv", ["quantity", "value"], sorted(scalar.items()))
    for k, v in sorted(scalar.items()):
        print(f"{k} = {v!r}")
    if "passed" in rep and not rep["passed"]:
        raise CheckFailed(f"{check} check failed")


def run_tree(cfg, out):
    from . import tree_coupling as tc
    p = cfg.params
    act = p["action"]
    if act in ("sample", "decompose"):
        T = tc.sample_bgw(("size", p["n"]), cfg.seed)
        T.write(out.path("tree.txt"))
        dec = tc.highways(T)
        out.rows("highways.csv", ["path", "vertices"], [(k, " ".join(map(str, v))) for k, v in enumerate(dec.paths)])
        print(f"size = {T.size}, depth = {T.depth}, leaves = {T.n_leaves}, H = {tc.horton_strahler(T)}, "
              f"highways = {len(dec.paths)}, rounds = {dec.rounds}")
    elif act == "hs":
        rows = tc.hs_statistics(p["n_grid"], p["replicas"], cfg.seed)
        tc.write_rows_csv(out.path("hs.csv"), rows)
        for r in rows:
            print(f"n = {r['n']}: mean H/log2 n = {r['mean']:.4f}")
    else:
        rows = tc.coupling_statistics(p["n_grid"], p["replicas"], p["increments"], cfg.seed)
        tc.write_rows_csv(out.path("coupling.csv"), rows)
        for r in rows:
            print(f"n = {r['n']}: median sup error = {r['median_sup_error']:.4f}, ratio = {r['ratio']:.4f}")


def run_tauberian(cfg, out):
    from . import tauberian as tb
    p = cfg.params
    law = tb.exponential() if p["law"] == "exp" else tb.exponential_mixture([0.95, 0.05], [1.0, 0.5])
    reports = []
    for T in p["T"]:
        spec = tb.BandSpec(p["c"], p["C"], T, p["delta"])
        reports.append(tb.verify_theorem(law, p["a"], spec, p["n_samples"], cfg.seed, cfg.threads))
    tb.write_report_csv(out.path("tauberian.csv"), reports)
    for r in reports:
        print(f"T = {r.T:g}: estimate {r.estimate:.4g} (ci_low {r.ci_low:.4g}) vs bound {r.bound:.4g} "
              f"[{r.estimator}] {'pass' if r.passed else 'FAIL'}")
    if p["search"]:
        d = tb.search_delta(law, p["a"], p["c"], p["C"], p["T"], p["n_samples"], cfg.seed)
        out.rows("delta_search.csv", ["a", "c", "C", "delta_max"], [(p["a"], p["c"], p["C"], d if d is not None else "")])
        print(f"largest passing delta = {d}")
    if not all(r.passed for r in reports):
        raise CheckFailed("tauberian bound not verified")


def run_report(cfg, out):
    from .suite import run_suite
    results = run_suite(cfg.params["suite"], seed=cfg.seed, threads=cfg.threads)
    out.rows("report.csv", ["criterion", "name", "pass", "detail"],
             [(r.number, r.name, r.passed, r.detail) for r in results])
    for r in results:
        print(r.line())
    if not all(r.passed for r in results):
        raise CheckFailed(f"{sum(not r.passed for r in results)} criteria failed")


RUNNERS = {"ode": run_ode, "constants": run_constants, "series": run_series, "hitting": run_hitting,
           "simulate": run_simulate, "tree": run_tree, "tauberian": run_tauberian, "report": run_report}


def _statistical_errors() -> tuple:
    # raised when a Monte Carlo check cannot pass or cannot be decided at the requested sample size
    from .branching_sim import InsufficientStatistics, OutsideLaplaceBand, StatisticalCheckFailed
    from .tauberian import BandUnverifiable, BandViolation, Unverifiable
    return (StatisticalCheckFailed, OutsideLaplaceBand, InsufficientStatistics, BandUnverifiable, BandViolation,
            Unverifiable)


def dispatch(cfg: RunConfig) -> int:
    out = Outputs(cfg)
    run_cfg = {"subcommand": cfg.subcommand, "params": cfg.params, "seed": cfg.seed}
    (out.dir / "run.json").write_text(json.dumps(run_cfg, indent=2, sort_keys=True) + "\n")
    t0 = time.perf_counter()
    code, message = EXIT_OK, ""
    try:
        RUNNERS[cfg.subcommand](cfg, out)
    except CheckFailed as e:
        code, message = EXIT_STAT, str(e)
    except UsageError:
        raise
    except _statistical_errors() as e:
        code, message = EXIT_STAT, f"{type(e).__name__}: {e}"
    except ValueError as e:
        raise UsageError(str(e)) from None
    except Exception as e:  # numerical failure inside a module
        code, message = EXIT_NUMERIC, f"{type(e).__name__}: {e}"
    meta = {"version": __version__, "seed": cfg.seed, "subcommand": cfg.subcommand,
            "wall_time_s": time.perf_counter() - t0, "threads": cfg.threads, "backend": backend(),
            "files": out.files, "exit_code": code}
    (out.dir / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")
    if message:
        print(f"error: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        return dispatch(cfg)
    except UsageError as e:
        print(f"bbm4lab {args.subcommand}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
