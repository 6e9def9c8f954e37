"""Time the compiled kernels against the pure-Python fallback.

Each backend runs in a fresh interpreter because the numba switch is read at
import time. Compilation is excluded by a warm-up call.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys

CASES = {
    # name: (setup, statement); N is the --n workload size
    "ode_g_lambda_x1e3": (
        "from bbm4lab.ode_engine import GLambdaSpec, SolveConfig, solve_g_lambda",
        "solve_g_lambda(GLambdaSpec(0.5, 1000.0), SolveConfig(rel_tol=1e-10))",
    ),
    "pioneers_radial": (
        "import math; from bbm4lab.branching_sim import SimConfig, SphereGeometry, run_bbm_pioneers\n"
        "geom = SphereGeometry(math.e**2, 1.0, math.e**4)",
        "run_bbm_pioneers(geom, SimConfig(n_replicas=N))",
    ),
    "m1_monte_carlo": (
        "from bbm4lab.branching_sim import m1_monte_carlo",
        "m1_monte_carlo(n=50 * N)",
    ),
    "brw_thick_R16": (
        "from bbm4lab.branching_sim import SimConfig, run_brw_thick_points",
        "run_brw_thick_points(16, [1.0], SimConfig(n_replicas=max(N // 200, 2), mode='lattice-walk'))",
    ),
}

CHILD = """
import json, sys, time
N = {n}
{setup}
{stmt}
best = float("inf")
for _ in range({repeat}):
    t = time.perf_counter()
    {stmt}
    best = min(best, time.perf_counter() - t)
from bbm4lab._accel import backend
print(json.dumps({{"backend": backend(), "seconds": best}}))
"""


def time_case(setup, stmt, n, repeat, no_numba):
    env = dict(os.environ)
    env.pop("BBM4LAB_NO_NUMBA", None)
    if no_numba:
        env["BBM4LAB_NO_NUMBA"] = "1"
    code = CHILD.format(n=n, setup=setup, stmt=stmt, repeat=repeat)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--n", type=int, default=2000, help="workload size for the Monte Carlo cases")
    args = ap.parse_args()
    print(f"{'kernel':<22}{'numba s':>10}{'python s':>11}{'speedup':>9}")
    for name, (setup, stmt) in CASES.items():
        fast = time_case(setup, stmt, args.n, args.repeat, False)
        slow = time_case(setup, stmt, args.n, 1, True)
        print(f"{name:<22}{fast['seconds']:>10.4f}{slow['seconds']:>11.3f}{slow['seconds'] / fast['seconds']:>8.0f}x")


if __name__ == "__main__":
    main()
