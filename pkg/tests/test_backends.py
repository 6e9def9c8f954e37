import os
import subprocess
import sys

import pytest

# both backends must produce the same bytes for the same seed
CASES = [
    ["simulate", "--check", "pioneers", "--n-replicas", "300", "--seed", "11"],
    ["simulate", "--check", "thick", "--R-grid", "8", "--n-replicas", "3", "--seed", "2"],
    ["ode", "--lam", "0.5", "--x-max", "20"],
]


def _run(argv, out, no_numba):
    env = dict(os.environ)
    env.pop("BBM4LAB_NO_NUMBA", None)
    if no_numba:
        env["BBM4LAB_NO_NUMBA"] = "1"
    r = subprocess.run([sys.executable, "-m", "bbm4lab.cli", *argv, "--out", str(out)], env=env,
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.suffix == ".csv"}


@pytest.mark.parametrize("argv", CASES, ids=["pioneers", "thick", "ode"])
def test_fallback_matches_numba(tmp_path, argv):
    fast = _run(argv, tmp_path / "numba", False)
    slow = _run(argv, tmp_path / "python", True)
    assert fast and fast == slow
