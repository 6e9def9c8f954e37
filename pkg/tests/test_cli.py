import json
import subprocess
import sys

import pytest

from bbm4lab import cli


def run(*argv):
    return subprocess.run([sys.executable, "-m", "bbm4lab.cli", *map(str, argv)], capture_output=True, text=True)


def test_help_lists_subcommands():
    r = run("--help")
    assert r.returncode == 0
    for sub in ("ode", "constants", "series", "hitting", "simulate", "tree", "tauberian", "report"):
        assert sub in r.stdout


def test_series_prints_fixtures(tmp_path):
    r = run("series", "--family", "P", "--n", 3, "--out", tmp_path)
    assert r.returncode == 0, r.stderr
    lines = r.stdout.strip().splitlines()
    assert len(lines) == 3 and lines[0].startswith("P_1") and lines[2].startswith("P_3")
    assert {"run.json", "metadata.json", "series_P.txt"} <= {p.name for p in tmp_path.iterdir()}


def test_metadata_and_seed_echo(tmp_path):
    assert cli.main(["series", "--n", "2", "--seed", "42", "--out", str(tmp_path)]) == 0
    meta = json.loads((tmp_path / "metadata.json").read_text())
    run_cfg = json.loads((tmp_path / "run.json").read_text())
    assert meta["seed"] == run_cfg["seed"] == 42
    assert {"version", "wall_time_s"} <= set(meta)
    assert "wall_time_s" not in run_cfg


def test_malformed_json_reports_line(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{\n  "params": {\n    "n": 3,\n  }\n}\n')
    r = run("series", "--config", cfg, "--out", tmp_path / "o")
    assert r.returncode == 1
    assert f"{cfg}:4:3: invalid JSON" in r.stderr


def test_unknown_parameter_rejected_with_line(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{\n  "params": {\n    "family": "P",\n    "nn": 3\n  }\n}\n')
    r = run("series", "--config", cfg, "--out", tmp_path / "o")
    assert r.returncode == 1
    assert f"{cfg}:4: unknown parameter 'nn'" in r.stderr


def test_unknown_top_level_key_rejected(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{\n  "seed": 1,\n  "sead": 2\n}\n')
    assert cli.main(["series", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


@pytest.mark.parametrize("argv", [["series", "--n", "0"], ["series", "--seed", "-1"],
                                  ["simulate", "--geometry", '{"radius": 1}'], ["series", "--family", "R"]])
def test_usage_errors(tmp_path, argv):
    r = run(*argv, "--out", tmp_path)
    assert r.returncode == 1


def test_config_file_values_applied(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"subcommand": "series", "params": {"family": "Q", "n": 2}, "seed": 5,
                               "output_dir": str(tmp_path / "o")}))
    assert cli.main(["series", "--config", str(cfg)]) == 0
    assert (tmp_path / "o" / "series_Q.txt").exists()


def test_command_line_overrides_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"params": {"n": 2}}))
    assert cli.main(["series", "--config", str(cfg), "--n", "4", "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "run.json").read_text())["params"]["n"] == 4


def test_simulate_pioneers_outputs_and_idempotence(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        r = run("simulate", "--check", "pioneers", "--n-replicas", 2000, "--seed", 7, "--out", d)
        assert r.returncode == 0, r.stderr
        outs.append({name: (d / name).read_bytes() for name in ("histogram.csv", "summary.csv")})
    assert outs[0] == outs[1]
    assert outs[0]["histogram.csv"].startswith(b"k,count\r\n")  # RFC 4180 line endings


def test_threads_do_not_change_outputs(tmp_path):
    base = ["simulate", "--check", "pioneers", "--n-replicas", "1500", "--seed", "3"]
    assert cli.main(base + ["--threads", "1", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(base + ["--threads", "4", "--out", str(tmp_path / "b")]) == 0
    for name in ("histogram.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_statistical_failure_exit_code(tmp_path):
    # the mixture's Laplace transform blows up inside the band
    r = run("tauberian", "--law", "mixture", "--T", 5, "--delta", 0.01, "--out", tmp_path)
    assert r.returncode == 2
    assert "BandViolation" in r.stderr
    assert json.loads((tmp_path / "metadata.json").read_text())["exit_code"] == 2


def test_too_few_replicas_is_statistical_failure(tmp_path):
    r = run("simulate", "--check", "scale_invariance", "--n-replicas", 50, "--out", tmp_path)
    assert r.returncode == 2


def test_tauberian_csv(tmp_path):
    assert cli.main(["tauberian", "--T", "5", "--n-samples", "2000", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "tauberian.csv").read_text().splitlines()
    assert rows[0] == "T,a,delta,bound,estimate,ci_low,pass"
    assert rows[1].endswith(",true")


def test_tree_decompose(tmp_path):
    assert cli.main(["tree", "--action", "decompose", "--n", "33", "--seed", "1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "tree.txt").exists()
    assert (tmp_path / "highways.csv").read_text().startswith("path,vertices")


def test_ode_plot_data(tmp_path):
    assert cli.main(["ode", "--out", str(tmp_path)]) == 0
    dat = (tmp_path / "g.dat").read_text().splitlines()
    assert len(dat[-1].split()) == 2
    assert (tmp_path / "g.plot.py").exists()
    assert (tmp_path / "g.csv").read_text().startswith("x,g,gp")


def test_report_quick(tmp_path):
    r = run("report", "--suite", "quick", "--out", tmp_path)
    # the quick subset includes criteria that fail on conflicting fixtures
    assert r.returncode == 2
    lines = [l for l in r.stdout.splitlines() if l.startswith("criterion")]
    assert len(lines) == 8
    assert (tmp_path / "report.csv").exists()


def test_list_parameters_take_several_values(tmp_path):
    assert cli.main(["constants", "--kind", "c_lambda", "--lam", "0.5", "0.3", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "run.json").read_text())["params"]["lam"] == [0.5, 0.3]
