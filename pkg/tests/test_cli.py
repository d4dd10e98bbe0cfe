import json
import subprocess
import sys

import pytest

from qcblender.cli import DEFAULTS, ConfigError, build_config, config_hash, main

SMALL_SPHERE = ["--set", "fd_samples=200", "--set", "normal_form_samples=5", "--set", "grid_samples=60",
                "--set", "refinement=2", "--probe", "derivative", "--probe", "normal_form"]
SMALL_BRANCH = ["--set", "n_seeds=3", "--set", "n_steps=300", "--set", "grid_per_axis=9"]


def run_cli(args, capsys):
    code = main(args)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_defaults_validate():
    for kind in DEFAULTS:
        cfg = build_config(kind)
        assert cfg["seed"] == 0 and cfg["params"] == DEFAULTS[kind]


@pytest.mark.parametrize("args", [
    ["covering", "--set", "grid_per_axis=1"],
    ["branch", "--tie-break", "best"],
    ["blender", "--epsilon", "0.3"],
    ["sphere", "--set", "nonsense=1"],
    ["geometry", "--seed", "-1"],
    ["sphere", "--threads", "0"],
    ["covering", "--set", "novalue"],
])
def test_invalid_config_exit_2(args, capsys, tmp_path):
    code, out, err = run_cli(args + ["--out", str(tmp_path)], capsys)
    assert code == 2
    assert json.loads(err)["error"] == "invalid configuration"
    assert not (tmp_path / "summary.json").exists()


def test_config_wrong_experiment(tmp_path):
    with pytest.raises(ConfigError):
        build_config("branch", {"experiment": "sphere", "seed": 0, "params": {}})
    with pytest.raises(ConfigError):
        build_config("branch", {"seed": 0, "extra": 1})


def test_toml_config_and_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.toml"
    cfg.write_text('experiment = "sphere"\nseed = 5\n[params]\nprobes = ["derivative"]\nfd_samples = 50\n')
    out = tmp_path / "o"
    code, stdout, _ = run_cli(["sphere", "--config", str(cfg), "--set", "fd_samples=70", "--out", str(out)],
                              capsys)
    assert code == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["seed"] == 5 and s["params"]["fd_samples"] == 70 and s["params"]["probes"] == ["derivative"]
    assert s["schema_version"] == 1 and s["passed"]
    assert json.loads(stdout)["passed"] is True


def test_json_config(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"experiment": "sphere", "seed": 1, "params": {"probes": ["normal_form"],
                                                                           "normal_form_samples": 3}}))
    code, _, _ = run_cli(["sphere", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)
    assert code == 0


def test_qcb_out_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("QCB_OUT", str(tmp_path / "env"))
    code, _, _ = run_cli(["sphere", "--probe", "derivative", "--set", "fd_samples=20", "--out",
                          str(tmp_path / "flag")], capsys)
    assert code == 0
    assert (tmp_path / "env" / "summary.json").exists()
    assert not (tmp_path / "flag").exists()


def test_sphere_run_outputs_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(["sphere", *SMALL_SPHERE, "--out", str(a)], capsys)[0] == 0
    assert run_cli(["sphere", *SMALL_SPHERE, "--threads", "3", "--out", str(b)], capsys)[0] == 0
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    meta = json.loads((b / "metadata.json").read_text())
    assert meta["threads"] == 3 and meta["elapsed_seconds"] >= 0
    s = json.loads((a / "summary.json").read_text())
    assert s["config_hash"] == config_hash(build_config("sphere", None, s["params"], 0))


def test_failed_check_exit_1(tmp_path, capsys):
    code, _, err = run_cli(["sphere", "--probe", "derivative", "--set", "fd_samples=20", "--set", "fd_tol=1e-20",
                            "--out", str(tmp_path)], capsys)
    assert code == 1
    assert "failed_checks" in json.loads(err)
    assert json.loads((tmp_path / "summary.json").read_text())["passed"] is False


def test_branch_runs_and_writes_tables(tmp_path, capsys):
    code, _, err = run_cli(["branch", *SMALL_BRANCH, "--out", str(tmp_path)], capsys)
    assert code == 0, err
    s = json.loads((tmp_path / "summary.json").read_text())
    for t in s["tables"]:
        assert (tmp_path / t).exists()


def test_report_single_and_branch_distribution(tmp_path, capsys):
    for seed in (1, 2):
        assert run_cli(["branch", *SMALL_BRANCH, "--seed", str(seed), "--out", str(tmp_path / f"b{seed}")],
                       capsys)[0] == 0
    assert run_cli(["sphere", "--probe", "derivative", "--set", "fd_samples=20", "--out", str(tmp_path / "s")],
                   capsys)[0] == 0
    rep = tmp_path / "rep"
    code, _, _ = run_cli(["report", str(tmp_path / "*" / "summary.json"), "--out", str(rep)], capsys)
    assert code == 0
    md = (rep / "report.md").read_text()
    assert "## branch" in md and "## sphere" in md and "greedy max kappa distribution" in md
    assert (rep / "branch_kappa_distribution.csv").read_text().splitlines()[0] == "quantile,greedy_max_kappa"
    single = tmp_path / "single"
    assert run_cli(["report", str(tmp_path / "s" / "summary.json"), "--out", str(single)], capsys)[0] == 0
    assert (single / "sphere.csv").read_text().count("\n") == 2


def test_report_errors(tmp_path, capsys):
    code, _, err = run_cli(["report", str(tmp_path / "none*.json"), "--out", str(tmp_path / "r")], capsys)
    assert code == 2 and "no summary files" in json.loads(err)["message"]
    (tmp_path / "a.json").write_text(json.dumps({"schema_version": 1, "experiment": "sphere"}))
    (tmp_path / "b.json").write_text(json.dumps({"schema_version": 2, "experiment": "sphere"}))
    code, _, err = run_cli(["report", str(tmp_path / "*.json"), "--out", str(tmp_path / "r")], capsys)
    assert code == 2 and "mixed schema" in json.loads(err)["message"]


def test_entry_point_module(tmp_path):
    r = subprocess.run([sys.executable, "-m", "qcblender.cli", "sphere", "--probe", "derivative", "--set",
                        "fd_samples=10", "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
