"""End-to-end acceptance: each experiment is run through the qcb entry point at its default
parameters, once single-threaded and once with 4 threads, and the criteria are read off the
summaries. Each criterion prints one PASS/FAIL line."""

import json
import shutil
import subprocess
import sys

import pytest

KINDS = ("covering", "branch", "geometry", "blender", "sphere")


def _qcb():
    exe = shutil.which("qcb")
    return [exe] if exe else [sys.executable, "-m", "qcblender.cli"]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    out = {}
    for kind in KINDS:
        for threads in (1, 4):
            d = root / f"{kind}_t{threads}"
            proc = subprocess.run(_qcb() + [kind, "--threads", str(threads), "--out", str(d)],
                                  capture_output=True, text=True)
            out[kind, threads] = {
                "code": proc.returncode, "stderr": proc.stderr, "dir": d,
                "summary": json.loads((d / "summary.json").read_text()) if (d / "summary.json").exists() else None,
                "bytes": (d / "summary.json").read_bytes() if (d / "summary.json").exists() else b"",
                "elapsed": json.loads((d / "metadata.json").read_text())["elapsed_seconds"]
                if (d / "metadata.json").exists() else float("inf"),
            }
    return out


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def single(runs, kind):
    r = runs[kind, 1]
    assert r["summary"] is not None, r["stderr"]
    return r["summary"], r["elapsed"]


def test_criterion_1_covering(runs, capsys):
    s, t = single(runs, "covering")
    c, p = s["checks"]["certificate"], s["checks"]["perturbed_certificate"]
    ok = (s["params"]["dim"] == 2 and s["params"]["grid_per_axis"] >= 9 and s["params"]["auto_tune"]
          and c["passed"] and c["worst_margin"] > c["slack_times_resolution"]
          and p["passed"] and p["worst_margin"] > p["slack_times_resolution"] and p["delta"] == 1e-3
          and s["results"]["certificate"]["params"]["n_generators"] == 4 and t <= 60)
    report(capsys, 1, ok, f"margin {c['worst_margin']:.4g} > {c['slack_times_resolution']:.4g}, "
                          f"perturbed {p['worst_margin']:.4g} > {p['slack_times_resolution']:.4g}, {t:.1f}s")


def test_criterion_2_branches(runs, capsys):
    s, t = single(runs, "branch")
    r, d = s["results"], s["params"]["dim"]
    g, rnd = s["checks"]["greedy_kappa_bounded"], s["checks"]["random_slope_positive"]
    ok = (s["params"]["n_seeds"] == 100 and s["params"]["n_steps"] == 10_000 and d == 2
          and r["kappa_bound"] == pytest.approx(r["window_bound"] ** (d * d), rel=1e-12)
          and r["greedy_max_kappa"] <= r["kappa_bound"] and g["passed"]
          and r["random_positive_fraction"] >= 0.99 and rnd["passed"] and t <= 120)
    report(capsys, 2, ok, f"greedy max kappa {r['greedy_max_kappa']:.4g} <= H^4 = {r['kappa_bound']:.4g}, "
                          f"positive slopes {r['random_positive_fraction']:.2f}, {t:.1f}s")


def test_criterion_3_key_lemma(runs, capsys):
    s, _ = single(runs, "geometry")
    z, pl = s["checks"]["key_lemma_zero_noise"], s["checks"]["key_lemma_plateau"]
    ok = (s["params"]["n_seeds"] == 100 and s["params"]["window"] == [50, 500, 1000]
          and z["max_abs"] == 0.0 and pl["worst_ratio"] < 1.05 and z["passed"] and pl["passed"])
    report(capsys, 3, ok, f"zero-noise max {z['max_abs']}, worst plateau ratio {pl['worst_ratio']:.6f} < 1.05")


def test_criterion_4_roundness(runs, capsys):
    s, _ = single(runs, "geometry")
    sim, neg = s["checks"]["roundness_similarity"], s["checks"]["roundness_negative_control"]
    bl = s["checks"]["roundness_blender_plateau"]
    n = s["params"]["negative_steps"]
    ok = (abs(sim["theta"] - 1.0) <= 1e-8 and neg["theta"] >= 4.0 ** (n - 1)
          and max(s["params"]["blender_ns"]) <= 200 and bl["sup_theta"] < float("inf")
          and bl["worst_ratio"] < 1.1 and sim["passed"] and neg["passed"] and bl["passed"])
    report(capsys, 4, ok, f"similarity theta-1 = {sim['theta'] - 1:.2g}, control {neg['theta']:g} >= "
                          f"{4.0 ** (n - 1):g}, blender sup {bl['sup_theta']:.4g} ratio {bl['worst_ratio']:.4f}")


def test_criterion_5_distortion(runs, capsys):
    s, _ = single(runs, "geometry")
    a, b = s["checks"]["distortion_affine"], s["checks"]["distortion_bound"]
    ok = a["L1"] == 1.0 and b["L1"] <= b["bound"] and a["passed"] and b["passed"]
    report(capsys, 5, ok, f"affine L1 = {a['L1']!r}, nonlinear L1 {b['L1']:.4g} <= {b['bound']:.4g}")


def test_criterion_6_blender(runs, capsys):
    s, t = single(runs, "blender")
    ch = s["checks"]
    need = ["covering", "forward_invariance", "contraction", "hutchinson_occupancy", "ergodicity_occupancy"]
    base = all(ch[k]["passed"] and ch["perturbed_" + k]["passed"] for k in need)
    ok = (base and s["params"]["epsilon"] == 0.1 and s["params"]["n_points"] == 10 ** 6
          and s["params"]["perturbation"] == 1e-3
          and ch["hutchinson_occupancy"]["occupancy"] == 1.0
          and ch["perturbed_hutchinson_occupancy"]["occupancy"] == 1.0
          and ch["ergodicity_occupancy"]["occupancy"] >= 0.99
          and ch["perturbed_ergodicity_occupancy"]["occupancy"] >= 0.99 and s["passed"] and t <= 600)
    report(capsys, 6, ok, f"occupancy {ch['hutchinson_occupancy']['occupancy']}/"
                          f"{ch['perturbed_hutchinson_occupancy']['occupancy']}, ergodic "
                          f"{ch['ergodicity_occupancy']['occupancy']}/{ch['perturbed_ergodicity_occupancy']['occupancy']}"
                          f", {t:.1f}s")


def test_criterion_7_normal_form(runs, capsys):
    s, _ = single(runs, "sphere")
    c = s["checks"]["normal_form"]
    p = s["params"]
    ok = (p["normal_form_dim"] == 3 and p["normal_form_samples"] == 100 and p["normal_form_kappa"] == 1.1
          and c["worst_residual"] <= 1e-8 and c["all_diagonal_condition"] and c["passed"])
    report(capsys, 7, ok, f"worst residual {c['worst_residual']:.3g} over 100 samples")


def test_criterion_8_sphere_derivative(runs, capsys):
    s, _ = single(runs, "sphere")
    fd, inst = s["checks"]["sphere_derivative_fd"], s["checks"]["sphere_derivative_instance"]
    ok = (s["params"]["fd_samples"] == 10 ** 4 and fd["worst_relative"] <= 1e-6
          and abs(inst["co_norm"] - 2.0) <= 1e-9 and abs(inst["restricted_norm"] - 2 ** -0.5) <= 1e-9)
    report(capsys, 8, ok, f"fd worst {fd['worst_relative']:.3g}, m(D) {inst['co_norm']!r}, "
                          f"restricted {inst['restricted_norm']!r}")


def test_criterion_9_scan(runs, capsys):
    s, t = single(runs, "sphere")
    p = s["params"]
    sc, cert = s["checks"]["scan_coverage"], s["checks"]["theorem_A_certificate"]
    ok = (p["dim"] == 2 and p["n_rotations"] == 2 and p["grid_samples"] == 1000 and p["max_word_len"] == 12
          and p["refinement"] == 4 and sc["coverage"] == 1.0 and cert["passed"]
          and cert["worst_margin"] > cert["slack_times_resolution"] and t <= 300)
    report(capsys, 9, ok, f"coverage {sc['coverage']}, certificate {cert['worst_margin']:.4g} > "
                          f"{cert['slack_times_resolution']:.4g}, {t:.1f}s")


def test_criterion_10_determinism(runs, capsys):
    same = {k: runs[k, 1]["bytes"] == runs[k, 4]["bytes"] and runs[k, 1]["bytes"] != b"" for k in KINDS}
    codes = {k: (runs[k, 1]["code"], runs[k, 4]["code"]) for k in KINDS}
    ok = all(same.values()) and all(c == (0, 0) for c in codes.values())
    report(capsys, 10, ok, f"identical summaries {same}, exit codes {codes}")
