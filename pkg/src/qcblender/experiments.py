"""Experiment runners behind the command line.

Each runner takes a parameter dict (defaults already merged) and a master
seed, and returns an Outcome: JSON-ready results, named checks, CSV tables
and extra JSON files. Sub-task seeds are SeedSequence(entropy=seed,
spawn_key=(k,)) with the fixed task counters listed in SEED_KEYS.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covering import (GroupWindow, _plain, auto_tune_parameters, build_simplex_generators, perturb_generators,
                       verify_covering_group)
from .linalg import conformality, haar_orthogonal, rotation2
from .maps import AffineMap, Ball, GeneratorFamily, linear_map
from .parallel import map_ordered, spawn_seeds
from .sampling import ball_points

SEED_KEYS = {"perturb": 1, "starts": 2, "random": 3, "key_lemma": 4, "roundness": 5, "distortion": 6,
             "hutchinson": 7, "ergodicity": 8, "minimality": 9, "derivative": 10, "normal_form": 11,
             "rotations": 12, "blender_perturb": 13, "verify": 14}


def task_rng(seed, name):
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(SEED_KEYS[name],)))


def task_seed(seed, name):
    """A derived integer seed, for APIs that take one."""
    return int(task_rng(seed, name).integers(0, 2 ** 63 - 1))


@dataclass
class Outcome:
    results: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)     # name -> (header, rows)
    files: dict = field(default_factory=dict)      # name -> JSON-ready object

    def check(self, name, passed, **detail):
        self.checks[name] = dict(_plain(detail), passed=bool(passed))

    @property
    def passed(self):
        return all(c["passed"] for c in self.checks.values())


# ------------------------------------------------------------------ covering

def run_covering(p, seed):
    out = Outcome()
    d = p["dim"]
    if p["auto_tune"] or p["t"] is None or p["r"] is None:
        t, r, cert = auto_tune_parameters(d, p["t_range"], p["r_range"], p["grid_per_axis"])
        gens, region = build_simplex_generators(d, t, r)
    else:
        t, r = p["t"], p["r"]
        gens, region = build_simplex_generators(d, t, r)
        cert = verify_covering_group(gens, region, p["grid_per_axis"])
    out.results.update(t=t, r=r, certificate=cert.to_dict())
    out.check("certificate", cert.passed, worst_margin=cert.worst_margin,
              slack_times_resolution=cert.lipschitz_slack * cert.grid_resolution)
    if p["perturbation"] > 0:
        pg = perturb_generators(gens, p["perturbation"], task_rng(seed, "perturb"))
        pc = verify_covering_group(pg, region, p["grid_per_axis"])
        out.results["perturbed_certificate"] = pc.to_dict()
        out.check("perturbed_certificate", pc.passed, delta=p["perturbation"], worst_margin=pc.worst_margin,
                  slack_times_resolution=pc.lipschitz_slack * pc.grid_resolution)
    out.tables["generators"] = (["index"] + [f"D{i}{j}" for i in range(d) for j in range(d)],
                                [[k] + list(np.ravel(D)) for k, D in enumerate(gens)])
    return out


# -------------------------------------------------------------------- branch

def _group_setup(p):
    d = p["dim"]
    t, r, cert = auto_tune_parameters(d, p["t_range"], p["r_range"], p["grid_per_axis"])
    gens, region = build_simplex_generators(d, t, r)
    family = GeneratorFamily([linear_map(D) for D in gens], [f"D{k}" for k in range(len(gens))],
                             {"t": t, "r": r})
    window = GroupWindow(region, Ball(np.zeros(d), None))
    return family, window, cert


def run_branch(p, seed):
    from .branch import branch_stats, greedy_conformal_branches, random_branches

    out = Outcome()
    d, n_seeds, n_steps = p["dim"], p["n_seeds"], p["n_steps"]
    family, window, cert = _group_setup(p)
    H = float(window.frame_bound)
    bound = H ** (d * d)
    _, F0 = window.sample_interior(n_seeds, task_rng(seed, "starts"))
    X0 = np.zeros((n_seeds, d))
    rngs = spawn_seeds(task_seed(seed, "starts"), n_seeds) if p["tie_break"] == "seeded-random" else None
    greedy = greedy_conformal_branches(family, window, (X0, F0), n_steps, p["tie_break"], rngs)
    rnd = random_branches(family, X0, n_steps, spawn_seeds(task_seed(seed, "random"), n_seeds))
    gs = [branch_stats(b) for b in greedy]
    rs = [branch_stats(b) for b in rnd]
    gk = np.array([s["max_kappa"] for s in gs])
    sl = np.array([s["lyapunov_slope"] for s in rs])
    rk = np.array([s["max_kappa"] for s in rs])
    frac = float(np.mean(sl > 0))
    out.results.update(t=family.metadata["t"], r=family.metadata["r"], tuning_margin=cert.worst_margin,
                       window_bound=H, kappa_bound=bound, greedy_max_kappa=float(gk.max()),
                       greedy_kappa_quantiles=np.quantile(gk, [0.0, 0.5, 0.9, 1.0]).tolist(),
                       random_slope_mean=float(sl.mean()), random_slope_min=float(sl.min()),
                       random_positive_fraction=frac, random_max_kappa=float(np.max(rk)),
                       n_seeds=n_seeds, n_steps=n_steps)
    out.check("greedy_kappa_bounded", gk.max() <= bound, max_kappa=gk.max(), bound=bound)
    out.check("random_slope_positive", sl.mean() > 0 and frac >= p["positive_fraction"],
              mean_slope=sl.mean(), positive_fraction=frac, required=p["positive_fraction"])
    out.tables["branches"] = (["seed_index", "greedy_max_kappa", "greedy_min_expansion", "random_slope",
                               "random_max_kappa"],
                              [[i, gs[i]["max_kappa"], gs[i]["min_expansion"], rs[i]["lyapunov_slope"],
                                rs[i]["max_kappa"]] for i in range(n_seeds)])
    b = greedy[0]
    out.tables["greedy_branch_0"] = (["step", "map_index", "kappa", "log_norm"],
                                     [[k, "" if k == 0 else int(b.map_indices[k - 1]), b.kappa_history[k],
                                       b.log_norm_history[k]] for k in range(len(b.points))])
    return out


# ------------------------------------------------------------------ geometry

def _key_lemma(p, seed, out):
    from .geometry import key_lemma_ratio, sequence_spec, telescoping_sequence

    d, N, S = p["dim"], p["n_terms"], p["n_seeds"]
    rng = task_rng(seed, "key_lemma")
    D = np.stack([telescoping_sequence(d, N, p["kappa"], p["lambda_hi"], rng) for _ in range(S)])
    C, alpha = p["C"], p["alpha"]
    xi = np.array([sequence_spec(D[b], C, alpha).xi_admissible for b in range(S)])
    g = rng.standard_normal((S, d))
    y0 = g / np.linalg.norm(g, axis=1, keepdims=True) * (xi * (1.0 - 1e-12))[:, None]
    zero, _ = key_lemma_ratio(D, y0, C, alpha, noise="zero")
    adv, run = key_lemma_ratio(D, y0, C, alpha, noise="adversarial")
    lo, mid, hi = p["window"]
    early = adv[:, lo:mid + 1].max(axis=1)
    late = adv[:, mid:hi + 1].max(axis=1)
    ratio = late / early
    out.results["key_lemma"] = {"zero_noise_max": float(np.max(np.abs(zero))), "plateau_ratio_max": float(ratio.max()),
                                "sup_ratio_max": float(run[:, -1].max()), "n_seeds": S, "n_terms": N}
    out.check("key_lemma_zero_noise", np.all(zero == 0.0), max_abs=np.max(np.abs(zero)))
    out.check("key_lemma_plateau", ratio.max() < 1.0 + p["plateau_tol"], worst_ratio=ratio.max(),
              tolerance=p["plateau_tol"])
    out.tables["key_lemma_running_max"] = (["n"] + [f"seed{b}" for b in range(min(S, 10))],
                                           [[n] + list(run[:10, n]) for n in range(0, N + 1, 10)])


def _blender_inverse_branches(p, seed, n_branches, n_steps):
    from .blender import build_affine_blender
    from .branch import greedy_conformal_branches

    B = build_affine_blender(2, p["blender_epsilon"])
    inv = B.family.inverse()
    W = B.window
    X, F = W.sample_interior(n_branches, task_rng(seed, "roundness"))
    return inv, greedy_conformal_branches(inv, W, (X, F), n_steps)


def _roundness(p, seed, out):
    from .geometry import ball_roundness, branch_maps

    rng = task_rng(seed, "roundness")
    n_sim = p["similarity_steps"]
    sim = [AffineMap(p["similarity_scale"] * rotation2(a), rng.uniform(-0.1, 0.1, 2))
           for a in rng.uniform(0, 2 * np.pi, n_sim)]
    th_sim = ball_roundness(sim, np.zeros(2), p["xi"]).theta
    out.check("roundness_similarity", abs(th_sim - 1.0) <= 1e-8, theta=th_sim)
    n_neg = p["negative_steps"]
    neg = [AffineMap(np.diag([2.0, 0.5]))] * n_neg
    th_neg = ball_roundness(neg, np.zeros(2), p["xi"], require_expanding=False).theta
    out.check("roundness_negative_control", th_neg >= 4.0 ** (n_neg - 1) * (1 - 1e-12), theta=th_neg,
              lower_bound=4.0 ** (n_neg - 1))
    ns = list(p["blender_ns"])
    inv, branches = _blender_inverse_branches(p, seed, p["blender_branches"], max(ns))
    rows, ratios, sups = [], [], []
    for i, b in enumerate(branches):
        maps = branch_maps(inv, b)
        th = np.array([ball_roundness(maps[:n], b.points[0], p["xi"]).theta for n in ns])
        sup = np.maximum.accumulate(th)
        ratios.append(th[ns.index(200)] / th[ns.index(50)])
        sups.append(sup[-1])
        rows += [[i, n, th[k], sup[k]] for k, n in enumerate(ns)]
    ratios, sups = np.array(ratios), np.array(sups)
    out.results["roundness"] = {"similarity_theta": th_sim, "negative_theta": th_neg, "negative_steps": n_neg,
                                "blender_ratio_max": float(ratios.max()), "blender_sup_theta": float(sups.max())}
    out.check("roundness_blender_plateau", np.all(np.isfinite(sups)) and ratios.max() < p["blender_ratio_tol"],
              worst_ratio=ratios.max(), sup_theta=sups.max(), tolerance=p["blender_ratio_tol"])
    out.tables["roundness_blender"] = (["branch", "n", "theta", "sup_theta"], rows)


def _distortion(p, seed, out):
    from .geometry import distortion_ratio, quadratic_contraction

    rng = task_rng(seed, "distortion")
    n = p["distortion_steps"]
    aff = [AffineMap(0.6 * haar_orthogonal(2, rng) @ np.diag([1.0, 0.7]), rng.uniform(-0.1, 0.1, 2))
           for _ in range(n)]
    ra = distortion_ratio(aff, p["distortion_R"], n, seed=task_seed(seed, "distortion"))
    out.check("distortion_affine", ra["L1"] == 1.0, L1=ra["L1"])
    quad = []
    for _ in range(n):
        A = 0.5 * haar_orthogonal(2, rng) @ np.diag([1.0, 0.8])
        quad.append(quadratic_contraction(A, 0.2 * rng.standard_normal((2, 2, 2))))
    rq = distortion_ratio(quad, p["distortion_R"], n, seed=task_seed(seed, "distortion"))
    out.check("distortion_bound", rq["L1"] <= rq["bound"], L1=rq["L1"], bound=rq["bound"])
    out.results["distortion"] = {"affine": ra, "nonlinear": rq}


GEOMETRY_PROBES = {"key_lemma": _key_lemma, "roundness": _roundness, "distortion": _distortion}


def run_geometry(p, seed):
    out = Outcome()
    for name in p["probes"]:
        GEOMETRY_PROBES[name](p, seed, out)
    return out


# ------------------------------------------------------------------- blender

def run_blender(p, seed):
    from .blender import (build_affine_blender, ergodicity_probe, hutchinson_attractor, minimality_probe,
                          occupancy, perturb_family, verify_blender_assumptions)

    out = Outcome()
    d, eps = p["dim"], p["epsilon"]
    B = build_affine_blender(d, eps, r_range=tuple(p["r_range"]), t_range=tuple(p["t_range"]),
                             grid_per_axis=p["grid_per_axis"])
    out.results["construction"] = B.params
    out.files["family.json"] = B.to_dict()
    fams = [("", B.family)]
    if p["perturbation"] > 0:
        fams.append(("perturbed_", perturb_family(B.family, p["perturbation"], task_seed(seed, "blender_perturb"))))
    rho = eps ** 2 * p["rho_factor"]
    for tag, fam in fams:
        res = {}
        if "assumptions" in p["probes"]:
            rep = verify_blender_assumptions(B, fam, seed=task_seed(seed, "verify"))
            res["assumptions"] = rep
            for k in ("covering", "forward_invariance", "contraction"):
                detail = {kk: vv for kk, vv in rep[k].items() if kk not in ("certificate", "passed")}
                if k == "covering":
                    c = rep[k]["certificate"]
                    detail.update(worst_margin=c["worst_margin"],
                                  slack_times_resolution=c["lipschitz_slack"] * c["grid_resolution"],
                                  witnesses=c["witnesses"])
                out.check(f"{tag}{k}", rep[k]["passed"], **detail)
        if "hutchinson" in p["probes"]:
            cloud = hutchinson_attractor(fam, p["n_points"], seed=task_seed(seed, "hutchinson"))
            occ = occupancy(cloud, B.V, rho)
            rmax = float(np.max(np.linalg.norm(cloud, axis=1)))
            res["hutchinson"] = {"occupancy": occ.fraction, "n_cells": len(occ.cells), "rho": rho,
                                 "max_radius": rmax, "n_points": len(cloud)}
            out.check(f"{tag}hutchinson_occupancy", occ.fraction == 1.0, occupancy=occ.fraction,
                      missing=occ.missing())
            out.check(f"{tag}hutchinson_in_U", rmax < 1.0, max_radius=rmax)
            if not tag:
                k = min(len(cloud), p["cloud_csv_points"])
                out.tables["hutchinson_cloud"] = ([f"x{i}" for i in range(d)], cloud[:k].tolist())
        if "ergodicity" in p["probes"]:
            e = ergodicity_probe(fam, np.zeros(d), eps ** 2 * p["seed_radius_factor"], p["ergodic_steps"],
                                 p["ergodic_particles"], rho, B.V, seed=task_seed(seed, "ergodicity"))
            res["ergodicity"] = e
            out.check(f"{tag}ergodicity_occupancy", e["final"] >= p["ergodic_threshold"], occupancy=e["final"],
                      threshold=p["ergodic_threshold"], surrogate=True)
            if not tag:
                out.tables["ergodicity"] = (["step", "occupancy"], [[k, f] for k, f in enumerate(e["fractions"])])
        if "minimality" in p["probes"]:
            # start 0 is the origin, the rest are seeded uniform points of the closed unit ball
            starts = np.vstack([np.zeros((1, d)), ball_points(np.zeros(d), 1.0, p["minimality_starts"] - 1,
                                                              task_rng(seed, "minimality"))])
            runs = map_ordered(lambda x0: minimality_probe(fam, x0, rho, p["minimality_steps"], B.V), starts)
            covered = all(m["covered"] for m in runs)
            steps = [m["steps"] for m in runs]
            res["minimality"] = {"n_starts": len(runs), "all_covered": covered,
                                 "max_steps": max(steps) if covered else None, "steps": steps,
                                 "approach_steps": [m["approach_steps"] for m in runs],
                                 "budget": p["minimality_steps"]}
            out.check(f"{tag}minimality", covered, max_steps=res["minimality"]["max_steps"],
                      budget=p["minimality_steps"],
                      failed_starts=[i for i, m in enumerate(runs) if not m["covered"]])
        out.results[f"{tag}probes" if tag else "probes"] = res
    return out


# -------------------------------------------------------------------- sphere

def _sphere_derivative(p, seed, out):
    from .sphere import diagonal_model, sphere_derivative, sphere_map
    from .frames import canonical_tangent_basis

    rng = task_rng(seed, "derivative")
    n, K = p["dim"] + 1, p["fd_samples"]
    A = rng.standard_normal((K, n, n))
    A /= np.abs(np.linalg.det(A))[:, None, None] ** (1.0 / n)
    x = rng.standard_normal((K, n))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    Bx = canonical_tangent_basis(x)
    y = sphere_map(A, x)
    By = canonical_tangent_basis(y)
    h = 1e-6
    D = sphere_derivative(A, x)
    worst = 0.0
    for j in range(n - 1):
        u = Bx[..., j]
        # central difference along the great circle through x with speed u
        fp = sphere_map(A, np.cos(h) * x + np.sin(h) * u)
        fm = sphere_map(A, np.cos(h) * x - np.sin(h) * u)
        fd = np.einsum("kij,ki->kj", By, (fp - fm) / (2 * h))
        rel = np.linalg.norm(fd - D[..., j], axis=1) / np.maximum(np.linalg.norm(D[..., j], axis=1), 1e-300)
        worst = max(worst, float(rel.max()))
    out.check("sphere_derivative_fd", worst <= p["fd_tol"], worst_relative=worst, tolerance=p["fd_tol"])
    res = {"fd_worst_relative": worst}
    if p["dim"] == 2:
        from .sphere import contraction_margins
        Ah = diagonal_model(2)
        e3, e1 = np.eye(3)[2], np.eye(3)[0]
        a, b = contraction_margins(Ah[None], e3[None], e1[None])
        m, rn = float(a[0] + 1.0), float(1.0 - b[0])
        res.update(instance_co_norm=m, instance_restricted_norm=rn)
        out.check("sphere_derivative_instance", abs(m - 2.0) <= 1e-9 and abs(rn - 2 ** -0.5) <= 1e-9,
                  co_norm=m, restricted_norm=rn)
    out.results["derivative"] = res


def _random_sl(n, kappa_min, rng):
    while True:
        M = rng.standard_normal((n, n))
        dt = np.linalg.det(M)
        if dt < 0:
            M[:, 0] *= -1.0
            dt = -dt
        M /= dt ** (1.0 / n)
        if conformality(M) >= kappa_min:
            return M


def _normal_form(p, seed, out):
    from .sphere import check_diagonal_condition, normal_form

    rng = task_rng(seed, "normal_form")
    n = p["normal_form_dim"]
    rows, worst, allok = [], 0.0, True
    for k in range(p["normal_form_samples"]):
        D = _random_sl(n, p["normal_form_kappa"], rng)
        w = normal_form(D)
        res = w.residual(D)
        ok = bool(check_diagonal_condition(w.result))
        worst, allok = max(worst, res), allok and ok
        rows.append([k, res, int(ok), len(w.exponents)] + list(w.result))
    out.results["normal_form"] = {"worst_residual": worst, "all_diagonal_condition": allok}
    out.check("normal_form", worst <= 1e-8 and allok, worst_residual=worst, all_diagonal_condition=allok)
    out.tables["normal_form"] = (["sample", "residual", "diagonal_condition", "n_factors"]
                                 + [f"r{i}" for i in range(n)], rows)


def _scan(p, seed, out):
    from .sampling import t1_sphere_grid
    from .sphere import diagonal_model, directional_contraction_scan, random_rotations, theorem_A_certificate

    d = p["dim"]
    rseed = task_seed(seed, "rotations") if p["rotation_seed"] is None else p["rotation_seed"]
    rots = random_rotations(d + 1, p["n_rotations"], rseed)
    A_hat = diagonal_model(d)
    grid = t1_sphere_grid(d, p["grid_samples"], seed=task_seed(seed, "rotations"))
    rep = directional_contraction_scan(rots, A_hat, grid, p["max_word_len"])
    out.results["scan"] = rep.summary()
    out.check("scan_coverage", rep.coverage == 1.0, coverage=rep.coverage,
              uncovered=[[grid[0][i].tolist(), grid[1][i].tolist()] for i in np.nonzero(~rep.covered)[0][:5]])
    out.tables["scan_words"] = (["sample", "word", "expansion_margin", "contraction_margin"],
                                [[i, " ".join(map(str, w)), a, b] for i, w, a, b in rep.word_rows()])
    if rep.coverage == 1.0:
        fam, _ = rep.family_matrices()
        fine = t1_sphere_grid(d, p["grid_samples"] * p["refinement"], seed=task_seed(seed, "rotations") + 1)
        cert = theorem_A_certificate(fam, fine)
        out.results["theorem_A"] = cert.to_dict()
        out.check("theorem_A_certificate", cert.passed, worst_margin=cert.worst_margin,
                  slack_times_resolution=cert.lipschitz_slack * cert.grid_resolution, witnesses=cert.witnesses)
    else:
        out.check("theorem_A_certificate", False, reason="scan did not cover the grid")


SPHERE_PROBES = {"derivative": _sphere_derivative, "normal_form": _normal_form, "scan": _scan}


def run_sphere(p, seed):
    out = Outcome()
    for name in p["probes"]:
        SPHERE_PROBES[name](p, seed, out)
    return out


RUNNERS = {"covering": run_covering, "branch": run_branch, "geometry": run_geometry, "blender": run_blender,
           "sphere": run_sphere}
