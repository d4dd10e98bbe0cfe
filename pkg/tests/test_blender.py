import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qcblender.blender import (Occupancy, build_affine_blender, check_translation_cover, ergodicity_probe,
                               family_from_blender_dict, generator_groups, grid_cells, hutchinson_attractor,
                               minimality_probe, occupancy, perturb_family, perturbation_size, translation_set,
                               verify_blender_assumptions)
from qcblender.linalg import co_norm, normalized, operator_norm
from qcblender.maps import AffineMap, Ball, GeneratorFamily


def test_construction_sizes(blender2):
    B = blender2
    assert len(B.generators) == 4
    assert len(B.J) == 13
    assert len(B.family) == 4 * 13
    assert B.lam == pytest.approx(0.9)
    assert B.family.is_affine()


def test_contraction_below_one_minus_eps2(blender2):
    for f in blender2.family:
        assert operator_norm(f.linear) < 1.0 - blender2.epsilon ** 2


def test_linear_parts_match_generators(blender2):
    for f in blender2.family:
        assert np.allclose(normalized(f.linear), normalized(np.linalg.inv(f.source_D)), atol=1e-10)
        assert f.lam == blender2.lam


def test_fixed_points_inside_unit_ball(blender2):
    for f in blender2.family:
        x = f.fixed_point()
        assert np.linalg.norm(x) < 1
        assert np.allclose(f(x[None])[0], x, atol=1e-15)


@pytest.mark.parametrize("eps", [0.1, 0.05, 0.02])
def test_translation_set_scale_invariant(eps):
    J = translation_set(2, eps)
    assert len(J) == 13
    assert np.allclose(J / eps ** 2, translation_set(2, 0.1) / 0.01, atol=1e-12)
    assert np.all(np.linalg.norm(J, axis=1) < eps ** 2)
    gap, vprime = check_translation_cover(J, eps)
    assert gap < vprime


def test_translation_set_d3():
    J = translation_set(3, 0.05)
    assert len(J) == len(translation_set(3, 0.02))
    gap, vprime = check_translation_cover(J, 0.05)
    assert gap < vprime


@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
@settings(max_examples=30)
def test_composition_exact(blender2, seed, k):
    rng = np.random.default_rng(seed)
    maps = [blender2.family[int(i)] for i in rng.integers(0, len(blender2.family), k)]
    L, c = np.eye(2), np.zeros(2)
    for f in maps:
        L, c = f.linear @ L, f.linear @ c + f.offset
    X = rng.uniform(-1, 1, (50, 2))
    Y = X
    for f in maps:
        Y = f(Y)
    assert np.allclose(Y, X @ L.T + c, atol=1e-10)


def test_assumptions_pass(blender2):
    rep = verify_blender_assumptions(blender2)
    assert rep["passed"]
    assert rep["covering"]["passed"]
    assert rep["forward_invariance"]["exact"] and rep["forward_invariance"]["sup_image_radius"] < 1
    assert rep["contraction"]["below_1_minus_eps2"]
    assert rep["inverse_expanding"]["passed"] and rep["inverse_expanding"]["inf_co_norm"] > 1
    cert = rep["covering"]["certificate"]
    assert cert["kind"] == "split"
    assert cert["worst_margin"] > cert["lipschitz_slack"] * cert["grid_resolution"]


def test_inverse_family_expanding(blender2):
    for g in blender2.family.inverse():
        assert co_norm(g.linear) > 1


def test_dropping_translations_breaks_base_covering(blender2):
    B = blender2
    keep = [k for k, f in enumerate(B.family) if np.all(f.offset == 0)]
    assert len(keep) == 4
    fam = GeneratorFamily([B.family[k] for k in keep])
    rep = verify_blender_assumptions(replace(B, J=np.zeros((1, 2))), fam, n_base=500, n_fiber=1000)
    assert not rep["covering"]["passed"]
    assert rep["covering"]["certificate"]["params"]["worst_base"] < 0


def test_identity_generator_breaks_fiber_covering(blender2):
    B = blender2
    maps = []
    for f in B.family:
        if f.source_D is B.generators[0]:
            f = AffineMap(B.lam * np.eye(2), f.offset, source_D=np.eye(2), lam=B.lam)
        maps.append(f)
    rep = verify_blender_assumptions(B, GeneratorFamily(maps), n_base=500, n_fiber=2000)
    cert = rep["covering"]["certificate"]
    assert not rep["covering"]["passed"]
    assert cert["params"]["worst_fiber"] < 0
    assert cert["witnesses"]


def test_generator_groups(blender2):
    groups = generator_groups(blender2.family)
    assert len(groups) == 4 and all(len(g) == 13 for g in groups)
    pert = perturb_family(blender2.family, 1e-3, seed=1)
    assert generator_groups(pert) == groups


def test_single_map_cloud_collapses():
    f = AffineMap(0.5 * np.eye(2), np.array([0.1, -0.2]))
    cloud = hutchinson_attractor(GeneratorFamily([f]), 1000, n_particles=100, burn_in=60)
    assert np.max(np.linalg.norm(cloud - f.fixed_point(), axis=1)) <= 2 * 0.5 ** 60


def test_cloud_stays_in_unit_ball(blender2):
    cloud = hutchinson_attractor(blender2.family, 10 ** 6, seed=3)
    assert len(cloud) == 10 ** 6
    assert np.max(np.linalg.norm(cloud, axis=1)) < 1


def test_hutchinson_fills_V(blender2):
    B = blender2
    cloud = hutchinson_attractor(B.family, 10 ** 6)
    occ = occupancy(cloud, B.V, B.epsilon ** 2 / 20)
    assert occ.fraction == 1.0
    assert len(occ.cells) > 1000


def test_hutchinson_thread_independent(blender2):
    a = hutchinson_attractor(blender2.family, 20000, n_particles=10000, threads=1)
    b = hutchinson_attractor(blender2.family, 20000, n_particles=10000, threads=4)
    assert np.array_equal(a, b)


def test_grid_cells_inside_ball():
    V = Ball(np.zeros(2), 1.0)
    cells = grid_cells(V, 0.1)
    corners = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
    assert np.all(np.linalg.norm((cells[:, None] + corners) * 0.1, axis=-1) <= 1.0 + 1e-12)
    occ = Occupancy(V, 0.1)
    occ.add((cells + 0.5) * 0.1)
    assert occ.fraction == 1.0 and occ.missing() == []


def test_minimality_trivial_rho(blender2):
    B = blender2
    r = minimality_probe(B.family, np.zeros(2), 2 * B.epsilon ** 2, 5, B.V)
    assert r["covered"] and r["steps"] <= 1


def test_minimality_from_fixed_point(blender2):
    B = blender2
    f = B.family[0]
    r = minimality_probe(B.family, f.fixed_point(), B.epsilon ** 2 / 20, 100, B.V)
    assert r["covered"]


def test_minimality_seeded_starts(blender2):
    B = blender2
    rng = np.random.default_rng(11)
    steps = []
    for x0 in rng.uniform(-0.7, 0.7, (8, 2)):
        r = minimality_probe(B.family, x0, B.epsilon ** 2 / 20, 100, B.V)
        assert r["covered"]
        steps.append(r["steps"])
    assert max(steps) <= 100


def test_minimality_budget_exhausted(blender2):
    B = blender2
    r = minimality_probe(B.family, np.array([0.9, 0.0]), B.epsilon ** 2 / 20, 3, B.V)
    assert not r["covered"] and r["steps"] is None


def test_ergodicity_seed_ball_is_V(blender2):
    B = blender2
    e = ergodicity_probe(B.family, np.zeros(2), B.epsilon ** 2, 0, 10, B.epsilon ** 2 / 20, B.V)
    assert e["fractions"] == [1.0]
    assert e["surrogate"] is True


def test_ergodicity_tiny_seed_fills_and_is_monotone(blender2):
    B = blender2
    e = ergodicity_probe(B.family, np.zeros(2), B.epsilon ** 2 / 100, 30, 20000, B.epsilon ** 2 / 20, B.V)
    f = np.array(e["fractions"])
    assert np.all(np.diff(f) >= 0)
    assert f[0] < 0.05
    assert e["final"] >= 0.99


def test_ergodicity_seed_ball_outside_V(blender2):
    B = blender2
    with pytest.raises(ValueError):
        ergodicity_probe(B.family, np.array([0.009, 0.0]), 0.002, 1, 10, 0.001, B.V)


def test_perturbation_size_pinned(blender2):
    pert = perturb_family(blender2.family, 1e-3, seed=0)
    sizes = [perturbation_size(p) for p in pert]
    assert np.allclose(sizes, 1e-3, rtol=1e-12)
    again = perturb_family(blender2.family, 1e-3, seed=0)
    X = np.random.default_rng(0).uniform(-1, 1, (20, 2))
    assert all(np.array_equal(a(X), b(X)) for a, b in zip(pert, again))


@pytest.mark.slow
def test_perturbed_blender_passes(blender2):
    B = blender2
    pert = perturb_family(B.family, 1e-3, seed=0)
    rep = verify_blender_assumptions(B, pert)
    assert rep["passed"], rep["covering"]["certificate"]
    assert not rep["forward_invariance"]["exact"]
    cloud = hutchinson_attractor(pert, 10 ** 6)
    assert occupancy(cloud, B.V, B.epsilon ** 2 / 20).fraction == 1.0
    e = ergodicity_probe(pert, np.zeros(2), B.epsilon ** 2 / 100, 30, 20000, B.epsilon ** 2 / 20, B.V)
    assert e["final"] >= 0.99


def test_family_json_round_trip(blender2, tmp_path):
    path = tmp_path / "family.json"
    path.write_text(json.dumps(blender2.to_dict()))
    fam = family_from_blender_dict(json.loads(path.read_text()))
    assert fam.labels == blender2.family.labels
    for a, b in zip(fam, blender2.family):
        assert np.array_equal(a.linear, b.linear)
        assert np.array_equal(a.offset, b.offset)


def test_epsilon_validation():
    with pytest.raises(ValueError):
        build_affine_blender(2, epsilon=0.3)
