import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qcblender.linalg import co_norm, conformality, normalized, rotation2
from qcblender.frames import canonical_tangent_basis
from qcblender.maps import ProjectiveMap
from qcblender.sampling import t1_sphere_grid
from qcblender.sphere import (NormalFormError, check_diagonal_condition, contraction_margins, diagonal_model,
                              directional_contraction_scan, normal_form, pole_rotation, random_rotations,
                              signed_permutation, sphere_derivative, sphere_map, theorem_A_certificate)

E3 = np.array([0.0, 0.0, 1.0])
E1 = np.array([1.0, 0.0, 0.0])


def random_sl(n, rng):
    M = rng.standard_normal((n, n))
    if np.linalg.det(M) < 0:
        M[0] *= -1
    return M / np.linalg.det(M) ** (1.0 / n)


def test_sphere_map_examples():
    R = random_rotations(3, 1, 0)[0]
    x = np.array([0.6, 0.0, 0.8])
    assert np.allclose(sphere_map(R, x), R @ x, atol=1e-15)
    A = np.diag([2.0, 1.0, 0.5])
    assert np.allclose(sphere_map(A, E3), E3)
    y = np.array([2.0, 1.0, 0.5])
    assert np.allclose(sphere_map(A, np.ones(3) / np.sqrt(3)), y / np.linalg.norm(y), atol=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_sphere_map_homomorphism(seed):
    rng = np.random.default_rng(seed)
    A, B = random_sl(3, rng), random_sl(3, rng)
    x = rng.standard_normal((20, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = sphere_map(A, sphere_map(B, x))
    assert np.allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-14)
    assert np.allclose(y, sphere_map(A @ B, x), atol=1e-10)


def test_derivative_at_pole():
    A = diagonal_model(2)
    D = sphere_derivative(A, E3)
    assert np.allclose(D, np.diag([4.0, 2.0]), atol=1e-12)
    assert np.allclose(normalized(D), np.diag([np.sqrt(2), 1 / np.sqrt(2)]), atol=1e-12)
    # instance: m(D) = 2 and the normalized derivative on e1-perp has norm 2^-1/2
    a, b = contraction_margins(A, E3, E1)
    assert abs((a + 1) - 2.0) <= 1e-9
    assert abs((1 - b) - 2 ** -0.5) <= 1e-9


def test_derivative_matches_projective_map():
    rng = np.random.default_rng(4)
    A = random_sl(3, rng)
    x = rng.standard_normal((50, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    assert np.allclose(sphere_derivative(A, x), ProjectiveMap(A).tangent_derivative(x), atol=1e-12)


def test_derivative_finite_difference():
    rng = np.random.default_rng(7)
    K, h = 1000, 1e-6
    A = np.array([random_sl(3, rng) for _ in range(K)])
    x = rng.standard_normal((K, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    B = canonical_tangent_basis(x)
    y = sphere_map(A, x)
    By = canonical_tangent_basis(y)
    D = sphere_derivative(A, x)
    for j in range(2):
        u = B[:, :, j]
        # central difference along the great circle through x with velocity u
        fp = sphere_map(A, np.cos(h) * x + np.sin(h) * u)
        fm = sphere_map(A, np.cos(h) * x - np.sin(h) * u)
        col = np.einsum("kij,ki->kj", By, (fp - fm) / (2 * h))
        err = np.linalg.norm(col - D[:, :, j], axis=1) / np.linalg.norm(D, axis=(1, 2), ord=2)
        assert err.max() <= 1e-6


def test_orthogonal_is_conformal():
    x = t1_sphere_grid(2, 300)[0]
    for R in random_rotations(3, 5, 1):
        assert np.allclose(conformality(sphere_derivative(R, x)), 1.0, atol=1e-9)


def test_diagonal_condition_examples():
    assert check_diagonal_condition([2.0, 1.0, 0.5])
    assert check_diagonal_condition([2.0, 1.0, 1.0, 1.0, 0.5])
    assert not check_diagonal_condition([1.0, 1.0, 1.0])
    assert not check_diagonal_condition([0.5, 1.0, 2.0])
    assert check_diagonal_condition([2.0, 0.5])
    assert not check_diagonal_condition([0.5, 2.0])
    with pytest.raises(ValueError):
        check_diagonal_condition([2.0, -1.0, 0.5])
    with pytest.raises(ValueError):
        check_diagonal_condition([2.0])


def test_signed_permutations_are_rotations():
    for n in (2, 3, 4):
        for perm in itertools.permutations(range(n)):
            R = signed_permutation(perm)
            assert np.allclose(R @ R.T, np.eye(n)) and np.linalg.det(R) == pytest.approx(1.0)
            for i in range(n):
                assert abs(R[perm[i], i]) == 1.0


def test_normal_form_diagonal_example():
    D = np.diag([2.0, 1.0, 0.5])
    w = normal_form(D)
    r = w.result
    assert r[0] > 1 > r[2] and r[1] == pytest.approx(1.0)
    # logs of the output: 2 (2! + 1!) log 2 on the top entry
    assert np.allclose(r, [64.0, 1.0, 1 / 64.0], rtol=1e-12)
    assert check_diagonal_condition(r)
    assert w.residual(D) <= 1e-8
    assert np.prod(r) == pytest.approx(1.0)


def test_normal_form_rejects():
    with pytest.raises(NormalFormError):
        normal_form(random_rotations(3, 1, 2)[0])
    with pytest.raises(ValueError):
        normal_form(np.diag([2.0, 1.0, 1.0]))


def test_normal_form_conjugation_invariant():
    rng = np.random.default_rng(3)
    D = random_sl(3, rng)
    Q, P = random_rotations(3, 2, 5)
    a, b = normal_form(D), normal_form(Q @ D @ P)
    assert check_diagonal_condition(a.result) == check_diagonal_condition(b.result)
    assert np.allclose(a.result, b.result, rtol=1e-8)


def test_normal_form_random_sl3():
    rng = np.random.default_rng(0)
    done = 0
    while done < 20:
        D = random_sl(3, rng)
        if conformality(D) < 1.1:
            continue
        w = normal_form(D)
        assert w.residual(D) <= 1e-8 and check_diagonal_condition(w.result)
        for R in w.rotations:
            assert np.allclose(R @ R.T, np.eye(3), atol=1e-10) and np.linalg.det(R) > 0
        done += 1


def test_normal_form_sl2():
    D = np.array([[2.0, 1.0], [0.0, 0.5]])
    w = normal_form(D)
    assert w.residual(D) <= 1e-8 and check_diagonal_condition(w.result)


def test_scan_pole_needs_empty_word():
    rep = directional_contraction_scan(random_rotations(3, 2, 0), diagonal_model(2), (E3[None], E1[None]))
    assert rep.coverage == 1.0
    assert rep.word_length[0] == 0 and rep.net.word(int(rep.word_index[0])) == []


def test_scan_identity_generators_cover_only_the_cone():
    a = np.array([0.0, 0.05, 0.3, 1.0, 2.0])
    x = np.stack([np.sin(a), np.zeros_like(a), np.cos(a)], axis=1)
    v = np.stack([np.cos(a), np.zeros_like(a), -np.sin(a)], axis=1)
    rep = directional_contraction_scan([np.eye(3)], diagonal_model(2), (x, v))
    assert rep.covered.tolist() == [True, True, False, False, False]
    assert rep.coverage == pytest.approx(2 / 5)


def test_scan_rejects_bad_inputs():
    with pytest.raises(ValueError):
        directional_contraction_scan([np.eye(3)], np.eye(3), (E3[None], E1[None]))
    with pytest.raises(ValueError):
        directional_contraction_scan([np.diag([1.0, 1.0, 2.0])], diagonal_model(2), (E3[None], E1[None]))


def test_scan_words_reproduce_margins():
    grid = t1_sphere_grid(2, 100)
    rep = directional_contraction_scan(random_rotations(3, 2, 5), diagonal_model(2), grid)
    assert rep.coverage == 1.0
    gens = [g for R in random_rotations(3, 2, 5) for g in (R, R.T)]
    for i, w, em, cm in list(rep.word_rows())[::10]:
        R = np.eye(3)
        for k in w:
            R = gens[k] @ R
        a, b = contraction_margins(diagonal_model(2) @ R, grid[0][i], grid[1][i])
        assert a == pytest.approx(em, abs=1e-12) and b == pytest.approx(cm, abs=1e-12)
        assert a > 0 and b > 0


def test_circle_certificate():
    A = diagonal_model(1)
    rots = [rotation2(t) for t in 2 * np.pi * np.arange(16) / 16]
    grid = t1_sphere_grid(1, 400)
    cert = theorem_A_certificate(np.array([A @ R for R in rots]), grid)
    assert cert.passed and cert.kind == "theorem_A"
    without = theorem_A_certificate(np.array(rots), grid)
    assert not without.passed
    assert without.worst_margin <= 1e-12
    assert without.witnesses


def test_certificate_refinement_continuity():
    rep = directional_contraction_scan(random_rotations(3, 2, 5), diagonal_model(2), t1_sphere_grid(2, 200))
    fam, _ = rep.family_matrices()
    coarse = theorem_A_certificate(fam, t1_sphere_grid(2, 1000))
    fine = theorem_A_certificate(fam, t1_sphere_grid(2, 4000))
    assert coarse.passed == (coarse.worst_margin > coarse.lipschitz_slack * coarse.grid_resolution)
    assert abs(fine.worst_margin - coarse.worst_margin) <= coarse.lipschitz_slack * coarse.grid_resolution
    assert fine.grid_resolution < coarse.grid_resolution


def test_pole_rotation():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = rng.standard_normal(3)
        p /= np.linalg.norm(p)
        R = pole_rotation(p)
        assert np.allclose(R @ p, E3, atol=1e-12)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12) and np.linalg.det(R) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        pole_rotation(-E3)


def test_contraction_margins_d1():
    a, b = contraction_margins(diagonal_model(1), np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert a == pytest.approx(3.0) and b == 1.0
    assert co_norm(sphere_derivative(diagonal_model(1), np.array([0.0, 1.0]))) == pytest.approx(4.0)
