import json

import numpy as np
from hypothesis import given, strategies as st

from qcblender.linalg import rotation2
from qcblender.maps import (AffineMap, Ball, BumpPerturbedMap, ComposedMap, GeneratorFamily, NewtonInverse,
                            ProjectiveMap, family_from_dict)

seeds = st.integers(0, 2 ** 32 - 1)


def bump(seed, size=1e-2):
    rng = np.random.default_rng(seed)
    base = AffineMap(0.8 * rotation2(rng.uniform(0, 6)), rng.uniform(-0.1, 0.1, 2))
    return BumpPerturbedMap(base, size * rng.standard_normal((2, 6)))


def test_ball_margin():
    B = Ball(np.zeros(2), 2.0)
    assert np.allclose(B.margin(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])), [1.0, 0.5, 0.0])
    assert np.isinf(Ball(np.zeros(2), None).margin(np.zeros((1, 2))))[0]


def test_affine_inverse_and_fixed_point():
    f = AffineMap(0.5 * rotation2(0.3), np.array([0.2, -0.1]))
    x = np.array([[0.3, 0.4]])
    assert np.allclose(f.inverse()(f(x)), x, atol=1e-15)
    p = f.fixed_point()
    assert np.allclose(f(p[None])[0], p, atol=1e-15)


@given(seeds)
def test_bump_derivative_matches_finite_differences(seed):
    f = bump(seed)
    x = np.random.default_rng(seed).uniform(-1, 1, (5, 2))
    h = 1e-6
    J = f.tangent_derivative(x)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (f(x + e) - f(x - e)) / (2 * h)
        assert np.allclose(J[..., j], fd, atol=1e-8)


def test_bump_vanishes_outside_support():
    f = bump(1, size=1.0)
    x = np.array([[2.5, 0.0], [0.0, -3.0]])
    assert np.array_equal(f(x), f.base(x))


@given(seeds)
def test_newton_inverse_round_trip(seed):
    f = bump(seed)
    g = NewtonInverse(f, guess=f.base.inverse())
    x = np.random.default_rng(seed).uniform(-0.5, 0.5, (20, 2))
    assert np.allclose(f(g(x)), x, atol=1e-13)
    assert np.allclose(g.tangent_derivative(x) @ f.tangent_derivative(g(x)), np.eye(2), atol=1e-12)


@given(seeds, st.integers(1, 5))
def test_affine_composition_is_exact(seed, k):
    rng = np.random.default_rng(seed)
    maps = [AffineMap(0.7 * rotation2(rng.uniform(0, 6)) @ np.diag([1.0, 0.8]), rng.uniform(-1, 1, 2))
            for _ in range(k)]
    L, c = np.eye(2), np.zeros(2)
    for m in maps:
        L, c = m.linear @ L, m.linear @ c + m.offset
    x = rng.uniform(-1, 1, (10, 2))
    y = x
    for m in maps:
        y = m(y)
    assert np.allclose(y, x @ L.T + c, atol=1e-10)
    C = ComposedMap(*maps[::-1])
    assert np.allclose(C(x), y, atol=1e-12)
    assert np.allclose(C.tangent_derivative(x[:1])[0], L, atol=1e-12)


def test_family_serialization_round_trip():
    fam = GeneratorFamily([AffineMap(np.diag([0.5, 0.25]), np.array([0.1, 0.2])), bump(3),
                           ComposedMap(AffineMap(rotation2(0.1)), AffineMap(np.eye(2) * 0.3))],
                          ["a", "b", "c"], {"eps": 0.1})
    back = family_from_dict(json.loads(json.dumps(fam.to_dict())))
    x = np.random.default_rng(0).uniform(-1, 1, (7, 2))
    for f, g in zip(fam, back):
        assert np.array_equal(f(x), g(x))
    assert back.labels == ["a", "b", "c"] and back.metadata == {"eps": 0.1}


def test_apply_indexed_matches_pointwise():
    rng = np.random.default_rng(2)
    fam = GeneratorFamily([AffineMap(0.5 * rotation2(a), rng.uniform(-1, 1, 2)) for a in (0.1, 0.7, 2.0)])
    x = rng.uniform(-1, 1, (30, 2))
    idx = rng.integers(0, 3, 30)
    y = fam.apply_indexed(idx, x)
    for k in range(30):
        assert np.allclose(y[k], fam[idx[k]](x[k][None])[0], atol=1e-15)


def test_projective_map_is_unit():
    A = np.diag([2.0, 1.0, 0.5])
    x = np.array([[1.0, 1.0, 1.0]]) / np.sqrt(3)
    y = ProjectiveMap(A)(x)
    assert np.allclose(y, np.array([[2, 1, 0.5]]) / np.linalg.norm([2, 1, 0.5]), atol=1e-15)
