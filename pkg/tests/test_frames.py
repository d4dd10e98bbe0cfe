import numpy as np
import pytest
from hypothesis import given, strategies as st

from qcblender.frames import FramePoint, canonical_tangent_basis, frame_size, identity_frame, push_frame
from qcblender.linalg import conformality, normalized, rotation2
from qcblender.maps import AffineMap, ComposedMap, ProjectiveMap

seeds = st.integers(0, 2 ** 32 - 1)


def unit(seed, n):
    g = np.random.default_rng(seed).standard_normal(n)
    return g / np.linalg.norm(g)


def sl(seed, n, scale=0.5):
    M = np.eye(n) + scale * np.random.default_rng(seed).standard_normal((n, n))
    if np.linalg.det(M) < 0:
        M[:, 0] *= -1
    return normalized(M)


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_orthonormal_frame_size(d):
    assert abs(frame_size(identity_frame("euclidean", np.zeros(d))) - np.sqrt(d)) < 1e-15


def test_frame_size_diagonal_and_orthogonal_invariance():
    w = FramePoint("euclidean", np.zeros(2), np.diag([2.0, 0.5]))
    assert abs(frame_size(w) - np.sqrt(4.25)) < 1e-15
    wq = FramePoint("euclidean", np.zeros(2), rotation2(0.4) @ w.frame)
    assert abs(frame_size(wq) - frame_size(w)) < 1e-14


def test_frame_validation():
    with pytest.raises(ValueError):
        FramePoint("euclidean", np.zeros(2), np.diag([2.0, 1.0]))
    with pytest.raises(ValueError):
        FramePoint("sphere", np.array([1.0, 1.0, 0.0]), np.eye(2))


def test_tangent_basis_at_north_pole_is_identity_chart():
    B = canonical_tangent_basis(np.array([0.0, 0.0, 1.0]))
    assert np.array_equal(B, np.eye(3)[:, :2])


def test_tangent_basis_at_e1():
    x = np.array([1.0, 0.0, 0.0])
    B = canonical_tangent_basis(x)
    assert np.allclose(B.T @ B, np.eye(2), atol=1e-12) and np.allclose(B.T @ x, 0, atol=1e-12)


def test_tangent_basis_antipode_branch():
    x = np.array([0.0, 0.0, -1.0])
    B = canonical_tangent_basis(x)
    assert np.allclose(B.T @ B, np.eye(2), atol=1e-12) and np.allclose(B.T @ x, 0, atol=1e-12)
    assert np.allclose(B[:, 0], [-1.0, 0.0, 0.0])


@given(seeds, st.integers(1, 4))
def test_tangent_basis_orthogonal_to_point(seed, d):
    x = unit(seed, d + 1)
    B = canonical_tangent_basis(x)
    assert np.allclose(B.T @ x, 0, atol=1e-12) and np.allclose(B.T @ B, np.eye(d), atol=1e-12)


def test_push_identity():
    w = FramePoint("euclidean", np.array([0.1, 0.2]), rotation2(0.3))
    v = push_frame(AffineMap(np.eye(2)), w)
    assert np.array_equal(v.base, w.base) and np.allclose(v.frame, w.frame, rtol=1e-15)


def test_push_affine_drops_lambda():
    D = np.array([[1.2, 0.3], [0.1, 0.9]])
    D = normalized(D)
    lam, v = 0.9, np.array([0.01, -0.02])
    f = AffineMap(lam * np.linalg.inv(D), v)
    w = FramePoint("euclidean", np.array([0.3, 0.1]), rotation2(0.2))
    p = push_frame(f, w)
    assert np.allclose(p.frame, normalized(np.linalg.inv(D)) @ w.frame, atol=1e-14)


def test_push_sphere_diagonal_at_pole():
    A = np.diag([2.0, 1.0, 0.5])
    p = push_frame(ProjectiveMap(A), identity_frame("sphere", np.array([0.0, 0.0, 1.0])))
    assert np.allclose(p.frame, np.diag([np.sqrt(2), 1 / np.sqrt(2)]), atol=1e-12)
    assert np.allclose(p.base, [0, 0, 1])


@given(seeds, seeds)
def test_push_chain_rule_sphere(s1, s2):
    f, g = ProjectiveMap(sl(s1, 3)), ProjectiveMap(sl(s2, 3))
    x = unit(s1 ^ s2, 3)
    w = identity_frame("sphere", x)
    a = push_frame(g, push_frame(f, w))
    for b in (push_frame(ComposedMap(g, f), w), push_frame(ProjectiveMap(g.matrix @ f.matrix), w)):
        assert np.allclose(a.base, b.base, atol=1e-10) and np.allclose(a.frame, b.frame, atol=1e-8)


def test_push_preserves_unit_determinant_many():
    rng = np.random.default_rng(5)
    worst = 0.0
    for k in range(10000):
        A = sl(int(rng.integers(2 ** 31)), 3)
        x = rng.standard_normal(3)
        x /= np.linalg.norm(x)
        p = push_frame(ProjectiveMap(A), identity_frame("sphere", x))
        worst = max(worst, abs(abs(np.linalg.det(p.frame)) - 1))
    assert worst <= 1e-8


@given(seeds)
def test_gauge_invariance_of_size_and_conformality(seed):
    # another deterministic orthonormal tangent basis: the canonical one rotated by a fixed angle
    # moderate distortion keeps kappa of order 10, so float noise stays far below the tolerance
    rng = np.random.default_rng(seed)
    mats = [sl(int(rng.integers(2 ** 31)), 3, scale=0.2) for _ in range(5)]
    x = unit(seed, 3)
    Q = rotation2(0.77)
    w = identity_frame("sphere", x)
    F, F2, y = w.frame, Q.T @ w.frame, x
    for A in mats:
        fA = ProjectiveMap(A)
        G = normalized(fA.tangent_derivative(y[None])[0])
        F = G @ F
        F2 = Q.T @ G @ Q @ F2
        y = fA(y[None])[0]
    assert abs(frame_size(F) - frame_size(F2)) < 1e-8
    assert abs(conformality(F) - conformality(F2)) < 1e-8


def test_frame_json_round_trip():
    w = FramePoint("sphere", unit(3, 3), normalized(np.array([[1.0, 0.2], [0.1, 1.3]])))
    v = FramePoint.from_json(w.to_json())
    assert np.array_equal(v.base, w.base) and np.array_equal(v.frame, w.frame)
