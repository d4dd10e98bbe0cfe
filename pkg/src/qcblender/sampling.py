"""Deterministic point sets: directions, sphere grids, unit tangent bundles."""

from __future__ import annotations

import numpy as np

from .frames import canonical_tangent_basis

GOLDEN = (1.0 + 5.0 ** 0.5) / 2.0


def fibonacci_sphere(n):
    """n quasi-uniform unit vectors in R^3."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * i / GOLDEN
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)


def unit_directions(d, n, seed=0):
    """n unit vectors in R^d: uniform angles (d=2), Fibonacci (d=3), seeded Gaussian (d>=4)."""
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        a = 2.0 * np.pi * np.arange(n) / n
        return np.stack([np.cos(a), np.sin(a)], axis=-1)
    if d == 3:
        return fibonacci_sphere(n)
    g = np.random.default_rng(seed).standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def sphere_points(d, n, seed=0):
    """n quasi-uniform points of S^d in R^(d+1)."""
    if d == 1:
        a = 2.0 * np.pi * (np.arange(n) + 0.5) / n
        return np.stack([np.cos(a), np.sin(a)], axis=-1)
    if d == 2:
        return fibonacci_sphere(n)
    g = np.random.default_rng(seed).standard_normal((n, d + 1))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def t1_sphere_grid(d, n, seed=0):
    """About n samples (x, v) of the unit tangent bundle of S^d.

    d=2 uses a product of Fibonacci points and evenly spaced tangent angles,
    balanced so both factors have similar spacing; d=1 uses both unit tangent
    directions at evenly spaced points; d>=3 is seeded uniform.
    Returns ambient arrays x (m, d+1) and v (m, d+1).
    """
    if d == 1:
        m = max(1, n // 2)
        x = sphere_points(1, m)
        t = np.stack([-x[:, 1], x[:, 0]], axis=-1)
        return np.concatenate([x, x]), np.concatenate([t, -t])
    if d == 2:
        n_a = max(3, int(round((np.pi * n) ** (1.0 / 3.0))))
        n_x = max(1, int(round(n / n_a)))
        x = fibonacci_sphere(n_x)
        B = canonical_tangent_basis(x)
        a = 2.0 * np.pi * np.arange(n_a) / n_a
        c = np.stack([np.cos(a), np.sin(a)], axis=-1)
        v = np.einsum("xij,aj->xai", B, c)
        xs = np.repeat(x, n_a, axis=0)
        return xs, v.reshape(-1, 3)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d + 1))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    v = rng.standard_normal((n, d + 1))
    v -= np.sum(v * x, axis=1, keepdims=True) * x
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return x, v


def ball_points(center, radius, n, rng, boundary_fraction=0.0):
    """Uniform points in a closed Euclidean ball; a fraction lands on the boundary sphere."""
    center = np.asarray(center, dtype=float)
    d = center.shape[0]
    g = rng.standard_normal((n, d))
    u = g / np.linalg.norm(g, axis=1, keepdims=True)
    s = rng.random(n) ** (1.0 / d)
    n_b = int(round(boundary_fraction * n))
    s[:n_b] = 1.0
    return center + radius * s[:, None] * u


def cap_points(center, angle, n, rng, boundary_fraction=0.0):
    """Points of a geodesic cap on S^d (angle=None or >= pi: the whole sphere)."""
    center = np.asarray(center, dtype=float)
    g = rng.standard_normal((n, center.shape[0]))
    x = g / np.linalg.norm(g, axis=1, keepdims=True)
    if angle is None or angle >= np.pi:
        return x
    out = []
    while sum(len(o) for o in out) < n:
        g = rng.standard_normal((4 * n, center.shape[0]))
        x = g / np.linalg.norm(g, axis=1, keepdims=True)
        out.append(x[np.arccos(np.clip(x @ center, -1, 1)) <= angle])
    x = np.concatenate(out)[:n]
    n_b = int(round(boundary_fraction * n))
    if n_b:
        t = x[:n_b] - (x[:n_b] @ center)[:, None] * center
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        x[:n_b] = np.cos(angle) * center + np.sin(angle) * t
    return x


def nearest_neighbor_pairs(P, k=1):
    """Pairs (i, j) with j among the k nearest neighbours of i, and their distances."""
    from scipy.spatial import cKDTree

    P = np.asarray(P, dtype=float)
    if len(P) < 2:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    k = min(k, len(P) - 1)
    dist, idx = cKDTree(P).query(P, k=k + 1)
    i = np.repeat(np.arange(len(P)), k)
    return i, idx[:, 1:].ravel(), dist[:, 1:].ravel()
