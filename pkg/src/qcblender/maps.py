"""Local maps on R^d and S^d, and finite families of them.

Every map evaluates on stacks of points (..., n) and returns its tangent
derivative in canonical tangent bases as (..., d, d). Composition follows the
chain rule directly because the intermediate bases cancel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frames import canonical_tangent_basis
from .linalg import normalized


@dataclass(frozen=True)
class Ball:
    """Open ball; for the sphere model the radius is a geodesic angle.

    ``radius=None`` means the whole space.
    """

    center: np.ndarray
    radius: float | None
    model: str = "euclidean"

    def distance(self, x):
        x = np.asarray(x, dtype=float)
        c = np.asarray(self.center, dtype=float)
        if self.model == "sphere":
            return np.arccos(np.clip(x @ c, -1.0, 1.0))
        return np.linalg.norm(x - c, axis=-1)

    def margin(self, x):
        """(radius - distance)/radius; +inf for the whole space."""
        if self.radius is None:
            return np.full(np.shape(x)[:-1], np.inf)
        return (self.radius - self.distance(x)) / self.radius

    def contains(self, x, closed=False):
        m = self.margin(x)
        return m >= 0 if closed else m > 0


class LocalMap:
    model = "euclidean"
    kind = "map"
    domain: Ball | None = None

    def __call__(self, x):
        raise NotImplementedError

    def tangent_derivative(self, x):
        raise NotImplementedError

    def normalized_derivative(self, x):
        return normalized(self.tangent_derivative(x))

    def displacement(self, x, delta):
        """f(x + delta) - f(x)."""
        return self(np.asarray(x) + delta) - self(x)

    def in_domain(self, x):
        if self.domain is None:
            return np.ones(np.shape(x)[:-1], dtype=bool)
        return self.domain.contains(x, closed=True)

    def restrict(self, domain):
        import copy
        g = copy.copy(self)
        g.domain = domain
        return g

    def inverse(self):
        raise NotImplementedError(f"{type(self).__name__} has no inverse")


class AffineMap(LocalMap):
    """x -> linear @ x + offset on R^d."""

    kind = "affine"

    def __init__(self, linear, offset=None, source_D=None, lam=None, domain=None):
        self.linear = np.asarray(linear, dtype=float)
        d = self.linear.shape[0]
        self.offset = np.zeros(d) if offset is None else np.asarray(offset, dtype=float)
        self.source_D = None if source_D is None else np.asarray(source_D, dtype=float)
        self.lam = lam
        self.domain = domain
        self.dim = d

    def __call__(self, x):
        return np.asarray(x, dtype=float) @ self.linear.T + self.offset

    def tangent_derivative(self, x):
        x = np.asarray(x)
        return np.broadcast_to(self.linear, x.shape[:-1] + self.linear.shape)

    def displacement(self, x, delta):
        return np.asarray(delta, dtype=float) @ self.linear.T

    def inverse(self):
        L = np.linalg.inv(self.linear)
        return AffineMap(L, -L @ self.offset)

    def fixed_point(self):
        return np.linalg.solve(np.eye(self.dim) - self.linear, self.offset)

    def to_dict(self):
        out = {"kind": self.kind, "linear": self.linear.tolist(), "offset": self.offset.tolist()}
        if self.source_D is not None:
            out["D"] = self.source_D.tolist()
        if self.lam is not None:
            out["lambda"] = self.lam
        return out


def linear_map(D):
    return AffineMap(D)


class ProjectiveMap(LocalMap):
    """x -> Ax/|Ax| on S^d."""

    model = "sphere"
    kind = "projective"

    def __init__(self, matrix, domain=None):
        self.matrix = np.asarray(matrix, dtype=float)
        self.dim = self.matrix.shape[0] - 1
        self.domain = domain

    def __call__(self, x):
        y = np.asarray(x, dtype=float) @ self.matrix.T
        return y / np.linalg.norm(y, axis=-1, keepdims=True)

    def tangent_derivative(self, x):
        # B_y^T (I - y y^T) A B_x / |Ax|, and B_y^T y = 0
        x = np.asarray(x, dtype=float)
        Ax = x @ self.matrix.T
        nAx = np.linalg.norm(Ax, axis=-1)
        y = Ax / nAx[..., None]
        Bx = canonical_tangent_basis(x)
        By = canonical_tangent_basis(y)
        return np.swapaxes(By, -1, -2) @ self.matrix @ Bx / nAx[..., None, None]

    def displacement(self, x, delta):
        x = np.asarray(x, dtype=float)
        return self(x + delta) - self(x)

    def inverse(self):
        return ProjectiveMap(np.linalg.inv(self.matrix))

    def to_dict(self):
        return {"kind": self.kind, "matrix": self.matrix.tolist()}


class ComposedMap(LocalMap):
    """ComposedMap(g, f) is g o f (f applied first)."""

    kind = "composition"

    def __init__(self, *maps):
        if not maps:
            raise ValueError("empty composition")
        models = {m.model for m in maps}
        if len(models) != 1:
            raise ValueError("composed maps must share a model")
        self.maps = tuple(maps)
        self.model = maps[0].model
        self.dim = maps[0].dim
        self.domain = maps[-1].domain

    def __call__(self, x):
        for m in reversed(self.maps):
            x = m(x)
        return x

    def tangent_derivative(self, x):
        x = np.asarray(x, dtype=float)
        D = None
        for m in reversed(self.maps):
            J = m.tangent_derivative(x)
            D = J if D is None else J @ D
            x = m(x)
        return D

    def displacement(self, x, delta):
        x = np.asarray(x, dtype=float)
        for m in reversed(self.maps):
            delta = m.displacement(x, delta)
            x = m(x)
        return delta

    def inverse(self):
        return ComposedMap(*[m.inverse() for m in self.maps[::-1]])

    def to_dict(self):
        return {"kind": self.kind, "maps": [m.to_dict() for m in self.maps]}


class SmoothMap(LocalMap):
    """A general smooth map of R^d given by callables."""

    kind = "smooth"

    def __init__(self, fn, jac, dim, domain=None, label="smooth"):
        self.fn = fn
        self.jac = jac
        self.dim = dim
        self.domain = domain
        self.label = label

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    def tangent_derivative(self, x):
        return self.jac(np.asarray(x, dtype=float))

    def inverse(self):
        return NewtonInverse(self)


def quadratic_monomials(x):
    """1, x_i, x_i x_j (i <= j), evaluated on a stack of points."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    cols = [np.ones(x.shape[:-1])] + [x[..., i] for i in range(d)]
    cols += [x[..., i] * x[..., j] for i in range(d) for j in range(i, d)]
    return np.stack(cols, axis=-1)


def quadratic_monomials_grad(x):
    """Gradient of each monomial: (..., n_monomials, d)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    rows = [np.zeros(x.shape)]
    for i in range(d):
        g = np.zeros(x.shape)
        g[..., i] = 1.0
        rows.append(g)
    for i in range(d):
        for j in range(i, d):
            g = np.zeros(x.shape)
            g[..., i] += x[..., j]
            g[..., j] += x[..., i]
            rows.append(g)
    return np.stack(rows, axis=-2)


class BumpPerturbedMap(LocalMap):
    """base(x) + phi(x) q(x) with q quadratic and phi = (1 - |x|^2/R^2)^2 on B(0, R)."""

    kind = "perturbed"

    def __init__(self, base, coeffs, support=2.0):
        self.base = base
        self.coeffs = np.asarray(coeffs, dtype=float)  # (d, n_monomials)
        self.support = float(support)
        self.dim = base.dim
        self.domain = base.domain

    def _bump(self, x):
        s = 1.0 - np.einsum("...i,...i->...", x, x) / self.support ** 2
        return np.where(s > 0, s * s, 0.0), np.where(s > 0, s, 0.0)

    def perturbation(self, x):
        x = np.asarray(x, dtype=float)
        phi, _ = self._bump(x)
        return phi[..., None] * (quadratic_monomials(x) @ self.coeffs.T)

    def perturbation_derivative(self, x):
        x = np.asarray(x, dtype=float)
        phi, s = self._bump(x)
        q = quadratic_monomials(x) @ self.coeffs.T
        grad_phi = (-4.0 / self.support ** 2) * s[..., None] * x
        Dq = np.einsum("km,...mi->...ki", self.coeffs, quadratic_monomials_grad(x))
        return q[..., :, None] * grad_phi[..., None, :] + phi[..., None, None] * Dq

    def __call__(self, x):
        return self.base(x) + self.perturbation(x)

    def tangent_derivative(self, x):
        return self.base.tangent_derivative(x) + self.perturbation_derivative(x)

    def inverse(self):
        return NewtonInverse(self, guess=self.base.inverse())

    def to_dict(self):
        return {"kind": self.kind, "base": self.base.to_dict(), "coeffs": self.coeffs.tolist(),
                "support": self.support}


class NewtonInverse(LocalMap):
    """Inverse of a Euclidean diffeomorphism by Newton iteration."""

    kind = "inverse"

    def __init__(self, f, guess=None, tol=1e-15, max_iter=50):
        self.f = f
        self.guess = guess
        self.dim = f.dim
        self.tol = tol
        self.max_iter = max_iter

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        y = self.guess(x) if self.guess is not None else x.copy()
        for _ in range(self.max_iter):
            r = self.f(y) - x
            step = np.linalg.solve(self.f.tangent_derivative(y), r[..., None])[..., 0]
            y = y - step
            if np.max(np.abs(step), initial=0.0) <= self.tol * (1.0 + np.max(np.abs(y), initial=0.0)):
                break
        return y

    def tangent_derivative(self, x):
        return np.linalg.inv(self.f.tangent_derivative(self(x)))

    def inverse(self):
        return self.f


@dataclass
class GeneratorFamily:
    maps: list
    labels: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.maps:
            raise ValueError("family must be nonempty")
        if len({m.model for m in self.maps}) != 1:
            raise ValueError("all maps in a family must share the ambient model")
        if not self.labels:
            self.labels = [f"f{i}" for i in range(len(self.maps))]
        self._stack = None

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, i):
        return self.maps[i]

    def __iter__(self):
        return iter(self.maps)

    @property
    def model(self):
        return self.maps[0].model

    @property
    def dim(self):
        return self.maps[0].dim

    def is_affine(self):
        return all(isinstance(m, AffineMap) for m in self.maps)

    def _affine_stack(self):
        if self._stack is None:
            self._stack = (np.stack([m.linear for m in self.maps]), np.stack([m.offset for m in self.maps]))
        return self._stack

    def apply_indexed(self, idx, x):
        """Apply map idx[k] to point x[k] for every k."""
        idx = np.asarray(idx)
        x = np.asarray(x, dtype=float)
        if self.is_affine():
            L, c = self._affine_stack()
            return np.einsum("kij,kj->ki", L[idx], x) + c[idx]
        out = np.empty_like(x)
        for m in np.unique(idx):
            sel = idx == m
            out[sel] = self.maps[m](x[sel])
        return out

    def inverse(self):
        return GeneratorFamily([m.inverse() for m in self.maps], [f"{l}^-1" for l in self.labels],
                               dict(self.metadata, inverted=True))

    def subset(self, keep):
        keep = list(keep)
        return GeneratorFamily([self.maps[i] for i in keep], [self.labels[i] for i in keep], dict(self.metadata))

    def to_dict(self):
        return {"labels": list(self.labels), "metadata": _jsonable(self.metadata),
                "maps": [m.to_dict() for m in self.maps]}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def map_from_dict(data):
    kind = data["kind"]
    if kind == "affine":
        return AffineMap(data["linear"], data["offset"], data.get("D"), data.get("lambda"))
    if kind == "projective":
        return ProjectiveMap(data["matrix"])
    if kind == "composition":
        return ComposedMap(*[map_from_dict(m) for m in data["maps"]])
    if kind == "perturbed":
        return BumpPerturbedMap(map_from_dict(data["base"]), data["coeffs"], data["support"])
    raise ValueError(f"cannot deserialize map kind {kind!r}")


def family_from_dict(data):
    return GeneratorFamily([map_from_dict(m) for m in data["maps"]], list(data["labels"]), dict(data["metadata"]))
