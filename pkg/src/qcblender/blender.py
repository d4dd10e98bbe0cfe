"""The affine blender T_{D,v}(x) = lambda D^-1 x + v on R^d and its probes.

D runs over the simplex generators of ``covering`` and v over a finite set J
of translations inside V = B(0, eps^2). The inverse family, restricted to
V, is uniformly expanding and covers the window V x exp(r * simplex).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .covering import GroupWindow, SimplexRegion, auto_tune_parameters, build_simplex_generators, \
    verify_split_covering
from .linalg import co_norm, conformality, operator_norm
from .maps import AffineMap, Ball, BumpPerturbedMap, GeneratorFamily, quadratic_monomials
from .parallel import map_ordered, spawn_seeds
from .sampling import ball_points

LATTICE_COVER = 0.5
PROJECT_FRACTION = 0.999
DEFAULT_EPSILON = {2: 0.1, 3: 0.05}
PARTICLE_CHUNK = 4096


class BlenderConstructionError(RuntimeError):
    pass


@dataclass
class Blender:
    family: GeneratorFamily
    generators: list
    region: SimplexRegion
    J: np.ndarray
    epsilon: float
    lam: float
    params: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.J.shape[1]

    @property
    def V(self):
        return Ball(np.zeros(self.d), self.epsilon ** 2)

    @property
    def V_prime(self):
        return Ball(np.zeros(self.d), self.epsilon ** 2 * (1.0 - self.epsilon) ** 2)

    @property
    def U(self):
        return Ball(np.zeros(self.d), 1.0)

    @property
    def window(self):
        """V x exp(r * simplex): the window covered by the inverse family."""
        return GroupWindow(self.region, self.V)

    def to_dict(self):
        return {"epsilon": self.epsilon, "lambda": self.lam,
                "D": [np.asarray(D).tolist() for D in self.generators],
                "offsets": self.J.tolist(), "params": dict(self.params)}


def family_from_blender_dict(data):
    """Rebuild {T_{D,v}} from the {D, lambda, offsets} serialization, in construction order."""
    lam = float(data["lambda"])
    maps, labels = [], []
    for j, D in enumerate(data["D"]):
        D = np.array(D, dtype=float)
        Dinv = np.linalg.inv(D)
        for k, v in enumerate(data["offsets"]):
            maps.append(AffineMap(lam * Dinv, np.array(v, dtype=float), source_D=D, lam=lam))
            labels.append(f"T[D{j},v{k}]")
    return GeneratorFamily(maps, labels, dict(data.get("params", {})))


def translation_set(d, epsilon, cover=LATTICE_COVER, project=PROJECT_FRACTION):
    """Cubic lattice with covering radius cover*eps^2, pulled inside B(0, eps^2).

    Lattice points within (1 + cover) eps^2 of the origin are kept; those at
    radius >= project*eps^2 are moved radially to radius project*eps^2. Both
    radii are fixed multiples of eps^2, so the set is a scaled copy of one set
    of lattice directions and its size does not depend on eps.
    """
    s = 2.0 * cover / np.sqrt(d)
    k = int(np.ceil((1.0 + cover) / s))
    pts = np.array(list(itertools.product(range(-k, k + 1), repeat=d)), dtype=float) * s
    nrm = np.linalg.norm(pts, axis=1)
    pts = pts[nrm <= 1.0 + cover + 1e-12]
    nrm = np.linalg.norm(pts, axis=1)
    far = nrm >= project
    pts[far] *= (project / nrm[far])[:, None]
    pts = np.unique(np.round(pts, 12), axis=0)
    return pts * epsilon ** 2


def check_translation_cover(J, epsilon, n_radial=60, n_angular=None):
    """Largest distance from a sample of the closed ball B(0, eps^2) to J, and the V' radius."""
    d = J.shape[1]
    R = epsilon ** 2
    if d == 2:
        n_angular = n_angular or 720
        a = 2.0 * np.pi * np.arange(n_angular) / n_angular
        rad = np.linspace(0.0, R, n_radial + 1)
        X = (rad[:, None, None] * np.stack([np.cos(a), np.sin(a)], axis=-1)[None]).reshape(-1, 2)
    else:
        X = ball_points(np.zeros(d), R, 20000, np.random.default_rng(0), boundary_fraction=0.3)
    dist = np.min(np.linalg.norm(X[:, None, :] - J[None], axis=-1), axis=1)
    return float(dist.max()), R * (1.0 - epsilon) ** 2


def build_affine_blender(d, epsilon=None, t=None, r=None, t_range=(0.05, 0.5), r_range=(0.1, 0.5),
                         grid_per_axis=None):
    """The family {T_{D,v} : D in generators, v in J} with lambda = 1 - epsilon.

    When t or r is missing they are auto-tuned. The simplex scale r is then
    halved until every generator is (1 + epsilon)-conformal.
    """
    epsilon = DEFAULT_EPSILON.get(d, 0.05) if epsilon is None else float(epsilon)
    if not (0 < epsilon < 0.25):
        raise ValueError("epsilon must lie in (0, 0.25)")
    grid = grid_per_axis or (41 if d == 2 else 3)
    cert = None
    if t is None or r is None:
        t, r, cert = auto_tune_parameters(d, t_range, r_range, grid)
    gens, region = build_simplex_generators(d, t, r)
    halvings = 0
    while max(float(conformality(D)) for D in gens) >= 1.0 + epsilon:
        r *= 0.5
        halvings += 1
        if halvings > 40:
            raise BlenderConstructionError("could not make the generators (1+eps)-conformal")
        gens, region = build_simplex_generators(d, t, r)
    lam = 1.0 - epsilon
    J = translation_set(d, epsilon)
    worst, vprime = check_translation_cover(J, epsilon)
    if not worst < vprime:
        raise BlenderConstructionError(f"translations leave a gap: {worst!r} >= {vprime!r}")
    maps, labels = [], []
    for j, D in enumerate(gens):
        Dinv = np.linalg.inv(D)
        for k, v in enumerate(J):
            maps.append(AffineMap(lam * Dinv, v, source_D=D, lam=lam))
            labels.append(f"T[D{j},v{k}]")
    params = {"d": d, "t": float(t), "r": float(r), "epsilon": epsilon, "lambda": lam, "n_J": int(len(J)),
              "lattice_cover": LATTICE_COVER, "r_halvings": halvings, "V_radius": epsilon ** 2,
              "V_prime_radius": vprime, "translation_gap": worst}
    if cert is not None:
        params["tuning_margin"] = cert.worst_margin
    family = GeneratorFamily(maps, labels, dict(params))
    return Blender(family, list(gens), region, J, epsilon, lam, params)


def _sample_closed_unit_ball(d, n, seed):
    return ball_points(np.zeros(d), 1.0, n, np.random.default_rng(seed), boundary_fraction=0.5)


def generator_groups(family):
    """Indices of the maps sharing a generator D (perturbed maps are grouped by their base map)."""
    keys, groups = {}, []
    for k, f in enumerate(family):
        while not isinstance(f, AffineMap) and hasattr(f, "base"):
            f = f.base
        D = getattr(f, "source_D", None)
        key = np.asarray(D if D is not None else f.linear).tobytes()
        if key not in keys:
            keys[key] = len(groups)
            groups.append([])
        groups[keys[key]].append(k)
    return groups


def verify_blender_assumptions(blender, family=None, n_base=2000, n_fiber=6545, n_deriv=32, n_check=4000,
                               seed=0, threads=None):
    """Check the three blender hypotheses for ``family`` (default: the unperturbed family).

    (i) covering of the window V x exp(r * simplex) by the inverse family,
        split into a fiber factor over the generators D and a base factor over
        the translations;
    (ii) g(closed U) inside U, exact for affine maps (||L|| + |c| < 1) and
        sampled on the closed unit ball otherwise;
    (iii) uniform contraction on U, exact for affine maps and sampled otherwise.
    """
    family = blender.family if family is None else family
    out = {}
    inv = family.inverse()
    cert = verify_split_covering(inv, generator_groups(family), blender.window, seed=seed, n_base=n_base,
                                 n_fiber=n_fiber, n_deriv=n_deriv, threads=threads)
    out["covering"] = {"passed": cert.passed, "certificate": cert.to_dict()}

    X = _sample_closed_unit_ball(blender.d, n_check, seed)
    inv_sup, contr_sup, exp_inf, wit_ii, wit_iii = 0.0, 0.0, np.inf, None, None
    for k, g in enumerate(family):
        if isinstance(g, AffineMap):
            img = float(operator_norm(g.linear) + np.linalg.norm(g.offset))
            con = float(operator_norm(g.linear))
            ex = float(co_norm(np.linalg.inv(g.linear)))
        else:
            img = float(np.max(np.linalg.norm(g(X), axis=1)))
            con = float(np.max(operator_norm(g.tangent_derivative(X))))
            ex = 1.0 / con
        if img > inv_sup:
            inv_sup, wit_ii = img, k
        if con > contr_sup:
            contr_sup, wit_iii = con, k
        exp_inf = min(exp_inf, ex)
    exact = family.is_affine()
    out["forward_invariance"] = {"passed": bool(inv_sup < 1.0), "sup_image_radius": inv_sup,
                                 "exact": exact, "witness_map": wit_ii}
    out["contraction"] = {"passed": bool(contr_sup < 1.0), "sup_norm": contr_sup,
                          "below_1_minus_eps2": bool(contr_sup < 1.0 - blender.epsilon ** 2),
                          "exact": exact, "witness_map": wit_iii}
    out["inverse_expanding"] = {"passed": bool(exp_inf > 1.0), "inf_co_norm": exp_inf}
    out["passed"] = bool(all(out[k]["passed"] for k in ("covering", "forward_invariance", "contraction")))
    return out


def perturb_family(family, delta=1e-3, seed=0, support=2.0, n_grid=41):
    """Add phi(x) q(x) to every map, q quadratic with seeded coefficients.

    Each perturbation is rescaled so that its C^1 size, the max over a grid of
    the closed support ball of max(|p(x)|, ||Dp(x)||), equals delta.
    """
    rng = np.random.default_rng(seed)
    d = family.dim
    ax = np.linspace(-support, support, n_grid)
    G = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    G = G[np.linalg.norm(G, axis=1) <= support]
    n_mono = quadratic_monomials(np.zeros((1, d))).shape[-1]
    maps = []
    for f in family:
        coeffs = rng.standard_normal((d, n_mono))
        probe = BumpPerturbedMap(f, coeffs, support)
        size = max(float(np.max(np.linalg.norm(probe.perturbation(G), axis=1))),
                   float(np.max(operator_norm(probe.perturbation_derivative(G)))))
        maps.append(BumpPerturbedMap(f, coeffs * (delta / size), support))
    return GeneratorFamily(maps, [f"{l}~" for l in family.labels],
                           dict(family.metadata, perturbation=delta, perturbation_seed=seed))


def perturbation_size(pmap, support=2.0, n_grid=41):
    d = pmap.dim
    ax = np.linspace(-support, support, n_grid)
    G = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    G = G[np.linalg.norm(G, axis=1) <= support]
    return max(float(np.max(np.linalg.norm(pmap.perturbation(G), axis=1))),
               float(np.max(operator_norm(pmap.perturbation_derivative(G)))))


# ------------------------------------------------------------------ probes

def grid_cells(V, rho):
    """Integer indices of the cells of side rho (anchored at the center) lying inside the closed ball V."""
    d = len(V.center)
    k = int(np.ceil(V.radius / rho))
    idx = np.array(list(itertools.product(range(-k, k), repeat=d)))
    corners = np.array(list(itertools.product((0, 1), repeat=d)))
    far = np.max(np.linalg.norm((idx[:, None, :] + corners[None]) * rho, axis=-1), axis=1)
    return idx[far <= V.radius]


class Occupancy:
    """Bitmap over the cells of V at side rho."""

    def __init__(self, V, rho):
        self.V = V
        self.rho = float(rho)
        self.cells = grid_cells(V, rho)
        self._k = int(np.ceil(V.radius / rho))
        self._lookup = {tuple(c): i for i, c in enumerate(self.cells)}
        self.hit = np.zeros(len(self.cells), dtype=bool)
        self._span = 2 * self._k
        self._index = np.full((self._span,) * len(V.center), -1, dtype=np.int64)
        self._index[tuple((self.cells + self._k).T)] = np.arange(len(self.cells))

    def add(self, X):
        X = np.asarray(X, dtype=float)
        c = np.floor((X - self.V.center) / self.rho).astype(np.int64) + self._k
        ok = np.all((c >= 0) & (c < self._span), axis=1)
        if np.any(ok):
            ids = self._index[tuple(c[ok].T)]
            self.hit[ids[ids >= 0]] = True

    def merge(self, other):
        self.hit |= other.hit

    @property
    def fraction(self):
        return float(np.mean(self.hit)) if len(self.hit) else 1.0

    def missing(self, limit=20):
        return [((c + 0.5) * self.rho + self.V.center).tolist() for c in self.cells[~self.hit][:limit]]


def _chaos_chunk(family, X, n_steps, rng, burn_in, record):
    out = [] if record else None
    M = len(family)
    for s in range(burn_in + n_steps):
        idx = rng.integers(0, M, size=len(X))
        X = family.apply_indexed(idx, X)
        if record and s >= burn_in:
            out.append(X)
    return X, out


def hutchinson_attractor(family, n_points, n_particles=10000, burn_in=60, seed=0, threads=None, U=None):
    """Chaos-game cloud: n_particles parallel orbits, burn-in, then every step recorded.

    Particles start uniformly in U (default the unit ball); particle chunk c
    uses the generator SeedSequence(seed, spawn_key=(c,)).
    """
    d = family.dim
    U = U or Ball(np.zeros(d), 1.0)
    n_particles = min(n_particles, n_points)
    steps = int(np.ceil(n_points / n_particles))
    chunks = [(i, min(n_particles, i + PARTICLE_CHUNK)) for i in range(0, n_particles, PARTICLE_CHUNK)]
    rngs = spawn_seeds(seed, len(chunks))

    def work(c):
        lo, hi = chunks[c]
        rng = rngs[c]
        X0 = ball_points(U.center, U.radius, hi - lo, rng)
        _, rec = _chaos_chunk(family, X0, steps, rng, burn_in, True)
        return np.stack(rec, axis=1).reshape(-1, d)

    parts = map_ordered(work, range(len(chunks)), threads)
    cloud = np.concatenate(parts)[:n_points]
    return cloud


def occupancy(cloud, V, rho):
    occ = Occupancy(V, rho)
    occ.add(cloud)
    return occ


def ergodicity_probe(family, seed_center, seed_radius, n_steps, n_particles, rho_grid, V, seed=0,
                     threads=None):
    """Occupancy of V by the union over steps of images of a seed-ball ensemble.

    This is a grid-resolution surrogate for the full-measure statement: each
    particle follows its own seeded random branch, and the returned fractions
    (one per step, step 0 = the seed ball itself) count cells of V hit so far.
    """
    seed_center = np.asarray(seed_center, dtype=float)
    if not (V.distance(seed_center[None])[0] + seed_radius <= V.radius * (1 + 1e-12)):
        raise ValueError("seed ball must lie inside V")
    d = family.dim
    chunks = [(i, min(n_particles, i + PARTICLE_CHUNK)) for i in range(0, n_particles, PARTICLE_CHUNK)]
    rngs = spawn_seeds(seed, len(chunks))
    M = len(family)

    def work(c):
        lo, hi = chunks[c]
        rng = rngs[c]
        X = ball_points(seed_center, seed_radius, hi - lo, rng)
        occ = Occupancy(V, rho_grid)
        # step 0: cells met by the seed ball itself, found analytically
        centers = (occ.cells + 0.5) * rho_grid + V.center
        half = 0.5 * rho_grid
        nearest = np.clip(seed_center, centers - half, centers + half)
        occ.hit |= np.linalg.norm(nearest - seed_center, axis=1) < seed_radius
        hist = [occ.hit.copy()]
        for _ in range(n_steps):
            X = family.apply_indexed(rng.integers(0, M, size=len(X)), X)
            occ.add(X)
            hist.append(occ.hit.copy())
        return np.array(hist)

    parts = map_ordered(work, range(len(chunks)), threads)
    hits = parts[0]
    for p in parts[1:]:
        hits = hits | p
    fractions = hits.mean(axis=1)
    final = Occupancy(V, rho_grid)
    final.hit = hits[-1]
    return {"fractions": fractions.tolist(), "final": float(fractions[-1]), "n_cells": int(hits.shape[1]),
            "missing": final.missing(), "surrogate": True}


def minimality_probe(family, x0, rho, max_steps, V, quantum=None, max_points=2_000_000):
    """Steps until every rho-grid center of V is within rho of a visited orbit point.

    From x0 the map whose image is nearest to V is applied until the orbit
    point lies in V (approach phase). From there the orbit tree is explored
    breadth first, keeping only points in the closed ball V: its preimages under
    the inverse family stay in V, so the pruned tree still reaches every part of
    V. Points are deduplicated on cells of side ``quantum`` (default rho/4).
    ``steps`` counts applied maps along the deepest branch needed (approach plus
    tree depth); a start that already covers needs 0 steps.
    """
    quantum = rho / 4.0 if quantum is None else quantum
    from scipy.spatial import cKDTree

    d = family.dim
    M = len(family)
    k = int(np.floor(V.radius / rho))
    g = np.array(list(itertools.product(range(-k, k + 1), repeat=d)), dtype=float) * rho
    centers = g[np.linalg.norm(g, axis=1) <= V.radius] + V.center
    todo = np.ones(len(centers), dtype=bool)

    def mark(P):
        if len(P) == 0 or not np.any(todo):
            return
        dist, _ = cKDTree(P).query(centers[todo], k=1)
        idx = np.nonzero(todo)[0]
        todo[idx[dist <= rho]] = False

    def children(P):
        return family.apply_indexed(np.tile(np.arange(M), len(P)), np.repeat(P, M, axis=0))

    def report(covered, steps):
        out = {"covered": covered, "steps": steps, "approach_steps": approach, "n_centers": int(len(centers))}
        if not covered:
            out.update(uncovered=centers[todo][:20].tolist(), n_uncovered=int(todo.sum()))
        return out

    x = np.atleast_2d(np.asarray(x0, dtype=float))
    mark(x)
    approach = 0
    while np.any(todo) and not V.contains(x[0], closed=True):
        if approach == max_steps:
            return report(False, None)
        imgs = children(x)
        mark(imgs)
        x = imgs[int(np.argmin(V.distance(imgs)))][None]
        approach += 1
    front = x
    seen = set(map(tuple, np.floor(front / quantum).astype(np.int64)))
    for depth in range(approach, max_steps + 1):
        if not np.any(todo):
            return report(True, depth)
        if depth == max_steps or len(front) == 0:
            break
        nxt = children(front)
        nxt = nxt[V.contains(nxt, closed=True)]
        keys, first = np.unique(np.floor(nxt / quantum).astype(np.int64), axis=0, return_index=True)
        keep = [i for i, key in zip(first, map(tuple, keys)) if key not in seen]
        seen.update(tuple(key) for key in np.floor(nxt[keep] / quantum).astype(np.int64))
        front = nxt[np.sort(np.array(keep, dtype=np.int64))]
        if len(seen) > max_points:
            break
        mark(front)
    return report(False, None)
