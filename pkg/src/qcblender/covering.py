"""Covering data on SL(d, R) and on frame windows.

The Lie algebra sl(d) is identified with R^(N-1), N = d^2, through a fixed
orthonormal basis (Frobenius inner product), in this order:

* (E_ij + E_ji)/sqrt(2) for i < j, lexicographic;
* (E_ij - E_ji)/sqrt(2) for i < j, lexicographic;
* diag(1, ..., 1, -k, 0, ...)/sqrt(k(k+1)) for k = 1..d-1 (k ones).

The simplex is the regular one with N unit vertices; vertex i is the unit
vector along e_i - (1/N) sum(e) expressed in the same Helmert chain.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .frames import canonical_tangent_basis
from .linalg import (LinalgError, MatLogDomainError, hs_norm, mat_exp, mat_log, normalized,
                     operator_norm, haar_orthogonal)
from .maps import Ball
from .parallel import map_chunks, map_ordered
from .sampling import ball_points, cap_points, nearest_neighbor_pairs

CHUNK = 2048


class CoveringError(RuntimeError):
    pass


class AnalyticWindowError(CoveringError):
    def __init__(self, msg, witness):
        super().__init__(msg)
        self.witness = witness


def helmert(n):
    """Rows k=1..n-1: (1,...,1,-k,0,...)/sqrt(k(k+1)); an orthonormal basis of sum-zero vectors."""
    H = np.zeros((n - 1, n))
    for k in range(1, n):
        H[k - 1, :k] = 1.0
        H[k - 1, k] = -k
        H[k - 1] /= np.sqrt(k * (k + 1))
    return H


def sl_basis(d):
    basis = []
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    for sgn in (1.0, -1.0):
        for i, j in pairs:
            E = np.zeros((d, d))
            E[i, j] = 1.0 / np.sqrt(2.0)
            E[j, i] = sgn / np.sqrt(2.0)
            basis.append(E)
    for row in helmert(d):
        basis.append(np.diag(row))
    return np.array(basis)


def sl_coords(X, basis):
    return np.einsum("...ij,kij->...k", X, basis)


def from_sl_coords(c, basis):
    return np.einsum("...k,kij->...ij", c, basis)


def regular_simplex(N):
    """N unit vertices of a regular simplex centred at the origin of R^(N-1)."""
    H = helmert(N)
    P = np.eye(N) - 1.0 / N
    V = P @ H.T
    return V / np.linalg.norm(V, axis=1, keepdims=True)


@dataclass(frozen=True)
class SimplexRegion:
    vertices: np.ndarray
    r: float

    def __post_init__(self):
        V = np.asarray(self.vertices, dtype=float)
        N = V.shape[0]
        if V.shape != (N, N - 1):
            raise ValueError("need N vertices in R^(N-1)")
        M = np.vstack([V.T, np.ones(N)])
        if abs(np.linalg.det(M)) < 1e-12:
            raise CoveringError("degenerate simplex: barycentric system is singular")
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "_bary", np.linalg.inv(M))

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def dim(self):
        return int(round(np.sqrt(self.n_vertices)))

    @property
    def basis(self):
        return sl_basis(self.dim)

    def barycentric(self, y):
        """Affine coordinates of y in R^(N-1) (simplex units, i.e. X/r)."""
        y = np.asarray(y, dtype=float)
        rhs = np.concatenate([y, np.ones(y.shape[:-1] + (1,))], axis=-1)
        return rhs @ self._bary.T

    def point(self, beta):
        return np.asarray(beta) @ self.vertices

    def frame_bound(self):
        """Upper bound for ||exp(X)||_F over the closed region: sqrt(d) e^r."""
        return np.sqrt(self.dim) * np.exp(self.r)


def build_simplex_generators(d, t, r):
    if d < 2:
        raise ValueError("d must be >= 2")
    if not (t > 0 and r > 0):
        raise ValueError("t and r must be positive")
    N = d * d
    V = regular_simplex(N)
    basis = sl_basis(d)
    W = from_sl_coords(-t * r * V, basis)
    gens = mat_exp(W)
    region = SimplexRegion(V, float(r))
    try:
        logs = mat_log(gens)
    except MatLogDomainError as exc:
        raise CoveringError(f"t*r = {t * r} is outside the logarithm domain") from exc
    # past the principal branch the region coordinates of D_j A no longer match X
    if np.max(hs_norm(logs - W)) > 1e-8 * max(1.0, t * r):
        raise CoveringError(f"t*r = {t * r} leaves the principal branch of the logarithm")
    return list(gens), region


def region_membership(X, region):
    """Minimum barycentric coordinate of X/r; positive iff strictly inside."""
    c = sl_coords(X, sl_basis(region.dim)) / region.r
    return np.min(region.barycentric(c), axis=-1)


def safe_log(M):
    """mat_log on a stack; entries outside the domain come back as NaN with ok=False."""
    M = np.asarray(M, dtype=float)
    try:
        return mat_log(M), np.ones(M.shape[:-2], dtype=bool)
    except LinalgError:
        pass
    flat = M.reshape(-1, *M.shape[-2:])
    out = np.full(flat.shape, np.nan)
    ok = np.zeros(len(flat), dtype=bool)
    for i, A in enumerate(flat):
        try:
            out[i] = mat_log(A)
            ok[i] = True
        except LinalgError:
            pass
    return out.reshape(M.shape), ok.reshape(M.shape[:-2])


def membership_of(A, region):
    """region_membership(mat_log(A)); -inf where the logarithm fails."""
    L, ok = safe_log(A)
    m = region_membership(np.where(ok[..., None, None], L, 0.0), region)
    return np.where(ok, m, -np.inf)


@dataclass
class CoveringCertificate:
    kind: str
    params: dict
    n_samples: int
    worst_margin: float
    lipschitz_slack: float
    grid_resolution: float
    passed: bool
    witness_map: np.ndarray = field(repr=False, default=None)
    witnesses: list = field(default_factory=list)
    units: str = "barycentric"

    def to_dict(self, include_map=False):
        out = {"kind": self.kind, "params": _plain(self.params), "n_samples": int(self.n_samples),
               "worst_margin": float(self.worst_margin), "lipschitz_slack": float(self.lipschitz_slack),
               "grid_resolution": float(self.grid_resolution), "passed": bool(self.passed),
               "units": self.units, "witnesses": _plain(self.witnesses)}
        if include_map and self.witness_map is not None:
            out["witness_map"] = np.asarray(self.witness_map).tolist()
        return out


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def _finalize(kind, params, n, best, witness, slack_total, resolution, witnesses, units):
    worst = float(np.min(best)) if best.size else -np.inf
    slack = slack_total / resolution if resolution > 0 else 0.0
    passed = bool(np.isfinite(worst) and worst > slack * resolution)
    return CoveringCertificate(kind, params, int(n), worst, float(slack), float(resolution), passed,
                               witness, witnesses, units)


def simplex_grid(N, m):
    """All compositions of m into N nonnegative parts, as an (P, N) int array."""
    rows = []
    for bars in itertools.combinations(range(m + N - 1), N - 1):
        prev, parts = -1, []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(m + N - 2 - prev)
        rows.append(parts)
    return np.array(rows, dtype=np.int64)


def _n_compositions(N, m):
    from math import comb
    return comb(m + N - 1, N - 1)


def simplex_grid_neighbors(comps):
    """Index pairs of grid points that differ by moving one unit between two coordinates."""
    P, N = comps.shape
    base = int(comps.max(initial=0)) + 1
    w = base ** np.arange(N, dtype=np.int64)
    keys = comps @ w
    order = np.argsort(keys)
    sk = keys[order]
    I, J = [], []
    for i, j in itertools.permutations(range(N), 2):
        src = np.nonzero(comps[:, i] > 0)[0]
        tk = keys[src] - w[i] + w[j]
        pos = np.searchsorted(sk, tk)
        I.append(src)
        J.append(order[pos])
    return np.concatenate(I), np.concatenate(J)


def _group_margins(gens, A, region):
    prods = gens[None, :, :, :] @ A[:, None, :, :]
    return membership_of(prods, region)


def verify_covering_group(generators, region, grid_per_axis, threads=None):
    """Sampled check that the closed region is covered by D_j^-1 of its interior.

    Samples A = exp(X), X on the barycentric grid with ``grid_per_axis`` points
    per edge (faces included). The margin at A is max_j region_membership(log(D_j A)).
    Slack is the largest margin change between adjacent grid samples per unit
    distance; grid_resolution is the adjacent-sample spacing in X/r units.
    """
    gens = np.asarray(generators, dtype=float)
    if gens.ndim == 2:
        gens = gens[None]
    if np.max(np.abs(np.abs(np.linalg.det(gens)) - 1.0)) > 1e-8:
        raise ValueError("generators must be special linear")
    if grid_per_axis < 2:
        raise ValueError("grid_per_axis must be >= 2")
    N = region.n_vertices
    m = grid_per_axis - 1
    comps = simplex_grid(N, m)
    pos = comps / m @ region.vertices
    A = mat_exp(from_sl_coords(region.r * pos, region.basis))

    def work(sl):
        return _group_margins(gens, A[sl], region)

    M = np.concatenate(map_chunks(work, len(A), CHUNK, threads))
    best = np.max(M, axis=1)
    witness = np.argmax(M, axis=1)
    I, J = simplex_grid_neighbors(comps)
    h = np.sqrt(2.0 * N / (N - 1)) / m
    diff = np.abs(best[I] - best[J])
    diff = diff[np.isfinite(diff)]
    L = float(diff.max(initial=0.0)) / h
    witnesses = []
    bad = np.nonzero(~(best > L * h))[0]
    for k in bad[:10]:
        witnesses.append({"sample": int(k), "barycentric": (comps[k] / m).tolist(),
                          "margin": float(best[k])})
    params = {"grid_per_axis": int(grid_per_axis), "r": region.r, "n_generators": len(gens)}
    return _finalize("group", params, len(A), best, witness, L * h, h, witnesses, "barycentric")


def auto_tune_parameters(d, t_range, r_range, grid_per_axis, n_coarse=5, rounds=3, search_grid=9):
    """Coarse-to-fine search over (t, r) maximizing worst_margin."""
    t_lo, t_hi = map(float, t_range)
    r_lo, r_hi = map(float, r_range)
    if not (0 < t_lo <= t_hi and 0 < r_lo <= r_hi):
        raise ValueError("empty or invalid parameter range")
    sg = min(search_grid, grid_per_axis)

    def score(t, r):
        try:
            gens, region = build_simplex_generators(d, t, r)
        except CoveringError:
            return -np.inf
        return verify_covering_group(gens, region, sg).worst_margin

    cache = {}
    best = (-np.inf, None, None)
    lo_t, hi_t, lo_r, hi_r = t_lo, t_hi, np.log(r_lo), np.log(r_hi)
    for _ in range(rounds):
        ts = np.linspace(lo_t, hi_t, n_coarse) if hi_t > lo_t else [lo_t]
        rs = np.exp(np.linspace(lo_r, hi_r, n_coarse)) if hi_r > lo_r else [np.exp(lo_r)]
        for t in ts:
            for r in rs:
                key = (round(float(t), 15), round(float(r), 15))
                if key not in cache:
                    cache[key] = score(*key)
                if cache[key] > best[0]:
                    best = (cache[key], key[0], key[1])
        if best[1] is None:
            break
        st = (hi_t - lo_t) / max(1, n_coarse - 1)
        sr = (hi_r - lo_r) / max(1, n_coarse - 1)
        lo_t, hi_t = max(t_lo, best[1] - st), min(t_hi, best[1] + st)
        lo_r, hi_r = max(np.log(r_lo), np.log(best[2]) - sr), min(np.log(r_hi), np.log(best[2]) + sr)
    if best[1] is None or not best[0] > 0:
        raise CoveringError("no parameters with positive margin in the given ranges")
    t, r = best[1], best[2]
    gens, region = build_simplex_generators(d, t, r)
    cert = verify_covering_group(gens, region, grid_per_axis)
    cert.params.update({"t": t, "r": r, "d": d})
    return t, r, cert


def perturb_generators(generators, delta, rng):
    """Move each generator by delta in Frobenius norm, then rescale to |det| = 1."""
    out = []
    for D in generators:
        E = rng.standard_normal(np.shape(D))
        out.append(normalized(D + delta * E / hs_norm(E)))
    return out


# ---------------------------------------------------------------- windows

def window_bound(theta, epsilon):
    """H = Theta^4 / epsilon."""
    if not (0 < epsilon < 1):
        raise ValueError("epsilon must lie in (0, 1)")
    return float(theta) ** 4 / float(epsilon)


def _sample_base(ball, n, rng, boundary_fraction):
    if ball.radius is None and ball.model == "euclidean":
        return np.asarray(ball.center, dtype=float)[None, :]
    if ball.model == "sphere":
        return cap_points(ball.center, ball.radius, n, rng, boundary_fraction)
    return ball_points(ball.center, ball.radius, n, rng, boundary_fraction)


@dataclass
class GroupWindow:
    """base in V, frame in exp(r * interior of the simplex)."""

    region: SimplexRegion
    base: Ball
    units = "barycentric"

    @property
    def model(self):
        return self.base.model

    @property
    def frame_bound(self):
        return self.region.frame_bound()

    def fiber_margin(self, frames):
        return membership_of(frames, self.region)

    def base_margin(self, bases):
        return self.base.margin(bases)

    def combine(self, fiber, base):
        return np.minimum(fiber, base)

    def margin(self, bases, frames):
        return self.combine(self.fiber_margin(frames), self.base_margin(bases))

    def sample_fibers(self, n, rng=None):
        """Barycentric grid over the closed simplex with at least n points (faces included)."""
        N = self.region.n_vertices
        m = 1
        while _n_compositions(N, m) < n:
            m += 1
        y = simplex_grid(N, m) / m @ self.region.vertices
        frames = mat_exp(from_sl_coords(self.region.r * y, self.region.basis))
        return frames, y

    def sample_interior(self, n, rng):
        beta = rng.dirichlet(np.ones(self.region.n_vertices), size=n)
        beta = 0.05 / len(beta[0]) + 0.95 * beta
        y = beta @ self.region.vertices
        frames = mat_exp(from_sl_coords(self.region.r * y, self.region.basis))
        if self.base.radius is None:
            bases = np.repeat(np.asarray(self.base.center, dtype=float)[None], n, axis=0)
        else:
            bases = _sample_base(Ball(self.base.center, 0.9 * self.base.radius, self.base.model), n, rng, 0.0)
        return bases, frames

    def sample_bases(self, n, rng, boundary_fraction=0.1):
        return _sample_base(self.base, n, rng, boundary_fraction)


@dataclass
class NormWindow:
    """base in V, frame_size < H."""

    H: float
    base: Ball
    theta: float = float("nan")
    epsilon: float = float("nan")
    units = "frame_size"

    @property
    def model(self):
        return self.base.model

    @property
    def frame_bound(self):
        return self.H

    def fiber_margin(self, frames):
        return self.H - hs_norm(frames)

    def base_margin(self, bases):
        return self.base.margin(bases)

    def combine(self, fiber, base):
        return np.minimum(fiber, self.H * base)

    def margin(self, bases, frames):
        return self.combine(self.fiber_margin(frames), self.base_margin(bases))

    def sample_fibers(self, n, rng, boundary_fraction=0.2):
        """Frames Q diag(exp(a h)) with frame_size spread over [sqrt(d), H].

        Window membership and the push margin depend on F only through F F^T,
        so the right orthogonal factor is fixed to the identity.
        """
        d = self.base.center.shape[0] - (1 if self.model == "sphere" else 0)
        targets = np.sqrt(d) + (self.H - np.sqrt(d)) * rng.random(n)
        n_b = int(round(boundary_fraction * n))
        targets[:n_b] = self.H
        frames = np.empty((n, d, d))
        for k in range(n):
            Q = haar_orthogonal(d, rng) if d > 1 else np.eye(1)
            h = rng.standard_normal(d)
            h -= h.mean()
            nh = np.linalg.norm(h)
            h = h / nh if nh > 0 else h
            lo, hi = 0.0, 1.0
            while np.linalg.norm(np.exp(hi * h)) < targets[k] and hi < 1e3:
                hi *= 2.0
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if np.linalg.norm(np.exp(mid * h)) < targets[k]:
                    lo = mid
                else:
                    hi = mid
            frames[k] = Q * np.exp(lo * h)
        return frames, frames.reshape(n, -1)

    def sample_bases(self, n, rng, boundary_fraction=0.1):
        return _sample_base(self.base, n, rng, boundary_fraction)


def _restricted_norm(D, c):
    """||D restricted to the orthogonal complement of unit vector c||."""
    d = D.shape[-1]
    P = np.eye(d) - c[..., :, None] * c[..., None, :]
    return operator_norm(D @ P)


def tangent_coords(model, x, v):
    if model == "sphere":
        return np.einsum("...ij,...i->...j", canonical_tangent_basis(x), v)
    return np.asarray(v, dtype=float)


def sample_unit_tangents(ball, n, rng, boundary_fraction=0.1):
    x = _sample_base(ball, n, rng, boundary_fraction)
    if len(x) == 1 and n > 1:
        x = np.repeat(x, n, axis=0)
    g = rng.standard_normal(x.shape)
    if ball.model == "sphere":
        g -= np.sum(g * x, axis=1, keepdims=True) * x
    v = g / np.linalg.norm(g, axis=1, keepdims=True)
    return x, v


def build_analytic_window(family, V, epsilon, n_samples=2000, seed=0, samples=None):
    """Window {base in V, frame_size < H} with H = Theta^4/epsilon.

    Checks, on seeded (x, v) in the unit tangent bundle over the closure of V,
    that some map sends x into V and contracts v-perp by less than 1 - epsilon
    after normalization. Theta is the largest normalized derivative norm seen.
    """
    rng = np.random.default_rng(seed)
    if samples is None:
        x, v = sample_unit_tangents(V, n_samples, rng)
    else:
        x, v = samples
    c = tangent_coords(family.model, x, v)
    ok_any = np.zeros(len(x), dtype=bool)
    theta = 0.0
    for f in family:
        D = f.normalized_derivative(x)
        theta = max(theta, float(np.max(operator_norm(D))))
        inside = V.contains(f(x)) & f.in_domain(x)
        ok_any |= inside & (_restricted_norm(D, c) < 1.0 - epsilon)
    if not np.all(ok_any):
        k = int(np.nonzero(~ok_any)[0][0])
        raise AnalyticWindowError("directional-contraction hypothesis fails",
                                  {"x": x[k].tolist(), "v": v[k].tolist()})
    return NormWindow(window_bound(theta, epsilon), V, theta, float(epsilon))


def _base_spacing(model, xa, xb, frames):
    """Base spacing at fixed fiber coordinates.

    Frames are parametrized by their matrix in the canonical tangent basis,
    which is smooth away from the antipode of the pole, so the product
    (base point, coordinates) is a chart and each factor is measured on its own.
    """
    dx = np.linalg.norm(xa - xb, axis=-1)
    return np.broadcast_to(dx[:, None], (len(dx), len(frames)))


def verify_covering_frames(family, window, n_samples=4096, seed=0, n_base=None, n_fiber=None,
                           threads=None):
    """Sampled check that every frame in the closed window is pushed inside by some map.

    Samples a product of base points (boundary included) and frames (frame
    sizes up to and including the window bound). Lipschitz slack is estimated
    separately along the base and the fiber factor from nearest-neighbour
    pairs; grid_resolution is the larger mean nearest-neighbour spacing and
    lipschitz_slack is scaled so that slack * resolution equals the summed
    per-factor variation bound.
    """
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n_samples)))
    bases = window.sample_bases(n_base or side, rng)
    frames, fcoords = window.sample_fibers(n_fiber or side, rng)
    nb, nf = len(bases), len(frames)

    # maps with a constant derivative get their fiber margins computed once
    const_fm = {}
    for k, f in enumerate(family):
        if getattr(f, "kind", None) == "affine":
            const_fm[k] = window.fiber_margin(normalized(f.linear) @ frames)

    def work(sl):
        xb = bases[sl]
        best = np.full((len(xb), nf), -np.inf)
        wit = np.full((len(xb), nf), -1, dtype=int)
        for k, f in enumerate(family):
            dom = f.in_domain(xb)
            if not np.any(dom):
                continue
            y = f(xb)
            bm = np.where(dom, window.base_margin(y), -np.inf)
            cand = np.nonzero(bm > 0)[0]
            if len(cand) == 0:
                continue
            if k in const_fm:
                fm = np.broadcast_to(const_fm[k], (len(cand), nf))
            else:
                D = normalized(f.tangent_derivative(xb[cand]))
                fm = window.fiber_margin(D[:, None] @ frames[None])
            m = window.combine(fm, bm[cand][:, None])
            upd = m > best[cand]
            best[cand] = np.where(upd, m, best[cand])
            wit[cand] = np.where(upd, k, wit[cand])
        return best, wit

    parts = map_chunks(work, nb, 64, threads)
    best = np.concatenate([p[0] for p in parts])
    wit = np.concatenate([p[1] for p in parts])

    slack_total, resolutions = 0.0, []
    fi, fj, fd = nearest_neighbor_pairs(fcoords, k=2 * fcoords.shape[1])
    if len(fi):
        with np.errstate(invalid="ignore"):    # -inf minus -inf where no map applies
            dm = np.abs(best[:, fi] - best[:, fj])
        ok = np.isfinite(dm)
        ratio = np.where(ok, dm, 0.0) / np.maximum(fd, 1e-300)[None, :]
        h_f = float(np.mean(fd))
        slack_total += float(ratio.max()) * h_f
        resolutions.append(h_f)
    bi, bj, _ = nearest_neighbor_pairs(bases, k=2)
    if len(bi):
        bd = _base_spacing(window.model, bases[bi], bases[bj], frames)
        with np.errstate(invalid="ignore"):    # -inf minus -inf where no map applies
            dm = np.abs(best[bi] - best[bj])
        ok = np.isfinite(dm)
        ratio = np.where(ok, dm, 0.0) / np.maximum(bd, 1e-300)
        h_b = float(np.mean(bd))
        slack_total += float(ratio.max()) * h_b
        resolutions.append(h_b)
    resolution = max(resolutions) if resolutions else 0.0

    flat = best.ravel()
    witnesses = []
    for k in np.argsort(flat, kind="stable")[:5]:
        i, j = divmod(int(k), nf)
        if flat[k] > slack_total:
            break
        witnesses.append({"base": bases[i].tolist(), "frame": frames[j].tolist(),
                          "margin": float(flat[k]), "map": int(wit[i, j])})
    params = {"n_base": nb, "n_fiber": nf, "seed": int(seed), "frame_bound": float(window.frame_bound),
              "n_maps": len(family)}
    return _finalize("frames", params, nb * nf, flat, wit.ravel(), slack_total, resolution, witnesses,
                     window.units)


def _factor_slack(values, coords):
    """Max neighbour variation ratio times mean spacing, for a margin sampled on coords."""
    i, j, dist = nearest_neighbor_pairs(coords, k=2 * coords.shape[1])
    if len(i) == 0:
        return 0.0, 0.0
    dm = np.abs(values[i] - values[j])
    dist = np.maximum(dist, 1e-300).reshape((-1,) + (1,) * (dm.ndim - 1))
    ratio = np.where(np.isfinite(dm), dm, 0.0) / dist
    h = float(np.mean(dist))
    return float(ratio.max()) * h, h


def verify_split_covering(family, groups, window, seed=0, n_base=2000, n_fiber=6545, n_deriv=32,
                          threads=None):
    """Covering check split into a fiber factor and a base factor.

    ``groups`` partitions the maps (for the blender: one group per generator D,
    the members differing in translation). For group G and sampled frame A

        fiber_G(A) = min over g in G and sampled x of fiber_margin(D^g(x) A),
        base_G(x)  = max over g in G of base_margin(g(x)),

    and min(fiber_G(A), base_G(x)) lower-bounds the margin of every map of G
    chosen by the base factor, so best(x, A) = max_G min(fiber_G, base_G) is a
    valid lower bound on the product-test margin. fiber_G uses n_deriv base
    samples (boundary included) for maps without a constant derivative. Each
    factor gets its own Lipschitz slack, and the certificate passes when
    max_G min(fiber_G - slack_fiber, base_G - slack_base) > 0 at every sample.
    """
    rng = np.random.default_rng(seed)
    bases = window.sample_bases(n_base, rng)
    frames, fcoords = window.sample_fibers(n_fiber, rng)
    dbases = window.sample_bases(n_deriv, np.random.default_rng([seed, 1]), boundary_fraction=0.5)
    groups = [list(g) for g in groups]
    if sorted(i for g in groups for i in g) != list(range(len(family))):
        raise ValueError("groups must partition the family")

    def fiber_of(k):
        f = family[k]
        if getattr(f, "kind", None) == "affine":
            return window.fiber_margin(normalized(f.linear) @ frames)
        D = normalized(f.tangent_derivative(dbases))
        dom = f.in_domain(dbases)
        if not np.all(dom):
            return np.full(len(frames), -np.inf)
        return np.min(window.fiber_margin(D[:, None] @ frames[None]), axis=0)

    fm_map = map_ordered(fiber_of, range(len(family)), threads)
    fiber = np.stack([np.min([fm_map[k] for k in g], axis=0) for g in groups])    # (G, nf)
    base = np.empty((len(groups), len(bases)))
    for gi, g in enumerate(groups):
        bm = np.full(len(bases), -np.inf)
        for k in g:
            f = family[k]
            dom = f.in_domain(bases)
            bm = np.maximum(bm, np.where(dom, window.base_margin(f(bases)), -np.inf))
        base[gi] = bm

    # best over groups on the product grid, reduced by fixed chunks of base samples
    def work(sl):
        m = np.minimum(fiber[:, None, :], base[:, sl, None])
        return m.max(axis=0), m.argmax(axis=0)

    parts = map_chunks(work, len(bases), 256, threads)
    best = np.concatenate([p[0] for p in parts])
    wit = np.concatenate([p[1] for p in parts])
    # between samples each factor of each group moves by at most its own slack, so the
    # continuum margin is at least max_G min(fiber_G - s_f, base_G - s_b) at the nearest sample
    s_f, h_f = _factor_slack(fiber.T, fcoords)
    s_b, h_b = _factor_slack(base.T, bases)
    shifted = np.concatenate(map_chunks(
        lambda sl: np.minimum(fiber[:, None, :] - s_f, base[:, sl, None] - s_b).max(axis=0).ravel(),
        len(bases), 256, threads))
    # reported as an effective total slack, so that passed <=> worst_margin > slack_total
    slack_total = float(np.min(best)) - float(np.min(shifted))
    resolution = max(h_f, h_b)

    flat = best.ravel()
    witnesses = []
    for k in np.argsort(flat, kind="stable")[:5]:
        i, j = divmod(int(k), len(frames))
        if flat[k] > slack_total:
            break
        witnesses.append({"base": bases[i].tolist(), "frame": frames[j].tolist(),
                          "margin": float(flat[k]), "group": int(wit[i, j])})
    params = {"n_base": len(bases), "n_fiber": len(frames), "n_deriv": len(dbases), "seed": int(seed),
              "frame_bound": float(window.frame_bound), "n_maps": len(family), "n_groups": len(groups),
              "fiber_slack": s_f, "base_slack": s_b, "worst_fiber": float(np.min(np.max(fiber, axis=0))),
              "worst_base": float(np.min(np.max(base, axis=0)))}
    return _finalize("split", params, len(bases) * len(frames), flat, wit.ravel(), slack_total, resolution,
                     witnesses, window.units)
