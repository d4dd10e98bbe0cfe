"""Experiments on pseudo-orbits, image-ball shapes, distortion and ball growth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frames import canonical_tangent_basis
from .linalg import (conformality, det, haar_orthogonal, normalized, operator_norm, singular_values, svd)
from .maps import SmoothMap
from .sampling import ball_points, unit_directions

NOISE_POLICIES = ("zero", "adversarial", "radial", "uniform")
NOISE_FILL = 1.0 - 1e-9
BISECT_RTOL = 1e-12
MIN_DIRECTIONS = 256


class PreconditionError(ValueError):
    pass


class DomainEscapeError(RuntimeError):
    pass


@dataclass(frozen=True)
class ContractionSpec:
    lambda_lo: float
    lambda_hi: float
    kappa: float
    alpha: float
    C: float

    def __post_init__(self):
        if not (0 < self.lambda_lo < self.lambda_hi < 1):
            raise ValueError("need 0 < lambda_lo < lambda_hi < 1")
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")
        if not (0 < self.alpha <= 1):
            raise ValueError("alpha must lie in (0, 1]")
        if not self.C > 0:
            raise ValueError("C must be positive")

    @property
    def xi_admissible(self):
        """C^(-1/alpha) (1 - lambda_hi)^(1/alpha)."""
        return self.C ** (-1.0 / self.alpha) * (1.0 - self.lambda_hi) ** (1.0 / self.alpha)


def _sequence_bounds(D):
    """(min co-norm, max norm, max kappa of D_{i,1}) per sequence; D is (B, N, d, d)."""
    S = singular_values(D)
    P = np.broadcast_to(np.eye(D.shape[-1]), D.shape[:1] + D.shape[-2:]).copy()
    kappa = np.ones(D.shape[0])
    for i in range(D.shape[1]):
        P = normalized(D[:, i] @ P)
        kappa = np.maximum(kappa, conformality(P))
    return S[..., -1].min(axis=-1), S[..., 0].max(axis=-1), kappa


def sequence_spec(D_seq, C, alpha):
    """Tightest ContractionSpec satisfied by a matrix sequence (kappa taken over D_{i,1}).

    The co-norm bound in the contraction hypothesis is not strict, so for
    sequences with min co-norm equal to max norm the lower bound is nudged down.
    """
    D = np.asarray(D_seq, dtype=float)[None]
    lo, hi, kappa = (float(v[0]) for v in _sequence_bounds(D))
    return ContractionSpec(min(lo, hi * (1.0 - 1e-12)), hi, kappa, float(alpha), float(C))


def _haar_stack(d, n, rng):
    Z = rng.standard_normal((n, d, d))
    Q, R = np.linalg.qr(Z)
    Q = Q * np.sign(np.diagonal(R, axis1=-2, axis2=-1))[:, None, :]
    neg = np.linalg.det(Q) < 0
    Q[neg, :, 0] *= -1.0
    return Q


def telescoping_sequence(d, n, kappa, lambda_hi, rng, spread=0.2):
    """Random D_i = s_i M_i M_{i-1}^-1 with M_0 = I and kappa(M_i) = kappa.

    Then D_{i,1} = (s_1...s_i) M_i is kappa-conformal for every i, and s_i is
    chosen so that ||D_i|| lies in [(1 - spread) lambda_hi, lambda_hi].
    """
    a = np.zeros(d)
    a[0], a[-1] = 0.5 * np.log(kappa), -0.5 * np.log(kappa)
    M = _haar_stack(d, n, rng) * np.exp(a)[None, None, :] @ _haar_stack(d, n, rng)
    Mprev = np.concatenate([np.eye(d)[None], M[:-1]])
    T = M @ np.linalg.inv(Mprev)
    s = lambda_hi * (1.0 - spread * rng.random(n)) / operator_norm(T)
    return s[:, None, None] * T


def _remaining_products(Dh):
    """Norm-scaled D_{N,i+2} (normalized factors) and its top right singular vector, for i < N-1.

    Dh is (B, N, d, d); rows i = N-1 are zero.
    """
    B, N, d = Dh.shape[0], Dh.shape[1], Dh.shape[-1]
    Rs = np.zeros((B, N, d, d))
    vs = np.zeros((B, N, d))
    R = np.broadcast_to(np.eye(d), (B, d, d)).copy()
    for i in range(N - 2, -1, -1):
        R = R @ Dh[:, i + 1]
        R = R / operator_norm(R)[:, None, None]
        Rs[:, i] = R
    vs[:, :N - 1] = svd(Rs[:, :N - 1])[2][..., :, 0]
    return Rs, vs


def key_lemma_ratio(D_seq, y0, C, alpha, noise="adversarial", seed=None, fill=NOISE_FILL, check=True):
    """Ratios |y_n - D_{n,1} y_0| / (|det D_{n,1}|^(1/d) |y_0|^(1+alpha)) for n = 0..N.

    The pseudo-orbit is y_{i+1} = D_{i+1} y_i + e_i with |e_i| = fill * C |y_i|^(1+alpha)
    (zero for ``noise='zero'``, a uniform point of that ball for ``'uniform'``).
    ``'adversarial'`` points e_i along the top right singular vector of the
    remaining product D_{N,i+2}, signed so that its image adds to the image of
    the current error; ``'radial'`` points e_i along D_{i+1} y_i. Everything is
    carried in coordinates scaled by |det D_{n,1}|^(1/d) so long runs do not
    underflow. D_seq may be (N, d, d) or a batch (B, N, d, d) with y0 (B, d);
    batch rows are independent. Returns (ratios, running_max).
    """
    if noise not in NOISE_POLICIES:
        raise ValueError(f"noise must be one of {NOISE_POLICIES}")
    D = np.asarray(D_seq, dtype=float)
    single = D.ndim == 3
    if single:
        D = D[None]
    B, N, d = D.shape[0], D.shape[1], D.shape[-1]
    y0 = np.broadcast_to(np.asarray(y0, dtype=float), (B, d)).copy()
    r0 = np.linalg.norm(y0, axis=-1)
    if check:
        lo, hi, _ = _sequence_bounds(D)
        if not np.all(hi < 1):
            raise PreconditionError("sequence is not contracting")
        xi = C ** (-1.0 / alpha) * (1.0 - hi) ** (1.0 / alpha)
        if not np.all((r0 > 0) & (r0 <= xi)):
            k = int(np.nonzero(~((r0 > 0) & (r0 <= xi)))[0][0])
            raise PreconditionError(f"|y0| = {r0[k]!r} outside (0, {xi[k]!r}]")
    rng = np.random.default_rng(seed) if noise == "uniform" else None
    logc_step = np.log(np.abs(det(D))) / d
    Dh = D / np.exp(logc_step)[..., None, None]
    Rs, rem = _remaining_products(Dh) if noise == "adversarial" else (None, None)

    ratios = np.zeros((B, N + 1))
    p = y0.copy()            # D_{n,1} y0 / c_n
    u = np.zeros((B, d))     # (y_n - D_{n,1} y0) / c_n
    logc = np.zeros(B)
    scale = r0 ** (1.0 + alpha)
    for i in range(N):
        y_dir = p + u        # y_i / c_i
        ny = np.linalg.norm(y_dir, axis=-1)
        A = Dh[:, i]
        p = np.einsum("bij,bj->bi", A, p)
        u = np.einsum("bij,bj->bi", A, u)
        logc_next = logc + logc_step[:, i]
        if noise != "zero":
            with np.errstate(divide="ignore"):
                mag = fill * C * np.exp((1.0 + alpha) * (logc + np.log(ny)) - logc_next)
            mag = np.where(ny > 0, mag, 0.0)
            if noise == "radial":
                e = np.einsum("bij,bj->bi", A, y_dir)
                e = e / np.linalg.norm(e, axis=-1, keepdims=True)
            elif noise == "uniform":
                g = rng.standard_normal((B, d))
                e = g / np.linalg.norm(g, axis=-1, keepdims=True) * rng.random((B, 1)) ** (1.0 / d)
            elif i < N - 1:
                R = Rs[:, i]
                Re = np.einsum("bij,bj->bi", R, rem[:, i])
                Ru = np.einsum("bij,bj->bi", R, u)
                sgn = np.where(np.sum(Re * Ru, axis=-1) >= 0, 1.0, -1.0)
                e = sgn[:, None] * rem[:, i]
            else:
                nu = np.linalg.norm(u, axis=-1, keepdims=True)
                e = np.where(nu > 0, u / np.where(nu > 0, nu, 1.0), np.eye(d)[0])
            u = u + mag[:, None] * e
        logc = logc_next
        ratios[:, i + 1] = np.linalg.norm(u, axis=-1) / scale
    run = np.maximum.accumulate(ratios, axis=-1)
    if single:
        return ratios[0], run[0]
    return ratios, run


def scalar_radial_ratio(lam, s0, C, alpha, n, fill=NOISE_FILL):
    """Reference for D_i = lam I with radial noise: s_{i+1} = lam s_i + fill C s_i^(1+alpha)."""
    s = s0
    out = [0.0]
    for k in range(1, n + 1):
        s = lam * s + fill * C * s ** (1.0 + alpha)
        out.append((s - lam ** k * s0) / (lam ** k * s0 ** (1.0 + alpha)))
    return np.array(out)


# ------------------------------------------------------------ image balls

def branch_maps(family, branch):
    return [family[int(k)] for k in branch.map_indices]


def _orbit(maps, x0):
    xs = [np.asarray(x0, dtype=float)]
    for f in maps:
        xs.append(np.asarray(f(xs[-1][None]))[0])
    return xs


def _displace(maps, xs, delta, model):
    """f^n(x0 + delta) - f^n(x0) along the stored orbit, batched over rows of delta."""
    delta = np.asarray(delta, dtype=float)
    if model == "sphere":
        # delta rows are tangent vectors; move along the great circle
        x0 = xs[0]
        nrm = np.linalg.norm(delta, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            u = np.where(nrm > 0, delta / nrm, 0.0)
        pts = x0 * np.cos(nrm) + u * np.sin(nrm)
        for f in maps:
            if not np.all(f.in_domain(pts)):
                raise DomainEscapeError("probe left the domain of a map")
            pts = f(pts)
        c = np.clip(pts @ xs[-1], -1.0, 1.0)
        return np.arccos(c)
    for k, f in enumerate(maps):
        if f.domain is not None and not np.all(f.in_domain(xs[k] + delta)):
            raise DomainEscapeError("probe left the domain of a map")
        delta = f.displacement(xs[k][None], delta)
    return np.linalg.norm(delta, axis=-1)


def _tangent_directions(model, x0, n_dir, seed=0):
    x0 = np.asarray(x0, dtype=float)
    d = x0.shape[0] - 1 if model == "sphere" else x0.shape[0]
    c = unit_directions(d, n_dir, seed)
    if model == "sphere":
        return c @ canonical_tangent_basis(x0).T, c
    return c, c


def _lift(model, x0, c):
    if model == "sphere":
        return c @ canonical_tangent_basis(np.asarray(x0, dtype=float)).T
    return c


def _radius_along(maps, xs, model, U, xi, s_guess, rtol=BISECT_RTOL):
    """Per direction u (rows of U, unit), the s with |f^n(x + s u) - f^n(x)| = xi."""
    lo = np.zeros(len(U))
    hi = np.asarray(s_guess, dtype=float).copy()
    for _ in range(200):
        g = _displace(maps, xs, hi[:, None] * U, model)
        small = g < xi
        if not np.any(small):
            break
        lo = np.where(small, hi, lo)
        hi = np.where(small, 2.0 * hi, hi)
    lo = np.where(lo == 0, 0.0, lo)
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        g = _displace(maps, xs, mid[:, None] * U, model)
        inside = g < xi
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
        if np.all(hi - lo <= rtol * hi):
            break
    return 0.5 * (lo + hi)


def _linear_guess(maps, xs, model, U, xi):
    d = len(xs[0]) - (1 if model == "sphere" else 0)
    P = np.eye(d)
    for k, f in enumerate(maps):
        P = np.asarray(f.tangent_derivative(xs[k][None]))[0] @ P
    C = U @ canonical_tangent_basis(xs[0]) if model == "sphere" else U
    g = np.linalg.norm(C @ P.T, axis=-1)
    return xi / np.maximum(g, 1e-300)


def _refine_extreme(fun, c0, d, step, sign):
    """Optimize sign*fun over unit coordinate directions near c0."""
    from scipy.optimize import minimize, minimize_scalar

    if d == 1:
        return float(fun(c0))
    if d == 2:
        a0 = float(np.arctan2(c0[1], c0[0]))
        res = minimize_scalar(lambda a: sign * fun(np.array([np.cos(a), np.sin(a)])),
                              bounds=(a0 - step, a0 + step), method="bounded",
                              options={"xatol": 1e-13})
        return sign * min(float(res.fun), sign * float(fun(c0)))
    B = np.linalg.svd(c0[None, :])[2][1:].T

    def obj(z):
        c = c0 + B @ z
        return sign * fun(c / np.linalg.norm(c))

    res = minimize(obj, np.zeros(d - 1), method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-16, "maxiter": 4000,
                            "initial_simplex": np.vstack([np.zeros(d - 1), step * np.eye(d - 1)])})
    best = min(res.fun, obj(np.zeros(d - 1)))
    return float(sign * best)


@dataclass
class Roundness:
    r_inner: float
    r_outer: float
    theta: float
    n: int


def ball_roundness(maps, x0, xi, model="euclidean", n_directions=MIN_DIRECTIONS, refine=True,
                   require_expanding=True, seed=0):
    """Inner and outer probe radii of the ball whose n-th image has radius xi.

    For each sampled unit direction u the radius s(u) with
    |f^n(x + s u) - f^n(x)| = xi is found by bisection; the smallest and the
    largest s are then refined by a local optimization over the direction.
    On S^d probes move along great circles and distances are geodesic.
    """
    maps = list(maps)
    if n_directions < MIN_DIRECTIONS:
        raise ValueError(f"need at least {MIN_DIRECTIONS} directions")
    xs = _orbit(maps, x0)
    if require_expanding:
        from .linalg import co_norm
        eta = min(float(co_norm(np.asarray(f.tangent_derivative(xs[k][None]))[0])) for k, f in enumerate(maps)) \
            if maps else np.inf
        if not eta > 1:
            raise PreconditionError(f"sequence is not expanding along the orbit (min co-norm {eta!r})")
    U, coords = _tangent_directions(model, x0, n_directions, seed)
    s = _radius_along(maps, xs, model, U, xi, _linear_guess(maps, xs, model, U, xi))
    r_in, r_out = float(s.min()), float(s.max())
    if refine and coords.shape[1] > 1:
        d = coords.shape[1]
        step = 2.0 * np.pi / n_directions if d == 2 else 0.5

        def s_of(c):
            u = _lift(model, x0, c[None])
            return float(_radius_along(maps, xs, model, u, xi, _linear_guess(maps, xs, model, u, xi))[0])

        r_in = min(r_in, _refine_extreme(s_of, coords[int(np.argmin(s))], d, step, 1.0))
        r_out = max(r_out, _refine_extreme(s_of, coords[int(np.argmax(s))], d, step, -1.0))
    return Roundness(r_in, r_out, r_out / r_in, len(maps))


def roundness_profile(maps, x0, xi, ns, model="euclidean", n_directions=MIN_DIRECTIONS, refine=True,
                      require_expanding=True):
    maps = list(maps)
    return [ball_roundness(maps[:n], x0, xi, model, n_directions, refine, require_expanding) for n in ns]


def inner_image_radius(maps, x0, s0, model="euclidean", n_directions=MIN_DIRECTIONS, refine=True):
    """Distance from f^n(x) to the image of the sphere of radius s0 about x (min over directions)."""
    maps = list(maps)
    xs = _orbit(maps, x0)
    U, coords = _tangent_directions(model, x0, n_directions)
    g = _displace(maps, xs, s0 * U, model)
    r = float(g.min())
    if refine and coords.shape[1] > 1:
        d = coords.shape[1]
        step = 2.0 * np.pi / n_directions if d == 2 else 0.5

        def g_of(c):
            return float(_displace(maps, xs, s0 * _lift(model, x0, c[None]), model)[0])

        r = min(r, _refine_extreme(g_of, coords[int(np.argmin(g))], d, step, 1.0))
    return r


def ball_growth_steps(maps, x0, s0, rho, model="euclidean", n_directions=MIN_DIRECTIONS, max_steps=None):
    """First n with inner radius of f^n(B(x0, s0)) >= rho (relative tolerance BISECT_RTOL).

    Returns (n, bound, eta) with eta the min co-norm along the orbit and
    bound = ceil(log(rho/s0)/log(eta)) + 1.
    """
    from .linalg import co_norm

    maps = list(maps)
    if not (0 < s0 <= rho):
        raise PreconditionError("need 0 < s0 <= rho")
    xs = _orbit(maps, x0)
    eta = min(float(co_norm(np.asarray(f.tangent_derivative(xs[k][None]))[0])) for k, f in enumerate(maps)) \
        if maps else np.inf
    if s0 >= rho:
        bound = 0
    else:
        bound = int(np.ceil(np.log(rho / s0) / np.log(eta))) + 1 if eta > 1 else None
    limit = len(maps) if max_steps is None else min(len(maps), max_steps)
    for n in range(limit + 1):
        if n == 0:
            r = s0
        else:
            r = inner_image_radius(maps[:n], x0, s0, model, n_directions)
        # unit direction vectors carry rounding, so compare at the bisection tolerance
        if r >= rho * (1.0 - BISECT_RTOL):
            return n, bound, eta
    raise PreconditionError(f"inner radius stayed below rho for {limit} steps")


# ------------------------------------------------------ distortion and infiltration

def quadratic_contraction(A, Q):
    """h(x) = A x + Q[x, x] with Q an (d, d, d) array: h_k = sum_ij Q[k, i, j] x_i x_j."""
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)

    def fn(x):
        return x @ A.T + np.einsum("kij,...i,...j->...k", Q, x, x)

    def jac(x):
        return A + np.einsum("kij,...j->...ki", Q + np.swapaxes(Q, 1, 2), x)

    return SmoothMap(fn, jac, A.shape[0], label="quadratic")


def _jacobian_product(maps, X):
    d = X.shape[-1]
    J = np.broadcast_to(np.eye(d), X.shape[:-1] + (d, d)).copy()
    orbit = [X]
    for f in maps:
        J = np.asarray(f.tangent_derivative(X)) @ J
        X = f(X)
        orbit.append(X)
    return J, orbit


def _holder_constant(f, X, Y, alpha):
    a = np.log(np.abs(det(f.tangent_derivative(X))))
    b = np.log(np.abs(det(f.tangent_derivative(Y))))
    dist = np.linalg.norm(X - Y, axis=-1)
    ok = dist > 0
    if not np.any(ok):
        return 0.0
    return float(np.max(np.abs(a - b)[ok] / dist[ok] ** alpha))


def distortion_ratio(h_seq, R, n, n_samples=2000, seed=0, alpha=1.0, center=None):
    """Measured L1 and the bound exp(L' R^alpha / (1 - lambda_hi^alpha)).

    L1 = max over sampled x in the closed R-ball of max(rho, 1/rho),
    rho = |det D_x h^n| / |det D_0 h^n|. L' is the Hölder constant of
    log|det Dh_j| measured over random pairs in the ball and over the orbit
    pairs (h^j(x), h^j(0)); lambda_hi is the largest sampled ||Dh_j||.
    """
    maps = list(h_seq)[:n]
    rng = np.random.default_rng(seed)
    d = maps[0].dim
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    X = ball_points(c, R, n_samples, rng, boundary_fraction=0.2)
    lam = 0.0
    for f in maps:
        lam = max(lam, float(np.max(operator_norm(f.tangent_derivative(X)))))
    if not lam < 1:
        raise PreconditionError(f"contraction hypothesis fails: sup ||Dh|| = {lam!r}")
    J, orbit = _jacobian_product(maps, np.vstack([c[None], X]))
    dets = np.abs(det(J))
    rho = dets[1:] / dets[0]
    L1 = float(np.max(np.maximum(rho, 1.0 / rho)))
    Y = ball_points(c, R, n_samples, rng)
    Lp = 0.0
    for k, f in enumerate(maps):
        Lp = max(Lp, _holder_constant(f, X, Y, alpha))
        Ok = orbit[k]
        Lp = max(Lp, _holder_constant(f, Ok[1:], np.broadcast_to(Ok[0], Ok[1:].shape), alpha))
    bound = float(np.exp(Lp * R ** alpha / (1.0 - lam ** alpha)))
    return {"L1": L1, "bound": bound, "L_prime": Lp, "lambda_hi": lam, "n": len(maps), "R": float(R),
            "alpha": float(alpha)}


def infiltration_check(h_seq, xi0, n_samples=500, n_steps=None, seed=0, center=None):
    """max over sampled x in the closed xi0-ball and k <= n_steps of kappa(D_x h^k)."""
    maps = list(h_seq) if n_steps is None else list(h_seq)[:n_steps]
    rng = np.random.default_rng(seed)
    d = maps[0].dim
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    X = np.vstack([c[None], ball_points(c, xi0, n_samples, rng, boundary_fraction=0.2)])
    J = np.broadcast_to(np.eye(d), (len(X), d, d)).copy()
    per_step = []
    for f in maps:
        J = normalized(np.asarray(f.tangent_derivative(X)) @ J)
        X = f(X)
        per_step.append(float(np.max(conformality(J))))
    kb = max(per_step) if per_step else 1.0
    return {"kappa_bar": kb, "per_step": per_step, "xi0": float(xi0)}
