"""The projective action of SL(d+1, R) on S^d.

Besides the map x -> Ax/|Ax| and its derivative this module holds the
diagonal condition, the normal-form word built from a single non-orthogonal
matrix, and a breadth-first scanner that steers unit tangent vectors into the
expanding cone of a diagonal matrix with rotation words.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .covering import CoveringCertificate, _finalize
from .frames import canonical_tangent_basis
from .linalg import co_norm, conformality, det, normalized, operator_norm, svd
from .maps import ProjectiveMap
from .sampling import nearest_neighbor_pairs

TARGET_ANGLE = 0.1
EPSILON_CONE = 0.1
NET_QUANTUM = 0.05


class NormalFormError(ValueError):
    pass


def sphere_map(A, x):
    A = np.asarray(A, dtype=float)
    y = np.einsum("...ij,...j->...i", A, np.asarray(x, dtype=float))
    return y / np.linalg.norm(y, axis=-1, keepdims=True)


def sphere_derivative(A, x):
    """Tangent derivative of x -> Ax/|Ax| from the canonical basis at x to the one at Ax/|Ax|.

    A may be a single matrix or a stack aligned with x.
    """
    A = np.asarray(A, dtype=float)
    x = np.asarray(x, dtype=float)
    Ax = np.einsum("...ij,...j->...i", A, x)
    nAx = np.linalg.norm(Ax, axis=-1)
    y = Ax / nAx[..., None]
    Bx = canonical_tangent_basis(x)
    By = canonical_tangent_basis(y)
    return np.swapaxes(By, -1, -2) @ A @ Bx / nAx[..., None, None]


def diagonal_model(d, top=2.0):
    """diag(top, 1, ..., 1, 1/top) acting on S^d."""
    r = np.ones(d + 1)
    r[0], r[-1] = top, 1.0 / top
    return np.diag(r)


def check_diagonal_condition(r):
    """0 < r_{d+1} < min_{i<=d} r_i and max_{1<i<=d} r_i^d < r_1 ... r_d (strict)."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("entries must be positive")
    d = len(r) - 1
    if d < 1:
        raise ValueError("need at least two entries")
    first = r[-1] < np.min(r[:-1])
    # sums of logs avoid overflow of r_i ** d for the large entries of long words
    lg = np.log(r[:-1])
    second = True if d == 1 else bool(np.max(d * lg[1:]) < np.sum(lg))
    return bool(first and second)


def signed_permutation(perm):
    """R with R e_i = +-e_perm[i]; the column of the last moved index is negated if det would be -1."""
    n = len(perm)
    R = np.zeros((n, n))
    R[list(perm), list(range(n))] = 1.0
    if np.linalg.det(R) < 0:
        moved = [i for i in range(n) if perm[i] != i]
        R[:, moved[-1]] *= -1.0
    return R


@dataclass
class NormalFormWord:
    """R_0 D^a_1 R_1 ... D^a_n R_n = diag(result)."""

    rotations: list
    exponents: list
    result: np.ndarray

    def product(self, D):
        D = np.asarray(D, dtype=float)
        Di = np.linalg.inv(D)
        P = np.array(self.rotations[0], dtype=float)
        for a, R in zip(self.exponents, self.rotations[1:]):
            P = P @ (D if a > 0 else Di) @ R
        return P

    def residual(self, D):
        P = self.product(D)
        T = np.diag(self.result)
        return float(np.linalg.norm(P - T) / np.linalg.norm(T))

    def to_dict(self):
        return {"rotations": [np.asarray(R).tolist() for R in self.rotations],
                "exponents": [int(a) for a in self.exponents],
                "result": np.asarray(self.result).tolist()}


def _merge(tokens, n):
    """Turn a list of ('R', matrix) / ('D', +-1) tokens into alternating form."""
    rotations, exponents = [], []
    cur = np.eye(n)
    for kind, val in tokens:
        if kind == "R":
            cur = cur @ val
        else:
            rotations.append(cur)
            exponents.append(int(val))
            cur = np.eye(n)
    rotations.append(cur)
    return rotations, exponents


def _power_tokens(factors, inverse=False):
    """Tokens of a product of words; each factor is (left, right) meaning left D right."""
    out = []
    seq = reversed(factors) if inverse else factors
    for left, right in seq:
        if inverse:
            out += [("R", right.T), ("D", -1), ("R", left.T)]
        else:
            out += [("R", left), ("D", 1), ("R", right)]
    return out


def normal_form(D, tol=1e-9, residual_tol=1e-8):
    """A word in D, D^-1 and rotations whose value is diagonal and meets the diagonal condition.

    Steps: SVD D = U S V^T with U, V in SO; sort S by a signed-permutation
    conjugation; D1 = product over permutations s fixing index 0 of
    R_s S R_s^-1; D2 = D1 R_rev D1^-1 R_rev^-1 with the order-reversing
    permutation; the output is D2 squared. The diagonal is computed from the
    singular values in log space; the word is checked by direct
    multiplication with a relative Frobenius residual.
    """
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    if D.shape != (n, n) or n < 2:
        raise ValueError("need a square matrix of size >= 2")
    if abs(det(D) - 1.0) > 1e-8:
        raise ValueError("D must be special linear")
    if conformality(D) <= 1.0 + tol:
        raise NormalFormError("orthogonal input: conformality does not exceed 1 + tol")
    U, S, V = svd(D)
    if np.linalg.det(U) < 0:
        U = U.copy()
        V = V.copy()
        U[:, -1] *= -1.0
        V[:, -1] *= -1.0
    order = np.argsort(-S, kind="stable")
    Pm = signed_permutation(tuple(order))
    # S_sorted = Pm^T diag(S) Pm = (U Pm)^T D (V Pm)
    U, V, S = U @ Pm, V @ Pm, S[order]
    # diag(S) = U^T D V, so a conjugate R diag(S) R^T is the word (R U^T) D (V R^T)
    base = []
    for rest in itertools.permutations(range(1, n)):
        R = signed_permutation((0,) + rest)
        base.append((R @ U.T, V @ R.T))
    rev = signed_permutation(tuple(range(n - 1, -1, -1)))
    d1 = _power_tokens(base)
    d1_inv = _power_tokens(base, inverse=True)
    d2 = d1 + [("R", rev)] + d1_inv + [("R", rev.T)]
    rotations, exponents = _merge(d2 + d2, n)

    from math import factorial
    ls = np.log(S)
    lt1 = factorial(n - 1) * ls[0]
    lt = -factorial(n - 2) * ls[0]
    logs = np.zeros(n)
    logs[0] = 2.0 * (lt1 - lt)
    logs[-1] = -logs[0]
    word = NormalFormWord(rotations, exponents, np.exp(logs))
    res = word.residual(D)
    if not res <= residual_tol:
        raise NormalFormError(f"reconstruction residual {res:.3e} exceeds {residual_tol:.1e}")
    return word


# ------------------------------------------------------------------ scanner

def _angle(a, b):
    c = np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.arccos(np.clip(c, -1.0, 1.0))


def contraction_margins(G, x, v):
    """(m(D_x g) - 1, 1 - ||normalized D_x g restricted to v-perp||) for g = projective map of G.

    G: (K, n, n) or (n, n); x, v: (K, n) ambient. For d=1 the restricted norm is 0.
    """
    D = sphere_derivative(G, x)
    m = co_norm(D)
    d = D.shape[-1]
    if d == 1:
        return m - 1.0, np.ones_like(m)
    c = np.einsum("...ij,...i->...j", canonical_tangent_basis(x), v)
    c /= np.linalg.norm(c, axis=-1, keepdims=True)
    P = np.eye(d) - c[..., :, None] * c[..., None, :]
    rn = operator_norm(normalized(D) @ P)
    return m - 1.0, 1.0 - rn


@dataclass
class RotationNet:
    """Distinct rotation words by length; word k is gens[last[k]] applied after word parent[k]."""

    rotations: np.ndarray
    parent: np.ndarray
    last: np.ndarray
    length: np.ndarray
    level_end: list = field(default_factory=list)

    def word(self, k):
        out = []
        while k > 0:
            out.append(int(self.last[k]))
            k = int(self.parent[k])
        return out[::-1]


def _with_inverses(gens):
    out = []
    for g in gens:
        g = np.asarray(g, dtype=float)
        out.append(g)
        if not np.allclose(g @ g, np.eye(len(g)), atol=1e-12):
            out.append(g.T)
    return out


def grow_rotation_net(gens, max_len, quantum=NET_QUANTUM, callback=None):
    """Breadth-first net of words up to max_len, deduplicated on a quantized matrix grid.

    callback(net, lo, hi) is called after each level with the new index range
    and may return True to stop early.
    """
    gens = np.asarray(gens, dtype=float)
    n = gens.shape[-1]
    rot = [np.eye(n)]
    parent, last, length = [-1], [-1], [0]
    seen = {tuple(np.round(np.eye(n) / quantum).astype(np.int64).ravel())}
    level_end = [1]
    net = RotationNet(np.array(rot), np.array(parent), np.array(last), np.array(length), level_end)
    if callback is not None and callback(net, 0, 1):
        return net
    lo, hi = 0, 1
    for L in range(1, max_len + 1):
        frontier = np.array(rot[lo:hi])
        cand = np.einsum("gij,fjk->fgik", gens, frontier).reshape(-1, n, n)
        keys = np.round(cand / quantum).astype(np.int64).reshape(len(cand), -1)
        for c in range(len(cand)):
            key = tuple(keys[c])
            if key in seen:
                continue
            seen.add(key)
            rot.append(cand[c])
            parent.append(lo + c // len(gens))
            last.append(c % len(gens))
            length.append(L)
        lo, hi = hi, len(rot)
        level_end.append(hi)
        net = RotationNet(np.array(rot), np.array(parent), np.array(last), np.array(length), level_end)
        if hi == lo:
            break
        if callback is not None and callback(net, lo, hi):
            break
    return net


@dataclass
class ScanReport:
    n_samples: int
    covered: np.ndarray
    word_index: np.ndarray
    word_length: np.ndarray
    expansion_margin: np.ndarray
    contraction_margin: np.ndarray
    net: RotationNet = field(repr=False)
    A_hat: np.ndarray = field(repr=False)
    params: dict = field(default_factory=dict)

    @property
    def coverage(self):
        return float(np.mean(self.covered)) if self.n_samples else 1.0

    def histogram(self):
        L = self.word_length[self.covered]
        return {int(k): int(np.sum(L == k)) for k in np.unique(L)}

    def family_matrices(self):
        """Distinct words used, composed with A_hat: g = f_A_hat o R."""
        idx = np.unique(self.word_index[self.covered])
        return np.array([self.A_hat @ self.net.rotations[k] for k in idx]), idx

    def summary(self):
        em = self.expansion_margin[self.covered]
        cm = self.contraction_margin[self.covered]
        return {"n_samples": int(self.n_samples), "coverage": self.coverage,
                "word_length_histogram": {str(k): v for k, v in self.histogram().items()},
                "worst_expansion_margin": float(em.min()) if len(em) else None,
                "worst_contraction_margin": float(cm.min()) if len(cm) else None,
                "n_words": int(len(np.unique(self.word_index[self.covered]))),
                "net_size": int(len(self.net.rotations)), "params": dict(self.params)}

    def word_rows(self):
        for i in range(self.n_samples):
            w = self.net.word(int(self.word_index[i])) if self.covered[i] else []
            yield i, w, float(self.expansion_margin[i]), float(self.contraction_margin[i])


def directional_contraction_scan(rot_generators, A_hat, grid, max_word_len=12, epsilon_cone=EPSILON_CONE,
                                 target_angle=TARGET_ANGLE, margin=0.0, quantum=NET_QUANTUM):
    """Find, for each (x, v), a rotation word R steering (x, v) near (e_{d+1}, e_1).

    R must satisfy angle(Rx, e_{d+1}) < target_angle and, for d >= 2,
    angle(Rv, e_1) < epsilon_cone. With g = f_A_hat o R the sample counts as
    covered when m(D_x g) > 1 and ||normalized D_x g on v-perp|| < 1 - margin.
    Among admissible words of the shortest length the one with the largest
    min of both margins is kept. Words come from a single breadth-first net
    shared by all samples (see ``grow_rotation_net``).
    """
    from scipy.spatial import cKDTree

    A_hat = np.asarray(A_hat, dtype=float)
    n = A_hat.shape[0]
    d = n - 1
    diag = np.diag(A_hat)
    if not np.allclose(A_hat, np.diag(diag)) or not check_diagonal_condition(np.abs(diag)):
        raise ValueError("A_hat must be diagonal and satisfy the diagonal condition")
    x, v = (np.asarray(a, dtype=float) for a in grid)
    K = len(x)
    gens = _with_inverses(rot_generators)
    for g in gens:
        if not np.allclose(g @ g.T, np.eye(n), atol=1e-10) or np.linalg.det(g) < 0:
            raise ValueError("generators must be rotations")
    covered = np.zeros(K, dtype=bool)
    widx = np.full(K, -1, dtype=np.int64)
    wlen = np.full(K, -1, dtype=np.int64)
    em = np.full(K, -np.inf)
    cm = np.full(K, -np.inf)
    feat_s = np.concatenate([x, v], axis=1) if d >= 2 else x
    ru = 2.0 * np.sin(target_angle / 2.0)
    rc = 2.0 * np.sin(epsilon_cone / 2.0) if d >= 2 else 0.0
    radius = np.hypot(ru, rc)
    e_top = np.zeros(n)
    e_top[-1] = 1.0
    e1 = np.zeros(n)
    e1[0] = 1.0

    def examine(net, lo, hi):
        todo = np.nonzero(~covered)[0]
        if len(todo) == 0:
            return True
        R = net.rotations[lo:hi]
        # angle(R x, e_top) = angle(x, R^T e_top): compare x with the last row of R
        feat_r = np.concatenate([R[:, -1, :], R[:, 0, :]], axis=1) if d >= 2 else R[:, -1, :]
        tree = cKDTree(feat_r)
        hits = tree.query_ball_point(feat_s[todo], radius)
        pi, pr = [], []
        for s, h in zip(todo, hits):
            pi += [s] * len(h)
            pr += h
        if not pi:
            return False
        pi, pr = np.array(pi), np.array(pr)
        Rs = R[pr]
        Rx = np.einsum("kij,kj->ki", Rs, x[pi])
        ok = _angle(Rx, e_top) < target_angle
        if d >= 2:
            Rv = np.einsum("kij,kj->ki", Rs, v[pi])
            ok &= _angle(Rv, e1) < epsilon_cone
        pi, pr, Rs = pi[ok], pr[ok], Rs[ok]
        if len(pi) == 0:
            return False
        a, b = contraction_margins(A_hat @ Rs, x[pi], v[pi])
        good = (a > 0) & (b - margin > 0)
        score = np.minimum(a, b - margin)
        for s, k, sc, aa, bb, gd in zip(pi, pr, score, a, b, good):
            if gd and (not covered[s] or sc > min(em[s], cm[s] - margin)):
                covered[s] = True
                widx[s] = lo + k
                wlen[s] = net.length[lo + k]
                em[s], cm[s] = aa, bb
        return bool(np.all(covered))

    net = grow_rotation_net(gens, max_word_len, quantum, examine)
    params = {"max_word_len": int(max_word_len), "epsilon_cone": float(epsilon_cone),
              "target_angle": float(target_angle), "margin": float(margin), "quantum": float(quantum),
              "n_generators": len(rot_generators)}
    return ScanReport(K, covered, widx, wlen, em, cm, net, A_hat, params)


def _tangent_bundle_distance(x, v, i, j):
    return np.sqrt(np.sum((x[i] - x[j]) ** 2, axis=-1) + np.sum((v[i] - v[j]) ** 2, axis=-1))


def theorem_A_certificate(family, grid, k_neighbors=None, margin=0.0):
    """Re-verify m(D_x g) > 1 and ||normalized D_x g on v-perp|| < 1 on a grid, with Lipschitz slack.

    family: matrices G (projective maps x -> Gx/|Gx|). At each sample the best
    margin is max over g of min(m - 1, 1 - margin - restricted norm). Slack is
    the largest ratio of margin change to distance over nearest-neighbour
    pairs in the unit tangent bundle (ambient metric); grid_resolution is the
    largest nearest-neighbour distance halved, so every point of the bundle
    lies within it of a sample when the grid is quasi-uniform.
    """
    G = np.asarray(family, dtype=float)
    if G.ndim == 2:
        G = G[None]
    x, v = (np.asarray(a, dtype=float) for a in grid)
    K = len(x)
    best = np.full(K, -np.inf)
    wit = np.full(K, -1, dtype=np.int64)
    for c in range(0, K, 512):
        sl = slice(c, min(K, c + 512))
        xs, vs = x[sl], v[sl]
        k = len(xs)
        Gs = np.broadcast_to(G[:, None], (len(G), k) + G.shape[1:]).reshape(-1, *G.shape[1:])
        a, b = contraction_margins(Gs, np.tile(xs, (len(G), 1)), np.tile(vs, (len(G), 1)))
        sc = np.minimum(a, b - margin).reshape(len(G), k)
        best[sl] = sc.max(axis=0)
        wit[sl] = sc.argmax(axis=0)
    d = x.shape[1] - 1
    feats = np.concatenate([x, v], axis=1)
    kk = k_neighbors or (2 * (2 * d - 1))
    i, j, dist = nearest_neighbor_pairs(feats, k=kk)
    diff = np.abs(best[i] - best[j])
    fin = np.isfinite(diff)
    L = float(np.max(np.where(fin, diff / np.maximum(dist, 1e-300), 0.0), initial=0.0))
    nn = nearest_neighbor_pairs(feats, k=1)[2]
    h = float(nn.max()) / 2.0 if len(nn) else 0.0
    witnesses = []
    for s in np.argsort(best, kind="stable")[:5]:
        if best[s] > L * h:
            break
        witnesses.append({"x": x[s].tolist(), "v": v[s].tolist(), "margin": float(best[s])})
    params = {"n_maps": int(len(G)), "k_neighbors": int(kk), "margin": float(margin)}
    return _finalize("theorem_A", params, K, best, wit, L * h, h, witnesses, "margin")


def random_rotations(n, count, seed):
    from .linalg import haar_orthogonal
    rng = np.random.default_rng(seed)
    return [haar_orthogonal(n, rng) for _ in range(count)]


def projective_family(matrices, labels=None):
    from .maps import GeneratorFamily
    return GeneratorFamily([ProjectiveMap(M) for M in matrices], labels)


def pole_rotation(p):
    """Rotation in span(p, pole) taking the unit vector p to the last basis vector."""
    p = np.asarray(p, dtype=float)
    n = len(p)
    e = np.zeros(n)
    e[-1] = 1.0
    c = float(p @ e)
    if c <= -1.0 + 1e-12:
        raise ValueError("p is antipodal to the pole")
    s = p + e
    return np.eye(n) - np.outer(s, s) / (1.0 + c) + 2.0 * np.outer(e, p)


def cap_cover_family(cap_angle=0.2, n_spin=8, spacing=None, top=2.0):
    """Maps pole_rotation(p) followed by a spin about the pole and diag(top, 1, 1/top) on S^2.

    The centres p run over a hexagonal lattice of geodesic spacing ``spacing``
    (default cap_angle/2.5) within cap_angle + spacing of the pole, so every
    point of the closed cap is sent near the pole by some rotation, and the
    spins give every tangent direction a map contracting it.
    """
    h = cap_angle / 2.5 if spacing is None else float(spacing)
    m = int(np.ceil((cap_angle + h) / h)) + 1
    centres = []
    for j in range(-m, m + 1):
        for i in range(-m, m + 1):
            q = np.array([(i + 0.5 * (j % 2)) * h, j * h * np.sqrt(3.0) / 2.0])
            rho = np.linalg.norm(q)
            if rho <= cap_angle + h:
                u = q / rho if rho > 0 else np.zeros(2)
                centres.append(np.array([np.sin(rho) * u[0], np.sin(rho) * u[1], np.cos(rho)]))
    A = diagonal_model(2, top)
    mats, labels = [], []
    for a, p in enumerate(centres):
        R = pole_rotation(p)
        for k in range(n_spin):
            c, s = np.cos(np.pi * k / n_spin), np.sin(np.pi * k / n_spin)
            spin = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            mats.append(A @ spin @ R)
            labels.append(f"A.spin{k}.p{a}")
    return projective_family(mats, labels)
