"""Orbit branches: greedy window-keeping selection and i.i.d. random branches.

Branches are generated in batches (one row per start) so that ensembles
share the vectorized kernels; each row evolves independently of the others.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .frames import FramePoint
from .linalg import co_norm, conformality, det, normalized, operator_norm, singular_values

TIE_BREAKS = ("max-margin", "first-index", "seeded-random")


class NoAdmissibleMapError(RuntimeError):
    def __init__(self, step, branch, point):
        super().__init__(f"no admissible map at step {step} (branch {branch})")
        self.step = step
        self.branch = branch
        self.point = point


@dataclass
class Branch:
    model: str
    map_indices: np.ndarray
    points: np.ndarray
    kappa_history: np.ndarray
    expansion_history: np.ndarray
    log_norm_history: np.ndarray
    frames: np.ndarray = field(default=None, repr=False)
    margins: np.ndarray = field(default=None, repr=False)
    kappa_bound: float = float("nan")

    def __len__(self):
        return len(self.map_indices)

    @property
    def frame_history(self):
        if self.frames is None:
            return []
        return [FramePoint(self.model, p, F) for p, F in zip(self.points, self.frames)]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            n_c = self.points.shape[1]
            w.writerow(["step", "map_index"] + [f"x{i}" for i in range(n_c)] + ["kappa", "log_norm"])
            for k in range(len(self.points)):
                idx = "" if k == 0 else int(self.map_indices[k - 1])
                w.writerow([k, idx] + [format(float(c), ".17g") for c in self.points[k]]
                           + [format(float(self.kappa_history[k]), ".17g"),
                              format(float(self.log_norm_history[k]), ".17g")])


def _starts(starts):
    if isinstance(starts, FramePoint):
        starts = [starts]
    if isinstance(starts, (list, tuple)) and starts and isinstance(starts[0], FramePoint):
        X = np.array([w.base for w in starts])
        F = np.array([w.frame for w in starts])
        return X, F
    X, F = starts
    return np.atleast_2d(np.asarray(X, dtype=float)), np.asarray(F, dtype=float).reshape(-1, *np.shape(F)[-2:])


def _push_all(family, X, F):
    """Images, normalized frames and raw derivatives for every map: shapes (M, B, ...)."""
    M, B = len(family), len(X)
    d = F.shape[-1]
    if family.is_affine() and all(f.domain is None for f in family):
        L, c = family._affine_stack()
        D = np.broadcast_to(L[:, None], (M, B, d, d))
        Y = np.einsum("mij,bj->mbi", L, X) + c[:, None, :]
        Dh = np.broadcast_to(normalized(L)[:, None], (M, B, d, d))
        return Y, Dh, D, np.ones((M, B), dtype=bool)
    Y = np.empty((M, B, X.shape[1]))
    Dh = np.empty((M, B, d, d))
    D = np.empty((M, B, d, d))
    dom = np.empty((M, B), dtype=bool)
    for k, f in enumerate(family):
        dom[k] = f.in_domain(X)
        D[k] = np.broadcast_to(f.tangent_derivative(X), (B, d, d))
        Dh[k] = normalized(D[k])
        Y[k] = f(X)
    return Y, Dh, D, dom


def greedy_conformal_branches(family, window, starts, n_steps, tie_break="max-margin", rngs=None):
    """Greedy branches that keep the pushed frame inside the window at every step.

    At each step every map is tried; admissible maps are those whose push lands
    strictly inside the window. For the accumulated product P of normalized
    derivatives (renormalized to |det| = 1 each step) kappa_history[k] is
    conformality(P_k). The bound window.frame_bound ** (d*d) is stored as
    ``kappa_bound``.
    """
    if tie_break not in TIE_BREAKS:
        raise ValueError(f"tie_break must be one of {TIE_BREAKS}")
    X, F = _starts(starts)
    B, d = len(X), F.shape[-1]
    if tie_break == "seeded-random":
        if rngs is None or len(rngs) != B:
            raise ValueError("seeded-random needs one generator per start")
    m0 = window.margin(X, F)
    if not np.all(m0 > 0):
        k = int(np.nonzero(~(m0 > 0))[0][0])
        raise ValueError(f"start {k} is not strictly inside the window (margin {m0[k]!r})")

    pts = np.empty((n_steps + 1, B, X.shape[1]))
    frs = np.empty((n_steps + 1, B, d, d))
    idx = np.empty((n_steps, B), dtype=np.int64)
    kap = np.empty((n_steps + 1, B))
    lnn = np.empty((n_steps + 1, B))
    exp_h = np.empty((n_steps, B))
    mar = np.empty((n_steps, B))
    pts[0], frs[0] = X, F
    P = np.broadcast_to(np.eye(d), (B, d, d)).copy()
    kap[0], lnn[0] = 1.0, 0.0
    rows = np.arange(B)
    for s in range(n_steps):
        Y, Dh, D, dom = _push_all(family, X, F)
        Fn = Dh @ F[None]
        M = len(family)
        marg = window.margin(Y.reshape(M * B, -1), Fn.reshape(M * B, d, d)).reshape(M, B)
        marg = np.where(dom, marg, -np.inf)
        adm = marg > 0
        any_adm = adm.any(axis=0)
        if not np.all(any_adm):
            b = int(np.nonzero(~any_adm)[0][0])
            raise NoAdmissibleMapError(s, b, FramePoint(window.model, X[b], F[b]))
        if tie_break == "max-margin":
            choice = np.argmax(marg, axis=0)
        elif tie_break == "first-index":
            choice = np.argmax(adm, axis=0)
        else:
            choice = np.empty(B, dtype=np.int64)
            for b in range(B):
                choice[b] = rngs[b].choice(np.nonzero(adm[:, b])[0])
        X = Y[choice, rows]
        F = Fn[choice, rows]
        P = normalized(Dh[choice, rows] @ P)
        pts[s + 1], frs[s + 1], idx[s] = X, F, choice
        kap[s + 1] = conformality(P)
        lnn[s + 1] = np.log(operator_norm(P))
        exp_h[s] = co_norm(D[choice, rows])
        mar[s] = marg[choice, rows]
    bound = float(window.frame_bound) ** (d * d)
    return [Branch(window.model, idx[:, b], pts[:, b], kap[:, b], exp_h[:, b], lnn[:, b], frs[:, b],
                   mar[:, b], bound) for b in range(B)]


def greedy_conformal_branch(family, window, w0, n_steps, tie_break="max-margin", rng=None):
    rngs = None if rng is None else [rng]
    return greedy_conformal_branches(family, window, [w0], n_steps, tie_break, rngs)[0]


def _kappa_or_inf(P):
    # the rescaled product of a divergent branch can underflow in its smallest direction
    S = singular_values(P)
    with np.errstate(divide="ignore"):
        return np.where(S[..., -1] > 0, S[..., 0] / np.where(S[..., -1] > 0, S[..., -1], 1.0), np.inf)


def _step_generic(family, c, X, d):
    Y = np.empty_like(X)
    D = np.empty((len(X), d, d))
    for k in np.unique(c):
        sel = c == k
        f = family[int(k)]
        D[sel] = np.broadcast_to(f.tangent_derivative(X[sel]), (int(sel.sum()), d, d))
        Y[sel] = f(X[sel])
    return D, Y


def random_branches(family, X0, n_steps, rngs, weights=None, frames=None, record_frames=False):
    """I.i.d. branches; the product is rescaled by its norm and the log accumulated.

    X0: (B, n) start points; rngs: one generator per start. The map index
    sequence of branch b is drawn up front from rngs[b], so it does not depend
    on the other rows.
    """
    X = np.atleast_2d(np.asarray(X0, dtype=float)).copy()
    B, M = len(X), len(family)
    if weights is None:
        weights = np.full(M, 1.0 / M)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (M,) or np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be positive and sum to 1")
    if len(rngs) != B:
        raise ValueError("need one generator per start")
    d = family.dim
    choices = np.stack([r.choice(M, size=n_steps, p=weights) for r in rngs], axis=1).astype(np.int64)
    pts = np.empty((n_steps + 1, B, X.shape[1]))
    kap = np.empty((n_steps + 1, B))
    lnn = np.empty((n_steps + 1, B))
    exp_h = np.empty((n_steps, B))
    pts[0] = X
    kap[0], lnn[0] = 1.0, 0.0
    P = np.broadcast_to(np.eye(d), (B, d, d)).copy()
    F = None if frames is None else np.asarray(frames, dtype=float).copy()
    frs = np.empty((n_steps + 1, B, d, d)) if record_frames and F is not None else None
    if frs is not None:
        frs[0] = F
    acc = np.zeros(B)
    stack = family._affine_stack() if family.is_affine() else None
    for s in range(n_steps):
        c = choices[s]
        if stack is not None:
            D = stack[0][c]
            Y = np.einsum("bij,bj->bi", D, X) + stack[1][c]
        else:
            D, Y = _step_generic(family, c, X, d)
        Dh = normalized(D)
        P = Dh @ P
        nrm = operator_norm(P)
        P = P / nrm[:, None, None]
        acc += np.log(nrm)
        X = Y
        pts[s + 1] = X
        kap[s + 1] = _kappa_or_inf(P)
        lnn[s + 1] = acc
        exp_h[s] = co_norm(D)
        if F is not None:
            F = normalized(Dh @ F)
            if frs is not None:
                frs[s + 1] = F
    return [Branch(family.model, choices[:, b], pts[:, b], kap[:, b], exp_h[:, b], lnn[:, b],
                   None if frs is None else frs[:, b]) for b in range(B)]


def random_branch(family, x0, n_steps, seed=0, weights=None):
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return random_branches(family, np.atleast_2d(x0), n_steps, [rng], weights)[0]


def lyapunov_slope(log_norm):
    y = np.asarray(log_norm, dtype=float)
    k = np.arange(len(y), dtype=float)
    kc = k - k.mean()
    return float(np.dot(kc, y - y.mean()) / np.dot(kc, kc))


def branch_stats(b):
    if len(b.points) < 2:
        raise ValueError("branch too short")
    return {"max_kappa": float(np.max(b.kappa_history)),
            "lyapunov_slope": lyapunov_slope(b.log_norm_history),
            "min_expansion": float(np.min(b.expansion_history)),
            "length": int(len(b))}


def subproduct_kappa_max(family, b, stride=1):
    """Largest conformality of D_{j,i} over pairs i < j (positions subsampled by stride)."""
    d = b.frames.shape[-1]
    n = len(b)
    Dh = np.empty((n, d, d))
    for s in range(n):
        f = family[int(b.map_indices[s])]
        Dh[s] = normalized(np.broadcast_to(f.tangent_derivative(b.points[s][None]), (1, d, d)))[0]
    worst = 1.0
    for i in range(0, n, stride):
        P = np.eye(d)
        for j in range(i, n):
            P = Dh[j] @ P
            P = P / abs(det(P)) ** (1.0 / d)
            worst = max(worst, float(conformality(P)))
    return worst
