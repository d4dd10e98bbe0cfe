"""Small dense matrix kernel.

Everything here accepts a single ``(d, d)`` matrix or a stack ``(..., d, d)``
and works elementwise over the leading axes, so results for one matrix do not
depend on what else is in the batch.
"""

from __future__ import annotations

import numpy as np

SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-15
LOG_SPECTRAL_THRESHOLD = 0.9
LOG_SERIES_RADIUS = 0.25
LOG_MAX_ROOTS = 60
DB_MAX_ITER = 60
SINGULAR_FLOOR = 1e-30

# Higham's Pade-13 coefficients and scaling threshold
_PADE13 = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
])
_THETA13 = 5.371920351148152


class LinalgError(ValueError):
    pass


class SVDConvergenceError(LinalgError):
    def __init__(self, sweeps):
        super().__init__(f"Jacobi SVD did not converge after {sweeps} sweeps")
        self.sweeps = sweeps


class SingularMatrixError(LinalgError):
    def __init__(self, smallest):
        super().__init__(f"matrix is numerically singular (smallest singular value {smallest:.3e})")
        self.smallest = smallest


class MatLogDomainError(LinalgError):
    def __init__(self, radius, threshold=LOG_SPECTRAL_THRESHOLD):
        super().__init__(
            f"mat_log outside convergence domain: spectral radius of A - I is {radius:.3e} "
            f"after square-rooting, threshold {threshold}")
        self.radius = radius
        self.threshold = threshold


def _as_stack(M):
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise LinalgError(f"expected square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise LinalgError("matrix has non-finite entries")
    return M


def eye_like(M):
    d = M.shape[-1]
    return np.broadcast_to(np.eye(d), M.shape).copy()


def svd(M, max_sweeps=SVD_MAX_SWEEPS, tol=SVD_TOL):
    """One-sided cyclic Jacobi SVD, ``M = U @ diag(S) @ V.T``.

    Columns of a working copy of ``M`` are rotated pairwise until mutually
    orthogonal; the rotations accumulate into ``V``. Singular values come back
    sorted nonincreasing.
    """
    M = _as_stack(M)
    d = M.shape[-1]
    A = M.copy()
    V = eye_like(M)
    pairs = [(p, q) for p in range(d - 1) for q in range(p + 1, d)]
    converged = d == 1
    for _ in range(max_sweeps):
        rotated = False
        for p, q in pairs:
            ap, aq = A[..., :, p], A[..., :, q]
            alpha = np.einsum("...i,...i->...", ap, ap)
            beta = np.einsum("...i,...i->...", aq, aq)
            gamma = np.einsum("...i,...i->...", ap, aq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c, s = c[..., None], s[..., None]
            for W in (A, V):
                wp, wq = W[..., :, p].copy(), W[..., :, q].copy()
                W[..., :, p] = c * wp - s * wq
                W[..., :, q] = s * wp + c * wq
        if not rotated:
            converged = True
            break
    if not converged:
        raise SVDConvergenceError(max_sweeps)

    S = np.sqrt(np.einsum("...ij,...ij->...j", A, A))
    order = np.argsort(-S, axis=-1, kind="stable")
    S = np.take_along_axis(S, order, axis=-1)
    A = np.take_along_axis(A, order[..., None, :], axis=-1)
    V = np.take_along_axis(V, order[..., None, :], axis=-1)
    scale = S[..., :1]
    tiny = S <= np.finfo(float).tiny + 1e-300 * scale
    U = A / np.where(tiny, 1.0, S)[..., None, :]
    if np.any(tiny):
        U = _complete_columns(U, tiny)
    return U, S, V


def _complete_columns(U, missing):
    """Replace flagged (zero) columns by an orthonormal completion."""
    d = U.shape[-1]
    flat_U = U.reshape(-1, d, d)
    flat_m = missing.reshape(-1, d)
    for k in np.nonzero(flat_m.any(axis=1))[0]:
        Q = flat_U[k]
        for j in np.nonzero(flat_m[k])[0]:
            for e in np.eye(d):
                keep = [i for i in range(d) if not flat_m[k, i] or i < j]
                w = e - Q[:, keep] @ (Q[:, keep].T @ e)
                n = np.linalg.norm(w)
                if n > 0.5:
                    Q[:, j] = w / n
                    break
            flat_m[k, j] = False
    return flat_U.reshape(U.shape)


def singular_values(M):
    return svd(M)[1]


def operator_norm(M):
    return singular_values(M)[..., 0]


def co_norm(M):
    """m(M): the smallest singular value."""
    return singular_values(M)[..., -1]


def hs_norm(M):
    M = _as_stack(M)
    return np.sqrt(np.einsum("...ij,...ij->...", M, M))


def conformality(M):
    """kappa(M) = ||M|| * ||M^-1||."""
    S = singular_values(M)
    smallest = S[..., -1]
    if np.any(smallest <= SINGULAR_FLOOR):
        raise SingularMatrixError(float(np.min(smallest)))
    return S[..., 0] / smallest


def det(M):
    # LAPACK getrf, LU with partial pivoting
    return np.linalg.det(_as_stack(M))


def normalized(M):
    """|det M|^(-1/d) M."""
    M = _as_stack(M)
    d = M.shape[-1]
    D = np.abs(det(M))
    if np.any(~(D > 0)) or np.any(~np.isfinite(D)):
        raise SingularMatrixError(float(np.min(D)))
    return M * (D ** (-1.0 / d))[..., None, None]


def _norm1(M):
    return np.max(np.sum(np.abs(M), axis=-2), axis=-1)


def mat_exp(X):
    """Scaling and squaring with the [13/13] Pade approximant."""
    X = _as_stack(X)
    n1 = _norm1(X)
    s = np.maximum(0, np.ceil(np.log2(np.maximum(n1, 1e-300) / _THETA13))).astype(int)
    s = np.where(n1 > _THETA13, s, 0)
    Xs = X / (2.0 ** s)[..., None, None]
    b = _PADE13 / _PADE13[0]  # b[0] = 1 makes exp(0) exactly I
    I = eye_like(X)
    X2 = Xs @ Xs
    X4 = X2 @ X2
    X6 = X4 @ X2
    Uin = X6 @ (b[13] * X6 + b[11] * X4 + b[9] * X2) + b[7] * X6 + b[5] * X4 + b[3] * X2 + b[1] * I
    Uo = Xs @ Uin
    Vo = X6 @ (b[12] * X6 + b[10] * X4 + b[8] * X2) + b[6] * X6 + b[4] * X4 + b[2] * X2 + b[0] * I
    E = np.linalg.solve(Vo - Uo, Vo + Uo)
    for k in range(1, int(s.max(initial=0)) + 1):
        sq = E @ E
        E = np.where((s >= k)[..., None, None], sq, E)
    return E


def _sqrtm_db(A):
    """Principal square root by the Denman-Beavers iteration."""
    Y = A.copy()
    Z = eye_like(A)
    done = np.zeros(A.shape[:-2], dtype=bool)
    for _ in range(DB_MAX_ITER):
        Yi = np.linalg.inv(Z)
        Zi = np.linalg.inv(Y)
        Yn = 0.5 * (Y + Yi)
        Zn = 0.5 * (Z + Zi)
        step = hs_norm(Yn - Y)
        keep = done[..., None, None]
        Y = np.where(keep, Y, Yn)
        Z = np.where(keep, Z, Zn)
        done = done | (step <= 1e-15 * hs_norm(Y))
        if np.all(done):
            break
    return Y


def _spectral_radius(M):
    return np.max(np.abs(np.linalg.eigvals(M)), axis=-1)


def mat_log(A, threshold=LOG_SPECTRAL_THRESHOLD):
    """Principal logarithm by inverse scaling and squaring.

    Square roots are taken until ||A - I||_F is below the series radius, then
    log(I + Y) is summed through the Gregory series in (A - I)(A + I)^-1.
    Raises MatLogDomainError when, after the root cap, the spectral radius of
    A - I still exceeds ``threshold``, or when A has a nonpositive real
    eigenvalue.
    """
    A = _as_stack(A)
    I = eye_like(A)
    ev = np.linalg.eigvals(A)
    bad = np.any((np.abs(ev.imag) <= 1e-14 * np.abs(ev).max(axis=-1, keepdims=True))
                 & (ev.real <= 0), axis=-1)
    if np.any(bad):
        raise MatLogDomainError(float(np.max(_spectral_radius(A - I))), threshold)
    k = np.zeros(A.shape[:-2], dtype=int)
    R = A.copy()
    for _ in range(LOG_MAX_ROOTS):
        far = hs_norm(R - I) > LOG_SERIES_RADIUS
        if not np.any(far):
            break
        root = _sqrtm_db(R)
        R = np.where(far[..., None, None], root, R)
        k = k + far
    rho = _spectral_radius(R - I)
    if np.any(rho > threshold):
        raise MatLogDomainError(float(np.max(rho)), threshold)
    Z = np.linalg.solve((R + I).swapaxes(-1, -2), (R - I).swapaxes(-1, -2)).swapaxes(-1, -2)
    Z2 = Z @ Z
    term = Z.copy()
    out = Z.copy()
    for m in range(3, 80, 2):
        term = term @ Z2
        out = out + term / m
        if np.max(hs_norm(term)) / m < 1e-18:
            break
    return 2.0 * out * (2.0 ** k)[..., None, None]


def rotation2(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def haar_orthogonal(d, rng, special=True):
    """Haar-distributed orthogonal matrix (QR of a Gaussian with sign fix)."""
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    if special and np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q
