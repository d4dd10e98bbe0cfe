"""The frame bundle over R^d and S^d.

A frame point is a base point together with a d x d matrix whose columns are
frame vectors written in the canonical tangent basis at the base point, with
|det| = 1. On R^d the canonical basis is the standard one; on S^d it is built
by a Householder reflection (see ``canonical_tangent_basis``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .linalg import det, hs_norm, normalized

DET_TOL = 1e-8
UNIT_TOL = 1e-10
ANTIPODE_TOL = 1e-12

MODELS = ("euclidean", "sphere")


@dataclass(frozen=True)
class AmbientPoint:
    model: str
    coords: np.ndarray

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        c = np.asarray(self.coords, dtype=float)
        object.__setattr__(self, "coords", c)
        if self.model == "sphere" and abs(np.linalg.norm(c) - 1.0) > UNIT_TOL:
            raise ValueError("sphere point is not unit length")

    @property
    def dim(self):
        n = self.coords.shape[-1]
        return n - 1 if self.model == "sphere" else n


@dataclass(frozen=True)
class FramePoint:
    model: str
    base: np.ndarray
    frame: np.ndarray

    def __post_init__(self):
        AmbientPoint(self.model, self.base)
        base = np.asarray(self.base, dtype=float)
        frame = np.asarray(self.frame, dtype=float)
        d = base.shape[-1] - (1 if self.model == "sphere" else 0)
        if frame.shape != (d, d):
            raise ValueError(f"frame shape {frame.shape} does not match dimension {d}")
        if abs(abs(det(frame)) - 1.0) > DET_TOL:
            raise ValueError(f"|det frame| = {abs(det(frame))!r}, expected 1")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "frame", frame)

    @property
    def dim(self):
        return self.frame.shape[0]

    def to_dict(self):
        return {"model": self.model, "base": self.base.tolist(), "frame": self.frame.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(data["model"], np.array(data["base"], dtype=float), np.array(data["frame"], dtype=float))

    def to_json(self):
        # float repr is the shortest string that round-trips (at most 17 digits)
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def identity_frame(model, base):
    base = np.asarray(base, dtype=float)
    d = base.shape[-1] - (1 if model == "sphere" else 0)
    return FramePoint(model, base, np.eye(d))


def frame_size(w):
    """Frobenius norm of the frame coordinate matrix."""
    frame = w.frame if isinstance(w, FramePoint) else w
    return hs_norm(frame)


def canonical_tangent_basis(x):
    """Orthonormal basis of T_x S^d as the columns of a (d+1) x d matrix.

    Columns are H e_1, ..., H e_d where H is the Householder reflection taking
    e_{d+1} to x. At x = e_{d+1} this is exactly (e_1, ..., e_d). Within 1e-12
    of -e_{d+1} the reflection taking -e_{d+1} to x is used instead and the
    first column is negated. Works on stacks of points.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    d = n - 1
    tan = x[..., :d]
    last = x[..., d]
    r2 = np.einsum("...i,...i->...", tan, tan)
    antipodal = np.sqrt(r2 + (last + 1.0) ** 2) < ANTIPODE_TOL
    sign = np.where(antipodal, -1.0, 1.0)
    # u = sign*e_{d+1} - x; its last entry without cancellation
    with np.errstate(divide="ignore", invalid="ignore"):
        near = np.where(last * sign > 0, r2 / (1.0 + np.abs(last)), 1.0 + np.abs(last))
    u = np.concatenate([-tan, (sign * near)[..., None]], axis=-1)
    uu = np.einsum("...i,...i->...", u, u)
    safe = np.where(uu > 0, uu, 1.0)
    B = np.broadcast_to(np.eye(n)[:, :d], x.shape[:-1] + (n, d)).copy()
    B = B - 2.0 * u[..., :, None] * u[..., None, :d] / safe[..., None, None]
    B = np.where((uu > 0)[..., None, None], B, np.eye(n)[:, :d])
    flip = np.ones(d)
    flip[0] = -1.0
    B = np.where(antipodal[..., None, None], B * flip, B)
    return B


def push_frames(f, bases, frames):
    """Batched push: (f(x), normalized(D_x f) @ frame) for stacks of points."""
    bases = np.asarray(bases, dtype=float)
    D = normalized(f.tangent_derivative(bases))
    return f(bases), D @ np.asarray(frames, dtype=float)


def push_frame(f, w):
    if f.model != w.model:
        raise ValueError(f"map model {f.model} does not match frame model {w.model}")
    if not np.all(f.in_domain(w.base)):
        raise ValueError("base point outside the domain of the map")
    base, frame = push_frames(f, w.base, w.frame)
    return FramePoint(w.model, base, frame)
