"""Tangent spaces of generator manifolds and gradient alignment scores."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTangentError, DimensionError, ZeroGradientError

RANK_TOL = 1e-10
ORTHONORMAL_TOL = 1e-10


def thin_svd(a, tol: float = 1e-15, max_sweeps: int = 80):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Accepts a single ``(d, k)`` matrix with ``k <= d`` or a stack ``(n, d, k)``;
    the stack is processed jointly, with each matrix rotated only where it
    still needs it. Returns ``U (.., d, k)``, ``s (.., k)`` in descending
    order and ``Vt (.., k, k)`` with ``a = U @ diag(s) @ Vt``. Columns of
    ``U`` belonging to zero singular values are left at zero.
    """
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 2
    W = a[None].copy() if single else a.copy()
    if W.ndim != 3:
        raise DimensionError(f"thin_svd expects a matrix or a stack of matrices, got shape {a.shape}")
    n, d, k = W.shape
    if k > d:
        raise DimensionError(f"thin_svd needs k <= d, got {d}x{k}")
    V = np.broadcast_to(np.eye(k), (n, k, k)).copy()

    for _ in range(max_sweeps):
        rotated = False
        for p in range(k - 1):
            for q in range(p + 1, k):
                wp, wq = W[:, :, p], W[:, :, q]
                alpha = np.einsum("nd,nd->n", wp, wp)
                beta = np.einsum("nd,nd->n", wq, wq)
                gamma = np.einsum("nd,nd->n", wp, wq)
                need = np.abs(gamma) > tol * np.sqrt(alpha * beta)
                if not need.any():
                    continue
                rotated = True
                g = np.where(need, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                sign = np.where(zeta >= 0, 1.0, -1.0)
                t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                c = np.where(need, c, 1.0)[:, None]
                s = np.where(need, s, 0.0)[:, None]
                W[:, :, p], W[:, :, q] = c * wp - s * wq, s * wp + c * wq
                vp, vq = V[:, :, p].copy(), V[:, :, q].copy()
                V[:, :, p], V[:, :, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break

    sv = np.sqrt(np.einsum("ndk,ndk->nk", W, W))
    order = np.argsort(-sv, axis=1, kind="stable")
    sv = np.take_along_axis(sv, order, axis=1)
    W = np.take_along_axis(W, order[:, None, :], axis=2)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    safe = np.where(sv > 0, sv, 1.0)
    U = np.where(sv[:, None, :] > 0, W / safe[:, None, :], 0.0)
    Vt = np.transpose(V, (0, 2, 1))
    if single:
        return U[0], sv[0], Vt[0]
    return U, sv, Vt


@dataclass(frozen=True)
class Projector:
    """Orthogonal projector onto a tangent space, stored as an orthonormal basis.

    The ``d x d`` matrix is never materialised by the hot paths: applying the
    projector costs O(dk) and is idempotent by construction.
    """

    basis: np.ndarray
    anchor: np.ndarray

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def intrinsic_dim(self) -> int:
        return self.basis.shape[1]

    def project(self, v) -> np.ndarray:
        return project(self, v)

    def matrix(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def validate(self, tol: float = ORTHONORMAL_TOL) -> None:
        d, k = self.basis.shape
        if k > d:
            raise DimensionError(f"intrinsic dim {k} exceeds ambient dim {d}")
        if self.anchor.shape != (d,):
            raise DimensionError(f"anchor shape {self.anchor.shape} != ({d},)")
        err = np.max(np.abs(self.basis.T @ self.basis - np.eye(k)))
        if err > tol:
            raise ValueError(f"basis is not orthonormal (max deviation {err:.3e})")

    def to_dict(self) -> dict:
        return {
            "ambient_dim": self.ambient_dim,
            "intrinsic_dim": self.intrinsic_dim,
            "anchor": self.anchor.tolist(),
            "basis": self.basis.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> Projector:
        d, k = int(doc["ambient_dim"]), int(doc["intrinsic_dim"])
        basis = np.asarray(doc["basis"], dtype=np.float64)
        if basis.size != d * k:
            raise DimensionError(f"basis has {basis.size} entries, expected {d * k}")
        p = cls(basis=basis.reshape(d, k), anchor=np.asarray(doc["anchor"], dtype=np.float64))
        p.validate()
        return p

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> Projector:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class AlignmentScore:
    value: float
    gradient_norm: float
    projected_norm: float


def _check_rank(sv: np.ndarray, rank_tol: float) -> None:
    if sv[0] <= 0 or sv[-1] <= rank_tol * sv[0]:
        raise DegenerateTangentError(sv, rank_tol)


def tangent_projector(jac, anchor=None, rank_tol: float = RANK_TOL) -> Projector:
    """Orthogonal projector onto ``Range(jac)`` from the left singular vectors."""
    jac = np.asarray(jac, dtype=np.float64)
    if jac.ndim != 2:
        raise DimensionError(f"Jacobian must be a (d, k) matrix, got shape {jac.shape}")
    U, sv, _ = thin_svd(jac)
    _check_rank(sv, rank_tol)
    d = jac.shape[0]
    anchor = np.zeros(d) if anchor is None else np.asarray(anchor, dtype=np.float64)
    if anchor.shape != (d,):
        raise DimensionError(f"anchor shape {anchor.shape} != ({d},)")
    return Projector(basis=U, anchor=anchor)


def tangent_bases(jacs, rank_tol: float = RANK_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal tangent bases for a stack of Jacobians.

    Returns ``(bases, ok)`` where ``ok[i]`` is False for rank-deficient
    Jacobians (their basis rows are meaningless).
    """
    U, sv, _ = thin_svd(np.asarray(jacs, dtype=np.float64))
    ok = (sv[:, 0] > 0) & (sv[:, -1] > rank_tol * sv[:, 0])
    return U, ok


def project(p: Projector, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != p.ambient_dim:
        raise DimensionError(f"vector length {v.shape[-1]} != ambient dim {p.ambient_dim}")
    return (v @ p.basis) @ p.basis.T


def unnormalized_push(jac, grad_x) -> np.ndarray:
    """``J (J^T g)``: the pushforward of the pulled-back gradient."""
    jac = np.asarray(jac, dtype=np.float64)
    grad_x = np.asarray(grad_x, dtype=np.float64)
    if jac.ndim != 2 or grad_x.shape != (jac.shape[0],):
        raise DimensionError(f"cannot push gradient of shape {grad_x.shape} through Jacobian {jac.shape}")
    return jac @ (jac.T @ grad_x)


def alignment_score(p: Projector, grad) -> AlignmentScore:
    """Cosine between ``grad`` and its orthogonal projection onto the tangent space."""
    grad = np.asarray(grad, dtype=np.float64)
    gn = float(np.linalg.norm(grad))
    if gn == 0.0:
        raise ZeroGradientError("alignment score is undefined for a zero gradient")
    pn = float(np.linalg.norm(project(p, grad)))
    pn = min(pn, gn)
    return AlignmentScore(value=pn / gn, gradient_norm=gn, projected_norm=pn)


def alignment_scores(bases: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Vectorised scores for ``bases (n, d, k)`` and ``grads (n, d)``; NaN where a gradient is zero."""
    grads = np.asarray(grads, dtype=np.float64)
    coeff = np.einsum("ndk,nd->nk", bases, grads)
    proj = np.einsum("ndk,nk->nd", bases, coeff)
    gn = np.linalg.norm(grads, axis=1)
    pn = np.minimum(np.linalg.norm(proj, axis=1), gn)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(gn > 0, pn / np.where(gn > 0, gn, 1.0), np.nan)


def random_baseline(k: int, d: int, samples: int, seed: int) -> tuple[float, float]:
    """Analytic ``sqrt(k/d)`` and the empirical mean score of random unit vectors.

    The empirical side scores isotropic unit vectors against the fixed
    coordinate subspace spanned by the first ``k`` axes.
    """
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((samples, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    # projecting onto the first k axes keeps the first k coordinates
    scores = np.minimum(np.linalg.norm(v[:, :k], axis=1), 1.0)
    return float(np.sqrt(k / d)), float(scores.mean())


def principal_angles(basis_a: np.ndarray, basis_b: np.ndarray) -> np.ndarray:
    """Principal angles (radians, ascending) between two subspaces given orthonormal bases."""
    _, cos, _ = thin_svd(basis_a.T @ basis_b)
    return np.sort(np.arccos(np.clip(cos, -1.0, 1.0)))
