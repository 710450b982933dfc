"""Basis construction: PCA, history least squares and Grassmann geodesics."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

RANK_RTOL = 1e-12
SMALL_ANGLE = 1e-8


class RankError(ValueError):
    """A basis matrix is numerically rank deficient."""


@dataclass
class Basis:
    matrix: np.ndarray
    orthonormal: bool = False

    @property
    def r(self) -> int:
        return self.matrix.shape[1]

    def condition_number(self) -> float:
        s = np.linalg.svd(self.matrix, compute_uv=False)
        return float(s[0] / s[-1]) if s[-1] > 0 else np.inf


def _as_matrix(b) -> np.ndarray:
    return np.asarray(b.matrix if isinstance(b, Basis) else b, dtype=float)


def thin_qr(a: np.ndarray, rtol: float = RANK_RTOL) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR with non-negative diag(R); raises :class:`RankError` on rank loss."""
    q, r = np.linalg.qr(a)
    d = np.abs(np.diag(r))
    if d.size == 0 or d.min() <= rtol * max(d.max(), np.finfo(float).tiny):
        raise RankError(f"rank-deficient basis: |diag R| min/max = {d.min() if d.size else 0:.3g}/{d.max() if d.size else 0:.3g}")
    sign = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * sign, r * sign[:, None]


def orthonormalize(a) -> np.ndarray:
    """Orthonormal basis of span(a); a :class:`Basis` flagged orthonormal is passed through."""
    if isinstance(a, Basis) and a.orthonormal:
        return a.matrix
    return thin_qr(_as_matrix(a))[0]


def _principal_frames(qa, qb):
    """SVD of qa^T qb plus accurate angles.

    Angles come from arctan2(sin, cos) with the sines measured as norms of
    (I - qa qa^T) qb w_i; arccos alone cannot resolve angles below ~1e-8.
    """
    V, c, Wt = np.linalg.svd(qa.T @ qb)
    c = np.clip(c, 0.0, 1.0)
    base = qa @ V
    residual = qb @ Wt.T - base * c
    theta = np.arctan2(np.linalg.norm(residual, axis=0), c)
    return base, residual, c, theta


def principal_angles(a, b) -> np.ndarray:
    """Principal angles (ascending, radians) between the column spans of a and b."""
    qa, qb = orthonormalize(a), orthonormalize(b)
    return np.sort(_principal_frames(qa, qb)[3])


def pca_basis(snapshots: np.ndarray, r: int) -> tuple[Basis, np.ndarray]:
    """Top-``r`` principal directions of column snapshots and their mean.

    Column signs are fixed so the largest-magnitude entry of each column is
    positive.
    """
    D = np.asarray(snapshots, dtype=float)
    if r < 1 or D.shape[1] < r:
        raise ValueError(f"need 1 <= r <= #snapshots ({D.shape[1]}), got r={r}")
    mean = D.mean(axis=1)
    U, s, _ = np.linalg.svd(D - mean[:, None], full_matrices=False)
    tol = max(D.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    if r > rank:
        raise RankError(f"r={r} exceeds the numerical rank {rank} of the centered snapshots")
    U = U[:, :r]
    pivot = np.abs(U).argmax(axis=0)
    U = U * np.sign(U[pivot, np.arange(r)])
    return Basis(U, orthonormal=True), mean


def captured_variance(snapshots: np.ndarray, basis: Basis, mean: np.ndarray) -> float:
    X = np.asarray(snapshots) - mean[:, None]
    return float(np.sum((basis.matrix.T @ X) ** 2))


class HistoryWindow:
    """Last ``capacity`` (latent, displacement) pairs, oldest first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.capacity = capacity
        self.latents: deque = deque(maxlen=capacity)
        self.displacements: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.latents)

    def push(self, p: np.ndarray, u: np.ndarray) -> None:
        self.latents.append(np.array(p, dtype=float))
        self.displacements.append(np.array(u, dtype=float))

    def clear(self) -> None:
        self.latents.clear()
        self.displacements.clear()

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """``(P, D)`` with one column per stored step."""
        return np.column_stack(self.latents), np.column_stack(self.displacements)


def history_basis(window: HistoryWindow | tuple, regularization: float = 1e-8) -> np.ndarray:
    """Ridge least-squares map Phi = D P^T (P P^T + reg I)^-1 from latents to displacements."""
    if not regularization > 0:
        raise ValueError("regularization must be positive")
    P, D = window.matrices() if isinstance(window, HistoryWindow) else window
    if P.shape[1] < 1:
        raise ValueError("history window is empty")
    # with P = W S V^T: Phi = (D V) diag(s / (s^2 + reg)) W^T. Unlike the
    # normal equations this stays accurate for short (rank-deficient) windows.
    W, s, Vt = np.linalg.svd(P, full_matrices=False)
    return ((D @ Vt.T) * (s / (s * s + regularization))) @ W.T


def grassmann_interpolate(phi, u_basis, lam: float) -> Basis:
    """Point at fraction ``lam`` along the geodesic from span(phi) to span(u_basis).

    Per principal angle theta_i the blend uses sin(lam theta_i) / sin(theta_i),
    replaced by its limit ``lam`` when theta_i < 1e-8 so coincident directions
    are well defined.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    A, B = _as_matrix(phi), _as_matrix(u_basis)
    if A.shape != B.shape:
        raise ValueError(f"basis shapes differ: {A.shape} vs {B.shape}")
    q_phi, q_u = orthonormalize(phi), orthonormalize(u_basis)
    base, direction, c, theta = _principal_frames(q_phi, q_u)
    small = theta < SMALL_ANGLE
    ratio = np.where(small, lam, np.sin(lam * theta) / np.where(small, 1.0, np.sin(theta)))
    G = base * np.cos(lam * theta) + direction * ratio
    return Basis(thin_qr(G)[0], orthonormal=True)


def complete_basis(q: np.ndarray, candidates: np.ndarray, r: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Extend orthonormal ``q`` (k columns) to ``r`` columns.

    New directions are taken greedily from ``candidates`` (largest residual
    after projecting out the current span first); random directions fill any
    remaining gap.
    """
    n = q.shape[0]
    Q = np.zeros((n, r))
    k = q.shape[1]
    Q[:, :k] = q
    C = np.array(candidates, dtype=float).reshape(n, -1)
    floor = 1e-8 * max(np.linalg.norm(C, axis=0).max(initial=0.0), 1e-300)
    C -= q @ (q.T @ C)
    while k < r:
        norms = np.linalg.norm(C, axis=0)
        j = int(norms.argmax()) if norms.size else -1
        if j >= 0 and norms[j] > floor:
            col = C[:, j] / norms[j]
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            col = rng.standard_normal(n)
            col -= Q[:, :k] @ (Q[:, :k].T @ col)
        col -= Q[:, :k] @ (Q[:, :k].T @ col)  # re-orthogonalize against round-off
        Q[:, k] = col / np.linalg.norm(col)
        C -= np.outer(Q[:, k], Q[:, k] @ C)
        k += 1
    return Q


def numerical_span(a: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the numerically significant column space of ``a``."""
    U, s, _ = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((a.shape[0], 0))
    return U[:, s > rtol * s[0]]
