"""Euclidean and Grassmannian primitives shared by every other module.

Subspaces carry an orthonormal frame; distances between finite point sets are
computed with KD-trees; direction packings and farthest-point sparsification
are deterministic so that whole experiments are bit-reproducible.
"""

from __future__ import annotations

import functools
import math
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import gammaln

ORTHO_TOL = 1e-10


class DimensionError(ValueError):
    """Raised when operands live in incompatible dimensions."""


def unit_ball_volume(d: int) -> float:
    """Volume of the unit ball of R^d."""
    return math.exp(0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1.0))


def sphere_area(d: int) -> float:
    """Surface area of the unit d-sphere, the boundary of the unit ball of R^(d+1)."""
    return math.exp(math.log(2.0) + 0.5 * (d + 1) * math.log(math.pi) - gammaln(0.5 * (d + 1)))


def orthonormalize(vectors: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    """Modified Gram-Schmidt with one re-orthogonalization pass.

    Parameters
    ----------
    vectors : ndarray of shape (n, m)
        Columns to orthonormalize.
    tol : float
        Columns whose residual norm falls below ``tol`` are rejected.

    Returns
    -------
    ndarray of shape (n, m)
        Orthonormal columns spanning the same space.
    """
    V = np.array(vectors, dtype=float, copy=True)
    if V.ndim == 1:
        V = V[:, None]
    n, m = V.shape
    Q = np.zeros((n, m))
    for j in range(m):
        v = V[:, j].copy()
        for _ in range(2):
            for i in range(j):
                v -= (Q[:, i] @ v) * Q[:, i]
        norm = np.linalg.norm(v)
        if norm < tol:
            raise DimensionError("frame columns are linearly dependent")
        Q[:, j] = v / norm
    return Q


class Subspace:
    """A d-dimensional linear subspace of R^n stored through an orthonormal frame."""

    def __init__(self, frame, orthonormal: bool = False):
        F = np.asarray(frame, dtype=float)
        if F.ndim == 1:
            F = F[:, None]
        if not orthonormal:
            F = orthonormalize(F)
        n, d = F.shape
        if d >= n:
            raise DimensionError(f"subspace dimension {d} must be below ambient dimension {n}")
        gram = F.T @ F
        if np.max(np.abs(gram - np.eye(d))) > ORTHO_TOL:
            F = orthonormalize(F)
        self.frame = F
        self.frame.setflags(write=False)

    @property
    def ambient_dim(self) -> int:
        return self.frame.shape[0]

    @property
    def dim(self) -> int:
        return self.frame.shape[1]

    @property
    def projector(self) -> np.ndarray:
        return self.frame @ self.frame.T

    def project(self, v) -> np.ndarray:
        return project_onto(v, self)

    def complement(self) -> np.ndarray:
        """Orthonormal frame of the orthogonal complement."""
        q, _ = np.linalg.qr(np.hstack([self.frame, np.eye(self.ambient_dim)]))
        return q[:, self.dim:self.ambient_dim] * 1.0

    @classmethod
    def random(cls, n: int, d: int, rng: np.random.Generator) -> "Subspace":
        return cls(rng.standard_normal((n, d)))

    @classmethod
    def from_axes(cls, n: int, axes: Sequence[int]) -> "Subspace":
        F = np.zeros((n, len(axes)))
        for j, a in enumerate(axes):
            F[a, j] = 1.0
        return cls(F, orthonormal=True)

    def __repr__(self) -> str:
        return f"Subspace(n={self.ambient_dim}, d={self.dim})"


def project_onto(v, T: Subspace) -> np.ndarray:
    """Orthogonal projection of ``v`` (or rows of ``v``) onto ``T``."""
    x = np.asarray(v, dtype=float)
    if x.shape[-1] != T.ambient_dim:
        raise DimensionError(f"vector dimension {x.shape[-1]} does not match subspace ambient dimension {T.ambient_dim}")
    return (x @ T.frame) @ T.frame.T


def principal_angle(T1: Subspace, T2: Subspace) -> float:
    """Operator norm of the difference of the orthogonal projectors.

    Equals the sine of the largest principal angle between ``T1`` and ``T2``.
    """
    if T1.ambient_dim != T2.ambient_dim or T1.dim != T2.dim:
        raise DimensionError("principal_angle needs subspaces of equal dimensions")
    diff = T1.projector - T2.projector
    value = float(np.linalg.norm(diff, 2))
    return min(max(value, 0.0), 1.0)


def _as_cloud(A) -> np.ndarray:
    X = np.asarray(A, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise ValueError("point cloud is empty")
    return X


def directed_distances(A, B) -> np.ndarray:
    """Distance from every point of ``A`` to the set ``B``."""
    X, Y = _as_cloud(A), _as_cloud(B)
    if X.shape[1] != Y.shape[1]:
        raise DimensionError("point clouds live in different dimensions")
    dist, _ = cKDTree(Y).query(X, k=1)
    return np.asarray(dist, dtype=float)


def hausdorff(A, B) -> float:
    """Hausdorff distance between two finite point sets."""
    return float(max(directed_distances(A, B).max(), directed_distances(B, A).max()))


def min_pairwise_distance(A) -> float:
    X = _as_cloud(A)
    if len(X) < 2:
        return math.inf
    dist, _ = cKDTree(X).query(X, k=2)
    return float(dist[:, 1].min())


def lattice_norm_counts(n: int, K: int) -> list[np.ndarray]:
    """Cumulative counts of integer vectors by squared norm.

    Returns ``cum`` with ``cum[m][j] = #{z in Z^m : |z|^2 <= j}`` for m <= n, j <= K.
    """
    A = math.isqrt(K)
    squares = np.arange(A + 1) ** 2
    exact = np.zeros(K + 1, dtype=np.int64)
    exact[0] = 1
    cum = [np.cumsum(exact)]
    for _ in range(n):
        nxt = np.zeros(K + 1, dtype=np.int64)
        for s in squares:
            nxt[s:] += (1 if s == 0 else 2) * exact[: K + 1 - s]
        exact = nxt
        cum.append(np.cumsum(exact))
    return cum


def _sphere_stream(d: int, count: int) -> np.ndarray:
    """Deterministic low-discrepancy unit vectors of R^d (rows)."""
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        golden = (math.sqrt(5.0) - 1.0) / 2.0
        ang = 2.0 * math.pi * ((np.arange(count) * golden) % 1.0)
        return np.column_stack([np.cos(ang), np.sin(ang)])
    from scipy.stats import qmc
    from scipy.special import ndtri

    u = qmc.Halton(d, scramble=False).random(count + 1)[1:]
    z = ndtri(np.clip(u, 1e-12, 1.0 - 1e-12))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _fill_circle_gaps(angles: list[float], alpha: float) -> list[float]:
    """Insert midpoints into angular gaps wider than four times ``alpha``."""
    out = sorted(a % (2.0 * math.pi) for a in angles)
    changed = True
    while changed:
        changed = False
        nxt = []
        for i, a in enumerate(out):
            b = out[(i + 1) % len(out)] + (2.0 * math.pi if i + 1 == len(out) else 0.0)
            nxt.append(a)
            if b - a > 4.0 * alpha * (1.0 + 1e-12):
                nxt.append((a + (b - a) / 2.0) % (2.0 * math.pi))
                changed = True
        out = sorted(nxt)
    return out


def direction_packing(T: Subspace, sin_alpha: float) -> np.ndarray:
    """Maximal packing of the unit sphere of ``T`` at chordal separation 2 sin(alpha).

    Candidates come from a fixed low-discrepancy stream and are accepted greedily
    when they are farther than ``2 sin_alpha`` from every accepted direction.  In
    the plane the stream pass is followed by a gap-filling pass that makes the
    packing exactly maximal.

    Returns
    -------
    ndarray of shape (k, n)
        Unit vectors of ``T`` (rows).
    """
    if not 0.0 < sin_alpha < 1.0:
        raise ValueError("sin_alpha must lie in (0, 1)")
    return _packing_coords(T.dim, float(sin_alpha)) @ T.frame.T


@functools.lru_cache(maxsize=64)
def _packing_coords(d: int, sin_alpha: float) -> np.ndarray:
    """Intrinsic packing of S^{d-1}; depends only on (d, sin_alpha), so it is cached."""
    sep = 2.0 * sin_alpha
    if d == 1:
        coords = np.array([[1.0], [-1.0]])
    else:
        expected = max(2, int(math.ceil(sphere_area(d - 1) / (unit_ball_volume(d - 1) * sin_alpha ** (d - 1)))))
        budget = 10 * expected
        accepted = np.empty((0, d))
        rejections = 0
        start = 0
        chunk = max(256, budget)
        while rejections < budget:
            stream = _sphere_stream(d, start + chunk)[start:]
            start += chunk
            for c in stream:
                if len(accepted) and np.min(np.linalg.norm(accepted - c, axis=1)) <= sep:
                    rejections += 1
                    if rejections >= budget:
                        break
                    continue
                accepted = np.vstack([accepted, c])
                rejections = 0
        coords = accepted
        if d == 2:
            alpha = math.asin(sin_alpha)
            angles = _fill_circle_gaps(list(np.arctan2(coords[:, 1], coords[:, 0])), alpha)
            coords = np.column_stack([np.cos(angles), np.sin(angles)])
    coords.setflags(write=False)
    return coords


def farthest_point_sample(X, delta: float) -> np.ndarray:
    """Greedy farthest-point sparsification at scale ``delta``.

    Starts from the first point and repeatedly adds the point farthest from the
    current selection while that distance exceeds ``delta`` (ties go to the
    lowest index).  The output is ``delta``-separated and covers ``X`` within
    ``delta``.
    """
    P = _as_cloud(X)
    if delta <= 0:
        raise ValueError("delta must be positive")
    chosen = [0]
    dist = np.linalg.norm(P - P[0], axis=1)
    while True:
        j = int(np.argmax(dist))
        if dist[j] <= delta:
            break
        chosen.append(j)
        dist = np.minimum(dist, np.linalg.norm(P - P[j], axis=1))
    return P[np.asarray(chosen)]
