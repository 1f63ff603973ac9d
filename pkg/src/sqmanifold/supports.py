"""Spatial supports attached to queries.

A query whose evaluator vanishes outside a known region carries a support so
that the expectation engine can concentrate its quadrature nodes there.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


class BallSupport:
    """Union of closed balls sharing a common radius."""

    def __init__(self, centers, radius: float):
        C = np.asarray(centers, dtype=float)
        if C.ndim == 1:
            C = C[None, :]
        self.centers = C
        self.radius = float(radius)
        self._tree = None

    def __len__(self) -> int:
        return len(self.centers)

    def contains(self, X) -> np.ndarray:
        P = np.atleast_2d(np.asarray(X, dtype=float))
        if len(self.centers) == 0:
            return np.zeros(len(P), dtype=bool)
        if len(self.centers) == 1:
            return np.sum((P - self.centers[0]) ** 2, axis=1) <= self.radius ** 2
        if self._tree is None:
            self._tree = cKDTree(self.centers)
        dist, _ = self._tree.query(P, k=1)
        return dist <= self.radius

    def count(self, X) -> np.ndarray:
        """Number of balls containing each row of ``X``."""
        P = np.atleast_2d(np.asarray(X, dtype=float))
        if len(self.centers) == 0:
            return np.zeros(len(P), dtype=int)
        if self._tree is None:
            self._tree = cKDTree(self.centers)
        hits = self._tree.query_ball_point(P, self.radius)
        return np.array([len(h) for h in hits], dtype=int)

    def to_balls(self, model) -> "BallSupport":
        return self


def ball(center, radius: float) -> BallSupport:
    return BallSupport(np.asarray(center, dtype=float)[None, :], radius)
