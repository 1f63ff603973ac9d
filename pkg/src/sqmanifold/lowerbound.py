"""Constructions behind the query lower bounds.

* bump diffeomorphisms and two-point (Le Cam) pairs of nearby manifolds whose
  uniform distributions are close in total variation;
* snake-shaped grid paths and the tube ("widget") manifolds built along them,
  used to realize manifolds of prescribed volume;
* translation packings in the ambient ball;
* the query-count arithmetic turning packing sizes into lower bounds.
"""

from __future__ import annotations

import json
import math
import types
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DimensionError, _sphere_stream, lattice_norm_counts, sphere_area, unit_ball_volume
from .models import (ManifoldModel, MedialAxisError, ReferenceCloud, SphereModel, gauss_legendre,
                     merge_intervals)


class ConstructionError(ValueError):
    """Raised when a construction's hypotheses are violated."""


# --- bump maps ---------------------------------------------------------------------------
def bump(Y) -> np.ndarray:
    """exp(-|y|^2 / (1 - |y|^2)) on the open unit ball, 0 outside."""
    Y = np.atleast_2d(Y)
    s = np.sum(Y ** 2, axis=1)
    out = np.zeros(len(Y))
    inside = s < 1.0
    out[inside] = np.exp(-s[inside] / (1.0 - s[inside]))
    return out


def bump_gradient(Y) -> np.ndarray:
    Y = np.atleast_2d(Y)
    s = np.sum(Y ** 2, axis=1)
    G = np.zeros_like(Y)
    inside = s < 1.0
    si = s[inside]
    G[inside] = (np.exp(-si / (1.0 - si)) * (-2.0 / (1.0 - si) ** 2))[:, None] * Y[inside]
    return G


class BumpMap:
    """x -> x + height * sum_i bump((x - p_i)/width) w_i with disjoint bump balls."""

    def __init__(self, centers, directions, width: float, height: float):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        W = np.atleast_2d(np.asarray(directions, dtype=float))
        if W.shape != self.centers.shape:
            raise DimensionError("one direction per bump center is required")
        norms = np.linalg.norm(W, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-10):
            raise ConstructionError("bump directions must be unit vectors")
        self.directions = W
        self.width = float(width)
        self.height = float(height)
        if self.width <= 0 and self.height != 0:
            raise ConstructionError("bump width must be positive")
        if len(self.centers) > 1:
            dist, _ = cKDTree(self.centers).query(self.centers, k=2)
            if dist[:, 1].min() <= 2.0 * self.width:
                raise ConstructionError("bump balls overlap: centers must be more than 2*width apart")
        self._tree = cKDTree(self.centers)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def _local(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.width <= 0:
            return X, np.zeros(len(X), dtype=int), np.full((len(X), self.dim), 2.0)
        _, idx = self._tree.query(X)
        Y = (X - self.centers[idx]) / self.width
        return X, idx, Y

    def __call__(self, X) -> np.ndarray:
        single = np.asarray(X).ndim == 1
        X, idx, Y = self._local(X)
        out = X + self.height * bump(Y)[:, None] * self.directions[idx]
        return out[0] if single else out

    def jacobian(self, x) -> np.ndarray:
        """Analytic differential at a single point."""
        X, idx, Y = self._local(x)
        g = bump_gradient(Y)[0]
        return np.eye(self.dim) + self.height / max(self.width, 1e-300) * np.outer(self.directions[idx[0]], g)

    def jacobian_fd(self, x, step: float = 1e-6) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        h = step * max(self.width, 1e-300)
        E = np.eye(self.dim)
        cols = [(self(x + h * e) - self(x - h * e)) / (2.0 * h) for e in E]
        return np.column_stack(cols)

    def second_derivative_norm_fd(self, x, step: float = 1e-4) -> float:
        """Max over coordinate pairs of |d^2 Phi / dx_i dx_j| stacked into an operator-norm proxy."""
        x = np.asarray(x, dtype=float)
        h = step * self.width
        n = self.dim
        worst = 0.0
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            D = (self.jacobian(x + e) - self.jacobian(x - e)) / (2.0 * h)
            worst = max(worst, float(np.linalg.norm(D, 2)))
        return worst

    @property
    def first_order_bound(self) -> float:
        return 2.5 * self.height / self.width if self.width > 0 else 0.0

    @property
    def second_order_bound(self) -> float:
        return 23.0 * self.height / self.width ** 2 if self.width > 0 else 0.0


# --- bumped sphere ------------------------------------------------------------------------
class BumpedSphere(ManifoldModel):
    """Image of a sphere under a single bump map, with the uniform distribution.

    Circles are integrated by composite Gauss-Legendre quadrature in the angle;
    higher dimensions use a pushed-forward Monte Carlo bank reweighted by the
    Jacobian of the bump map.
    """

    def __init__(self, base: SphereModel, bump_map: BumpMap, mc_size: int = 200_000, seed: int = 0):
        if base.density.tilt != 0.0:
            raise ConstructionError("the base sphere must carry the uniform distribution")
        self.base = base
        self.bump_map = bump_map
        self.ambient_dim = base.ambient_dim
        self.intrinsic_dim = base.intrinsic_dim
        self.reach = math.nan
        self.bounding_radius = base.bounding_radius + bump_map.height
        self.seed = seed
        self.mc_size = mc_size
        self._bank = None
        self._probe_cache: dict = {}
        self._support_radius = bump_map.width
        self.bump_volume_base = self._base_cap_volume()
        self.bump_volume = self._bumped_piece_volume()
        self.volume = base.volume - self.bump_volume_base + self.bump_volume

    # the uniform density: f = 1/volume everywhere
    @property
    def f_min(self) -> float:
        return 1.0 / self.volume

    @property
    def f_max(self) -> float:
        return 1.0 / self.volume

    @property
    def lipschitz(self) -> float:
        return 0.0

    def _cap_angle(self) -> float:
        # the bump center lies on the base sphere, so the cap half-angle is closed form
        return 2.0 * math.asin(min(1.0, self.bump_map.width / (2.0 * self.base.radius)))

    def _base_cap_volume(self) -> float:
        if self.bump_map.width <= 0:
            return 0.0
        d, r, psi = self.intrinsic_dim, self.base.radius, self._cap_angle()
        if d == 1:
            return 2.0 * r * psi
        t, w = gauss_legendre([(0.0, psi)], psi / 8.0)
        return sphere_area(d - 1) * r ** d * float(w @ np.sin(t) ** (d - 1))

    def _angles_in_bump(self):
        if self.bump_map.width <= 0:
            return []
        y, _ = self.base._split(self.bump_map.centers[0])
        mid = math.atan2(y[0, 1], y[0, 0]) % (2.0 * math.pi)
        psi = self._cap_angle()
        lo, hi = mid - psi, mid + psi
        if lo < 0:
            return merge_intervals([(0.0, hi), (lo + 2.0 * math.pi, 2.0 * math.pi)])
        if hi > 2.0 * math.pi:
            return merge_intervals([(lo, 2.0 * math.pi), (0.0, hi - 2.0 * math.pi)])
        return [(lo, hi)]

    def _tangent_speed(self, theta) -> np.ndarray:
        """|d/dtheta Phi(gamma(theta))| for the circle parametrization."""
        r = self.base.radius
        P = self.base.point_at_angle(theta)
        T = (np.column_stack([-np.sin(theta), np.cos(theta)]) @ self.base.frame.T) * r
        out = np.empty(len(theta))
        for i, (p, t) in enumerate(zip(P, T)):
            out[i] = np.linalg.norm(self.bump_map.jacobian(p) @ t)
        return out

    def _jacobian_factor(self, P) -> np.ndarray:
        """Volume distortion of the bump map restricted to the base tangent spaces."""
        out = np.ones(len(P))
        inside = np.linalg.norm(P - self.bump_map.centers[0], axis=1) < self.bump_map.width
        for i in np.flatnonzero(inside):
            E = self.base.tangent(P[i]).frame
            D = self.bump_map.jacobian(P[i]) @ E
            out[i] = math.sqrt(max(np.linalg.det(D.T @ D), 0.0))
        return out

    def _bumped_piece_volume(self) -> float:
        if self.bump_map.width <= 0 or self.bump_map.height == 0:
            return self.bump_volume_base
        if self.intrinsic_dim == 1:
            theta, w = gauss_legendre(self._angles_in_bump(), self.bump_map.width / (16.0 * self.base.radius))
            return float(w @ self._tangent_speed(theta))
        P = self._cap_bank()
        return self.bump_volume_base * float(self._jacobian_factor(P).mean())

    def _cap_bank(self, count: int = 20_000) -> np.ndarray:
        """Uniform sample of the base sphere inside the bump ball."""
        rng = np.random.default_rng(self.seed + 17)
        c = self.bump_map.centers[0]
        y, _ = self.base._split(c)
        axis = y[0] / np.linalg.norm(y[0])
        half = self._cap_angle()
        d = self.intrinsic_dim
        # uniform on a spherical cap by inverse transform on the polar angle
        grid = np.linspace(0.0, half, 4097)
        dens = np.sin(grid) ** (d - 1)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
        psi = np.interp(rng.random(count) * cdf[-1], cdf, grid)
        Z = rng.standard_normal((count, d + 1))
        Z -= np.outer(Z @ axis, axis)
        Z /= np.linalg.norm(Z, axis=1, keepdims=True)
        U = np.cos(psi)[:, None] * axis + np.sin(psi)[:, None] * Z
        return self.base.embed(U)

    def distance(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = self.base.distance(X)
        near = np.linalg.norm(X - self.bump_map.centers[0], axis=1) < self.bump_map.width + 2 * self.bump_map.height + out
        for i in np.flatnonzero(near):
            out[i] = float(np.linalg.norm(X[i] - self.project(X[i])))
        return out

    def project(self, x, iterations: int = 20) -> np.ndarray:
        """Nearest point: best reference point refined by Gauss-Newton on a base chart."""
        x = np.asarray(x, dtype=float)
        spacing = max(self.bump_map.width / 50.0, 1e-9) if self.bump_map.width > 0 else self.base.radius / 200
        base_pts, imgs = self._probe_pairs(spacing)
        j = int(np.argmin(np.linalg.norm(imgs - x, axis=1)))
        q = base_pts[j]
        E = self.base.tangent(q).frame
        scale = max(self.bump_map.width, 1e-12)

        def surf(u):
            return self.bump_map(self.base.project(q + E @ u))

        u = np.zeros(self.intrinsic_dim)
        for _ in range(iterations):
            F = surf(u)
            h = 1e-7 * scale
            J = np.column_stack([(surf(u + h * e) - surf(u - h * e)) / (2 * h) for e in np.eye(len(u))])
            step, *_ = np.linalg.lstsq(J, x - F, rcond=None)
            u = u + step
            if np.linalg.norm(step) <= 1e-14 * max(1.0, self.base.radius):
                break
        F = surf(u)
        J = np.column_stack([(surf(u + 1e-7 * scale * e) - surf(u - 1e-7 * scale * e)) / (2e-7 * scale)
                             for e in np.eye(len(u))])
        resid = x - F
        if np.linalg.norm(J.T @ resid) > 1e-6 * max(np.linalg.norm(resid), 1e-12) * np.linalg.norm(J) + 1e-12:
            raise MedialAxisError("projection onto the bumped manifold did not converge")
        return F

    def _probe_pairs(self, spacing: float):
        """Base probes and their images, cached per spacing (used by the nearest-point searches)."""
        if spacing not in self._probe_cache:
            base_pts = self._base_probes(spacing)
            self._probe_cache[spacing] = (base_pts, self.bump_map(base_pts))
        return self._probe_cache[spacing]

    def _base_probes(self, spacing: float) -> np.ndarray:
        coarse = self.base.probe_points(max(spacing, self.base.radius / 400.0))
        if self.bump_map.width <= 0:
            return coarse
        if self.intrinsic_dim == 1:
            pieces = self._angles_in_bump()
            fine = [np.linspace(a, b, max(3, int(math.ceil((b - a) * self.base.radius / spacing)) + 1))
                    for a, b in pieces]
            return np.vstack([coarse, self.base.point_at_angle(np.concatenate(fine))])
        return np.vstack([coarse, self._cap_bank(4000)])

    def probe_points(self, spacing: float) -> np.ndarray:
        return self.bump_map(self._base_probes(spacing))

    def tangent(self, p):
        from .geometry import Subspace

        q = self.base.project(p) if self.bump_map.height == 0 else self._preimage(p)
        E = self.base.tangent(q).frame
        return Subspace(self.bump_map.jacobian(q) @ E)

    def _preimage(self, p):
        base_pts, imgs = self._probe_pairs(max(self.bump_map.width / 50.0, 1e-9))
        j = int(np.argmin(np.linalg.norm(imgs - p, axis=1)))
        q = base_pts[j]
        E = self.base.tangent(q).frame
        u = np.zeros(self.intrinsic_dim)
        for _ in range(30):
            g = self.base.project(q + E @ u)
            F = self.bump_map(g)
            J = self.bump_map.jacobian(g) @ E
            step, *_ = np.linalg.lstsq(J, p - F, rcond=None)
            u = u + step
            if np.linalg.norm(step) < 1e-15:
                break
        return self.base.project(q + E @ u)

    def sample(self, seed: int, count: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        out, remaining = [], count
        jmax = 1.0 + 2.5 * self.bump_map.height / max(self.bump_map.width, 1e-300)
        jmax = jmax ** self.intrinsic_dim
        while remaining > 0:
            P = self.base.sample(int(rng.integers(1 << 31)), max(2 * remaining, 64))
            keep = rng.random(len(P)) * jmax <= self._jacobian_factor(P)
            out.append(self.bump_map(P[keep])[:remaining])
            remaining -= len(out[-1])
        return np.vstack(out)

    def quadrature(self, support=None):
        if self.intrinsic_dim != 1:
            raise NotImplementedError
        if support is None:
            intervals = [(0.0, 2.0 * math.pi)]
        else:
            grow = support.radius + abs(self.bump_map.height)
            intervals = merge_intervals(self.base._arcs(support.centers, grow))
        bump_iv = self._angles_in_bump()
        cuts = sorted({x for iv in bump_iv for x in iv})
        pieces = []
        for a, b in intervals:
            pts = [a] + [c for c in cuts if a < c < b] + [b]
            pieces += list(zip(pts[:-1], pts[1:]))
        theta_list, w_list = [], []
        fine = self.bump_map.width / (16.0 * self.base.radius) if self.bump_map.width > 0 else 1.0
        for a, b in pieces:
            mid = 0.5 * (a + b)
            in_bump = any(lo <= mid <= hi for lo, hi in bump_iv)
            t, w = gauss_legendre([(a, b)], fine if in_bump else 2.0 * math.pi / 64)
            theta_list.append(t)
            w_list.append(w)
        if not theta_list:
            return np.zeros((0, self.ambient_dim)), np.zeros(0)
        theta = np.concatenate(theta_list)
        w = np.concatenate(w_list)
        P = self.bump_map(self.base.point_at_angle(theta))
        return P, w * self._tangent_speed(theta) / self.volume

    def _mc_bank(self):
        if self._bank is None:
            P = self.base.sample(self.seed, self.mc_size)
            J = self._jacobian_factor(P)
            self._bank = (self.bump_map(P), J / J.sum())
        return self._bank

    def expect(self, func, support=None):
        if support is not None:
            support = support.to_balls(self)
        if self.intrinsic_dim == 1:
            P, W = self.quadrature(support)
            if len(W) == 0:
                probe = np.asarray(func(np.zeros((0, self.ambient_dim))), dtype=float)
                return np.zeros(probe.shape[1:]) if probe.ndim > 1 else 0.0
            return W @ np.asarray(func(P), dtype=float)
        P, W = self._mc_bank()
        return W @ np.asarray(func(P), dtype=float)


# --- Le Cam pairs -------------------------------------------------------------------------
def lecam_hausdorff_bound(d: int, rch: float, f_min: float, tau: float) -> float:
    """rch/2^20 * min{1/(2^20 d^2), (tau/(omega_d f_min rch^d))^(2/d)}."""
    return rch / 2.0 ** 20 * min(1.0 / (2.0 ** 20 * d * d), (tau / (unit_ball_volume(d) * f_min * rch ** d)) ** (2.0 / d))


@dataclass
class LeCamPair:
    model0: SphereModel
    model1: BumpedSphere
    bump_map: BumpMap
    tau: float
    rch: float
    f_min: float
    width: float
    height: float
    clamped: bool
    predicted_hausdorff: float
    predicted_tv: float

    @property
    def bump_center(self) -> np.ndarray:
        return self.bump_map.centers[0]

    def total_variation(self) -> float:
        """Exact TV of the two uniform distributions (singular parts handled separately)."""
        H0, H1 = self.model0.volume, self.model1.volume
        a0, a1 = self.model1.bump_volume_base, self.model1.bump_volume
        return 0.5 * (abs(1.0 / H0 - 1.0 / H1) * (H0 - a0) + a0 / H0 + a1 / H1)

    def tv_envelope(self) -> float:
        """12 D0(B(p0, width)), the coarse upper bound on the TV."""
        return 12.0 * self.model1.bump_volume_base / self.model0.volume

    def hausdorff(self, spacing: float | None = None) -> float:
        """Hausdorff distance between the two manifolds measured on dense clouds.

        Away from the bump ball the manifolds coincide, so only the bump region is
        sampled; distances to M0 use its closed form, distances to M1 its projection.
        """
        if self.height == 0:
            return 0.0
        spacing = spacing or self.width / 200.0
        base_pts = self.model1._base_probes(spacing)
        near = np.linalg.norm(base_pts - self.bump_center, axis=1) <= self.width * 1.01
        B = base_pts[near]
        img = self.bump_map(B)
        d10 = float(self.model0.distance(img).max())
        d01 = float(max(np.linalg.norm(b - self.model1.project(b)) for b in B[:: max(1, len(B) // 200)]))
        return max(d10, d01)

    def manifest(self) -> dict:
        return {
            "tau": self.tau, "rch": self.rch, "f_min": self.f_min, "width": self.width,
            "height": self.height, "clamped": self.clamped,
            "predicted_hausdorff": self.predicted_hausdorff, "predicted_tv": self.predicted_tv,
            "bump_center": self.bump_center.tolist(),
        }


def lecam_pair(base: SphereModel, tau: float, rch: float | None = None, f_min: float | None = None,
               anchor=None) -> LeCamPair:
    """Single-bump pair (M0, M1) with TV(D0, D1) <= tau/2.

    ``rch`` defaults to half the sphere radius; ``anchor`` is a point of M0 kept
    on M1 (the bump sits at its antipode).
    """
    if not 0.0 <= tau <= 1.0:
        raise ConstructionError("tau must lie in [0, 1]")
    d = base.intrinsic_dim
    rch = base.radius / 2.0 if rch is None else float(rch)
    if base.reach < 2.0 * rch * (1 - 1e-12):
        raise ConstructionError("base sphere must have reach at least 2 rch")
    f_min = 1.0 / (2.0 ** (d + 1) * sphere_area(d) * rch ** d) if f_min is None else float(f_min)
    if 2.0 ** (d + 1) * sphere_area(d) * f_min * rch ** d > 1.0 + 1e-12:
        raise ConstructionError("model consistency 2^(d+1) sigma_d f_min rch^d <= 1 fails")
    H0 = base.volume
    anchor = base.point_at_angle(0.0)[0] if (anchor is None and d == 1) else anchor
    if anchor is None:
        anchor = base.embed(np.eye(d + 1)[:1])[0]
    p0 = 2.0 * base.center - np.asarray(anchor, dtype=float)
    w0 = (p0 - base.center) / np.linalg.norm(p0 - base.center)
    width = (tau / 2.0 * H0 / (12.0 * 2.0 ** d * unit_ball_volume(d))) ** (1.0 / d)
    cap = rch / (2.0 ** 12 * d)
    clamped = width > cap
    width = min(width, cap)
    height = width ** 2 / (92.0 * rch)
    bmap = BumpMap(p0[None, :], w0[None, :], width, height)
    model1 = BumpedSphere(base, bmap)
    return LeCamPair(base, model1, bmap, tau, rch, f_min, width, height, clamped,
                     lecam_hausdorff_bound(d, rch, f_min, tau) if tau > 0 else 0.0, tau / 2.0)


def sphere_through_origin(d: int, n: int, f_min: float, seed: int | None = None) -> SphereModel:
    """Sphere of volume 1/(2 f_min) passing through 0 (so its reach is twice rch = radius/2)."""
    radius = (1.0 / (2.0 * sphere_area(d) * f_min)) ** (1.0 / d)
    frame = np.eye(n)[:, : d + 1] if seed is None else \
        np.linalg.qr(np.random.default_rng(seed).standard_normal((n, d + 1)))[0]
    return SphereModel(d, n, radius, center=radius * frame[:, 0], frame=frame)


# --- grid paths -----------------------------------------------------------------------------
@dataclass
class GridPath:
    side: int
    dim: int
    length: int
    vertices: np.ndarray  # (length, dim) integer coordinates in 1..side

    def edges(self):
        return [(i, i + 1) for i in range(self.length - 1)]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.length, dtype=int)
        deg[:-1] += 1
        deg[1:] += 1
        return deg

    def check(self) -> None:
        V = self.vertices
        if V.min() < 1 or V.max() > self.side:
            raise ConstructionError("grid path leaves the grid")
        steps = np.abs(np.diff(V, axis=0)).sum(axis=1)
        if np.any(steps != 1):
            raise ConstructionError("consecutive grid path vertices are not adjacent")
        # in-range vertices have distinct mixed-radix codes exactly when they are distinct
        codes = (V - 1) @ (self.side ** np.arange(self.dim, dtype=np.int64))
        if len(np.unique(codes)) != len(V):
            raise ConstructionError("grid path revisits a vertex")


def _snake(side: int, dim: int) -> np.ndarray:
    path = np.arange(1, side + 1)[:, None]
    for _ in range(1, dim):
        blocks = []
        for j in range(1, side + 1):
            block = path if j % 2 == 1 else path[::-1]
            blocks.append(np.hstack([block, np.full((len(block), 1), j)]))
        path = np.vstack(blocks)
    return path


def grid_path(side: int, dim: int, length: int) -> GridPath:
    """First ``length`` vertices of the boustrophedon Hamiltonian path of {1..side}^dim."""
    if side < 1 or dim < 1:
        raise ConstructionError("side and dimension must be positive")
    if not 1 <= length <= side ** dim:
        raise ConstructionError("path length out of range")
    if side ** dim > 10 ** 7:
        raise MemoryError("grid too large to enumerate")
    V = _snake(side, dim)[:length].astype(np.int64)
    return GridPath(side, dim, length, V)


def induced_degrees(path: GridPath) -> np.ndarray:
    """Degrees in the subgraph of the grid induced by the path's vertex set."""
    tree = cKDTree(path.vertices)
    deg = np.zeros(path.length, dtype=int)
    for i, j in tree.query_pairs(1.0 + 1e-9):
        deg[i] += 1
        deg[j] += 1
    return deg


# --- widgets ----------------------------------------------------------------------------------
def widget_unit_volumes(d: int) -> dict:
    """Closed-form d-volumes of the unit-scale widgets (tube radius 1/3, box half-side 1)."""
    tube = sphere_area(d - 1) * (1.0 / 3.0) ** (d - 1)
    return {
        "sphere": sphere_area(d) * (1.0 / 3.0) ** d,
        "end": 0.5 * sphere_area(d) * (1.0 / 3.0) ** d + tube,
        "straight": 2.0 * tube,
        "tangent_bend": tube * (1.0 + math.pi / 4.0),
        "normal_bend": tube * (1.0 + math.pi / 4.0),
    }


def widget_constant(d: int) -> float:
    """C_d = 9 2^d sigma_{d-1}: per-widget volume lies in [C_d/3, C_d] rch^d."""
    return 9.0 * 2.0 ** d * sphere_area(d - 1)


@dataclass
class Widget:
    kind: str
    vertex: np.ndarray        # unit-scale center (even integer coordinates)
    into: np.ndarray | None   # unit vector toward the previous vertex
    out: np.ndarray | None    # unit vector toward the next vertex
    transverse: tuple         # coordinate indices spanning the cross-section

    def volume(self, d: int, scale: float) -> float:
        return widget_unit_volumes(d)[self.kind] * scale ** d


def _unit_axis(n: int, k: int, sign: int) -> np.ndarray:
    e = np.zeros(n)
    e[k] = float(sign)
    return e


def _plan_widgets(vertices: np.ndarray, n: int, d: int) -> list[Widget]:
    L = len(vertices)
    centers = 2.0 * vertices.astype(float)
    if L == 1:
        return [Widget("sphere", centers[0], None, None, tuple(range(d)))]
    moves = np.diff(vertices, axis=0)
    axes = [int(np.flatnonzero(m)[0]) for m in moves]
    signs = [int(m[a]) for m, a in zip(moves, axes)]
    if n < d + 1:
        raise ConstructionError("ambient dimension must exceed the intrinsic dimension")
    T = tuple(k for k in range(n) if k != axes[0])[:d]
    widgets = []
    for i in range(L):
        into = None if i == 0 else _unit_axis(n, axes[i - 1], -signs[i - 1])
        out = None if i == L - 1 else _unit_axis(n, axes[i], signs[i])
        if into is None or out is None:
            widgets.append(Widget("end", centers[i], into, out, T))
            continue
        a, b = axes[i - 1], axes[i]
        if a == b:
            widgets.append(Widget("straight", centers[i], into, out, T))
        elif b in T:
            widgets.append(Widget("tangent_bend", centers[i], into, out, T))
            T = tuple(sorted((set(T) - {b}) | {a}))
        else:
            if n < d + 2:
                raise ConstructionError("a normal bend needs n >= d + 2")
            widgets.append(Widget("normal_bend", centers[i], into, out, T))
    return widgets


def _cross_section(d: int, count: int) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    return _sphere_stream(d, count)


def _rotate(vectors: np.ndarray, u: np.ndarray, v: np.ndarray, theta) -> np.ndarray:
    """Rotate rows by angle(s) theta in the plane (u, v), sending u toward v."""
    theta = np.atleast_1d(theta)
    cu = vectors @ u
    cv = vectors @ v
    rest = vectors - np.outer(cu, u) - np.outer(cv, v)
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    return rest + (c * cu[:, None] - s * cv[:, None]) * u + (s * cu[:, None] + c * cv[:, None]) * v


def _sample_widget(w: Widget, n: int, d: int, spacing: float, sections: int) -> list[np.ndarray]:
    """Unit-scale samples of one widget.

    Returns a list of arrays; for d = 1 each array is an ordered polyline.
    """
    E = np.eye(n)[list(w.transverse)]               # (d, n) transverse basis
    sec = _cross_section(d, sections) / 3.0         # (m, d) cross-section offsets
    offsets = sec @ E                               # (m, n)
    out = []
    if w.kind == "sphere":
        if d == 1:
            t = np.linspace(0.0, 2.0 * math.pi, max(16, int(2 * math.pi / 3 / spacing)) + 1)
            out.append(w.vertex + (np.outer(np.cos(t), E[0]) + np.outer(np.sin(t), _other_axis(w, n))) / 3.0)
        else:
            S = _sphere_stream(d + 1, max(64, int(sphere_area(d) * (1 / 3) ** d / spacing ** d)))
            basis = np.vstack([E, _other_axis(w, n)])
            out.append(w.vertex + S @ basis / 3.0)
        return out
    if w.kind == "end":
        axis = w.out if w.out is not None else w.into
        ts = np.linspace(0.0, 1.0, max(2, int(1.0 / spacing)) + 1)
        cyl = [w.vertex + np.outer(ts, axis) + o for o in offsets]
        # half-sphere on the far side: rotate each cross-section point toward -axis
        th = np.linspace(0.0, math.pi / 2.0, max(4, int(math.pi / 6 / spacing)) + 1)
        if d == 1:
            o1 = offsets[0] / np.linalg.norm(offsets[0])
            arc = w.vertex + _rotate(np.broadcast_to(offsets[0], (len(th), n)).copy(), o1, -axis, th)
            arc2 = w.vertex + _rotate(np.broadcast_to(offsets[1], (len(th), n)).copy(), -o1, -axis, th)
            # single polyline: cylinder side 1 reversed, the cap, cylinder side 2
            out.append(np.vstack([cyl[0][::-1], arc[1:], arc2[::-1][1:], cyl[1][1:]]))
        else:
            cap = []
            for o in offsets:
                on = o / np.linalg.norm(o)
                cap.append(w.vertex + _rotate(np.broadcast_to(o, (len(th), n)).copy(), on, -axis, th))
            out.extend(cyl)
            out.extend(cap)
        return out
    if w.kind == "straight":
        ts = np.linspace(-1.0, 1.0, max(2, int(2.0 / spacing)) + 1)
        axis = w.out
        return [w.vertex + np.outer(ts, axis) + o for o in offsets]
    # bends: segment from into to into/2, quarter turn about (into+out)/2, segment out/2 to out
    p, q = w.into, w.out
    xc = w.vertex + 0.5 * (p + q)
    ts = np.linspace(1.0, 0.5, max(2, int(0.5 / spacing)) + 1)
    th = np.linspace(0.0, math.pi / 2.0, max(4, int(math.pi / 2 / spacing)) + 1)
    for o in offsets:
        seg1 = w.vertex + np.outer(ts, p) + o
        rel = (w.vertex + 0.5 * p + o) - xc
        arc = xc + _rotate(np.broadcast_to(rel, (len(th), n)).copy(), -q, -p, th)
        end_off = _rotate(o[None, :], -q, -p, [math.pi / 2.0])[0]
        seg2 = w.vertex + np.outer(ts[::-1], q) + end_off
        out.append(np.vstack([seg1, arc[1:], seg2[1:]]))
    return out


def _other_axis(w: Widget, n: int) -> np.ndarray:
    k = next(i for i in range(n) if i not in w.transverse)
    return np.eye(n)[k]


@dataclass
class WidgetManifold:
    """Point-cloud realization of the tube manifold along a grid path.

    ``scale`` maps unit-scale widgets (box half-side 1) to the world: it is six
    times the reach parameter, so boxes have side 12 times the reach parameter.
    """

    path: GridPath
    n: int
    d: int
    reach_param: float
    widgets: list
    pieces: list
    offset: np.ndarray

    @property
    def scale(self) -> float:
        return 6.0 * self.reach_param

    @property
    def points(self) -> np.ndarray:
        return np.vstack(self.pieces)

    @property
    def volume(self) -> float:
        return float(sum(w.volume(self.d, self.scale) for w in self.widgets))

    def volume_bracket(self) -> tuple[float, float]:
        Cd = widget_constant(self.d) * self.reach_param ** self.d
        return len(self.widgets) * Cd / 3.0, len(self.widgets) * Cd

    def polyline_length(self) -> float:
        if self.d != 1:
            raise ValueError("polyline length is only defined for curves")
        return float(sum(np.linalg.norm(np.diff(P, axis=0), axis=1).sum() for P in self.pieces))

    def max_curvature(self) -> float:
        """Largest discrete curvature (turning angle / mean edge length) along the curve pieces."""
        if self.d != 1:
            raise ValueError("curvature probes are only implemented for curves")
        worst = 0.0
        for P in self.pieces:
            D = np.diff(P, axis=0)
            lens = np.linalg.norm(D, axis=1)
            keep = lens > 1e-12
            D, lens = D[keep], lens[keep]
            U = D / lens[:, None]
            cos = np.clip(np.sum(U[1:] * U[:-1], axis=1), -1.0, 1.0)
            kappa = np.arccos(cos) / (0.5 * (lens[1:] + lens[:-1]))
            if len(kappa):
                worst = max(worst, float(kappa.max()))
        return worst

    def reference_cloud(self) -> ReferenceCloud:
        return ReferenceCloud(self.points, self.scale * self._spacing)

    def manifest(self) -> dict:
        lo, hi = self.volume_bracket()
        return {"n": self.n, "d": self.d, "reach_param": self.reach_param, "widgets": len(self.widgets),
                "kinds": [w.kind for w in self.widgets], "volume": self.volume, "bracket": [lo, hi]}


def widget_manifold(path: GridPath, reach_param: float, n: int | None = None, d: int = 1,
                    spacing: float = 0.02, sections: int = 64, center: bool = True) -> WidgetManifold:
    """Tube manifold of tube radius 2 * reach_param along ``path`` (grid pitch 12 * reach_param)."""
    n = path.dim if n is None else n
    if n < path.dim:
        raise ConstructionError("ambient dimension below the grid dimension")
    if n < d + 1:
        raise ConstructionError("need n >= d + 1")
    path.check()
    V = np.zeros((path.length, n), dtype=np.int64)
    V[:, : path.dim] = path.vertices
    widgets = _plan_widgets(V, n, d)
    scale = 6.0 * reach_param
    shift = np.zeros(n)
    if center:
        shift[: path.dim] = -(path.side + 1.0)  # grid centered at the origin (unit coords are 2*vertex)
    pieces = []
    for w in widgets:
        for P in _sample_widget(w, n, d, spacing, sections):
            pieces.append(scale * (P + shift))
    wm = WidgetManifold(path, n, d, reach_param, widgets, pieces, scale * shift)
    wm._spacing = spacing
    return wm


# --- prescribed volume ----------------------------------------------------------------------
@dataclass
class PrescribedVolume:
    manifold: WidgetManifold
    target: float
    count: int
    grid_dim: int
    side: int

    @property
    def achieved(self) -> float:
        return self.manifold.volume


def prescribed_volume_constant(d: int) -> float:
    """C'_d = 9 2^(2d+1) sigma_{d-1}."""
    return 9.0 * 2.0 ** (2 * d + 1) * sphere_area(d - 1)


def prescribed_volume_manifold(V: float, rch: float, R: float, n: int, d: int, **kw) -> PrescribedVolume:
    """Widget chain (reach parameter 2 rch) of volume in [V/12, V/2] inside B(0, R)."""
    if rch > R / 36.0 * (1 + 1e-12):
        raise ConstructionError("need rch <= R/36")
    Cp = prescribed_volume_constant(d)
    ratio = V / (Cp * rch ** d)
    powers = [(R / (48.0 * rch * math.sqrt(k))) ** k for k in range(1, n + 1)]
    k0 = int(np.argmax(powers)) + 1
    if not 1.0 <= ratio <= powers[k0 - 1] * (1 + 1e-12):
        raise ConstructionError(
            f"V/(C'_d rch^d) = {ratio:.4g} must lie in [1, {powers[k0 - 1]:.4g}]")
    count = int(math.floor(ratio + 1e-12))
    side = max(1, int(math.ceil(count ** (1.0 / k0) - 1e-12)))
    while side ** k0 < count:
        side += 1
    path = grid_path(side, k0, count)
    wm = widget_manifold(path, 2.0 * rch, n=n, d=d, **kw)
    radius = float(np.linalg.norm(wm.points, axis=1).max())
    if radius > R:
        raise ConstructionError(f"construction leaves B(0, R): radius {radius:.4g} > {R:.4g}")
    return PrescribedVolume(wm, V, count, k0, side)


# --- translation packings ------------------------------------------------------------------
@dataclass
class TranslationPacking:
    centers: np.ndarray
    count: int
    lower_bound: float
    pitch: float
    truncated: bool

    def translate(self, points, index: int) -> np.ndarray:
        return np.asarray(points) + self.centers[index]


def translation_packing(model_points, R: float, r: float, cap: int = 100_000) -> TranslationPacking:
    """Cubic-lattice translations of M0 (inside B(0, R/2)) by vectors of B(0, R/2), pairwise > 2r apart."""
    P = np.atleast_2d(np.asarray(model_points, dtype=float))
    n = P.shape[1]
    if r <= 0 or r > R / 2.0 * (1 + 1e-12):
        raise ConstructionError("need 0 < r <= R/2")
    if np.linalg.norm(P, axis=1).max() > R / 2.0 * (1 + 1e-9):
        raise ConstructionError("base manifold must lie in B(0, R/2)")
    pitch = 2.0 * r * (1.0 + 1e-9)
    K = int(math.floor((R / 2.0 / pitch) ** 2))
    count = int(lattice_norm_counts(n, K)[n][K])
    A = math.isqrt(K)
    lower = (R / (4.0 * r)) ** n
    truncated = count > cap
    if (2 * A + 1) ** n <= 50 * cap:
        grids = np.meshgrid(*([np.arange(-A, A + 1)] * n), indexing="ij")
        Z = np.stack([g.ravel() for g in grids], axis=1)
        Z = Z[np.sum(Z ** 2, axis=1) <= K]
        Z = Z[np.lexsort(Z.T[::-1])][:cap]
    else:
        Z = np.zeros((1, n), dtype=np.int64)
        truncated = True
    return TranslationPacking(Z * pitch, count, lower, pitch, truncated)


# --- query-count arithmetic -----------------------------------------------------------------
FLOAT_OPS = types.SimpleNamespace(log=math.log, floor=math.floor, max=max)


def query_lower_bound(pack_log, alpha, tau, ops=FLOAT_OPS):
    """(log packing + log(1 - alpha)) / log(1 + floor(1/tau))."""
    if ops is FLOAT_OPS:
        if not 0.0 <= alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if tau <= 0:
            raise ValueError("tau must be positive")
        if tau > 1.0:
            tau = 1.0
    return (pack_log + ops.log(1 - alpha)) / ops.log(1 + ops.floor(1 / tau))


def intrinsic_pack_log(n, d, f_min, rch, eps, omega=None, exponent: int = 21):
    """n / (omega_d f_min rch^d) * (rch / (2^exponent eps))^(d/2)."""
    omega = unit_ball_volume(d) if omega is None else omega
    return n / (omega * f_min * rch ** d) * (rch / (2 ** exponent * eps)) ** (d / 2)


def ambient_pack_log(n, R, eps, ops=FLOAT_OPS):
    """n log(R / (4 eps)), the log-size of a translation packing."""
    return n * ops.log(R / (4 * eps))


def fixed_point_query_bound(n, d, f_min, rch, eps, alpha, tau, omega=None, ops=FLOAT_OPS):
    return query_lower_bound(intrinsic_pack_log(n, d, f_min, rch, eps, omega, 21), alpha, tau, ops)


def bounding_ball_query_bound(n, d, f_min, rch, eps, R, alpha, tau, omega=None, ops=FLOAT_OPS):
    intrinsic = intrinsic_pack_log(n, d, f_min, rch, eps, omega, 31)
    ambient = ambient_pack_log(n, R, eps, ops)
    return query_lower_bound(ops.max(ambient, intrinsic), alpha, tau, ops)


def export_manifest(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
