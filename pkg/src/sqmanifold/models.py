"""Ground-truth distributions supported on embedded manifolds.

The models here are hidden from estimators: only the oracle (to compute exact
expectations) and the evaluator (to score outputs) touch them.  Every model
exposes ``expect(func, support)``, the expectation engine used by the oracle.

Expectation accuracy
--------------------
* circles: composite Gauss-Legendre on the exact arcs cut out by the support;
* 2-spheres: polar quadrature on the spherical caps cut out by the support;
* anything else: a fixed, seeded Monte Carlo bank shared by all queries.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Subspace, orthonormalize, sphere_area, unit_ball_volume
from .supports import BallSupport

log = logging.getLogger(__name__)

GL_NODES = 16
_GL_X, _GL_W = np.polynomial.legendre.leggauss(GL_NODES)


class MedialAxisError(ValueError):
    """Raised when a point is too far from the manifold to have a unique projection."""


class OffManifoldError(ValueError):
    """Raised when an on-manifold point was expected."""


def gauss_legendre(intervals, panel_width: float, min_panels: int = 2):
    """Composite Gauss-Legendre nodes and weights on a list of intervals."""
    nodes, weights = [], []
    for a, b in intervals:
        length = b - a
        if length <= 0:
            continue
        panels = max(min_panels, int(math.ceil(length / panel_width)))
        edges = np.linspace(a, b, panels + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[1:] + edges[:-1])
        nodes.append((mid[:, None] + half[:, None] * _GL_X[None, :]).ravel())
        weights.append((half[:, None] * _GL_W[None, :]).ravel())
    if not nodes:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(nodes), np.concatenate(weights)


def merge_intervals(intervals):
    """Union of closed intervals of the real line."""
    out = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


@dataclass(frozen=True)
class Density:
    """Affine density on a sphere: c * (1 + a <u, p - center> / radius).

    Attributes
    ----------
    f_min, f_max : float
        Extreme values over the sphere.
    lipschitz : float
        Lipschitz constant with respect to the ambient norm.
    """

    scale: float
    tilt: float
    direction: np.ndarray
    center: np.ndarray
    radius: float

    @property
    def f_min(self) -> float:
        return self.scale * (1.0 - abs(self.tilt))

    @property
    def f_max(self) -> float:
        return self.scale * (1.0 + abs(self.tilt))

    @property
    def lipschitz(self) -> float:
        return self.scale * abs(self.tilt) / self.radius

    def __call__(self, P) -> np.ndarray:
        P = np.atleast_2d(P)
        if self.tilt == 0.0:
            return np.full(len(P), self.scale)
        return self.scale * (1.0 + self.tilt * ((P - self.center) @ self.direction) / self.radius)


class ManifoldModel:
    """Common interface of the hidden ground-truth models."""

    ambient_dim: int
    intrinsic_dim: int
    reach: float
    volume: float
    bounding_radius: float

    @property
    def f_min(self) -> float:
        return self.density.f_min

    @property
    def f_max(self) -> float:
        return self.density.f_max

    @property
    def lipschitz(self) -> float:
        return self.density.lipschitz

    @property
    def contains_origin(self) -> bool:
        return bool(self.distance(np.zeros(self.ambient_dim))[0] < 1e-9)

    def expect(self, func, support=None) -> np.ndarray:
        raise NotImplementedError

    def ball_mass(self, x0, h: float) -> float:
        x0 = np.asarray(x0, dtype=float)
        supp = BallSupport(x0[None, :], h)
        return float(self.expect(lambda P: supp.contains(P).astype(float), supp))

    def reference_cloud(self, resolution: float) -> "ReferenceCloud":
        return ReferenceCloud(self.probe_points(resolution), resolution)


class SphereModel(ManifoldModel):
    """Round d-sphere embedded in R^n through an orthonormal (d+1)-frame."""

    def __init__(self, d: int, n: int, radius: float, center=None, frame=None, tilt: float = 0.0,
                 tilt_direction=None, mc_size: int = 200_000, seed: int = 0):
        if not 1 <= d < n:
            raise ValueError("need 1 <= d < n")
        if not radius > 0 or not math.isfinite(radius):
            raise ValueError("sphere radius must be positive and finite")
        if abs(tilt) >= 1.0:
            raise ValueError("density tilt must satisfy |a| < 1")
        self.intrinsic_dim = d
        self.ambient_dim = n
        self.radius = float(radius)
        self.center = np.zeros(n) if center is None else np.asarray(center, dtype=float)
        if frame is None:
            frame = np.eye(n)[:, : d + 1]
        self.frame = orthonormalize(np.asarray(frame, dtype=float))
        if self.frame.shape != (n, d + 1):
            raise ValueError("embedding frame must be n x (d+1)")
        if tilt_direction is None:
            tilt_direction = self.frame[:, 0]
        u = self.frame @ (self.frame.T @ np.asarray(tilt_direction, dtype=float))
        u = u / np.linalg.norm(u)
        self.reach = self.radius
        self.volume = sphere_area(d) * self.radius ** d
        self.density = Density(1.0 / self.volume, float(tilt), u, self.center, self.radius)
        self.bounding_radius = float(np.linalg.norm(self.center) + self.radius)
        self.mc_size = int(mc_size)
        self.seed = int(seed)
        self._bank = None
        if sphere_area(d) * self.f_min * self.reach ** d > 1.0 + 1e-12:
            raise ValueError("density floor violates the volume constraint")
        if d <= 2:
            total = float(self.expect(lambda P: np.ones(len(P))))
            if abs(total - 1.0) > 1e-6:
                raise ValueError(f"density integrates to {total}, not 1")

    # --- geometry -----------------------------------------------------------------
    def _split(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        rel = X - self.center
        y = rel @ self.frame
        off = rel - y @ self.frame.T
        return y, off

    def distance(self, X) -> np.ndarray:
        y, off = self._split(X)
        radial = np.linalg.norm(y, axis=1) - self.radius
        return np.sqrt(radial ** 2 + np.sum(off ** 2, axis=1))

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        y, _ = self._split(x)
        ny = np.linalg.norm(y, axis=1)
        dist = self.distance(x)
        # the medial axis of a sphere is its center (the complement of the frame span through it);
        # points exactly at distance `reach` on the outside still have a unique projection
        if np.any(dist > self.reach) or np.any(ny == 0):
            raise MedialAxisError("point lies at or beyond the reach; projection is not unique")
        P = self.center + (self.radius * y / ny[:, None]) @ self.frame.T
        return P[0] if single else P

    def tangent(self, p) -> Subspace:
        p = np.asarray(p, dtype=float)
        if self.distance(p)[0] > 1e-8:
            raise OffManifoldError("tangent space requested at an off-manifold point")
        y, _ = self._split(p)
        radial = y[0] / np.linalg.norm(y[0])
        q, _ = np.linalg.qr(np.column_stack([radial, np.eye(self.intrinsic_dim + 1)]))
        local = q[:, 1: self.intrinsic_dim + 1]
        return Subspace(self.frame @ local)

    def geodesic(self, p, q) -> np.ndarray:
        """Closed-form geodesic distance between on-manifold points."""
        a, _ = self._split(p)
        b, _ = self._split(q)
        a = a / np.linalg.norm(a, axis=1, keepdims=True)
        b = b / np.linalg.norm(b, axis=1, keepdims=True)
        cos = np.clip(np.sum(a * b, axis=1), -1.0, 1.0)
        return self.radius * np.arccos(cos)

    def embed(self, Z) -> np.ndarray:
        """Map unit vectors of R^(d+1) to points of the sphere."""
        return self.center + self.radius * np.atleast_2d(Z) @ self.frame.T

    def point_at_angle(self, theta) -> np.ndarray:
        if self.intrinsic_dim != 1:
            raise ValueError("angle parametrization is only defined for circles")
        t = np.atleast_1d(np.asarray(theta, dtype=float))
        return self.embed(np.column_stack([np.cos(t), np.sin(t)]))

    # --- sampling -----------------------------------------------------------------
    def sample(self, seed: int, count: int) -> np.ndarray:
        if count < 1:
            raise ValueError("count must be at least 1")
        rng = np.random.default_rng(seed)
        out = []
        remaining = count
        while remaining > 0:
            batch = max(2 * remaining, 64)
            Z = rng.standard_normal((batch, self.intrinsic_dim + 1))
            Z /= np.linalg.norm(Z, axis=1, keepdims=True)
            P = self.embed(Z)
            if self.density.tilt != 0.0:
                keep = rng.random(batch) * self.f_max <= self.density(P)
                P = P[keep]
            out.append(P[:remaining])
            remaining -= len(out[-1])
        return np.vstack(out)

    def probe_points(self, spacing: float) -> np.ndarray:
        """Deterministic point set on the sphere with mesh size about ``spacing``."""
        d = self.intrinsic_dim
        if d == 1:
            m = max(8, int(math.ceil(2.0 * math.pi * self.radius / spacing)))
            return self.point_at_angle(2.0 * math.pi * np.arange(m) / m)
        if d == 2:
            m = max(16, int(math.ceil(8.0 * math.pi * self.radius ** 2 / spacing ** 2)))
            i = np.arange(m) + 0.5
            z = 1.0 - 2.0 * i / m
            phi = math.pi * (1.0 + math.sqrt(5.0)) * i
            s = np.sqrt(1.0 - z ** 2)
            return self.embed(np.column_stack([s * np.cos(phi), s * np.sin(phi), z]))
        m = int(min(2_000_000, math.ceil(10.0 * self.volume / (unit_ball_volume(d) * (spacing / 2) ** d))))
        return self.sample(self.seed + 7919, m)

    # --- expectation engine -------------------------------------------------------
    def _cap(self, x0, rho: float):
        """Axis (in frame coordinates) and angular radius of B(x0, rho) on the sphere."""
        y, off = self._split(x0)
        y, w = y[0], float(np.sum(off ** 2))
        ny = float(np.linalg.norm(y))
        num = self.radius ** 2 + ny ** 2 + w - rho ** 2
        if ny == 0.0:
            return (np.eye(self.intrinsic_dim + 1)[0], math.pi) if num <= 0 else None
        kappa = num / (2.0 * self.radius * ny)
        if kappa > 1.0:
            return None
        return y / ny, math.acos(max(-1.0, kappa))

    def _arcs(self, centers, rho: float):
        """Angular intervals of the circle inside the union of balls B(c, rho)."""
        C = np.atleast_2d(centers)
        if len(C) == 0:
            return []
        y, off = self._split(C)
        w = np.sum(off ** 2, axis=1)
        ny = np.linalg.norm(y, axis=1)
        num = self.radius ** 2 + ny ** 2 + w - rho ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            kappa = np.where(ny > 0, num / (2.0 * self.radius * np.where(ny > 0, ny, 1.0)),
                             np.where(num <= 0, -np.inf, np.inf))
        if np.any(kappa <= -1.0):
            return [(0.0, 2.0 * math.pi)]
        keep = kappa <= 1.0
        if not np.any(keep):
            return []
        half = np.arccos(kappa[keep])
        psi = np.arctan2(y[keep, 1], y[keep, 0]) % (2.0 * math.pi)
        a, b = psi - half, psi + half
        lo_wrap, hi_wrap = a < 0, b > 2.0 * math.pi
        plain = ~(lo_wrap | hi_wrap)
        pieces = list(zip(a[plain], b[plain]))
        pieces += list(zip(a[lo_wrap] + 2 * math.pi, np.full(lo_wrap.sum(), 2 * math.pi)))
        pieces += list(zip(np.zeros(lo_wrap.sum()), b[lo_wrap]))
        pieces += list(zip(a[hi_wrap], np.full(hi_wrap.sum(), 2 * math.pi)))
        pieces += list(zip(np.zeros(hi_wrap.sum()), b[hi_wrap] - 2 * math.pi))
        return pieces

    def quadrature(self, support=None):
        """Nodes and weights (density included) for integrating against the distribution."""
        d = self.intrinsic_dim
        if d == 1:
            if support is None:
                intervals = [(0.0, 2.0 * math.pi)]
            else:
                intervals = merge_intervals(self._arcs(support.centers, support.radius))
            theta, w = gauss_legendre(intervals, 2.0 * math.pi / 64)
            if len(theta) == 0:
                return np.zeros((0, self.ambient_dim)), w
            P = self.point_at_angle(theta)
            return P, w * self.radius * self.density(P)
        if d == 2:
            caps = []
            if support is None:
                caps.append((np.array([0.0, 0.0, 1.0]), math.pi))
            else:
                for c in support.centers:
                    cap = self._cap(c, support.radius)
                    if cap is not None:
                        caps.append(cap)
            pts, wts = [], []
            n_phi = 64
            phi = 2.0 * math.pi * np.arange(n_phi) / n_phi
            for axis, half in caps:
                psi, wpsi = gauss_legendre([(0.0, half)], math.pi / 32)
                b = np.linalg.qr(np.column_stack([axis, np.eye(3)]))[0][:, 1:3]
                ring = np.cos(phi)[:, None] * b[:, 0] + np.sin(phi)[:, None] * b[:, 1]
                Z = (np.cos(psi)[:, None, None] * axis[None, None, :]
                     + np.sin(psi)[:, None, None] * ring[None, :, :]).reshape(-1, 3)
                W = (wpsi * np.sin(psi))[:, None] * np.full(n_phi, 2.0 * math.pi / n_phi)[None, :]
                pts.append(self.embed(Z))
                wts.append(W.ravel() * self.radius ** 2)
            if not pts:
                return np.zeros((0, self.ambient_dim)), np.zeros(0)
            P = np.vstack(pts)
            W = np.concatenate(wts) * self.density(P)
            if support is not None and len(caps) > 1:
                W = W / np.maximum(support.count(P), 1)
            return P, W
        raise NotImplementedError("deterministic quadrature is only available for d <= 2")

    def _mc_bank(self) -> np.ndarray:
        if self._bank is None:
            self._bank = self.sample(self.seed, self.mc_size)
        return self._bank

    def expect(self, func, support=None) -> np.ndarray:
        if support is not None:
            support = support.to_balls(self)
        if self.intrinsic_dim <= 2:
            P, W = self.quadrature(support)
            if len(W) == 0:
                return _zero_like(func, self.ambient_dim)
            return W @ np.asarray(func(P), dtype=float)
        bank = self._mc_bank()
        return _bank_mean(bank, func, support)


def _zero_like(func, n: int) -> np.ndarray:
    probe = np.asarray(func(np.zeros((0, n))), dtype=float)
    return np.zeros(probe.shape[1:]) if probe.ndim > 1 else np.float64(0.0)


def _bank_mean(bank: np.ndarray, func, support) -> np.ndarray:
    if support is None:
        return np.asarray(func(bank), dtype=float).mean(axis=0)
    mask = support.contains(bank)
    if not np.any(mask):
        return _zero_like(func, bank.shape[1])
    vals = np.asarray(func(bank[mask]), dtype=float)
    return vals.sum(axis=0) / len(bank)


def make_sphere(d: int, n: int, radius: float, center=None, tilt: float = 0.0, frame=None,
                tilt_direction=None, **kwargs) -> SphereModel:
    """Round sphere model with an affine density of relative tilt ``tilt``."""
    return SphereModel(d, n, radius, center=center, frame=frame, tilt=tilt,
                       tilt_direction=tilt_direction, **kwargs)


def circle_through_origin(n: int, radius: float, seed: int | None = None, tilt: float = 0.0) -> SphereModel:
    """Circle of the given radius passing through 0, in a (seeded) random plane of R^n."""
    if seed is None:
        frame = np.eye(n)[:, :2]
    else:
        frame = orthonormalize(np.random.default_rng(seed).standard_normal((n, 2)))
    center = radius * frame[:, 0]
    return SphereModel(1, n, radius, center=center, frame=frame, tilt=tilt)


class DiscreteModel(ManifoldModel):
    """Finitely supported distribution, used for exact synthetic checks."""

    def __init__(self, atoms, weights=None):
        self.atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        m, n = self.atoms.shape
        w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")
        self.weights = w
        self.ambient_dim = n
        self.intrinsic_dim = 0

    def distance(self, X) -> np.ndarray:
        dist, _ = cKDTree(self.atoms).query(np.atleast_2d(X))
        return dist

    def expect(self, func, support=None) -> np.ndarray:
        if support is None:
            return self.weights @ np.asarray(func(self.atoms), dtype=float)
        mask = support.contains(self.atoms)
        if not np.any(mask):
            return _zero_like(func, self.ambient_dim)
        return self.weights[mask] @ np.asarray(func(self.atoms[mask]), dtype=float)


class ClutterMixture(ManifoldModel):
    """Mixture beta * D + (1 - beta) * Q0 with Q0 uniform on a known box.

    The clutter expectation uses a seeded sample bank that the learner can rebuild
    from the public description of Q0, so both sides integrate on the same measure.
    """

    def __init__(self, base: ManifoldModel, beta: float, low, high, bank_size: int = 20_000, seed: int = 0):
        if not 0.0 < beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        self.base = base
        self.beta = float(beta)
        self.clutter = UniformBox(low, high, bank_size, seed)
        self.ambient_dim = base.ambient_dim
        self.intrinsic_dim = base.intrinsic_dim

    def distance(self, X) -> np.ndarray:
        return self.base.distance(X)

    def expect(self, func, support=None) -> np.ndarray:
        clean = self.base.expect(func, support)
        if self.beta == 1.0:
            return clean
        return self.beta * clean + (1.0 - self.beta) * self.clutter.expect(func, support)


class UniformBox:
    """Uniform distribution on an axis-aligned box, integrated on a seeded bank."""

    def __init__(self, low, high, bank_size: int = 20_000, seed: int = 0):
        self.low = np.asarray(low, dtype=float)
        self.high = np.asarray(high, dtype=float)
        rng = np.random.default_rng(seed)
        self.bank = self.low + (self.high - self.low) * rng.random((bank_size, len(self.low)))

    def expect(self, func, support=None) -> np.ndarray:
        return _bank_mean(self.bank, func, support)


class ReferenceCloud:
    """Dense sample of a manifold used only to score estimates."""

    def __init__(self, points, resolution: float):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.resolution = float(resolution)

    def save_csv(self, path, d: int) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            fh.write(f"# n={self.points.shape[1]} d={d} count={len(self.points)} resolution={self.resolution!r}\n")
            writer = csv.writer(fh)
            for row in self.points:
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def load_csv(cls, path) -> "ReferenceCloud":
        path = Path(path)
        with path.open() as fh:
            header = fh.readline().lstrip("# ").split()
            meta = dict(item.split("=") for item in header)
            rows = [[float(v) for v in r] for r in csv.reader(fh)]
        cloud = cls(np.array(rows), float(meta["resolution"]))
        if cloud.points.shape != (int(meta["count"]), int(meta["n"])):
            raise ValueError("reference cloud header does not match its rows")
        return cloud

    def covering_radius_probe(self, model, seed: int = 0, probes: int = 2000) -> float:
        """Largest distance from fresh model samples to the cloud."""
        P = model.sample(seed, probes)
        dist, _ = cKDTree(self.points).query(P)
        return float(dist.max())
