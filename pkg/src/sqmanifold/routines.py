"""Statistical-query geometric routines: projection, tangent space and seed point.

Each routine talks to the distribution only through ``session.answer`` /
``session.answer_family``; ground-truth helpers (``local_conditional_mean``,
``local_covariance``) are provided separately for instrumentation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Subspace, lattice_norm_counts, unit_ball_volume
from .matrix_sq import estimate_mean_matrix, estimate_mean_vector, measurement_count, next_power_of_two
from .oracle import Query
from .supports import BallSupport, ball

log = logging.getLogger(__name__)


class HypothesisError(ValueError):
    """Raised when a routine is called outside the parameter regime it is valid for."""


class MassTooSmallError(RuntimeError):
    """Raised when the estimated ball mass does not exceed the tolerance."""


class DegenerateSpectrumError(RuntimeError):
    """Raised when the estimated local covariance has no usable spectral gap."""


@dataclass
class RoutineParams:
    """Model and oracle parameters known to the learner.

    ``proj_const``, ``tan_const`` and ``seed_const`` are the unknown absolute
    constants of the routine guarantees; ``tau_const`` is the small constant of
    the projection tolerance condition.
    """

    d: int
    n: int
    rch: float
    f_min: float
    f_max: float
    lipschitz: float = 0.0
    tau: float = 0.0
    proj_const: float = 1.0
    tan_const: float = 1.0
    seed_const: float = 1.0
    tau_const: float = 1.0

    def __post_init__(self):
        if not 1 <= self.d < self.n:
            raise HypothesisError("need 1 <= d < n")
        if self.rch <= 0 or self.f_min <= 0 or self.f_max < self.f_min or self.lipschitz < 0:
            raise HypothesisError("need rch > 0, 0 < f_min <= f_max, L >= 0")
        if self.tau < 0:
            raise HypothesisError("tau must be nonnegative")
        if not 0.0 < self.gamma <= 1.0:
            raise HypothesisError("Gamma must lie in (0, 1]")

    @classmethod
    def from_model(cls, model, tau: float, **kw) -> "RoutineParams":
        return cls(model.intrinsic_dim, model.ambient_dim, model.reach, model.f_min, model.f_max,
                   model.lipschitz, tau, **kw)

    @property
    def omega(self) -> float:
        return unit_ball_volume(self.d)

    @property
    def gamma(self) -> float:
        return self.f_min / (self.f_max + self.lipschitz * self.rch)

    @property
    def tau_rel_min(self) -> float:
        """tau / (omega_d f_min rch^d)."""
        return self.tau / (self.omega * self.f_min * self.rch ** self.d)

    @property
    def tau_rel_max(self) -> float:
        """tau / (omega_d f_max rch^d)."""
        return self.tau / (self.omega * self.f_max * self.rch ** self.d)

    def projection_bandwidth(self, lam: float) -> float:
        d = self.d
        noise = self.rch * (self.gamma * self.tau_rel_min) ** (1.0 / (d + 1))
        return max(2.0 * lam, noise)

    def projection_precision(self, lam: float) -> float:
        d = self.d
        g = self.gamma
        return self.proj_const / g * max(lam ** 2 / self.rch,
                                         g ** (2.0 / (d + 1)) * self.rch * self.tau_rel_min ** (2.0 / (d + 1)))

    def tangent_bandwidth(self, eta: float) -> float:
        return self.rch * max(math.sqrt(eta / self.rch), self.tau_rel_max ** (1.0 / (self.d + 1)))

    def tangent_precision(self, eta: float) -> float:
        """sin(theta) guaranteed by the tangent routine (with ``tan_const``)."""
        return self.tan_const * self.f_max / self.f_min * max(
            math.sqrt(eta / self.rch), self.tau_rel_max ** (1.0 / (self.d + 1)))

    def check_projection(self, lam: float) -> None:
        if lam > self.rch / 16.0 * (1.0 + 1e-12):
            raise HypothesisError(f"projection radius {lam:.4g} exceeds rch/16")
        if self.tau_rel_min > self.tau_const ** (self.d * (self.d + 1)) * self.gamma ** self.d:
            raise HypothesisError("tau too large for the projection routine")

    def check_tangent(self, eta: float) -> None:
        if eta > self.rch / (64.0 * self.d) * (1.0 + 1e-12):
            raise HypothesisError(f"tangent precision {eta:.4g} exceeds rch/(64 d)")
        if self.tau_rel_max > (1.0 / (8.0 * math.sqrt(self.d))) ** (self.d + 1):
            raise HypothesisError("tau too large for the tangent routine")


# --- ground truth -----------------------------------------------------------------
def local_conditional_mean(model, x0, h: float) -> np.ndarray:
    """E[x | x in B(x0, h)] under the model (quadrature or Monte Carlo)."""
    x0 = np.asarray(x0, dtype=float)
    supp = ball(x0, h)
    inside = lambda P: (np.sum((P - x0) ** 2, axis=1) <= h * h).astype(float)
    mass = float(model.expect(inside, supp))
    if mass <= 0:
        raise MassTooSmallError("ball has zero mass")
    first = model.expect(lambda P: P * inside(P)[:, None], supp)
    return np.asarray(first) / mass


def local_covariance(model, x0, h: float) -> np.ndarray:
    """E[(x - x0)(x - x0)^T / h^2 1_{|x - x0| <= h}] under the model."""
    x0 = np.asarray(x0, dtype=float)
    n = len(x0)

    def outer(P):
        Y = (P - x0) / h
        w = (np.sum(Y ** 2, axis=1) <= 1.0).astype(float)
        return (Y[:, :, None] * Y[:, None, :] * w[:, None, None]).reshape(len(P), n * n)

    return np.asarray(model.expect(outer, ball(x0, h))).reshape(n, n)


# --- projection -------------------------------------------------------------------
@dataclass
class ProjectionTrace:
    bandwidth: float
    mass: float
    queries: int


def sq_projection(session, params: RoutineParams, x0, lam: float, check: bool = True,
                  trace: list | None = None) -> np.ndarray:
    """Estimate the metric projection of ``x0`` (within ``lam`` of M) with 2n+1 queries."""
    x0 = np.asarray(x0, dtype=float)
    if check:
        params.check_projection(lam)
    h = params.projection_bandwidth(lam)
    start = session.budget_used
    supp = ball(x0, h)
    x0c = x0.copy()

    def inside(P):
        return np.sum((P - x0c) ** 2, axis=1) <= h * h

    mass = session.answer(Query(lambda P: inside(P).astype(float), "proj-mass", supp))
    if mass <= session.tau:
        raise MassTooSmallError(f"estimated mass {mass:.3g} <= tau at bandwidth {h:.3g}")

    def offset(P):
        return (P - x0c) / h * inside(P)[:, None]

    V = estimate_mean_vector(session, offset, params.n, supp, label="proj-mean")
    if trace is not None:
        trace.append(ProjectionTrace(h, mass, session.budget_used - start))
    return x0 + h * V / mass


# --- tangent ----------------------------------------------------------------------
@dataclass
class TangentEstimate:
    subspace: Subspace
    covariance: np.ndarray
    bandwidth: float
    queries: int
    eigenvalues: np.ndarray = field(default=None)


def tangent_query_count(params: RoutineParams, c0=6.0, c1=2.0, alpha=0.5) -> int:
    k = next_power_of_two(params.n)
    return 4 * measurement_count(params.d, k, c0, c1, alpha)


def sq_tangent(session, params: RoutineParams, x0, eta: float, bandwidth: float | None = None,
               check: bool = True, seed: int = 0, **matrix_kw) -> TangentEstimate:
    """Estimate the tangent space at the projection of ``x0`` by SQ local PCA."""
    x0 = np.asarray(x0, dtype=float)
    if check:
        params.check_tangent(eta)
    h = params.tangent_bandwidth(eta) if bandwidth is None else float(bandwidth)
    n, d = params.n, params.d
    x0c = x0.copy()

    def outer(P):
        Y = (P - x0c) / h
        w = (np.sum(Y ** 2, axis=1) <= 1.0).astype(float)
        return Y[:, :, None] * Y[:, None, :] * w[:, None, None]

    start = session.budget_used
    est = estimate_mean_matrix(session, outer, n, d, symmetric=True, support=ball(x0, h), seed=seed,
                               label="tangent", **matrix_kw)
    w, V = np.linalg.eigh(est.matrix)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    threshold = params.omega * params.f_min * (h / 8.0) ** d / 2.0
    if w[d - 1] < threshold:
        raise DegenerateSpectrumError(f"d-th eigenvalue {w[d - 1]:.3g} below {threshold:.3g}")
    return TangentEstimate(Subspace(V[:, :d]), est.matrix, h, session.budget_used - start, w)


# --- lattice covering and binary search ---------------------------------------------
class LatticeCover:
    """Cubic lattice of pitch Lam0/sqrt(n) inside B(0, R + Lam0/2), a Lam0/2-covering of B(0, R).

    Points are ordered lexicographically on their integer coordinates and handled
    by rank, so an index range [lo, hi) stands for a set of cells without ever
    materializing it.
    """

    def __init__(self, n: int, R: float, lam0: float):
        self.n = n
        self.R = float(R)
        self.lam0 = float(lam0)
        self.pitch = lam0 / math.sqrt(n)
        self.K = int(math.floor(((R + lam0 / 2.0) / self.pitch) ** 2 * (1.0 + 1e-12)))
        self.A = int(math.isqrt(self.K))
        self.cum = lattice_norm_counts(n, self.K)
        self.size = int(self.cum[n][self.K])

    def _count(self, m: int, budget) -> np.ndarray:
        budget = np.asarray(budget)
        out = np.zeros(budget.shape, dtype=np.int64)
        ok = budget >= 0
        out[ok] = self.cum[m][budget[ok]]
        return out

    def unrank(self, rank: int) -> np.ndarray:
        if not 0 <= rank < self.size:
            raise IndexError("rank out of range")
        z = np.zeros(self.n, dtype=np.int64)
        budget = self.K
        for i in range(self.n):
            m = self.n - i - 1
            top = math.isqrt(budget)
            a = np.arange(-top, top + 1)
            counts = self._count(m, budget - a * a)
            csum = np.cumsum(counts)
            j = int(np.searchsorted(csum, rank, side="right"))
            z[i] = a[j]
            rank -= int(csum[j - 1]) if j > 0 else 0
            budget -= int(a[j] ** 2)
        return z

    def point(self, rank: int) -> np.ndarray:
        return self.pitch * self.unrank(rank).astype(float)

    def points_near(self, P: np.ndarray, radius: float) -> np.ndarray:
        """Lattice points of the cover within ``radius`` of some row of ``P``, lexicographically sorted."""
        off = self.offsets(radius)
        base = np.unique(np.rint(np.atleast_2d(P) / self.pitch).astype(np.int64), axis=0)
        tree = cKDTree(np.atleast_2d(P))
        keys = []
        span = self.A + int(np.abs(off).max()) + 1
        width = 2 * span + 1
        for chunk in range(0, len(base), 512):
            Z = (base[chunk:chunk + 512, None, :] + off[None, :, :]).reshape(-1, self.n)
            Z = Z[np.sum(Z ** 2, axis=1) <= self.K]
            keys.append(_encode(Z, span, width))
        if not keys:
            return np.zeros((0, self.n), dtype=np.int64)
        Z = _decode(np.unique(np.concatenate(keys)), self.n, span, width)
        if len(Z):
            dist, _ = tree.query(Z * self.pitch)
            Z = Z[dist <= radius]
        return Z

    def points_near_model(self, model, radius: float) -> np.ndarray:
        """Lattice points whose ball of the given radius can meet the model's support (cached)."""
        key = (id(model), round(radius, 15))
        cache = self.__dict__.setdefault("_near_cache", {})
        if key not in cache:
            spacing = self.pitch / 2.0
            cache[key] = self.points_near(model.probe_points(spacing), radius + spacing)
        return cache[key]

    def offsets(self, radius: float) -> np.ndarray:
        """Integer offsets within ``radius`` (length units) plus the rounding slack."""
        r = radius / self.pitch + math.sqrt(self.n) / 2.0
        t = int(math.ceil(r))
        grids = np.meshgrid(*([np.arange(-t, t + 1)] * self.n), indexing="ij")
        off = np.stack([g.ravel() for g in grids], axis=1)
        return off[np.sum(off ** 2, axis=1) <= r * r]


def _encode(Z: np.ndarray, span: int, width: int) -> np.ndarray:
    if width ** Z.shape[1] >= 2 ** 62:
        raise MemoryError("lattice too fine for integer row keys")
    key = np.zeros(len(Z), dtype=np.int64)
    for j in range(Z.shape[1]):
        key = key * width + (Z[:, j] + span)
    return key


def _decode(key: np.ndarray, n: int, span: int, width: int) -> np.ndarray:
    Z = np.zeros((len(key), n), dtype=np.int64)
    for j in range(n - 1, -1, -1):
        Z[:, j] = key % width - span
        key = key // width
    return Z


def _lex_le(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise lexicographic A <= b."""
    diff = A - b
    nz = diff != 0
    first = np.where(nz.any(axis=1), nz.argmax(axis=1), A.shape[1] - 1)
    val = diff[np.arange(len(A)), first]
    return val <= 0


class LatticeUnionSupport:
    """Union of balls B(x_i, radius) over lattice points with rank in [lo, hi)."""

    def __init__(self, cover: LatticeCover, lo: int, hi: int, radius: float):
        self.cover = cover
        self.lo, self.hi = lo, hi
        self.radius = float(radius)
        self.first = cover.unrank(lo)
        self.last = cover.unrank(hi - 1)
        self._offsets = None

    def _member(self, Z: np.ndarray) -> np.ndarray:
        inball = np.sum(Z ** 2, axis=1) <= self.cover.K
        return inball & _lex_le(-Z, -self.first) & _lex_le(Z, self.last)

    def centers_near(self, P: np.ndarray, radius: float) -> np.ndarray:
        """Member lattice points within ``radius`` of some row of ``P`` (integer coords)."""
        Z = self.cover.points_near(P, radius)
        return Z[self._member(Z)]

    def contains(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        off = self.cover.offsets(self.radius)
        base = np.rint(X / self.cover.pitch).astype(np.int64)
        hit = np.zeros(len(X), dtype=bool)
        for o in off:
            Z = base + o
            close = np.sum((Z * self.cover.pitch - X) ** 2, axis=1) <= self.radius ** 2
            todo = close & ~hit
            if np.any(todo):
                hit[todo] = self._member(Z[todo])
        return hit

    def to_balls(self, model) -> BallSupport:
        """Balls of the union that can meet the model's support (oracle-side helper)."""
        Z = self.cover.points_near_model(model, self.radius)
        return BallSupport(Z[self._member(Z)] * self.cover.pitch, self.radius)


@dataclass
class BinarySearchTrace:
    cover_size: int
    queries: int
    final_radius: float
    active_sizes: list
    min_distances: list


def raw_search_budget(n: int, R: float, lam0: float) -> float:
    return 3.0 * n * math.log(6.0 * R / lam0)


def sq_ambient_binary_search(session, params: RoutineParams, R: float, lam0: float, check: bool = True,
                             instrument=None, trace: list | None = None) -> np.ndarray:
    """Locate a point within ``lam0`` of M inside B(0, R) by halving a lattice covering."""
    if check:
        if lam0 > params.rch / 8.0 * (1.0 + 1e-12):
            raise HypothesisError("Lam0 must not exceed rch/8")
        if R < params.rch / math.sqrt(2.0) * (1.0 - 1e-12):
            raise HypothesisError("R below rch/sqrt(2) admits no manifold")
        lhs = lam0 / math.sqrt(max(math.log(6.0 * R / lam0), 1e-300))
        rhs = 21.0 * params.rch * math.sqrt(params.n) * params.tau_rel_min ** (1.0 / params.d)
        if lhs < rhs:
            raise HypothesisError("tau too large for the binary search at this Lam0")
    step = 6.0 * params.rch * params.tau_rel_min ** (1.0 / params.d)
    h = lam0 / 2.0
    cover = LatticeCover(params.n, R, lam0)
    lo, hi = 0, cover.size
    start = session.budget_used
    sizes, dists = [], []
    while hi - lo > 1:
        mid = lo + (hi - lo + 1) // 2
        radius = math.sqrt(h * h + step * step)
        supp = LatticeUnionSupport(cover, lo, mid, radius)
        a = session.answer(Query(lambda P, s=supp: s.contains(P).astype(float), "search", supp))
        if a > session.tau:
            hi = mid
        else:
            lo = mid
        h = radius
        sizes.append(hi - lo)
        if instrument is not None:
            dists.append(instrument(cover, lo, hi, h))
    if trace is not None:
        trace.append(BinarySearchTrace(cover.size, session.budget_used - start, h, sizes, dists))
    return cover.point(lo)


def active_set_distance(model):
    """Instrument: min distance from the active lattice cells to M, compared with h."""

    def probe(cover: LatticeCover, lo: int, hi: int, h: float) -> float:
        supp = LatticeUnionSupport(cover, lo, hi, h)
        balls = supp.to_balls(model)
        if len(balls) == 0:
            return math.inf
        return float(model.distance(balls.centers).min())

    return probe


# --- seed ---------------------------------------------------------------------------
@dataclass
class SeedTrace:
    lam0: float
    refinements: int
    raw_queries: int
    total_queries: int
    distances: list


def seed_budget(n: int, R: float, eta: float) -> float:
    return 6.0 * n * math.log(6.0 * R / eta)


def seed_radius(params: RoutineParams, eta: float) -> float:
    return max(eta, min(1.0 / 16.0, params.gamma / (2.0 * params.seed_const)) * params.rch)


def sq_seed(session, params: RoutineParams, R: float, eta: float, check: bool = True,
            distance=None, trace: list | None = None) -> np.ndarray:
    """Raw binary search followed by ceil(log2(Lam0/eta)) projection refinements.

    ``distance`` (optional, ground truth) records d(y_k, M) after each step.
    """
    if check and eta > params.rch / 16.0 * (1.0 + 1e-12):
        raise HypothesisError("seed precision must not exceed rch/16")
    lam0 = seed_radius(params, eta)
    start = session.budget_used
    y = sq_ambient_binary_search(session, params, R, lam0, check=check)
    raw = session.budget_used - start
    dists = [] if distance is None else [float(distance(y))]
    k0 = 0 if lam0 <= eta else int(math.ceil(math.log2(lam0 / eta)))
    for k in range(1, k0 + 1):
        y = sq_projection(session, params, y, lam0 / 2 ** (k - 1), check=check)
        if distance is not None:
            dists.append(float(distance(y)))
    if trace is not None:
        trace.append(SeedTrace(lam0, k0, raw, session.budget_used - start, dists))
    return y
