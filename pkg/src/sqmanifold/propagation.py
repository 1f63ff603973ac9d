"""Manifold propagation and the end-to-end SQ manifold estimators.

``propagate`` explores the manifold breadth-first: from each queued point it
steps along a packing of tangent directions, keeps the steps that land far from
everything seen so far, and projects them back onto the manifold.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (direction_packing, directed_distances, farthest_point_sample,
                       hausdorff, min_pairwise_distance, principal_angle, unit_ball_volume)
from .routines import (HypothesisError, RoutineParams, sq_projection, sq_seed,
                       sq_tangent)

log = logging.getLogger(__name__)


class PropagationError(RuntimeError):
    """Raised when propagation exceeds its loop budget; carries a queue snapshot."""

    def __init__(self, message, queue_snapshot=None):
        super().__init__(message)
        self.queue_snapshot = queue_snapshot


@dataclass
class PropagationConfig:
    """Step and tolerance parameters of the propagation loop.

    Attributes
    ----------
    step : float
        Tangent step length.
    proximity : float
        A candidate is kept when it is at least this far from every known point.
    sin_alpha : float
        Separation of the direction packing.
    lam : float
        Validity radius given to the projection routine.
    eta : float
        Precision of the projection routine.
    rch : float
        Reach lower bound (used for validation only).
    max_loops : int
        Hard cap on the number of loops.
    """

    step: float
    proximity: float
    sin_alpha: float = 1.0 / 64.0
    lam: float = 0.0
    eta: float = 0.0
    rch: float = math.inf
    max_loops: int = 100_000

    def validate(self) -> None:
        if not (0.3 * self.step <= self.proximity * (1 + 1e-12) and self.proximity <= 0.7 * self.step * (1 + 1e-12)):
            raise HypothesisError("proximity radius must lie in [3/10, 7/10] of the step")
        if not 0.0 < self.sin_alpha <= 1.0 / 64.0:
            raise HypothesisError("sin_alpha must lie in (0, 1/64]")
        if self.step > self.rch / 24.0 * (1.0 + 1e-12):
            raise HypothesisError("step must not exceed rch/24")
        if 64.0 * self.eta > self.step * (1.0 + 1e-12):
            raise HypothesisError("routine precision eta must not exceed step/64")


@dataclass
class LoopRecord:
    max_distance: float
    min_separation: float


@dataclass
class PointCloudEstimate:
    """Raw propagation output plus its sparsified version and bookkeeping."""

    points: np.ndarray
    tangents: list
    loops: int
    queries: int
    config: PropagationConfig
    output: np.ndarray = None
    seed_queries: int = 0
    transcript_digest: dict = field(default_factory=dict)
    loop_records: list = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "points": self.points.tolist(),
            "tangents": [T.frame.tolist() for T in self.tangents],
            "output": None if self.output is None else self.output.tolist(),
            "loops": self.loops,
            "queries": self.queries,
            "seed_queries": self.seed_queries,
            "config": asdict(self.config),
            "transcript": self.transcript_digest,
        }
        return json.dumps(payload, sort_keys=True)


class _PointIndex:
    """Growing point set with exact nearest-distance queries.

    New points go to a small buffer that is scanned by brute force; the buffer is
    folded into a KD-tree once it grows, so lookups stay exact and cheap.
    """

    def __init__(self, dim: int, rebuild: int = 256):
        self.dim = dim
        self.rebuild = rebuild
        self.tree_pts = np.zeros((0, dim))
        self.tree = None
        self.buffer: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.tree_pts) + len(self.buffer)

    def add(self, p: np.ndarray) -> None:
        self.buffer.append(np.asarray(p, dtype=float))
        if len(self.buffer) >= self.rebuild:
            self.tree_pts = np.vstack([self.tree_pts, np.asarray(self.buffer)])
            self.tree = cKDTree(self.tree_pts)
            self.buffer = []

    def distances(self, Y: np.ndarray) -> np.ndarray:
        """Exact distance from each row of ``Y`` to the current set."""
        best = np.full(len(Y), math.inf)
        if self.tree is not None:
            best = self.tree.query(Y)[0]
        if self.buffer:
            B = np.asarray(self.buffer)
            best = np.minimum(best, np.min(np.linalg.norm(Y[:, None, :] - B[None], axis=2), axis=1))
        return best

    def all(self) -> np.ndarray:
        if self.buffer:
            return np.vstack([self.tree_pts, np.asarray(self.buffer)])
        return self.tree_pts


def propagate(seed, tangent: Callable, project: Callable, config: PropagationConfig,
              instrument: Callable | None = None, query_counter: Callable | None = None) -> PointCloudEstimate:
    """Run manifold propagation from ``seed``.

    Parameters
    ----------
    tangent : callable
        x -> Subspace, the tangent routine.
    project : callable
        y -> point, the projection routine.
    instrument : callable, optional
        Called as ``instrument(points_so_far)`` at every loop boundary; its return
        value is stored in ``loop_records``.
    """
    config.validate()
    seed = np.asarray(seed, dtype=float)
    queue = deque([seed])
    known = _PointIndex(len(seed))
    known.add(seed)
    out_pts, out_tan, records = [], [], []
    loops = 0
    while queue:
        if loops >= config.max_loops:
            raise PropagationError(f"propagation exceeded {config.max_loops} loops",
                                   np.asarray(list(queue)))
        x = queue[0]
        T = tangent(x)
        candidates = x + config.step * direction_packing(T, config.sin_alpha)
        # distances to the set as it stood when the loop began; points added during
        # this loop are checked separately, in candidate order
        far = known.distances(candidates) >= config.proximity
        added: list[np.ndarray] = []
        for y in candidates[far]:
            if added and np.min(np.linalg.norm(np.asarray(added) - y, axis=1)) < config.proximity:
                continue
            p = np.asarray(project(y), dtype=float)
            queue.append(p)
            known.add(p)
            added.append(p)
        queue.popleft()
        out_pts.append(x)
        out_tan.append(T)
        loops += 1
        if instrument is not None:
            records.append(instrument(known.all()))
    queries = query_counter() if query_counter is not None else 0
    return PointCloudEstimate(np.asarray(out_pts), out_tan, loops, queries, config, loop_records=records)


def loop_bound(volume: float, d: int, proximity: float) -> float:
    """Upper bound on the number of loops: vol / (omega_d (proximity/32)^d)."""
    return volume / (unit_ball_volume(d) * (proximity / 32.0) ** d)


def separation_bound(config: PropagationConfig, rch: float, sin_theta: float) -> float:
    return config.proximity - 0.625 * config.step ** 2 / rch - 2.0 * config.eta - config.step * sin_theta


def closeness_instrument(model):
    """Instrument recording the max distance to M and the min pairwise separation."""

    def probe(P):
        return LoopRecord(float(model.distance(P).max()), min_pairwise_distance(P))

    return probe


# --- end-to-end estimators -----------------------------------------------------------
@dataclass
class EstimatorSettings:
    """Constants of the end-to-end estimators.

    ``step_const`` divides epsilon in the step length and ``bold_const`` scales the
    tolerance-driven terms.
    """

    step_const: float = 24.0
    bold_const: float = 2.0
    sin_alpha: float = 1.0 / 64.0
    max_loops: int = 100_000
    sparsify: bool = True


@dataclass
class PipelineParameters:
    step: float
    proximity: float
    eta: float
    lam: float
    sin_theta: float


def pipeline_parameters(params: RoutineParams, eps: float, settings: EstimatorSettings) -> PipelineParameters:
    rch, d = params.rch, params.d
    t = params.tau_rel_min
    C = settings.bold_const
    step = rch * max(math.sqrt(eps / (rch * settings.step_const)), C ** 1.5 * t ** (1.0 / (d + 1)))
    ratio2 = (step / rch) ** 2
    eta = rch * max(ratio2 / C ** 2, C * t ** (2.0 / (d + 1)))
    lam = 3.0 * rch * max(ratio2, C ** 3 * t ** (2.0 / (d + 1)))
    return PipelineParameters(step, step / 2.0, eta, lam, params.tangent_precision(eta))


def _check_pipeline(params: RoutineParams, pp: PipelineParameters, cfg: PropagationConfig) -> None:
    cfg.validate()
    params.check_projection(pp.lam)
    params.check_tangent(pp.eta)


def _run_pipeline(session, params, eps, settings, seed_point, instrument, seed_queries=0):
    pp = pipeline_parameters(params, eps, settings)
    cfg = PropagationConfig(pp.step, pp.proximity, settings.sin_alpha, pp.lam, pp.eta, params.rch, settings.max_loops)
    _check_pipeline(params, pp, cfg)
    start = session.budget_used

    def tangent(x):
        return sq_tangent(session, params, x, pp.eta, check=False).subspace

    def project(y):
        return sq_projection(session, params, y, pp.lam, check=False)

    est = propagate(seed_point, tangent, project, cfg, instrument, lambda: session.budget_used - start)
    est.seed_queries = seed_queries
    if settings.sparsify:
        est.output = farthest_point_sample(est.points, pp.step)
    else:
        est.output = est.points
    est.transcript_digest = session.digest() if hasattr(session, "digest") else session.inner.digest()
    return est


def estimate_fixed_point(session, params: RoutineParams, eps: float, settings: EstimatorSettings | None = None,
                         instrument: Callable | None = None) -> PointCloudEstimate:
    """Estimate M when 0 lies on M: propagate from the origin with the SQ routines."""
    settings = settings or EstimatorSettings()
    if eps <= 0:
        raise HypothesisError("epsilon must be positive")
    return _run_pipeline(session, params, eps, settings, np.zeros(params.n), instrument)


def estimate_bounding_ball(session, params: RoutineParams, eps: float, R: float,
                           settings: EstimatorSettings | None = None,
                           instrument: Callable | None = None) -> PointCloudEstimate:
    """Estimate M inside B(0, R): find a seed at precision eps/2, then propagate."""
    settings = settings or EstimatorSettings()
    if eps <= 0:
        raise HypothesisError("epsilon must be positive")
    if R < params.rch / math.sqrt(2.0) * (1.0 - 1e-12):
        raise HypothesisError("R below rch/sqrt(2) admits no manifold")
    pp = pipeline_parameters(params, eps, settings)
    cfg = PropagationConfig(pp.step, pp.proximity, settings.sin_alpha, pp.lam, pp.eta, params.rch, settings.max_loops)
    _check_pipeline(params, pp, cfg)
    start = session.budget_used
    seed_point = sq_seed(session, params, R, eps / 2.0)
    return _run_pipeline(session, params, eps, settings, seed_point, instrument, session.budget_used - start)


# --- evaluation -----------------------------------------------------------------------
@dataclass
class EstimateMetrics:
    hausdorff: float
    hausdorff_raw: float
    max_distance: float
    covering_radius: float
    separation: float
    max_tangent_angle: float
    queries: int
    seed_queries: int
    loops: int
    coarse_reference: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(estimate: PointCloudEstimate, model, r_ref: float, eps: float | None = None,
             reference=None) -> EstimateMetrics:
    """Score an estimate against the model using a reference cloud of resolution ``r_ref``."""
    coarse = eps is not None and r_ref > eps / 10.0 * (1 + 1e-12)
    if coarse:
        log.warning("reference resolution %.3g is coarser than eps/10", r_ref)
    ref = reference if reference is not None else model.reference_cloud(r_ref).points
    out = estimate.output if estimate.output is not None else estimate.points
    max_dist = float(model.distance(estimate.points).max())
    cover = float(directed_distances(ref, out).max())
    angles = []
    for p, T in zip(estimate.points, estimate.tangents):
        try:
            angles.append(principal_angle(T, model.tangent(model.project(p))))
        except Exception:  # noqa: BLE001 -- points beyond the reach have no tangent to compare
            angles.append(1.0)
    return EstimateMetrics(
        hausdorff=hausdorff(out, ref),
        hausdorff_raw=hausdorff(estimate.points, ref),
        max_distance=max_dist,
        covering_radius=cover,
        separation=min_pairwise_distance(estimate.points),
        max_tangent_angle=float(max(angles)) if angles else 0.0,
        queries=int(estimate.queries),
        seed_queries=int(estimate.seed_queries),
        loops=int(estimate.loops),
        coarse_reference=bool(coarse),
    )


def geodesic_covering(model, points, spacing: float) -> float:
    """Max over dense probes of M of the geodesic distance to the projected cloud (spheres only)."""
    probes = model.probe_points(spacing)
    proj = model.project(np.atleast_2d(points))
    best = np.full(len(probes), math.inf)
    for q in proj:
        best = np.minimum(best, model.geodesic(probes, np.broadcast_to(q, probes.shape)))
    return float(best.max())


def perfect_routines(model):
    """Ground-truth tangent and projection maps (eta = theta = 0)."""
    return (lambda x: model.tangent(model.project(x))), (lambda y: model.project(y))
