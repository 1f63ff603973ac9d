"""Experiment kinds run by the command-line harness.

Each kind maps a validated configuration and a seed to a list of records.  A
record holds only deterministic values; wall-clock timings are returned beside
it so the result files stay byte-reproducible.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .geometry import principal_angle, unit_ball_volume
from .lowerbound import (bounding_ball_query_bound, fixed_point_query_bound, lecam_pair, sphere_through_origin)
from .matrix_sq import (SamplingOperator, kashin_frame, measurement_count, nuclear_min, pauli_basis,
                        TightFrame)
from .models import ClutterMixture, SphereModel, UniformBox
from .oracle import ClutterLiftedSession, OracleSession
from .propagation import (EstimatorSettings, estimate_bounding_ball, estimate_fixed_point, evaluate,
                          pipeline_parameters, PropagationConfig, _check_pipeline)
from .routines import (HypothesisError, RoutineParams, seed_budget,
                       sq_projection, sq_tangent, tangent_query_count)


@dataclass
class RunOutput:
    records: list
    timings: list


# --- models and sessions --------------------------------------------------------------
def build_model(spec: dict, params: dict, seed: int) -> SphereModel:
    """Sphere model from a config ``model`` block; the embedding frame is drawn from ``seed``."""
    d, n = int(params["d"]), int(params["n"])
    kind = spec.get("type", "sphere")
    if kind != "sphere":
        raise HypothesisError(f"unsupported model type {kind!r}")
    radius = float(spec.get("radius", params.get("rch", 1.0)))
    tilt = float(spec.get("tilt", 0.0))
    rng = np.random.default_rng(seed)
    if spec.get("frame", "random") == "random":
        frame, _ = np.linalg.qr(rng.standard_normal((n, d + 1)))
    else:
        frame = np.eye(n)[:, : d + 1]
    if spec.get("through_origin", True):
        center = radius * frame[:, 0]
    else:
        center = np.asarray(spec.get("center", np.zeros(n)), dtype=float)
    return SphereModel(d, n, radius, center=center, frame=frame, tilt=tilt, seed=seed)


def build_session(model, tau: float, adversary: str, clutter: dict | None, seed: int):
    """Oracle session; with a clutter block the learner sees the lifted mixture oracle."""
    if not clutter:
        return OracleSession(model, tau, adversary, seed=seed)
    beta = float(clutter["beta"])
    half = float(clutter.get("half_width", 2.0 * model.bounding_radius))
    low, high = -half * np.ones(model.ambient_dim), half * np.ones(model.ambient_dim)
    bank = int(clutter.get("bank_size", 20_000))
    mixture = ClutterMixture(model, beta, low, high, bank, seed)
    inner = OracleSession(mixture, tau, adversary, seed=seed)
    return ClutterLiftedSession(inner, beta, UniformBox(low, high, bank, seed))


def routine_params(model, tau: float, constants: dict) -> RoutineParams:
    keep = {k: float(v) for k, v in constants.items()
            if k in ("proj_const", "tan_const", "seed_const", "tau_const")}
    return RoutineParams.from_model(model, tau, **keep)


def estimator_settings(cfg: dict) -> EstimatorSettings:
    c = cfg.get("constants", {})
    return EstimatorSettings(step_const=float(c.get("step_const", 24.0)), bold_const=float(c.get("bold_const", 2.0)),
                             max_loops=int(c.get("max_loops", 100_000)))


def eps_values(cfg: dict) -> list[float]:
    """Absolute epsilons: ``eps`` entries are fractions of rch."""
    rch = float(cfg["params"].get("rch", cfg.get("model", {}).get("radius", 1.0)))
    return [float(e) * rch for e in cfg.get("eps", [])]


def check_feasible(cfg: dict) -> None:
    """Reject infeasible parameter combinations before any work, naming the hypothesis."""
    kind = cfg["kind"]
    if kind not in ("estimate-fixed", "estimate-ball", "routine-bench"):
        return
    seed = cfg["seeds"][0]
    model = build_model(cfg.get("model", {}), cfg["params"], seed)
    settings = estimator_settings(cfg)
    for tau in cfg.get("tau", [0.0]):
        tau_eff = tau / cfg["clutter"]["beta"] if cfg.get("clutter") else tau
        params = routine_params(model, tau_eff, cfg.get("constants", {}))
        for eps in eps_values(cfg):
            pp = pipeline_parameters(params, eps, settings)
            cfg_p = PropagationConfig(pp.step, pp.proximity, settings.sin_alpha, pp.lam, pp.eta, params.rch)
            _check_pipeline(params, pp, cfg_p)
        if kind == "estimate-ball":
            R = float(cfg["params"].get("R", 0.0))
            if R < params.rch / math.sqrt(2.0):
                raise HypothesisError("R below rch/sqrt(2) admits no manifold")
            if model.bounding_radius > R:
                raise HypothesisError("the model does not lie in B(0, R)")


# --- kinds ----------------------------------------------------------------------------
def _estimate(cfg: dict, seed: int, ball: bool) -> RunOutput:
    records, timings = [], []
    model = build_model(cfg.get("model", {}), cfg["params"], seed)
    settings = estimator_settings(cfg)
    R = float(cfg["params"].get("R", 0.0))
    for tau in cfg.get("tau", [0.0]):
        for eps in eps_values(cfg):
            session = build_session(model, tau, cfg.get("adversary", "exact"), cfg.get("clutter"), seed)
            params = routine_params(model, session.tau, cfg.get("constants", {}))
            t0 = time.perf_counter()
            if ball:
                est = estimate_bounding_ball(session, params, eps, R, settings)
            else:
                est = estimate_fixed_point(session, params, eps, settings)
            elapsed = time.perf_counter() - t0
            session.check_validity()
            metrics = evaluate(est, model, eps / 10.0, eps).as_dict()
            metrics["queries_used"] = session.budget_used
            metrics["hausdorff_over_eps"] = metrics["hausdorff"] / eps
            records.append({"seed": seed, "tau": tau, "eps": eps, "metrics": metrics,
                            "transcript": est.transcript_digest})
            timings.append({"seed": seed, "tau": tau, "eps": eps, "runtime_s": elapsed})
    return RunOutput(records, timings)


def run_estimate_fixed(cfg, seed):
    return _estimate(cfg, seed, ball=False)


def run_estimate_ball(cfg, seed):
    return _estimate(cfg, seed, ball=True)


def run_routine_bench(cfg: dict, seed: int) -> RunOutput:
    """Projection and tangent errors at random off-manifold points, with budget ratios."""
    records, timings = [], []
    model = build_model(cfg.get("model", {}), cfg["params"], seed)
    rng = np.random.default_rng(seed)
    probes = int(cfg.get("probes", 5))
    for tau in cfg.get("tau", [0.0]):
        session = build_session(model, tau, cfg.get("adversary", "exact"), cfg.get("clutter"), seed)
        params = routine_params(model, session.tau, cfg.get("constants", {}))
        for eps in eps_values(cfg):
            pp = pipeline_parameters(params, eps, estimator_settings(cfg))
            t0 = time.perf_counter()
            proj_err, tan_err, proj_q, tan_q = [], [], [], []
            for _ in range(probes):
                base = model.sample(int(rng.integers(1 << 31)), 1)[0]
                v = rng.standard_normal(model.ambient_dim)
                x = base + pp.lam * rng.random() * v / np.linalg.norm(v)
                before = session.budget_used
                p = sq_projection(session, params, x, pp.lam)
                proj_q.append(session.budget_used - before)
                proj_err.append(float(np.linalg.norm(p - model.project(x))))
                before = session.budget_used
                T = sq_tangent(session, params, p, pp.eta, seed=seed).subspace
                tan_q.append(session.budget_used - before)
                tan_err.append(principal_angle(T, model.tangent(model.project(p))))
            session.check_validity()
            records.append({"seed": seed, "tau": tau, "eps": eps, "metrics": {
                "projection_error": max(proj_err), "projection_precision": params.projection_precision(pp.lam),
                "tangent_angle": max(tan_err), "tangent_precision": params.tangent_precision(pp.eta),
                "projection_queries": max(proj_q), "projection_budget": 2 * params.n + 1,
                "tangent_queries": max(tan_q), "tangent_budget": tangent_query_count(params),
                "queries_used": session.budget_used}})
            timings.append({"seed": seed, "tau": tau, "eps": eps, "runtime_s": time.perf_counter() - t0})
    return RunOutput(records, timings)


def random_low_rank(k: int, rank: int, rng, symmetric: bool = True) -> np.ndarray:
    G = rng.standard_normal((k, rank))
    if symmetric:
        S = G @ np.diag(rng.choice([-1.0, 1.0], rank) * rng.uniform(0.5, 1.0, rank)) @ G.T
    else:
        S = G @ rng.standard_normal((rank, k))
    return S / np.linalg.norm(S)


def run_matrix_recovery(cfg: dict, seed: int) -> RunOutput:
    p = cfg["params"]
    k, rank = int(p.get("k", 16)), int(p.get("rank", 2))
    q = int(p.get("q", 0)) or 6 * rank * k
    level = int(round(math.log2(k)))
    if 2 ** level != k:
        raise HypothesisError("matrix dimension k must be a power of two")
    rng = np.random.default_rng(seed)
    target = random_low_rank(k, rank, rng)
    L = SamplingOperator(pauli_basis(level), q, seed)
    records, timings = [], []
    for xi in cfg.get("noise", [0.0]):
        y = L(target)
        if xi > 0:
            z = rng.standard_normal(L.q) + 1j * rng.standard_normal(L.q)
            y = y + xi * z / np.linalg.norm(z)
        t0 = time.perf_counter()
        rec = nuclear_min(y, L, float(xi), symmetric=True, tol=1e-9, raise_on_failure=False)
        err = float(np.linalg.norm(np.real(rec.matrix) - target))
        records.append({"seed": seed, "noise": xi, "metrics": {
            "frobenius_error": err, "k": k, "rank": rank, "q": L.q, "iterations": rec.iterations,
            "converged": bool(rec.converged), "error_over_noise": err / xi if xi > 0 else 0.0}})
        timings.append({"seed": seed, "noise": xi, "runtime_s": time.perf_counter() - t0})
    return RunOutput(records, timings)


def run_lecam(cfg: dict, seed: int) -> RunOutput:
    p = cfg["params"]
    d, n = int(p.get("d", 1)), int(p.get("n", 2))
    f_min = float(p.get("f_min", 1.0 / (2.0 ** (d + 1) * 2 * math.pi)))
    base = sphere_through_origin(d, n, f_min)
    records, timings = [], []
    for tau in cfg.get("tau", [0.1]):
        t0 = time.perf_counter()
        pair = lecam_pair(base, float(tau), f_min=f_min)
        tv = pair.total_variation()
        dh = pair.hausdorff()
        manifest = pair.manifest()
        records.append({"seed": seed, "tau": tau, "manifest": manifest, "metrics": {
            "tv": tv, "tv_bound": tau / 2.0, "hausdorff": dh, "hausdorff_bound": pair.predicted_hausdorff,
            "tv_ratio": tv / (tau / 2.0) if tau > 0 else 0.0}})
        timings.append({"seed": seed, "tau": tau, "runtime_s": time.perf_counter() - t0})
    return RunOutput(records, timings)


def run_packing_bound(cfg: dict, seed: int) -> RunOutput:
    p = cfg["params"]
    d, n, rch = int(p["d"]), int(p["n"]), float(p.get("rch", 1.0))
    f_min = float(p.get("f_min", 1.0 / (2.0 ** (d + 1) * unit_ball_volume(d) * rch ** d)))
    alpha = float(p.get("alpha", 0.5))
    R = float(p.get("R", 0.0))
    records = []
    for tau in cfg.get("tau", [0.01]):
        for eps in eps_values(cfg):
            m = {"fixed_point_bound": fixed_point_query_bound(n, d, f_min, rch, eps, alpha, tau)}
            if R > 0:
                m["bounding_ball_bound"] = bounding_ball_query_bound(n, d, f_min, rch, eps, R, alpha, tau)
            records.append({"seed": seed, "tau": tau, "eps": eps, "metrics": m})
    return RunOutput(records, [])


def run_calibrate(cfg: dict, seed: int) -> RunOutput:
    """Constants ledger: measured frame constants and routine error ratios."""
    p = cfg["params"]
    records, timings = [], []
    for k in p.get("frame_sizes", [4, 8, 16]):
        t0 = time.perf_counter()
        frame = TightFrame(kashin_frame(int(k), seed).U)
        constant = frame.calibrate(np.random.default_rng(seed))
        records.append({"seed": seed, "constant": "frame", "k": int(k), "metrics": {"value": constant}})
        timings.append({"seed": seed, "constant": "frame", "k": int(k), "runtime_s": time.perf_counter() - t0})
    if "d" in p and "n" in p:
        model = build_model(cfg.get("model", {}), p, seed)
        params = routine_params(model, 0.0, cfg.get("constants", {}))
        session = OracleSession(model, 0.0)
        rng = np.random.default_rng(seed)
        ratios_p, ratios_t = [], []
        for eps in eps_values(cfg):
            pp = pipeline_parameters(params, eps, estimator_settings(cfg))
            base = model.sample(int(rng.integers(1 << 31)), 1)[0]
            v = rng.standard_normal(model.ambient_dim)
            x = base + pp.lam * v / np.linalg.norm(v)
            err = np.linalg.norm(sq_projection(session, params, x, pp.lam) - model.project(x))
            ratios_p.append(err / (params.projection_precision(pp.lam) / params.proj_const))
            T = sq_tangent(session, params, base, pp.eta, seed=seed).subspace
            ratios_t.append(principal_angle(T, model.tangent(base))
                            / (params.tangent_precision(pp.eta) / params.tan_const))
        records.append({"seed": seed, "constant": "projection", "metrics": {"value": max(ratios_p) if ratios_p else 0.0}})
        records.append({"seed": seed, "constant": "tangent", "metrics": {"value": max(ratios_t) if ratios_t else 0.0}})
        records.append({"seed": seed, "constant": "measurements", "metrics": {
            "value": measurement_count(int(p["d"]), 1 << max(1, (int(p["n"]) - 1).bit_length()))}})
    noisy = [xi for xi in cfg.get("noise", []) if xi > 0]
    if noisy:
        # noise constant of the low-rank recovery: worst error / noise level
        out = run_matrix_recovery({**cfg, "noise": noisy}, seed)
        ratio = max(r["metrics"]["error_over_noise"] for r in out.records)
        records.append({"seed": seed, "constant": "noise", "k": int(p.get("k", 16)), "metrics": {"value": ratio}})
        timings.extend({"constant": "noise", **t} for t in out.timings)
    return RunOutput(records, timings)


KINDS = {
    "estimate-fixed": run_estimate_fixed,
    "estimate-ball": run_estimate_ball,
    "routine-bench": run_routine_bench,
    "matrix-recovery": run_matrix_recovery,
    "lecam": run_lecam,
    "packing-bound": run_packing_bound,
    "calibrate": run_calibrate,
}


def closed_form_budget(record: dict, cfg: dict) -> float | None:
    """Closed-form query budget for an estimation record (None when not applicable)."""
    if cfg["kind"] != "estimate-ball":
        return None
    n = int(cfg["params"]["n"])
    R = float(cfg["params"]["R"])
    return seed_budget(n, R, record["eps"] / 2.0)

