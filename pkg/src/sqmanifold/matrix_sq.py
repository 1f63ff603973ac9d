"""Statistical-query estimation of mean vectors and nearly low-rank mean matrices.

Mean vectors go through a Kashin-type tight frame so that every coordinate of the
representation is small; a tau-error per coordinate then turns into an O(tau)
Euclidean error instead of O(sqrt(k) tau).  Mean matrices are compressed with a
randomly sub-sampled Pauli basis and decoded by nuclear-norm minimization.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.stats import ortho_group

from .oracle import QueryFamily

log = logging.getLogger(__name__)

PAULI_MEMORY_LIMIT = 2 ** 28  # bytes


class UnboundedFeatureError(ValueError):
    """Raised when a vector- or matrix-valued feature leaves the unit ball."""


class SolverError(RuntimeError):
    """Raised when nuclear-norm minimization does not converge."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


# --- tight frames ----------------------------------------------------------------
class TightFrame:
    """Tight frame U (k x N, U U^T = I) with bounded-coefficient representations.

    ``represent`` computes coefficients a with U a = x and
    ``|a|_inf <= constant * |x| / sqrt(N)`` by truncated iterative expansion.
    """

    def __init__(self, U: np.ndarray, lam: float = 1.6, tol: float = 1e-12, max_iter: int = 200):
        self.U = np.asarray(U, dtype=float)
        self.k, self.N = self.U.shape
        self.lam = float(lam)
        self.tol = tol
        self.max_iter = max_iter
        self.constant = math.nan

    @classmethod
    def kashin(cls, k: int, seed: int = 0, calibration_trials: int = 400) -> "TightFrame":
        """Redundancy-2 frame [Q1 Q2]/sqrt(2) from two seeded random orthogonal matrices."""
        rng = np.random.default_rng(seed)
        if k == 1:
            Q1, Q2 = np.ones((1, 1)), -np.ones((1, 1))
        else:
            Q1 = ortho_group.rvs(k, random_state=rng)
            Q2 = ortho_group.rvs(k, random_state=rng)
        frame = cls(np.hstack([Q1, Q2]) / math.sqrt(2.0))
        frame.calibrate(rng, calibration_trials)
        return frame

    def represent(self, X) -> np.ndarray:
        """Coefficients of each row of ``X`` (shape (m, k)) -> (m, N).

        The leftover residual is added back unclipped, so ``U a = x`` holds exactly;
        the iterations only make that leftover negligible.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        A = np.zeros((len(X), self.N))
        R = X.copy()
        floor = self.tol * np.maximum(np.linalg.norm(X, axis=1), 1e-300)
        root = math.sqrt(self.N)
        active = np.arange(len(X))
        for _ in range(self.max_iter):
            rn = np.linalg.norm(R[active], axis=1)
            keep = rn > floor[active]
            active, rn = active[keep], rn[keep]
            if len(active) == 0:
                break
            B = R[active] @ self.U
            level = (self.lam * rn / root)[:, None]
            T = np.clip(B, -level, level)
            A[active] += T
            R[active] -= T @ self.U.T
        return A + R @ self.U

    def calibrate(self, rng: np.random.Generator, trials: int = 400) -> float:
        """Measure max sqrt(N)|a|_inf/|x| on random and extremal inputs; store 1.25 x that."""
        # representations are odd in x, so negated probes add nothing
        probes = [rng.standard_normal((trials, self.k)), np.eye(self.k)]
        # rows of U^T are the directions that load a single coefficient most
        probes.append((self.U / np.linalg.norm(self.U, axis=0)).T)
        signs = np.sign(rng.standard_normal((trials, self.N)))
        probes.append(signs @ self.U.T)
        X = np.vstack(probes)
        X = X[np.linalg.norm(X, axis=1) > 0]
        A = self.represent(X)
        ratio = math.sqrt(self.N) * np.max(np.abs(A), axis=1) / np.linalg.norm(X, axis=1)
        self.constant = 1.25 * float(ratio.max())
        return self.constant


@functools.lru_cache(maxsize=64)
def kashin_frame(k: int, seed: int = 0) -> TightFrame:
    return TightFrame.kashin(k, seed)


def _feature_rows(feature, X, k: int) -> np.ndarray:
    F = np.asarray(feature(X), dtype=float).reshape(len(X), k)
    norms = np.linalg.norm(F, axis=1)
    if norms.size and norms.max() > 1.0 + 1e-9:
        raise UnboundedFeatureError(f"feature norm {norms.max():.6g} exceeds 1")
    return F


def estimate_mean_vector(session, feature, k: int, support=None, frame_seed: int = 0,
                         label: str = "mean", frame: TightFrame | None = None) -> np.ndarray:
    """Estimate E[F(x)] for F: R^n -> R^k with |F| <= 1 using exactly 2k queries.

    Each query is one (rescaled) frame coefficient of F(x); the answers are mapped
    back through the frame.  The Euclidean error is at most ``frame.constant * tau``.
    """
    frame = frame or kashin_frame(k, frame_seed)
    root = math.sqrt(frame.N)
    K = frame.constant

    def coefficients(X):
        F = _feature_rows(feature, X, k)
        return frame.represent(F) * (root / K)

    family = QueryFamily(coefficients, [f"{label}[{j}]" for j in range(frame.N)], support)
    answers = session.answer_family(family)
    return (K / root) * (frame.U @ answers)


def estimate_mean_naive(session, feature, k: int, support=None, label: str = "coord") -> np.ndarray:
    """Baseline: one query per coordinate (k queries, error up to sqrt(k) tau)."""
    family = QueryFamily(lambda X: _feature_rows(feature, X, k), [f"{label}[{j}]" for j in range(k)], support)
    return session.answer_family(family)


# --- Pauli basis -----------------------------------------------------------------
_SIGMA = np.array([
    [[1, 0], [0, 1]],
    [[0, 1], [1, 0]],
    [[0, -1j], [1j, 0]],
    [[1, 0], [0, -1]],
], dtype=complex) / math.sqrt(2.0)


@dataclass(frozen=True)
class PauliFrame:
    """Orthonormal Hermitian basis of k x k matrices, k = 2**level.

    ``matrices`` has shape (k*k, k, k); ``symmetric`` flags the real symmetric
    elements (even number of sigma_y factors); the others are purely imaginary
    and antisymmetric.
    """

    level: int
    matrices: np.ndarray
    symmetric: np.ndarray

    @property
    def k(self) -> int:
        return 2 ** self.level

    @property
    def size(self) -> int:
        return self.k ** 2

    def coefficients(self, X) -> np.ndarray:
        """<W_j, X> = tr(W_j^* X) for each basis element; real for Hermitian X."""
        X = np.asarray(X)
        flat = self.matrices.reshape(self.size, -1).conj()
        if X.ndim == 2:
            return flat @ X.reshape(-1)
        return X.reshape(len(X), self.k * self.k) @ flat.T

    def synthesize(self, c) -> np.ndarray:
        c = np.asarray(c)
        return np.tensordot(c, self.matrices, axes=(0, 0))


@functools.lru_cache(maxsize=8)
def pauli_basis(level: int, memory_limit: int = PAULI_MEMORY_LIMIT) -> PauliFrame:
    """All level-fold tensor products of the normalized Pauli matrices."""
    if level < 1:
        raise ValueError("level must be at least 1")
    k = 2 ** level
    if 16 * k ** 4 > memory_limit:
        raise MemoryError(f"Pauli basis of level {level} needs {16 * k ** 4} bytes")
    mats = _SIGMA.copy()
    ny = np.array([0, 0, 1, 0])
    for _ in range(level - 1):
        mats = np.einsum("aij,bkl->abikjl", mats, _SIGMA).reshape(-1, mats.shape[1] * 2, mats.shape[2] * 2)
        ny = (ny[:, None] + np.array([0, 0, 1, 0])[None, :]).ravel()
    mats.setflags(write=False)
    sym = (ny % 2 == 0)
    sym.setflags(write=False)
    return PauliFrame(level, mats, sym)


class SamplingOperator:
    """X -> (k / sqrt(q)) (<W_{I_1}, X>, ..., <W_{I_q}, X>) with i.i.d. uniform indices.

    When ``q >= k^2`` the whole basis is used once (an exact isometry).
    """

    def __init__(self, frame: PauliFrame, q: int, seed: int = 0, full_when_possible: bool = True):
        if q < 1:
            raise ValueError("q must be positive")
        self.frame = frame
        if full_when_possible and q >= frame.size:
            self.indices = np.arange(frame.size)
        else:
            self.indices = np.random.default_rng(seed).integers(0, frame.size, size=q)
        self.q = len(self.indices)
        self.scale = frame.k / math.sqrt(self.q)

    def __call__(self, X) -> np.ndarray:
        c = self.frame.coefficients(X)
        return self.scale * c[..., self.indices]

    def from_coefficients(self, c) -> np.ndarray:
        return self.scale * np.asarray(c)[..., self.indices]


def measurement_count(d: int, k: int, c0: float = 6.0, c1: float = 2.0, alpha: float = 0.5) -> int:
    """q = ceil(c0 d k log^6 k log(c1/alpha)), capped at the full basis size k^2.

    The log factor is floored at 1: at k = 2 the bare polylog (about 0.11) would
    sample fewer Pauli coefficients than a rank-one 2 x 2 matrix needs.
    """
    q = math.ceil(c0 * d * k * max(1.0, math.log(k)) ** 6 * math.log(c1 / alpha)) if k > 1 else 1
    return int(max(1, min(q, k * k)))


# --- nuclear-norm minimization ---------------------------------------------------
@dataclass
class RecoveryResult:
    matrix: np.ndarray
    coefficients: np.ndarray
    iterations: int
    residual: float
    nuclear_norm: float
    converged: bool


def _hermitian_prox(frame: PauliFrame, c: np.ndarray, gamma: float):
    X = frame.synthesize(c)
    X = 0.5 * (X + X.conj().T)
    w, V = np.linalg.eigh(X)
    w = np.sign(w) * np.maximum(np.abs(w) - gamma, 0.0)
    Y = (V * w) @ V.conj().T
    return np.real(frame.coefficients(Y)), float(np.abs(w).sum())


class _MeasurementBall:
    """Projection onto {c : |y - L(c)| <= xi} in Pauli-coefficient space."""

    def __init__(self, y, L: SamplingOperator, xi: float, symmetric: bool):
        y = np.asarray(y)
        yr = np.real(y).astype(float)
        V = float(np.sum(np.imag(y) ** 2))  # Hermitian X gives real measurements
        size = L.frame.size
        counts = np.bincount(L.indices, minlength=size).astype(float)
        sums = np.bincount(L.indices, weights=yr, minlength=size)
        means = np.divide(sums, counts, out=np.zeros(size), where=counts > 0)
        V += float(np.sum((yr - means[L.indices]) ** 2))
        self.fixed = ~L.frame.symmetric if symmetric else np.zeros(size, dtype=bool)
        w = counts * L.scale ** 2
        V += float(np.sum(w[self.fixed] * (means[self.fixed] / L.scale) ** 2))
        w[self.fixed] = 0.0
        self.w = w
        self.target = np.divide(means, L.scale)
        self.rho2 = xi ** 2 - V
        if self.rho2 < 0:
            if self.rho2 > -1e-12 * max(1.0, xi ** 2):
                self.rho2 = 0.0
            else:
                raise ValueError("measurement ball is empty over the admissible matrices")
        self.exact = self.rho2 == 0.0
        self.active = w > 0
        self.singleton = self.exact and bool(np.all(self.active | self.fixed))

    def misfit(self, c) -> float:
        return float(np.sum(self.w * (c - self.target) ** 2))

    def project(self, z):
        c = np.array(z, dtype=float)
        c[self.fixed] = 0.0
        if self.exact:
            c[self.active] = self.target[self.active]
            return c
        if self.misfit(c) <= self.rho2:
            return c
        a = self.active
        w, t, za = self.w[a], self.target[a], c[a]

        def excess(mu):
            return float(np.sum(w * ((za - t) / (1.0 + mu * w)) ** 2)) - self.rho2

        hi = 1.0
        while excess(hi) > 0:
            hi *= 4.0
        mu = brentq(excess, 0.0, hi, xtol=1e-14, rtol=1e-12)
        c[a] = (za + mu * w * t) / (1.0 + mu * w)
        return c


def nuclear_min(y, L: SamplingOperator, xi: float, symmetric: bool = False, tol: float = 1e-7,
                max_iter: int = 5000, gamma: float | None = None, raise_on_failure: bool = False) -> RecoveryResult:
    """Minimize |X|_* over Hermitian X subject to |y - L(X)| <= xi (Douglas-Rachford).

    Parameters
    ----------
    y : array
        Measurements (real or complex of length q).
    xi : float
        Radius of the measurement ball.
    symmetric : bool
        Restrict to real symmetric matrices.
    """
    if xi < 0:
        raise ValueError("xi must be nonnegative")
    frame = L.frame
    ball = _MeasurementBall(y, L, xi, symmetric)
    z = ball.project(np.zeros(frame.size))
    if ball.singleton:
        X = _herm(frame, z)
        if symmetric:
            X = 0.5 * (np.real(X) + np.real(X).T)
        return RecoveryResult(X, z, 0, math.sqrt(max(xi ** 2 - ball.rho2, 0.0)),
                              float(np.abs(np.linalg.eigvalsh(X)).sum()), True)
    if gamma is None:
        # step size: scale of the least-squares point, shrunk toward xi when the ball is wide
        gamma = max(float(np.linalg.norm(z)), 1e-12) / math.sqrt(frame.k) * 0.5
        if xi > 0:
            gamma = min(gamma, max(xi, gamma / 50.0))
    c_feas = z
    converged = False
    it = 0
    prev_norm = math.inf
    for it in range(1, max_iter + 1):
        x, _ = _hermitian_prox(frame, z, gamma)
        c_feas = ball.project(2.0 * x - z)
        z = z + c_feas - x
        gap = float(np.linalg.norm(c_feas - x))
        nn = float(np.abs(np.linalg.eigvalsh(_herm(frame, c_feas))).sum())
        if gap <= tol * max(1.0, float(np.linalg.norm(c_feas))) and abs(prev_norm - nn) <= tol * max(1.0, nn):
            converged = True
            break
        prev_norm = nn
    X = _herm(frame, c_feas)
    if symmetric:
        X = np.real(X)
        X = 0.5 * (X + X.T)
    resid = math.sqrt(max(ball.misfit(c_feas), 0.0) + max(xi ** 2 - ball.rho2, 0.0)) if not ball.exact else \
        math.sqrt(max(xi ** 2 - ball.rho2, 0.0))
    result = RecoveryResult(X, c_feas, it, resid, float(np.abs(np.linalg.eigvalsh(X)).sum()), converged)
    if not converged:
        msg = f"nuclear_min stopped after {it} iterations (gap {gap:.3g})"
        if raise_on_failure:
            raise SolverError(msg, result)
        log.info(msg)
    return result


def _herm(frame: PauliFrame, c) -> np.ndarray:
    X = frame.synthesize(c)
    return 0.5 * (X + X.conj().T)


def rip_certificate(L: SamplingOperator, d: int, trials: int = 100, seed: int = 0) -> float:
    """Empirical max of | |L(X)| - 1 | over random rank-d unit-Frobenius Hermitian X."""
    if trials < 100:
        raise ValueError("need at least 100 trials")
    rng = np.random.default_rng(seed)
    k = L.frame.k
    worst = 0.0
    for _ in range(trials):
        G = rng.standard_normal((k, d)) + 1j * rng.standard_normal((k, d))
        X = (G * rng.standard_normal(d)) @ G.conj().T
        X /= np.linalg.norm(X)
        worst = max(worst, abs(float(np.linalg.norm(L(X))) - 1.0))
    return worst


# --- mean matrices ---------------------------------------------------------------
def next_power_of_two(k: int) -> int:
    return 1 << max(1, (k - 1).bit_length())


@dataclass
class MatrixEstimate:
    matrix: np.ndarray
    recovery: RecoveryResult
    queries: int
    xi: float
    padded_dim: int


def estimate_mean_matrix(session, feature, k0: int, rank: int, symmetric: bool = True, support=None,
                         c0: float = 6.0, c1: float = 2.0, alpha: float = 0.5, seed: int = 0,
                         label: str = "matrix", solver_tol: float = 1e-7, frame_seed: int = 0) -> MatrixEstimate:
    """Estimate E[F(x)] for matrix-valued F (|F|_F <= 1, nearly rank ``rank``) with 4q queries.

    ``k0`` is padded to the next power of two k by zero blocks; the top-left
    k0 x k0 block of the recovered matrix is returned.  ``seed`` draws the Pauli
    measurement indices; ``frame_seed`` selects the (cached) tight frame.
    """
    k = next_power_of_two(k0)
    frame = pauli_basis(int(round(math.log2(k))))
    q = measurement_count(rank, k, c0, c1, alpha)
    L = SamplingOperator(frame, q, seed)

    def measurements(X):
        M = np.asarray(feature(X), dtype=float).reshape(len(X), k0, k0)
        fro = np.sqrt(np.sum(M ** 2, axis=(1, 2)))
        if fro.size and fro.max() > 1.0 + 1e-9:
            raise UnboundedFeatureError(f"matrix feature Frobenius norm {fro.max():.6g} exceeds 1")
        P = np.zeros((len(X), k, k))
        P[:, :k0, :k0] = M
        y = L(P)
        G = 0.5 * np.hstack([np.real(y), np.imag(y)])
        norms = np.linalg.norm(G, axis=1)
        if norms.size and norms.max() > 1.0 + 1e-9:
            raise UnboundedFeatureError("sampled measurements of the feature exceed the unit ball")
        return G

    vec_frame = kashin_frame(2 * L.q, frame_seed)
    G_hat = estimate_mean_vector(session, measurements, 2 * L.q, support, label=label, frame=vec_frame)
    y_hat = 2.0 * (G_hat[: L.q] + 1j * G_hat[L.q:])
    xi = 2.0 * vec_frame.constant * session.tau
    rec = nuclear_min(y_hat, L, xi, symmetric=symmetric, tol=solver_tol)
    X = np.real(rec.matrix)
    if symmetric:
        X = 0.5 * (X + X.T)
    return MatrixEstimate(X[:k0, :k0], rec, 4 * L.q, xi, k)
