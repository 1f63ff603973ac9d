import math

import numpy as np
import pytest
from scipy import stats

from sqmanifold.geometry import Subspace, principal_angle
from sqmanifold.matrix_sq import (SamplingOperator, TightFrame, UnboundedFeatureError, estimate_mean_matrix,
                                  estimate_mean_naive, estimate_mean_vector, kashin_frame, measurement_count,
                                  next_power_of_two, nuclear_min, pauli_basis, rip_certificate)
from sqmanifold.models import DiscreteModel, SphereModel
from sqmanifold.oracle import OracleSession, WorstSignAdversary


def rank_r_symmetric(k, r, seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((k, r))
    S = G @ np.diag(np.linspace(1.0, -0.5, r)) @ G.T
    return S / np.linalg.norm(S)


# --- vector means ----------------------------------------------------------------------
def test_frame_is_tight_and_represents_exactly():
    f = kashin_frame(16)
    assert np.allclose(f.U @ f.U.T, np.eye(16), atol=1e-12)
    X = np.random.default_rng(0).standard_normal((7, 16))
    A = f.represent(X)
    assert np.allclose(A @ f.U.T, X, atol=1e-12)
    ratio = math.sqrt(f.N) * np.abs(A).max(axis=1) / np.linalg.norm(X, axis=1)
    assert ratio.max() <= f.constant


def test_constant_feature_is_recovered_exactly():
    v = np.array([0.3, -0.2, 0.5, 0.1])
    s = OracleSession(SphereModel(1, 2, 1.0), 0.0)
    est = estimate_mean_vector(s, lambda X: np.tile(v, (len(X), 1)), 4)
    assert np.allclose(est, v, atol=1e-12)
    assert s.budget_used == 8


def test_rounding_error_is_bounded_by_frame_constant():
    M = SphereModel(1, 4, 1.0)
    f = kashin_frame(4)
    assert f.constant <= 4.0
    feature = lambda X: np.clip(X, -0.5, 0.5)  # noqa: E731
    truth = M.expect(feature)
    for seed in range(100):
        s = OracleSession(M, 0.05, "rounding", seed=seed)
        est = estimate_mean_vector(s, feature, 4, frame_seed=seed % 5)
        assert np.linalg.norm(est - truth) <= kashin_frame(4, seed % 5).constant * 0.05 + 1e-12


def test_frame_estimator_beats_naive_as_dimension_grows():
    ratios = []
    for k in (4, 16, 64):
        M = DiscreteModel(np.zeros((1, 1)))
        feature = lambda X, k=k: np.zeros((len(X), k))  # noqa: E731
        naive = estimate_mean_naive(OracleSession(M, 0.01, WorstSignAdversary(lambda lbl, tr: 1.0)), feature, k)
        frame = estimate_mean_vector(OracleSession(M, 0.01, WorstSignAdversary(lambda lbl, tr: 1.0)), feature, k)
        ratios.append(np.linalg.norm(naive) / np.linalg.norm(frame))
        assert np.linalg.norm(naive) == pytest.approx(math.sqrt(k) * 0.01)
    assert ratios[0] < ratios[1] < ratios[2]


def test_unbounded_feature_is_detected():
    s = OracleSession(SphereModel(1, 2, 1.0), 0.0)
    with pytest.raises(UnboundedFeatureError):
        estimate_mean_vector(s, lambda X: 2.0 * np.ones((len(X), 3)), 3)


# --- Pauli basis -----------------------------------------------------------------------
def test_level_one_basis_is_normalized_pauli_matrices():
    W = pauli_basis(1).matrices * math.sqrt(2)
    expected = [np.eye(2), np.array([[0, 1], [1, 0]]), np.array([[0, -1j], [1j, 0]]), np.array([[1, 0], [0, -1]])]
    for w, e in zip(W, expected):
        assert np.allclose(w, e)


@pytest.mark.parametrize("level", [1, 2, 3])
def test_pauli_basis_invariants(level):
    fr = pauli_basis(level)
    k = fr.k
    assert fr.matrices.shape == (k * k, k, k)
    flat = fr.matrices.reshape(k * k, -1)
    assert np.abs(flat.conj() @ flat.T - np.eye(k * k)).max() <= 1e-12
    for W in fr.matrices:
        assert np.allclose(W, W.conj().T)
        assert np.linalg.norm(W, 2) == pytest.approx(1 / math.sqrt(k), abs=1e-14)


def test_pauli_coefficients_of_empty_batch():
    fr = pauli_basis(2)
    assert fr.coefficients(np.zeros((0, 4, 4))).shape == (0, 16)


def test_pauli_basis_memory_guard():
    with pytest.raises(MemoryError):
        pauli_basis(7, memory_limit=10 ** 6)


def test_sampling_operator_is_isometric_in_expectation():
    fr = pauli_basis(2)
    X = rank_r_symmetric(4, 2, 0)
    vals = [np.linalg.norm(SamplingOperator(fr, 6, s, full_when_possible=False)(X)) ** 2 for s in range(10_000)]
    assert np.mean(vals) == pytest.approx(1.0, rel=0.02)


# --- recovery ----------------------------------------------------------------------------
def test_rank_one_exact_recovery():
    fr = pauli_basis(4)
    for seed in range(20):
        S = rank_r_symmetric(16, 1, seed)
        L = SamplingOperator(fr, 6 * 16, seed)
        rec = nuclear_min(L(S), L, 0.0, symmetric=True, tol=1e-9)
        assert np.linalg.norm(rec.matrix - S) <= 1e-4


def test_large_radius_returns_zero():
    fr = pauli_basis(2)
    S = rank_r_symmetric(4, 1, 0)
    L = SamplingOperator(fr, 8, 0)
    y = L(S)
    rec = nuclear_min(y, L, 1.01 * np.linalg.norm(y), symmetric=True)
    assert np.abs(rec.matrix).max() <= 1e-9


def test_noisy_recovery_error_scales_with_noise():
    # same quota as noiseless recovery: a sampled operator can miss identifiability
    fr = pauli_basis(4)
    good = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        S = rank_r_symmetric(16, 2, seed)
        L = SamplingOperator(fr, 192, seed)
        z = rng.standard_normal(L.q)
        xi = 1e-3
        rec = nuclear_min(L(S) + xi * z / np.linalg.norm(z), L, xi, symmetric=True, tol=1e-9)
        assert rec.residual <= xi * (1 + 1e-6)
        good += np.linalg.norm(rec.matrix - S) <= 10 * xi
    assert good >= 18


def test_nuclear_norm_is_monotone_in_radius():
    fr = pauli_basis(3)
    S = rank_r_symmetric(8, 2, 3)
    L = SamplingOperator(fr, 40, 3)
    y = L(S)
    norms = [nuclear_min(y, L, xi, symmetric=True, tol=1e-9).nuclear_norm for xi in (0.0, 0.05, 0.2, 0.5)]
    assert all(a >= b - 1e-6 for a, b in zip(norms, norms[1:]))


def test_negative_radius_rejected():
    L = SamplingOperator(pauli_basis(1), 2, 0)
    with pytest.raises(ValueError):
        nuclear_min(np.zeros(2), L, -1.0)


def test_rip_certificate_trivial_cases():
    fr = pauli_basis(4)
    assert rip_certificate(SamplingOperator(fr, 256, 0), 2) <= 1e-10
    assert rip_certificate(SamplingOperator(fr, 1, 0), 2) >= 0.5
    with pytest.raises(ValueError):
        rip_certificate(SamplingOperator(fr, 4, 0), 2, trials=10)


@pytest.mark.xfail(strict=True, reason="i.i.d. index sampling at q=6dk gives certificates of 0.11-0.24 at k=16")
def test_rip_certificate_small_at_six_dk_measurements():
    fr = pauli_basis(4)
    small = sum(rip_certificate(SamplingOperator(fr, 6 * 2 * 16, s), 2, 100, s) < 0.1 for s in range(10))
    assert small >= 9


# --- mean matrices -----------------------------------------------------------------------
def two_atom_problem(k0, seed):
    rng = np.random.default_rng(seed)
    U = np.linalg.qr(rng.standard_normal((k0, 2)))[0]
    mats = [np.outer(U[:, 0], U[:, 0]), -np.outer(U[:, 1], U[:, 1])]
    model = DiscreteModel(np.array([[0.0], [1.0]]), [0.6, 0.4])

    def feature(X):
        return np.stack([mats[int(round(x[0]))] for x in X])

    return model, feature, 0.6 * mats[0] + 0.4 * mats[1]


def test_exact_rank_two_mean_matrix():
    model, feature, truth = two_atom_problem(16, 0)
    s = OracleSession(model, 0.0)
    est = estimate_mean_matrix(s, feature, 16, 2, seed=0)
    assert np.linalg.norm(est.matrix - truth) <= 1e-4
    assert s.budget_used == est.queries == 4 * measurement_count(2, 16)
    assert np.allclose(est.matrix, est.matrix.T)


def test_padding_block_stays_small():
    model, feature, truth = two_atom_problem(12, 1)
    tau = 0.01
    s = OracleSession(model, tau, "worst-sign")
    est = estimate_mean_matrix(s, feature, 12, 2, seed=1)
    assert est.padded_dim == 16
    # the returned block is the top-left corner; its error is O(tau)
    assert np.linalg.norm(est.matrix - truth) <= 10 * est.xi


def test_rounding_error_is_linear_in_tau():
    taus = [0.1, 0.05, 0.025]
    mean_err = []
    for tau in taus:
        errs = []
        for seed in range(10):
            model, feature, truth = two_atom_problem(16, seed)
            est = estimate_mean_matrix(OracleSession(model, tau, "rounding"), feature, 16, 2, seed=seed)
            errs.append(np.linalg.norm(est.matrix - truth))
        mean_err.append(np.mean(errs))
    slope = stats.linregress(np.log(taus), np.log(mean_err)).slope
    assert abs(slope - 1.0) <= 0.2


def test_davis_kahan_on_synthetic_instances():
    for seed in range(5):
        model, feature, truth = two_atom_problem(16, seed)
        est = estimate_mean_matrix(OracleSession(model, 0.02, "worst-sign"), feature, 16, 2, seed=seed)
        w, V = np.linalg.eigh(truth)
        order = np.argsort(-np.abs(w))
        wh, Vh = np.linalg.eigh(est.matrix)
        orderh = np.argsort(-np.abs(wh))
        angle = principal_angle(Subspace(Vh[:, orderh[:2]]), Subspace(V[:, order[:2]]))
        assert angle <= 2 * np.linalg.norm(est.matrix - truth) / np.abs(w[order[1]])


def test_measurement_count_and_padding_helpers():
    assert next_power_of_two(5) == 8
    assert next_power_of_two(8) == 8
    assert measurement_count(1, 8) == 64
    assert measurement_count(2, 16) == 256


def test_custom_frame_lambda_still_exact():
    f = TightFrame(kashin_frame(8).U, lam=1.2)
    f.calibrate(np.random.default_rng(0))
    X = np.random.default_rng(2).standard_normal((3, 8))
    assert np.allclose(f.represent(X) @ f.U.T, X)
