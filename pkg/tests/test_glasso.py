from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedzsl.data import AttributeTable, DataError
from fedzsl.glasso import (
    ConvergenceWarning,
    GlassoError,
    estimate_similarity,
    graphical_lasso,
    kkt_residual,
    normalize_attributes,
    objective,
    sample_covariance,
    similarity_matrix,
)


def random_cov(seed: int, p: int = 10, n: int = 40) -> np.ndarray:
    X = np.random.default_rng(seed).normal(size=(n, p))
    S = X.T @ X / n
    return (S + S.T) / 2


def test_normalize_examples():
    t = normalize_attributes(AttributeTable([0], [[0.0, 2.0]]))
    assert np.allclose(t.rows, [[-1.0, 1.0]])
    with pytest.raises(DataError, match="zero-variance"):
        normalize_attributes(AttributeTable([0], [[1.0, 1.0, 1.0, 1.0]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9))
def test_normalized_rows_have_unit_variance(seed, d_a):
    rows = np.random.default_rng(seed).normal(size=(4, d_a)) * 3 + 1
    z = normalize_attributes(AttributeTable(np.arange(4), rows)).rows
    assert np.all(np.abs(z.mean(axis=1)) < 1e-12)
    assert np.all(np.abs(z.var(axis=1) - 1) < 1e-12)


def test_sample_covariance_oracle():
    rows = np.random.default_rng(0).normal(size=(3, 5))
    t = normalize_attributes(AttributeTable(np.arange(3), rows))
    S = sample_covariance(t)
    brute = np.array([[sum(t.rows[j, c] * t.rows[k, c] for c in range(5)) / 5 for k in range(3)] for j in range(3)])
    assert np.max(np.abs(S - brute)) < 1e-12
    same = normalize_attributes(AttributeTable([0, 1], [[1.0, 2.0, 4.0], [1.0, 2.0, 4.0]]))
    assert np.allclose(sample_covariance(same), 1.0)
    orth = AttributeTable([0, 1], [[1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0]])
    assert abs(sample_covariance(normalize_attributes(orth))[0, 1]) < 1e-15


def test_identity_example():
    est = graphical_lasso(np.eye(2), 0.1, tol=1e-10)
    assert np.allclose(est.Theta, np.diag([1 / 1.1, 1 / 1.1]), atol=1e-12)
    assert est.Theta[0, 1] == 0.0
    assert kkt_residual(np.eye(2), est.Theta, 0.1) < 1e-8
    assert np.count_nonzero(similarity_matrix(est) - np.diag(np.diag(similarity_matrix(est)))) == 0


@pytest.mark.parametrize("seed", range(5))
def test_zero_penalty_inverts(seed):
    S = random_cov(seed)
    est = graphical_lasso(S, 0.0, tol=1e-10, max_iter=2000)
    assert np.max(np.abs(est.Theta - np.linalg.inv(S))) < 1e-6
    assert np.max(np.abs(est.Sigma - S)) < 1e-6
    assert kkt_residual(S, np.linalg.inv(S), 0.0) < 1e-10


@pytest.mark.parametrize("delta", [0.001, 0.01, 0.1, 0.5])
def test_kkt_and_inverse_identity(delta):
    for seed in range(4):
        S = random_cov(100 + seed)
        est = graphical_lasso(S, delta, tol=1e-8)
        assert est.converged
        assert est.residual < 10 * 1e-8 + 1e-7
        assert np.allclose(est.Sigma @ est.Theta, np.eye(10), atol=1e-8)
        assert np.array_equal(est.Theta, est.Theta.T) or np.allclose(est.Theta, est.Theta.T, atol=1e-12)
        np.linalg.cholesky(est.Theta)


def test_large_penalty_zeroes_off_diagonal():
    S = random_cov(7)
    delta = np.abs(S - np.diag(np.diag(S))).max() + 1
    est = graphical_lasso(S, delta)
    off = est.Theta - np.diag(np.diag(est.Theta))
    assert np.all(off == 0.0)
    assert kkt_residual(S, est.Theta, delta) < 1e-8


def test_perturbation_increases_residual():
    S = random_cov(8)
    est = graphical_lasso(S, 0.05, tol=1e-10)
    bumped = est.Theta.copy()
    bumped[0, 1] += 0.1
    bumped[1, 0] += 0.1
    assert kkt_residual(S, bumped, 0.05) > est.residual


def test_objective_never_increases():
    S = random_cov(9, p=15, n=20)
    est = graphical_lasso(S, 0.02, tol=1e-9, track_objective=True)
    trace = np.array(est.objective_trace)
    assert len(trace) == est.n_iter + 1
    assert np.all(np.diff(trace) <= 1e-12 * np.abs(trace[:-1]))
    assert trace[-1] == pytest.approx(objective(S, est.Theta, 0.02))


def test_sparsity_grows_with_penalty():
    S = random_cov(10)
    zeros = []
    for delta in (0.001, 0.01, 0.1, 1.0):
        theta = graphical_lasso(S, delta, tol=1e-9).Theta
        zeros.append(int(np.sum(theta[~np.eye(10, dtype=bool)] == 0)))
    assert zeros == sorted(zeros)
    assert zeros[-1] > zeros[0]


def test_matches_sklearn_with_free_diagonal():
    sk = pytest.importorskip("sklearn.covariance")
    S = random_cov(12)
    ours = graphical_lasso(S, 0.1, tol=1e-10, penalize_diagonal=False)
    _, prec = sk.graphical_lasso(S, alpha=0.1, tol=1e-10, max_iter=1000, mode="cd")
    assert np.max(np.abs(ours.Theta - prec)) < 1e-6


def test_penalized_diagonal_shifts_working_covariance():
    S = random_cov(13)
    est = graphical_lasso(S, 0.05, tol=1e-10)
    assert np.allclose(np.diag(est.Sigma), np.diag(S) + 0.05, atol=1e-8)
    free = graphical_lasso(S, 0.05, tol=1e-10, penalize_diagonal=False)
    assert np.allclose(np.diag(free.Sigma), np.diag(S), atol=1e-8)


def test_input_errors():
    with pytest.raises(GlassoError, match="symmetric"):
        graphical_lasso(np.array([[1.0, 0.2], [0.1, 1.0]]), 0.1)
    with pytest.raises(GlassoError, match="singular"):
        graphical_lasso(np.ones((2, 2)), 0.0)
    with pytest.raises(GlassoError):
        graphical_lasso(np.eye(2), -1.0)
    with pytest.raises(GlassoError):
        kkt_residual(np.eye(2), np.zeros((2, 2)), 0.1)


def test_nonconvergence_is_reported_not_raised():
    S = random_cov(14, p=12, n=6)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        est = graphical_lasso(S, 0.01, tol=1e-14, max_iter=2)
    assert not est.converged and est.n_iter == 2
    assert any(issubclass(w.category, ConvergenceWarning) for w in caught)
    assert np.isfinite(est.residual)


def test_similarity_from_table():
    rng = np.random.default_rng(1)
    table = AttributeTable(np.arange(8), rng.normal(size=(8, 12)))
    est = estimate_similarity(table, 0.01, tol=1e-8)
    assert est.S.shape == (8, 8)
    assert np.allclose(np.diag(est.S), 1.0)
    assert est.residual < 1e-6
