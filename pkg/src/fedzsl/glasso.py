"""Sparse class-similarity estimation with the graphical lasso.

The solver minimises ``tr(S @ Theta) - log det(Theta) + delta * |Theta|_1`` by
primal block coordinate descent: each sweep visits every row/column of
``Theta``, exactly minimises the objective over that row/column with the rest
fixed (a lasso problem solved by cyclic coordinate descent) and keeps the
working covariance ``W = inv(Theta)`` in sync through block-inverse updates.
Every block step is an exact (or monotone inexact) minimisation, so the
objective never increases between sweeps and ``Theta`` stays positive definite.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from fedzsl.data import AttributeTable, DataError

log = logging.getLogger(__name__)


class GlassoError(ValueError):
    pass


class ConvergenceWarning(UserWarning):
    pass


@dataclass(eq=False)
class SimilarityEstimate:
    S: np.ndarray
    Theta: np.ndarray
    Sigma: np.ndarray
    delta: float
    n_iter: int
    residual: float
    converged: bool
    penalize_diagonal: bool = True
    objective_trace: list[float] = field(default_factory=list)


def normalize_attributes(table: AttributeTable) -> AttributeTable:
    """Z-score every class row across its attribute dimensions (population sd)."""
    if table.d_a < 2:
        raise DataError("normalisation needs d_a >= 2")
    rows = table.rows
    mean = rows.mean(axis=1, keepdims=True)
    centered = rows - mean
    sd = np.sqrt((centered**2).mean(axis=1, keepdims=True))
    flat = np.flatnonzero(sd.ravel() == 0.0)
    if flat.size:
        raise DataError(f"class {table.class_ids[flat[0]]} has a zero-variance attribute row")
    return AttributeTable(table.class_ids.copy(), centered / sd)


def sample_covariance(table: AttributeTable) -> np.ndarray:
    """Class-by-class covariance with attribute dimensions as observations.

    ``S[j, k] = mean_c a_j[c] * a_k[c]``; with z-scored rows the diagonal is 1.
    """
    a = table.rows
    S = a @ a.T / table.d_a
    return (S + S.T) / 2


def objective(S: np.ndarray, Theta: np.ndarray, delta: float, penalize_diagonal: bool = True) -> float:
    sign, logdet = np.linalg.slogdet(Theta)
    if sign <= 0:
        return float("inf")
    penalty = np.abs(Theta).sum()
    if not penalize_diagonal:
        penalty -= np.abs(np.diag(Theta)).sum()
    return float(np.sum(S * Theta) - logdet + delta * penalty)


def kkt_residual(S: np.ndarray, Theta: np.ndarray, delta: float, penalize_diagonal: bool = True) -> float:
    """Largest subgradient violation of the graphical-lasso optimality conditions.

    Stationarity reads ``inv(Theta) - S = delta * sign(Theta)`` on non-zero
    entries and ``|inv(Theta) - S| <= delta`` on zero entries.
    """
    try:
        L = np.linalg.cholesky(Theta)
    except np.linalg.LinAlgError:
        raise GlassoError("Theta is singular or not positive definite") from None
    Linv = np.linalg.inv(L)
    W = Linv.T @ Linv
    G = W - S
    pen = np.full(S.shape, float(delta))
    if not penalize_diagonal:
        np.fill_diagonal(pen, 0.0)
    nz = Theta != 0
    viol = np.where(nz, np.abs(G - pen * np.sign(Theta)), np.maximum(0.0, np.abs(G) - pen))
    return float(viol.max())


@numba.njit(cache=True)
def _lasso_cd(Q, s, delta, x, tol, max_iter):  # pragma: no cover - compiled
    # min 0.5 x'Qx + s'x + delta*|x|_1, cyclic coordinate descent from warm start x
    n = s.shape[0]
    Qx = Q @ x
    for _ in range(max_iter):
        biggest = 0.0
        for i in range(n):
            qii = Q[i, i]
            r = s[i] + Qx[i] - qii * x[i]
            if r > delta:
                new = -(r - delta) / qii
            elif r < -delta:
                new = -(r + delta) / qii
            else:
                new = 0.0
            step = new - x[i]
            if step != 0.0:
                for m in range(n):
                    Qx[m] += Q[m, i] * step
                x[i] = new
                if abs(step) > biggest:
                    biggest = abs(step)
        if biggest < tol:
            break
    return x


@numba.njit(cache=True)
def _sweep(S, Theta, W, d, delta, inner_tol):  # pragma: no cover - compiled
    # one pass of row/column block updates; returns max |W_new - W_old|
    p = S.shape[0]
    W_old = W.copy()
    m = p - 1
    idx = np.empty(m, dtype=np.int64)
    A = np.empty((m, m))
    Q = np.empty((m, m))
    s12 = np.empty(m)
    alpha = np.empty(m)
    for j in range(p):
        k = 0
        for i in range(p):
            if i != j:
                idx[k] = i
                k += 1
        wjj = W[j, j]
        for a in range(m):
            ia = idx[a]
            s12[a] = S[ia, j]
            alpha[a] = Theta[ia, j]
            for b in range(a, m):
                ib = idx[b]
                v = W[ia, ib] - W[ia, j] * W[ib, j] / wjj  # inv(Theta_11)
                A[a, b] = v
                A[b, a] = v
                Q[a, b] = d[j] * v
                Q[b, a] = d[j] * v
        alpha = _lasso_cd(Q, s12, delta, alpha, inner_tol, 10000)
        c = 1.0 / d[j]
        Aa = A @ alpha
        quad = 0.0
        for a in range(m):
            quad += alpha[a] * Aa[a]
        Theta[j, j] = c + quad
        W[j, j] = d[j]
        for a in range(m):
            ia = idx[a]
            Theta[ia, j] = alpha[a]
            Theta[j, ia] = alpha[a]
            W[ia, j] = -Aa[a] / c
            W[j, ia] = -Aa[a] / c
            for b in range(a, m):
                ib = idx[b]
                v = A[a, b] + Aa[a] * Aa[b] / c
                W[ia, ib] = v
                W[ib, ia] = v
    return np.abs(W - W_old).max()


def graphical_lasso(
    S: np.ndarray,
    delta: float,
    tol: float = 1e-7,
    max_iter: int = 500,
    penalize_diagonal: bool = True,
    track_objective: bool = False,
) -> SimilarityEstimate:
    """Estimate a sparse precision matrix for ``S``.

    Starts from ``Theta = diag(1 / (S_jj + delta))`` and stops when the largest
    change of the working covariance between sweeps drops below ``tol`` or
    after ``max_iter`` sweeps. Non-convergence is reported through the
    ``converged`` flag and a ``ConvergenceWarning``, not raised.
    """
    S = np.array(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise GlassoError("S must be square")
    if not np.allclose(S, S.T, rtol=0, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise GlassoError("S must be symmetric")
    if delta < 0:
        raise GlassoError("delta must be non-negative")
    S = (S + S.T) / 2
    p = S.shape[0]
    diag_pen = delta if penalize_diagonal else 0.0
    if delta == 0:
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise GlassoError("S is singular; delta=0 requires a nonsingular S") from None
    d = np.diag(S) + diag_pen
    if np.any(d <= 0):
        raise GlassoError("diagonal of S plus penalty must be positive")

    Theta = np.diag(1.0 / d)
    W = np.diag(d.copy())
    floor_tol = min(tol, 1e-8) * 1e-2
    change = 1.0
    trace = [objective(S, Theta, delta, penalize_diagonal)] if track_objective else []
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        # inner solves tighten as the outer iteration settles
        inner_tol = max(floor_tol, min(1e-3, change * 1e-3))
        change = _sweep(S, Theta, W, d, float(delta), inner_tol)
        if track_objective:
            trace.append(objective(S, Theta, delta, penalize_diagonal))
        if change < tol:
            converged = True
            break
    residual = kkt_residual(S, Theta, delta, penalize_diagonal)
    if not converged:
        warnings.warn(
            f"graphical lasso did not converge in {max_iter} sweeps (kkt residual {residual:.3e})",
            ConvergenceWarning,
            stacklevel=2,
        )
    log.debug("glasso p=%d delta=%g sweeps=%d residual=%.3e", p, delta, n_iter, residual)
    Sigma = _inverse_pd(Theta)
    return SimilarityEstimate(S, Theta, Sigma, float(delta), n_iter, residual, converged, penalize_diagonal, trace)


def _inverse_pd(M: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(M)
    Linv = np.linalg.inv(L)
    inv = Linv.T @ Linv
    return (inv + inv.T) / 2


def similarity_matrix(est: SimilarityEstimate) -> np.ndarray:
    """The regularised class covariance ``inv(Theta)``; row j is class j's target."""
    return est.Sigma


def estimate_similarity(
    table: AttributeTable,
    delta: float = 0.01,
    tol: float = 1e-7,
    max_iter: int = 500,
    penalize_diagonal: bool = True,
) -> SimilarityEstimate:
    S = sample_covariance(normalize_attributes(table))
    return graphical_lasso(S, delta, tol=tol, max_iter=max_iter, penalize_diagonal=penalize_diagonal)
