"""Reweighted least squares solvers, block OMP and the two oracles."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .core import (
    BlockPartition,
    ConditioningError,
    DimensionError,
    MmvProblem,
    RangeError,
    RecoveryResult,
    ScaleError,
    SmvProblem,
    SolverConfig,
    search_space_size,
    support_indices,
)

EPS_START = 1.0
EPS_FLOOR = 1e-16


@dataclass
class IrlsState:
    weights: np.ndarray
    epsilon: float
    x: np.ndarray


def _solve_psd(K, Y):
    try:
        chol = sla.cho_factor(K, lower=True, check_finite=False)
        Z = sla.cho_solve(chol, Y, check_finite=False)
    except np.linalg.LinAlgError:
        try:
            Z = sla.solve(K, Y, assume_a="sym", check_finite=False)
        except (np.linalg.LinAlgError, sla.LinAlgWarning) as exc:
            raise ConditioningError(f"A W^-1 A^T is singular: {exc}") from exc
    if not np.all(np.isfinite(Z)):
        raise ConditioningError("A W^-1 A^T is singular")
    return Z


def _weighted_min_norm(A, Y, dinv, free=None):
    """Solve ``min sum_i w_i ||X_i.||^2  s.t.  A X = Y`` with ``dinv = 1/w``.

    Columns listed in ``free`` carry zero weight (unpenalised): their span is
    projected out, the penalised part takes the weighted minimum-norm solution
    of what remains and the free part is a least-squares fit to the rest.
    """
    if free is None or free.size == 0:
        AD = A * dinv[None, :]
        return AD.T @ _solve_psd(AD @ A.T, Y)
    N, M = A.shape
    pen = np.setdiff1d(np.arange(M), free)
    Af = A[:, free]
    Q, R, _ = sla.qr(Af, pivoting=True)
    tol = max(Af.shape) * np.finfo(float).eps * (abs(R[0, 0]) if R.size else 0.0)
    rank = int(np.sum(np.abs(np.diag(R)) > tol))
    U = Q[:, rank:]
    X = np.zeros((M, Y.shape[1]))
    if U.shape[1] and pen.size:
        B = U.T @ A[:, pen]
        BD = B * dinv[pen][None, :]
        X[pen] = BD.T @ _solve_psd(BD @ B.T, U.T @ Y)
    coef, *_ = np.linalg.lstsq(Af, Y - A[:, pen] @ X[pen], rcond=None)
    X[free] = coef
    return X


def _reweighted(A, Y, p, energy, support=None, max_iters=400, eps_floor=EPS_FLOOR,
                callback=None):
    """Shared IRLS loop.

    ``energy(X)`` maps the iterate to one squared magnitude per coefficient
    (entry, block sum or row norm, already broadcast to length M).  Indices in
    ``support`` get weight zero, i.e. are unpenalised.
    Returns ``(X, iterations, converged, eps)``.
    """
    N, M = A.shape
    scale = np.sqrt(np.mean(Y ** 2))
    if scale == 0.0:
        return np.zeros((M, Y.shape[1])), 1, True, EPS_START
    Yn = Y / scale
    X = _weighted_min_norm(A, Yn, np.ones(M), support)
    eps = EPS_START
    expo = p / 2.0 - 1.0
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        w = (energy(X) + eps) ** expo
        if support is not None and support.size:
            w[support] = 0.0
        if callback is not None:
            callback(IrlsState(w.copy(), eps, X[:, 0] * scale if X.shape[1] == 1 else X * scale))
        with np.errstate(divide="ignore"):
            X_new = _weighted_min_norm(A, Yn, 1.0 / w, support)
        step = np.linalg.norm(X_new - X)
        X = X_new
        if step < np.sqrt(eps) / 100.0:
            eps /= 10.0
            if eps < eps_floor:
                converged = True
                break
    return X * scale, it, converged, eps


def _validate_p(p):
    if not 0 < p <= 1:
        raise RangeError(f"p must lie in (0, 1], got {p}")


def irls_lp(problem: SmvProblem, p: float = 0.99, support_prior: Optional[Sequence[int]] = None,
            config: SolverConfig = SolverConfig(), callback=None) -> RecoveryResult:
    """Equality-constrained IRLS for l_p minimisation with an optional known support.

    ``p = 1`` with no support is the l1 baseline.
    """
    _validate_p(p)
    A = problem.matrix
    M = A.shape[1]
    S = support_indices(support_prior, M)
    t0 = time.perf_counter()
    X, it, conv, eps = _reweighted(A, problem.y[:, None], p, lambda X: X[:, 0] ** 2, S,
                                   config.max_iters, callback=callback)
    return RecoveryResult(X[:, 0], it, conv, time.perf_counter() - t0,
                          diagnostics={"epsilon": eps, "support_size": int(S.size)})


def birls(problem: SmvProblem, p: float, partition: BlockPartition,
          config: SolverConfig = SolverConfig(), callback=None) -> RecoveryResult:
    """Block IRLS: one weight per block from the block's summed energy."""
    _validate_p(p)
    A = problem.matrix
    M = A.shape[1]
    if partition.size != M:
        raise DimensionError(f"partition covers {partition.size} coefficients, A has {M} columns")
    g, d = partition.num_blocks, partition.block_len

    def energy(X):
        e = (X[:, 0] ** 2).reshape(g, d).sum(axis=1)
        return np.repeat(e, d)

    t0 = time.perf_counter()
    X, it, conv, eps = _reweighted(A, problem.y[:, None], p, energy, None, config.max_iters,
                                   callback=callback)
    return RecoveryResult(X[:, 0], it, conv, time.perf_counter() - t0,
                          diagnostics={"epsilon": eps})


def mfocuss(problem: MmvProblem, p: float = 0.8, config: SolverConfig = SolverConfig(),
            callback=None) -> RecoveryResult:
    """MMV reweighting on row norms, one weight matrix shared by all columns."""
    _validate_p(p)
    A = problem.matrix
    t0 = time.perf_counter()
    X, it, conv, eps = _reweighted(A, problem.Y, p, lambda X: np.sum(X ** 2, axis=1), None,
                                   config.max_iters, callback=callback)
    return RecoveryResult(X, it, conv, time.perf_counter() - t0, diagnostics={"epsilon": eps})


def _lstsq(As, y):
    """Least squares on the selected columns; raises on rank deficiency."""
    if As.shape[1] == 0:
        return np.zeros(0)
    if np.linalg.matrix_rank(As) < As.shape[1]:
        raise ConditioningError("selected columns are rank deficient")
    coef, *_ = np.linalg.lstsq(As, y, rcond=None)
    return coef


def bomp(problem: SmvProblem, partition: BlockPartition, k_blocks: int) -> RecoveryResult:
    """Block orthogonal matching pursuit selecting ``k_blocks`` blocks."""
    A = problem.matrix
    y = problem.y
    N, M = A.shape
    if partition.size != M:
        raise DimensionError(f"partition covers {partition.size} coefficients, A has {M} columns")
    g, d = partition.num_blocks, partition.block_len
    if not 1 <= k_blocks <= g:
        raise RangeError(f"k_blocks must lie in [1, {g}], got {k_blocks}")
    t0 = time.perf_counter()
    A3 = A.reshape(N, g, d)
    chosen = []
    r = y.copy()
    x = np.zeros(M)
    for _ in range(k_blocks):
        corr = np.einsum("ngd,n->gd", A3, r)
        score = np.sum(corr ** 2, axis=1)
        score[chosen] = -1.0
        chosen.append(int(np.argmax(score)))
        idx = partition.indices(chosen)
        coef = _lstsq(A[:, idx], y)
        x = np.zeros(M)
        x[idx] = coef
        r = y - A[:, idx] @ coef
    return RecoveryResult(x, len(chosen), True, time.perf_counter() - t0,
                          active_blocks=np.array(sorted(chosen)))


def ksparse_approx(c, k: int) -> np.ndarray:
    """Best k-term approximation: keep the k largest magnitudes (lowest index on ties)."""
    c = np.asarray(c, dtype=float)
    if not 0 <= k <= c.shape[0]:
        raise RangeError(f"need 0 <= k <= {c.shape[0]}, got {k}")
    keep = np.argsort(-np.abs(c), kind="stable")[:k]
    out = np.zeros_like(c)
    out[keep] = c[keep]
    return out


L0_MAX_M = 24
L0_MAX_K = 4


def l0_bruteforce(problem: SmvProblem, k_max: int, rel_tol: float = 1e-8) -> RecoveryResult:
    """Exhaustive sparsest-support search up to ``k_max`` nonzeros.

    Supports are tried in order of increasing size (lexicographic within a
    size); the first that explains ``y`` to ``rel_tol`` wins.  Otherwise the
    minimum-residual candidate is returned with ``diagnostics['exact']`` False.
    """
    A = problem.matrix
    y = problem.y
    N, M = A.shape
    if M > L0_MAX_M or k_max > L0_MAX_K:
        raise ScaleError(f"exhaustive search limited to M <= {L0_MAX_M}, k_max <= {L0_MAX_K}")
    k_max = min(k_max, M)
    t0 = time.perf_counter()
    target = rel_tol * np.linalg.norm(y)
    best = (np.linalg.norm(y), ())
    best_coef = np.zeros(0)
    tried = 0
    for k in range(k_max + 1):
        for S in itertools.combinations(range(M), k):
            tried += 1
            As = A[:, S]
            if k:
                coef, *_ = np.linalg.lstsq(As, y, rcond=None)
                res = np.linalg.norm(y - As @ coef)
            else:
                coef, res = np.zeros(0), np.linalg.norm(y)
            if res < best[0]:
                best, best_coef = (res, S), coef
            if res <= target:
                x = np.zeros(M)
                x[list(S)] = coef
                return RecoveryResult(x, tried, True, time.perf_counter() - t0,
                                      diagnostics={"exact": True, "support": S})
    x = np.zeros(M)
    x[list(best[1])] = best_coef
    assert tried == search_space_size(M, k_max)
    return RecoveryResult(x, tried, False, time.perf_counter() - t0,
                          diagnostics={"exact": False, "support": best[1]})
