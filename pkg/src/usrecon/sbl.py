"""Structured sparse Bayesian learning: BSBL-EM, BSBL-BO, ST-SBL and T-MSBL.

All four solvers share one hyperparameter loop (:func:`_learn`).  A group of
``L'`` measurement columns is modelled as ``vec(X_[i]^T) ~ N(0, (gamma_i C) kron B_L)``
where ``C`` (``d x d``) is the intra-block correlation shared by all blocks and
``B_L`` (``L' x L'``) the inter-column correlation.  With ``L' = 1`` this is the
single-vector BSBL model, and with ``d = 1`` it is the T-MSBL model.

Data are normalised by their RMS value before learning so that the
``gamma = 1`` initialisation is scale free; the noise variance and the pruning
threshold are absolute and are rescaled accordingly.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .core import (
    BlockPartition,
    ConditioningError,
    DimensionError,
    MmvProblem,
    RecoveryResult,
    SmvProblem,
    SolverConfig,
    _matrix_of,
    check_divides,
    make_block_partition,
)

R_CLAMP = 0.99


@dataclass
class SbState:
    """Hyperparameters of the structured Gaussian prior.

    ``intra_corr`` is the block correlation (``d x d``), ``inter_corr`` the
    column correlation (``L' x L'``).  Pruned blocks keep ``gamma == 0``.
    """

    gamma: np.ndarray
    intra_corr: np.ndarray
    inter_corr: np.ndarray
    active: np.ndarray

    @classmethod
    def initial(cls, partition: BlockPartition, n_cols: int = 1) -> "SbState":
        g, d = partition.num_blocks, partition.block_len
        return cls(np.ones(g), np.eye(d), np.eye(n_cols), np.ones(g, dtype=bool))

    @property
    def partition(self) -> BlockPartition:
        return BlockPartition(self.intra_corr.shape[0], self.gamma.shape[0])


@dataclass
class PosteriorMoments:
    mean: np.ndarray
    block_covs: np.ndarray


def ar1_toeplitz(r: float, n: int) -> np.ndarray:
    return sla.toeplitz(r ** np.arange(n))


def ar1_coefficient(S: np.ndarray) -> float:
    """Lag-one correlation of a covariance estimate, clamped to +/-0.99."""
    n = S.shape[0]
    if n < 2:
        return 0.0
    m0 = np.mean(np.diag(S))
    if not m0 > 0:
        return 0.0
    r = np.mean(np.diag(S, 1)) / m0
    return float(np.clip(r, -R_CLAMP, R_CLAMP))


def _cholesky(S: np.ndarray):
    try:
        return sla.cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        m = re.search(r"(\d+)", str(exc))
        raise ConditioningError(f"covariance of y is not positive definite: {exc}",
                                int(m.group(1)) - 1 if m else None) from exc


@dataclass
class _Moments:
    mu: np.ndarray        # (ga, d, L) posterior means of active blocks
    covs: np.ndarray      # (ga, d, d) posterior covariances of active blocks
    proj: np.ndarray      # (ga, d, L) A_i^T Sigma_y^{-1} Y
    quad: np.ndarray      # (ga, d, d) A_i^T Sigma_y^{-1} A_i
    chol: tuple


def _moments(A3, Y, gamma_a, C, lam):
    """Posterior moments restricted to active blocks.

    ``A3`` holds the active columns of A reshaped to ``(N, ga, d)``.
    """
    N, ga, d = A3.shape
    Aflat = A3.reshape(N, ga * d)
    ASig = (A3 @ C) * gamma_a[None, :, None]
    Sy = ASig.reshape(N, -1) @ Aflat.T
    Sy[np.diag_indices(N)] += lam
    chol = _cholesky(Sy)
    # whitened operator W = Lc^{-1} A, so that A^T Sy^{-1} A = W^T W
    W = sla.solve_triangular(chol[0], Aflat, lower=True, check_finite=False)
    V = sla.solve_triangular(chol[0], Y, lower=True, check_finite=False)
    proj = (W.T @ V).reshape(ga, d, Y.shape[1])
    W3 = np.ascontiguousarray(W.reshape(N, ga, d).transpose(1, 2, 0))
    quad = W3 @ W3.transpose(0, 2, 1)
    gC = gamma_a[:, None, None] * C[None]
    mu = gC @ proj
    covs = gC - gC @ quad @ gC
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    return _Moments(mu, covs, proj, quad, chol)


def _moments_with_retry(A3, Y, gamma_a, C, lam):
    try:
        return _moments(A3, Y, gamma_a, C, lam), lam
    except ConditioningError:
        lam = 10.0 * lam if lam > 0 else 1e-12
        return _moments(A3, Y, gamma_a, C, lam), lam


def posterior_moments(A, y, state: SbState, lam: float) -> PosteriorMoments:
    """Gaussian posterior of ``x`` given ``y = A x + v`` under the block prior.

    Returns the posterior mean (zeros on pruned blocks) and the diagonal
    ``d x d`` blocks of the posterior covariance.
    """
    A = _matrix_of(A)
    y = np.asarray(y, dtype=float)
    vec = y.ndim == 1
    Y = y[:, None] if vec else y
    part = state.partition
    N, M = A.shape
    if part.size != M:
        raise DimensionError(f"state covers {part.size} coefficients, A has {M} columns")
    if Y.shape[0] != N:
        raise DimensionError(f"y has {Y.shape[0]} rows, A has {N}")
    g, d = part.num_blocks, part.block_len
    act = np.flatnonzero(state.active)
    mean = np.zeros((g, d, Y.shape[1]))
    covs = np.zeros((g, d, d))
    if act.size:
        A3 = A.reshape(N, g, d)[:, act, :]
        mom = _moments(A3, Y, state.gamma[act], state.intra_corr, lam)
        mean[act] = mom.mu
        covs[act] = mom.covs
    mean = mean.reshape(M, -1)
    return PosteriorMoments(mean[:, 0] if vec else mean, covs)


def evidence_objective(A, y, state: SbState, lam: float) -> float:
    """Negative log evidence ``-log N(y; 0, lam I + A Sigma0 A^T)``."""
    A = _matrix_of(A)
    y = np.asarray(y, dtype=float).ravel()
    part = state.partition
    N = A.shape[0]
    Sy = lam * np.eye(N)
    g, d = part.num_blocks, part.block_len
    A3 = A.reshape(N, g, d)
    for i in np.flatnonzero(state.active):
        Ai = A3[:, i, :]
        Sy += state.gamma[i] * Ai @ state.intra_corr @ Ai.T
    c, low = _cholesky(Sy)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    quad = y @ sla.cho_solve((c, low), y)
    return 0.5 * (logdet + quad + N * np.log(2 * np.pi))


def _learn(A, Y, partition: BlockPartition, config: SolverConfig, lam: float,
           rule: str = "em", learn_inter: bool = False):
    """Hyperparameter loop for one column group.  Returns (X, info dict)."""
    N, M = A.shape
    Lp = Y.shape[1]
    g, d = partition.num_blocks, partition.block_len
    scale = np.sqrt(np.mean(Y ** 2))
    info = {"iterations": 1, "converged": True, "active": np.ones(g, dtype=bool),
            "trace": [], "all_pruned": False, "lam_inflated": False}
    if scale == 0.0:
        return np.zeros((M, Lp)), info
    Yn = Y / scale
    lam_n = lam / scale ** 2
    prune_n = config.prune_threshold / scale ** 2

    A3_all = A.reshape(N, g, d)
    gamma = np.ones(g)
    active = np.ones(g, dtype=bool)
    C = np.eye(d)
    r_intra = 0.0
    BL = np.eye(Lp)
    r_inter = 0.0
    X = np.zeros((g, d, Lp))
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        act = np.flatnonzero(active)
        if config.record_trace:
            info["trace"].append({"gamma": gamma * scale ** 2, "active": active.copy(),
                                  "intra_r": r_intra, "inter_r": r_inter})
        A3 = A3_all[:, act, :]
        gamma_a = gamma[act]
        if Lp > 1:
            R = np.linalg.cholesky(BL)
            Yw = sla.solve_triangular(R, Yn.T, lower=True).T
        else:
            R = None
            Yw = Yn
        mom, lam_used = _moments_with_retry(A3, Yw, gamma_a, C, lam_n)
        if lam_used != lam_n:
            info["lam_inflated"] = True
        mu = mom.mu if R is None else mom.mu @ R.T
        X[:] = 0.0
        X[act] = mu

        # second moments of whitened blocks, averaged over columns
        S = mom.covs + (mom.mu @ np.swapaxes(mom.mu, 1, 2)) / Lp
        C_used = C
        if config.learn_intra_corr and d > 1:
            r_intra = ar1_coefficient(np.mean(S / gamma_a[:, None, None], axis=0))
            C = ar1_toeplitz(r_intra, d)
        Cinv = np.linalg.inv(C)

        if rule == "em":
            new_a = np.einsum("ab,gba->g", Cinv, S) / d
        elif rule == "bo":
            # bound built around the correlation that produced the moments
            num = np.einsum("gal,ab,gbl->g", mom.proj, C_used, mom.proj) / Lp
            den = np.einsum("gab,ba->g", mom.quad, C_used)
            with np.errstate(divide="ignore", invalid="ignore"):
                new_a = gamma_a * np.sqrt(np.maximum(num, 0.0) / den)
            new_a = np.where(np.isfinite(new_a), new_a, 0.0)
        else:
            raise ValueError(f"unknown learning rule {rule!r}")

        if learn_inter and Lp > 1:
            est = np.einsum("gal,ab,gbm->lm", mu, Cinv, mu / gamma_a[:, None, None]) / (d * act.size)
            r_inter = ar1_coefficient(est)
            BL = ar1_toeplitz(r_inter, Lp)

        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.abs(new_a - gamma_a) / gamma_a
        rel = np.where(np.isfinite(rel), rel, np.inf)
        gamma = np.zeros(g)
        gamma[act] = new_a
        keep = gamma >= prune_n
        if prune_n == 0.0:
            keep &= gamma > 0.0
        active = active & keep
        gamma[~active] = 0.0
        if not active.any():
            info["all_pruned"] = True
            converged = True
            break
        if np.max(rel) < config.tol:
            converged = True
            break

    info["iterations"] = it
    info["converged"] = converged
    info["active"] = active
    info["intra_r"] = r_intra
    info["inter_r"] = r_inter
    info["gamma"] = gamma * scale ** 2
    if config.record_trace:
        info["trace"].append({"gamma": gamma * scale ** 2, "active": active.copy(),
                              "intra_r": r_intra, "inter_r": r_inter})
    X[~active] = 0.0
    return X.reshape(M, Lp) * scale, info


def _check(partition, M):
    if partition.size != M:
        raise DimensionError(f"partition covers {partition.size} coefficients, A has {M} columns")


def _smv(problem: SmvProblem, partition, config, rule):
    A = problem.matrix
    _check(partition, A.shape[1])
    t0 = time.perf_counter()
    X, info = _learn(A, problem.y[:, None], partition, config, problem.noise_var, rule)
    elapsed = time.perf_counter() - t0
    return RecoveryResult(
        estimate=X[:, 0],
        iterations=info["iterations"],
        converged=info["converged"],
        runtime_seconds=elapsed,
        active_blocks=np.flatnonzero(info["active"]),
        diagnostics={"all_pruned": info["all_pruned"], "lam_inflated": info["lam_inflated"],
                     "trace": info["trace"], "gamma": info.get("gamma")},
    )


def bsbl_em(problem: SmvProblem, partition: BlockPartition,
            config: SolverConfig = SolverConfig()) -> RecoveryResult:
    """Block sparse Bayesian learning with expectation-maximisation updates."""
    return _smv(problem, partition, config, "em")


def bsbl_bo(problem: SmvProblem, partition: BlockPartition,
            config: SolverConfig = SolverConfig()) -> RecoveryResult:
    """BSBL with the bound-optimisation ``gamma`` rule.

    Identical to :func:`bsbl_em` except for the update
    ``gamma_i <- gamma_i * ||C^{1/2} A_i^T Sy^{-1} y|| / sqrt(tr(A_i^T Sy^{-1} A_i C))``.
    """
    return _smv(problem, partition, config, "bo")


def _mmv(problem: MmvProblem, partition, config, group, rule, learn_inter):
    A = problem.matrix
    _check(partition, A.shape[1])
    Y = problem.Y
    L = Y.shape[1]
    check_divides(L, group)
    t0 = time.perf_counter()
    X = np.zeros((A.shape[1], L))
    iters, conv, union = 0, True, np.zeros(partition.num_blocks, dtype=bool)
    groups = []
    for start in range(0, L, group):
        cols = slice(start, start + group)
        Xg, info = _learn(A, Y[:, cols], partition, config, problem.noise_var, rule, learn_inter)
        X[:, cols] = Xg
        iters = max(iters, info["iterations"])
        conv = conv and info["converged"]
        union |= info["active"]
        groups.append(info)
    elapsed = time.perf_counter() - t0
    return RecoveryResult(
        estimate=X,
        iterations=iters,
        converged=conv,
        runtime_seconds=elapsed,
        active_blocks=np.flatnonzero(union),
        diagnostics={"groups": groups,
                     "all_pruned": all(gi["all_pruned"] for gi in groups)},
    )


def st_sbl(problem: MmvProblem, partition: BlockPartition,
           config: SolverConfig = SolverConfig()) -> RecoveryResult:
    """Spatiotemporal SBL on column groups of ``config.column_block_size``.

    Groups are solved independently; inside a group the inter-column
    correlation is learnt (when ``learn_inter_corr``) and whitened out.
    """
    return _mmv(problem, partition, config, config.column_block_size, "em",
                config.learn_inter_corr)


def t_msbl(problem: MmvProblem, config: SolverConfig = SolverConfig()) -> RecoveryResult:
    """Element-wise MMV SBL compensating the correlation between columns."""
    M = problem.matrix.shape[1]
    L = problem.Y.shape[1]
    cfg = replace(config, learn_intra_corr=False)
    return _mmv(problem, make_block_partition(M, 1), cfg, L, "em", config.learn_inter_corr)
