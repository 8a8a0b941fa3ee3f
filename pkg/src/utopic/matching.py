"""Soft correspondences by slack Sinkhorn, hard ones by exact linear assignment."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import diffmath as dm
from .diffmath import DimensionError, Tensor


def affinity(fp, fq, w) -> Tensor:
    """A[i, j] = fp_i^T W fq_j."""
    fp, fq, w = dm.tensor(fp), dm.tensor(fq), dm.tensor(w)
    if fp.shape[1] != w.shape[0] or fq.shape[1] != w.shape[1]:
        raise DimensionError(f"affinity: features {fp.shape}, {fq.shape} vs W {w.shape}")
    return dm.matmul(dm.matmul(fp, w), dm.transpose(fq))


def pad_slack(a, slack_init: float = 0.0) -> Tensor:
    a = dm.tensor(a)
    n, m = a.shape
    col = Tensor(np.full((n, 1), slack_init))
    row = Tensor(np.full((1, m + 1), slack_init))
    return dm.concat([dm.concat([a, col], axis=1), row], axis=0)


def sinkhorn_log(log_alpha, iters: int = 5) -> Tensor:
    """Alternating log-domain normalisation of an (N+1) x (M+1) slack-padded matrix.

    Rows 0..N-1 are normalised over all M+1 columns, then columns 0..M-1 over
    all N+1 rows; the slack row and slack column are never normalised.
    """
    if iters < 1:
        raise dm.ContractError("sinkhorn needs at least one iteration")
    la = dm.tensor(log_alpha)
    n, m = la.shape[0] - 1, la.shape[1] - 1
    for _ in range(iters):
        top = la[:n]
        la = dm.concat([top - dm.logsumexp(top, axis=1), la[n:]], axis=0)
        left = la[:, :m]
        la = dm.concat([left - dm.logsumexp(left, axis=0), la[:, m:]], axis=1)
    return la


def sinkhorn_slack(a, iters: int = 5, slack_init: float = 0.0) -> Tensor:
    """Soft slack correspondence matrix (N+1) x (M+1) from an N x M score matrix."""
    return dm.exp(sinkhorn_log(pad_slack(a, slack_init), iters))


def marginal_error(c: np.ndarray) -> float:
    """Largest deviation of a non-slack row or column sum from 1."""
    c = np.asarray(c.data if isinstance(c, Tensor) else c)
    n, m = c.shape[0] - 1, c.shape[1] - 1
    rows = np.abs(c[:n].sum(axis=1) - 1.0)
    cols = np.abs(c[:, :m].sum(axis=0) - 1.0)
    return float(max(rows.max(initial=0.0), cols.max(initial=0.0)))


def lap_solve(c_soft) -> np.ndarray:
    """Exact max-profit partial assignment on a slack-padded matrix.

    A matched pair (i, j) earns c[i, j]; an unmatched row i earns its slack
    entry c[i, M]; an unmatched column j earns c[N, j]. Solved as a square
    (N+M) x (M+N) problem. Returns the binary (N+1) x (M+1) hard matrix.
    """
    c = np.asarray(c_soft.data if isinstance(c_soft, Tensor) else c_soft, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ValueError("lap_solve needs finite scores")
    n, m = c.shape[0] - 1, c.shape[1] - 1
    size = n + m
    forbid = -4.0 * (size + 1) * (np.abs(c).max() + 1.0)
    profit = np.full((size, size), forbid)
    profit[:n, :m] = c[:n, :m]
    profit[np.arange(n), m + np.arange(n)] = c[:n, m]          # row i -> its own slack
    profit[n + np.arange(m), np.arange(m)] = c[n, :m]          # column j left unmatched
    profit[n:, m:] = 0.0                                       # dummy to dummy
    rows, cols = linear_sum_assignment(profit, maximize=True)
    hard = np.zeros((n + 1, m + 1))
    for r, k in zip(rows, cols):
        if r < n and k < m:
            hard[r, k] = 1.0
    hard[:n, m] = 1.0 - hard[:n, :m].sum(axis=1)
    hard[n, :m] = 1.0 - hard[:n, :m].sum(axis=0)
    return hard


def assignment_objective(c_soft, hard: np.ndarray) -> float:
    """Profit of a hard slack matrix under the convention of :func:`lap_solve`."""
    c = np.asarray(c_soft.data if isinstance(c_soft, Tensor) else c_soft, dtype=np.float64)
    n, m = c.shape[0] - 1, c.shape[1] - 1
    return float((hard[:n, :m] * c[:n, :m]).sum() + (hard[:n, m] * c[:n, m]).sum()
                 + (hard[n, :m] * c[n, :m]).sum())


def hard_pairs(hard: np.ndarray) -> list[tuple[int, int]]:
    n, m = hard.shape[0] - 1, hard.shape[1] - 1
    ii, jj = np.nonzero(hard[:n, :m] > 0.5)
    return list(zip(ii.tolist(), jj.tolist()))
