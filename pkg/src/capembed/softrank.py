"""Differentiable ranking by L2-regularized projection onto the permutahedron.

``soft_rank(v)`` is the Euclidean projection of ``v / eps`` onto the
permutahedron spanned by ``(1, ..., n)``. The projection reduces to an
isotonic regression solved with pool-adjacent-violators, and its Jacobian is
block-diagonal in the PAV solution (one averaging block per pool), which
gives an exact O(n) vector-Jacobian product after the O(n log n) sort.

Ranks are ascending: as ``eps -> 0`` the largest value receives rank ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class SoftRankConfig:
    regularization: float = 1.0
    direction: str = "ascending"

    def __post_init__(self):
        if not self.regularization > 0:
            raise ValueError("regularization must be positive")
        if self.direction != "ascending":
            raise ValueError("only ascending ranks are supported")


def hard_rank(values) -> np.ndarray:
    """Ascending ranks starting at 1; ties share the average of their ranks."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size < 1:
        raise ValueError("hard_rank needs a non-empty vector")
    return rankdata(values, method="average")


def isotonic_decreasing(y: np.ndarray):
    """Solve ``min ||v - y||^2`` subject to ``v[0] >= v[1] >= ... >= v[-1]``.

    Returns the solution and the block sizes of the pooled solution.
    """
    n = len(y)
    sums = np.empty(n)
    sizes = np.empty(n, dtype=np.int64)
    top = -1
    for k in range(n):
        top += 1
        sums[top] = y[k]
        sizes[top] = 1
        # pool while the previous block mean is below the current one
        while top > 0 and sums[top - 1] * sizes[top] < sums[top] * sizes[top - 1]:
            sums[top - 1] += sums[top]
            sizes[top - 1] += sizes[top]
            top -= 1
    sizes = sizes[:top + 1]
    means = sums[:top + 1] / sizes
    return np.repeat(means, sizes), sizes


def _block_center(u: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    means = np.add.reduceat(u, starts) / sizes
    return u - np.repeat(means, sizes)


def soft_rank(values, cfg: SoftRankConfig = SoftRankConfig()):
    """Soft ranks of ``values`` and a vector-Jacobian product.

    Returns ``(ranks, vjp)`` where ``vjp(u)`` gives ``J^T u``. The Jacobian
    is symmetric, so ``vjp`` is also the Jacobian-vector product.
    """
    theta = np.asarray(values, dtype=np.float64)
    if theta.ndim != 1 or theta.size < 2:
        raise ValueError("soft_rank needs a vector of length >= 2")
    if not np.all(np.isfinite(theta)):
        raise ValueError("soft_rank input must be finite")
    n = theta.size
    eps = cfg.regularization
    z = theta / eps
    w = np.arange(n, 0, -1, dtype=np.float64)
    order = np.argsort(-z, kind="stable")
    v, sizes = isotonic_decreasing(z[order] - w)
    ranks = np.empty(n)
    ranks[order] = z[order] - v

    def vjp(u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        out = np.empty(n)
        out[order] = _block_center(u[order], sizes)
        return out / eps

    return ranks, vjp


def soft_rank_values(values, cfg: SoftRankConfig = SoftRankConfig()) -> np.ndarray:
    return soft_rank(values, cfg)[0]
