"""Pairwise metric losses and the detection loss.

Every loss returns ``(value, gradient)`` with the gradient taken with respect
to the batch embeddings (or head scores for BCE). Pair losses average over
all unordered pairs of the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .capability import jaccard
from .softrank import SoftRankConfig, hard_rank, soft_rank

LOSS_KINDS = ("contrastive", "spearman", "mixed", "bce", "multi_objective")
BCE_CLAMP = 1e-12


@dataclass(frozen=True)
class PairSet:
    """All unordered pairs ``i < j`` of a batch, row-major."""

    i: np.ndarray
    j: np.ndarray
    same_cluster: np.ndarray
    jaccard: np.ndarray

    def __len__(self) -> int:
        return len(self.i)

    @property
    def degenerate(self) -> bool:
        """True when every ground-truth Jaccard is identical."""
        return len(self.jaccard) == 0 or bool(np.all(self.jaccard == self.jaccard[0]))


def all_pairs(n: int):
    return np.triu_indices(n, k=1)


def make_pairs(cluster_ids: Sequence, capabilities: Sequence) -> PairSet:
    """Pairs for a batch given per-row cluster ids and capability sets."""
    n = len(cluster_ids)
    if len(capabilities) != n:
        raise ValueError("cluster_ids and capabilities differ in length")
    i, j = all_pairs(n)
    cid = np.asarray(cluster_ids, dtype=object)
    same = cid[i] == cid[j]
    cache = {}
    jac = np.empty(len(i))
    for k, (a, b) in enumerate(zip(i, j)):
        key = (capabilities[a], capabilities[b])
        if key not in cache:
            cache[key] = jaccard(*key)
        jac[k] = cache[key]
    return PairSet(i, j, same.astype(bool), jac)


def _pair_geometry(embeddings, pairs: PairSet):
    diff = embeddings[pairs.i] - embeddings[pairs.j]
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    unit = np.zeros_like(diff)
    nz = dist > 0
    unit[nz] = diff[nz] / dist[nz, None]
    return dist, unit


def _scatter(embeddings, pairs: PairSet, coef, unit) -> np.ndarray:
    """Gradient of ``sum_k coef_k * D_k`` with respect to the embeddings."""
    g = coef[:, None] * unit
    out = np.zeros_like(embeddings)
    np.add.at(out, pairs.i, g)
    np.add.at(out, pairs.j, -g)
    return out


def contrastive_loss(embeddings, pairs: PairSet, margin: float = 10.0):
    """Mean of ``Y*D + (1-Y)*max(margin - D, 0)`` over pairs.

    At ``D = 0`` the zero subgradient is used.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] < 2:
        raise ValueError("contrastive loss needs at least 2 embeddings")
    if len(pairs) == 0:
        return 0.0, np.zeros_like(embeddings)
    dist, unit = _pair_geometry(embeddings, pairs)
    y = pairs.same_cluster.astype(np.float64)
    hinge = np.maximum(margin - dist, 0.0)
    loss = float(np.mean(y * dist + (1.0 - y) * hinge))
    coef = np.where(pairs.same_cluster, 1.0, np.where(dist < margin, -1.0, 0.0)) / len(pairs)
    return loss, _scatter(embeddings, pairs, coef, unit)


def pearson_with_grad(x, target):
    """Pearson correlation of ``x`` with ``target`` and its gradient in ``x``.

    Returns ``(0.0, zeros)`` when either vector has zero variance.
    """
    a = x - x.mean()
    b = target - target.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0, np.zeros_like(x)
    r = float(a @ b / (na * nb))
    grad = b / (na * nb) - r * a / (na * na)
    return r, grad


def spearman_loss(embeddings, pairs: PairSet, cfg: SoftRankConfig = SoftRankConfig()):
    """``1 - r`` between soft ranks of ``-distance`` and hard ranks of Jaccard.

    A degenerate batch (all Jaccards equal) gives zero loss and gradient;
    callers detect it through ``pairs.degenerate``.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if len(pairs) < 3:
        raise ValueError("spearman loss needs at least 3 pairs")
    if pairs.degenerate:
        return 0.0, np.zeros_like(embeddings)
    dist, unit = _pair_geometry(embeddings, pairs)
    pred_rank, vjp = soft_rank(-dist, cfg)
    r, d_rank = pearson_with_grad(pred_rank, hard_rank(pairs.jaccard))
    # d(1 - r)/d(dist) = -vjp(dr/drank) * d(-dist)/d(dist)
    d_dist = vjp(d_rank)
    return 1.0 - r, _scatter(embeddings, pairs, d_dist, unit)


def spearman_hard(embeddings, pairs: PairSet) -> float:
    """Hard-rank Spearman correlation of ``-distance`` with Jaccard."""
    dist, _ = _pair_geometry(np.asarray(embeddings, dtype=np.float64), pairs)
    return pearson_with_grad(hard_rank(-dist), hard_rank(pairs.jaccard))[0]


def bce_loss(scores, labels):
    """Mean binary cross-entropy; scores are clamped to ``[1e-12, 1 - 1e-12]``."""
    s = np.clip(np.asarray(scores, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    n = len(s)
    loss = float(-np.mean(y * np.log(s) + (1.0 - y) * np.log(1.0 - s)))
    grad = (-(y / s) + (1.0 - y) / (1.0 - s)) / n
    return loss, grad


@dataclass(frozen=True)
class LossConfig:
    kind: str = "contrastive"
    margin: float = 10.0
    spearman_weight: float = 1.0
    bce_weight: float = 1.0
    include_spearman: bool = False
    regularization: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.spearman_weight < 0 or self.bce_weight < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def softrank(self) -> SoftRankConfig:
        return SoftRankConfig(self.regularization)

    @property
    def uses_contrastive(self) -> bool:
        return self.kind in ("contrastive", "mixed", "multi_objective")

    @property
    def uses_spearman(self) -> bool:
        return self.kind in ("spearman", "mixed") or (
            self.kind == "multi_objective" and self.include_spearman
        )

    @property
    def uses_bce(self) -> bool:
        return self.kind in ("bce", "multi_objective")


@dataclass
class LossResult:
    loss: float
    d_embeddings: np.ndarray
    d_scores: Optional[np.ndarray] = None
    terms: dict = None
    spearman_skipped: bool = False


def mixed_loss(embeddings, pairs: Optional[PairSet], cfg: LossConfig, scores=None, labels=None) -> LossResult:
    """Weighted sum of the losses selected by ``cfg.kind``.

    ``spearman`` alone carries weight 1; in ``mixed`` and ``multi_objective``
    it is scaled by ``spearman_weight``. BCE is scaled by ``bce_weight``
    except for ``kind="bce"``.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    total = 0.0
    grad = np.zeros_like(embeddings)
    terms = {}
    skipped = False
    if cfg.uses_contrastive:
        value, g = contrastive_loss(embeddings, pairs, cfg.margin)
        terms["contrastive"] = value
        total += value
        grad += g
    if cfg.uses_spearman:
        weight = 1.0 if cfg.kind == "spearman" else cfg.spearman_weight
        skipped = pairs.degenerate
        value, g = spearman_loss(embeddings, pairs, cfg.softrank)
        terms["spearman"] = value
        total += weight * value
        grad += weight * g
    d_scores = None
    if cfg.uses_bce:
        if scores is None or labels is None:
            raise ValueError(f"loss kind {cfg.kind!r} needs detection scores and labels")
        weight = 1.0 if cfg.kind == "bce" else cfg.bce_weight
        value, g = bce_loss(scores, labels)
        terms["bce"] = value
        total += weight * value
        d_scores = weight * g
    return LossResult(total, grad, d_scores, terms, skipped)
