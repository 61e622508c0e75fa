"""Cluster-balanced epoch batching over label-split capability clusters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capability import CapabilityClusterMap
from .dataio import Dataset


@dataclass(frozen=True)
class Batch:
    clusters: tuple
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)


def build_epoch(cmap: CapabilityClusterMap, dataset: Dataset, C: int, M: int, seed) -> BatchPlan:
    """One epoch of batches, ``C`` split clusters by ``M`` samples each.

    Split clusters are shuffled once and consumed without replacement, so
    every split cluster appears in exactly one batch; the last batch may hold
    fewer than ``C`` clusters. Samples inside a cluster are drawn with
    replacement.
    """
    if C < 2 or M < 1:
        raise ValueError("need C >= 2 and M >= 1")
    if len(dataset) == 0:
        raise ValueError("cannot batch an empty dataset")
    members = cmap.split_members(dataset)
    if len(members) < C:
        raise ValueError(f"only {len(members)} split clusters, fewer than C={C}")

    rng = np.random.default_rng(seed)
    ids = sorted(members)
    order = rng.permutation(len(ids))
    batches = []
    for start in range(0, len(ids), C):
        chosen = tuple(ids[k] for k in order[start:start + C])
        picks = [np.asarray(members[c])[rng.integers(0, len(members[c]), size=M)] for c in chosen]
        batches.append(Batch(chosen, np.concatenate(picks)))
    return BatchPlan(tuple(batches))
