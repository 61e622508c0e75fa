"""Jaccard similarity and MinHash hard clustering of capability sets.

Hash family (fixed so cluster ids are reproducible across runs):

* ``label_key(s)``   first 8 bytes (little-endian) of BLAKE2b-64 of the UTF-8 label
* ``seed_i``         ``splitmix64(master + (i + 1) * 0x9E3779B97F4A7C15)``
* ``h_i(s)``         ``splitmix64(label_key(s) ^ seed_i)``

All arithmetic is modulo 2**64.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .dataio import Dataset

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
EMPTY_CLUSTER = 0


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def splitmix64(x):
    """splitmix64 finalizer; accepts a Python int or a uint64 array."""
    if isinstance(x, np.ndarray):
        with np.errstate(over="ignore"):
            z = x.astype(np.uint64) + np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            return z ^ (z >> np.uint64(31))
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seeds(master: int, num_perms: int) -> np.ndarray:
    """Per-permutation seeds from one master seed."""
    i = np.arange(1, num_perms + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = np.uint64(master & MASK64) + i * np.uint64(GOLDEN)
    return splitmix64(base)


def label_key(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


def digest64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class MinHasher:
    num_perms: int = 64
    band_count: int = 1
    master_seed: int = 0

    def __post_init__(self):
        if self.num_perms < 1 or self.band_count < 1:
            raise ValueError("num_perms and band_count must be positive")
        if self.num_perms % self.band_count:
            raise ValueError("num_perms must be divisible by band_count")

    @property
    def seeds(self) -> np.ndarray:
        return derive_seeds(self.master_seed, self.num_perms)

    @property
    def rows_per_band(self) -> int:
        return self.num_perms // self.band_count


def minhash_signature(h: MinHasher, labels: Iterable[str]) -> np.ndarray:
    labels = set(labels)
    if not labels:
        raise ValueError("MinHash signature of an empty set is undefined")
    keys = np.array(sorted(label_key(s) for s in labels), dtype=np.uint64)
    hashed = splitmix64(keys[:, None] ^ h.seeds[None, :])
    return hashed.min(axis=0)


def band_keys(h: MinHasher, signature: np.ndarray) -> list:
    r = h.rows_per_band
    return [
        digest64(b.to_bytes(2, "little") + signature[b * r:(b + 1) * r].astype("<u8").tobytes())
        for b in range(h.band_count)
    ]


def split_cluster_id(cluster_id: int, label: str) -> int:
    return digest64(cluster_id.to_bytes(8, "little") + label.encode("utf-8"))


@dataclass(frozen=True)
class CapabilityClusterMap:
    assignments: dict
    split_assignments: dict

    def cluster_of(self, sample_id: str) -> int:
        return self.assignments[sample_id]

    def split_of(self, sample_id: str) -> int:
        return self.split_assignments[sample_id]

    def split_members(self, dataset: Dataset) -> dict:
        """Split cluster id -> list of dataset row indices, in row order."""
        members: dict = {}
        for i, s in enumerate(dataset):
            members.setdefault(self.split_assignments[s.id], []).append(i)
        return members

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for sid, cid in self.assignments.items():
                rec = {"id": sid, "cluster": cid, "split_cluster": self.split_assignments[sid]}
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "CapabilityClusterMap":
        assignments, split = {}, {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                assignments[rec["id"]] = int(rec["cluster"])
                split[rec["id"]] = int(rec["split_cluster"])
        return cls(assignments, split)


def cluster_assign(h: MinHasher, dataset: Dataset) -> CapabilityClusterMap:
    """Hard-cluster samples by MinHash signature.

    With one band the cluster id is a digest of the whole signature. With
    several bands, samples sharing any band bucket are merged (union-find) and
    the component takes the smallest first-band key of its members.
    Capability-free samples share the reserved ``EMPTY_CLUSTER`` id.
    """
    keys_by_sample = {}
    for s in dataset:
        if s.capabilities:
            keys_by_sample[s.id] = band_keys(h, minhash_signature(h, s.capabilities))

    if h.band_count == 1:
        cluster = {sid: keys[0] for sid, keys in keys_by_sample.items()}
    else:
        cluster = _merge_bands(keys_by_sample)

    assignments, split = {}, {}
    for s in dataset:
        cid = cluster.get(s.id, EMPTY_CLUSTER)
        assignments[s.id] = cid
        split[s.id] = split_cluster_id(cid, s.label)
    return CapabilityClusterMap(assignments, split)


def _merge_bands(keys_by_sample: dict) -> dict:
    parent = {sid: sid for sid in keys_by_sample}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    owner = {}
    for sid, keys in keys_by_sample.items():
        for b, key in enumerate(keys):
            other = owner.setdefault((b, key), sid)
            if other != sid:
                ra, rb = find(sid), find(other)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)

    label = {}
    for sid, keys in keys_by_sample.items():
        root = find(sid)
        label[root] = min(label.get(root, keys[0]), keys[0])
    return {sid: label[find(sid)] for sid in keys_by_sample}
