"""Dataset records, newline-delimited JSON storage, scaling and synthetic data."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

GOODWARE = "goodware"
MALWARE = "malware"
LABELS = (GOODWARE, MALWARE)
STD_FLOOR = 1e-8


class DataFormatError(ValueError):
    """Raised for malformed or inconsistent dataset files."""


@dataclass(frozen=True)
class Sample:
    id: str
    features: np.ndarray
    label: str
    family: Optional[str] = None
    tags: frozenset = frozenset()
    capabilities: frozenset = frozenset()

    @property
    def is_malware(self) -> bool:
        return self.label == MALWARE

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.family == other.family
            and self.tags == other.tags
            and self.capabilities == other.capabilities
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "features": [float(v) for v in self.features],
            "label": self.label,
            "family": self.family,
            "tags": sorted(self.tags),
            "capabilities": sorted(self.capabilities),
        }


@dataclass(frozen=True)
class Dataset:
    samples: tuple
    split: str
    d: int

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise DataFormatError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if len(s.features) != self.d:
                raise DataFormatError(
                    f"sample {s.id!r} has {len(s.features)} features, expected {self.d}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def ids(self) -> list:
        return [s.id for s in self.samples]

    def feature_matrix(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.d))
        return np.stack([s.features for s in self.samples])

    def detection_labels(self) -> np.ndarray:
        return np.array([1 if s.is_malware else 0 for s in self.samples], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), self.split, self.d)


def make_sample(
    id: str,
    features: Sequence[float],
    label: str,
    family: Optional[str] = None,
    tags: Iterable[str] = (),
    capabilities: Iterable[str] = (),
) -> Sample:
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 1:
        raise DataFormatError(f"features of {id!r} must be a flat vector")
    if not np.all(np.isfinite(arr)):
        raise DataFormatError(f"non-finite feature value in {id!r}")
    if label not in LABELS:
        raise DataFormatError(f"unknown label {label!r} for {id!r}")
    arr.setflags(write=False)
    return Sample(id, arr, label, family, frozenset(tags), frozenset(capabilities))


def _parse_record(obj: dict, lineno: int) -> Sample:
    if not isinstance(obj, dict):
        raise DataFormatError(f"line {lineno}: record is not an object")
    for key in ("id", "features", "label"):
        if key not in obj:
            raise DataFormatError(f"line {lineno}: missing key {key!r}")
    try:
        return make_sample(
            str(obj["id"]),
            obj["features"],
            obj["label"],
            obj.get("family"),
            obj.get("tags") or (),
            obj.get("capabilities") or (),
        )
    except (DataFormatError, TypeError, ValueError) as exc:
        raise DataFormatError(f"line {lineno}: {exc}") from exc


def load_dataset(path, split: str = "train") -> Dataset:
    """Read a newline-delimited JSON dataset file.

    Blank lines are ignored. Errors name the offending (1-based) line.
    """
    samples = []
    d = None
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"line {lineno}: malformed record ({exc.msg})") from exc
            sample = _parse_record(obj, lineno)
            if d is None:
                d = len(sample.features)
            elif len(sample.features) != d:
                raise DataFormatError(f"inconsistent feature length at line {lineno}")
            if sample.id in seen:
                raise DataFormatError(f"duplicate id {sample.id!r} at line {lineno}")
            seen.add(sample.id)
            samples.append(sample)
    return Dataset(tuple(samples), split, d or 0)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset.samples:
            fh.write(json.dumps(s.to_record()) + "\n")


@dataclass(frozen=True)
class StandardScaler:
    mean: np.ndarray
    std: np.ndarray

    @property
    def d(self) -> int:
        return len(self.mean)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d:
            raise ValueError(f"expected {self.d} features, got {x.shape[-1]}")
        return (x - self.mean) / self.std

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"mean": self.mean.tolist()}) + "\n")
            fh.write(json.dumps({"std": self.std.tolist()}) + "\n")

    @classmethod
    def load(cls, path) -> "StandardScaler":
        rec = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec.update(json.loads(line))
        return cls(np.asarray(rec["mean"], dtype=np.float64), np.asarray(rec["std"], dtype=np.float64))


def fit_scaler(train: Dataset) -> StandardScaler:
    """Per-dimension mean and population std, std floored at ``STD_FLOOR``."""
    if len(train) == 0:
        raise ValueError("cannot fit a scaler on an empty dataset")
    x = train.feature_matrix()
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return StandardScaler(mean, std)


def transform(scaler: StandardScaler, features) -> np.ndarray:
    return scaler.transform(features)


@dataclass
class GeneratorConfig:
    """Planted-archetype generator settings.

    Each archetype is a capability template drawn from a vocabulary of
    ``n_capabilities`` labels. Features are ``indicators @ mixing + noise``
    where ``mixing`` is a fixed random matrix, so capability overlap is
    recoverable from the features.
    """

    n_archetypes: int = 10
    samples_per_archetype: int = 100
    d: int = 64
    n_capabilities: int = 64
    caps_per_archetype: int = 12
    families_per_class: int = 5
    malware_fraction: float = 0.5
    noise: float = 0.1
    flip_prob: float = 0.005
    n_tags: int = 6
    test_fraction: float = 0.3

    def validate(self) -> None:
        if self.n_archetypes < 2:
            raise ValueError("need at least 2 archetypes")
        if self.samples_per_archetype < 1:
            raise ValueError("samples_per_archetype must be >= 1")
        if self.d < 1 or self.n_capabilities < 1:
            raise ValueError("d and n_capabilities must be positive")
        if not 1 <= self.caps_per_archetype <= self.n_capabilities:
            raise ValueError("caps_per_archetype must lie in [1, n_capabilities]")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        if self.families_per_class < 1:
            raise ValueError("families_per_class must be >= 1")

    @classmethod
    def from_dict(cls, obj: dict) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class Archetype:
    index: int
    capabilities: frozenset
    label: str
    family: Optional[str]
    tags: frozenset = field(default_factory=frozenset)


def capability_name(i: int) -> str:
    return f"cap_{i:03d}"


def make_archetypes(cfg: GeneratorConfig, rng: np.random.Generator) -> list:
    n_mal = int(round(cfg.n_archetypes * cfg.malware_fraction))
    n_mal = min(max(n_mal, 1), cfg.n_archetypes - 1)
    labels = [MALWARE] * n_mal + [GOODWARE] * (cfg.n_archetypes - n_mal)
    archetypes = []
    for k, label in enumerate(labels):
        caps = rng.choice(cfg.n_capabilities, size=cfg.caps_per_archetype, replace=False)
        if label == MALWARE:
            family = f"family_{k % cfg.families_per_class:02d}"
            tags = frozenset(f"tag_{t}" for t in range(cfg.n_tags) if rng.random() < 0.5)
        else:
            family = None
            tags = frozenset()
        archetypes.append(
            Archetype(k, frozenset(capability_name(int(c)) for c in caps), label, family, tags)
        )
    return archetypes


def generate_synthetic(cfg: GeneratorConfig, seed: int):
    """Generate ``(train, test)`` datasets of planted capability archetypes."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    archetypes = make_archetypes(cfg, rng)
    mixing = rng.normal(size=(cfg.n_capabilities, cfg.d))
    vocab = [capability_name(i) for i in range(cfg.n_capabilities)]

    train, test = [], []
    n_test = int(math.floor(cfg.samples_per_archetype * cfg.test_fraction))
    for arch in archetypes:
        base = np.array([name in arch.capabilities for name in vocab])
        flips = rng.random((cfg.samples_per_archetype, cfg.n_capabilities)) < cfg.flip_prob
        indicators = base[None, :] ^ flips
        noise = rng.normal(scale=cfg.noise, size=(cfg.samples_per_archetype, cfg.d))
        feats = indicators.astype(np.float64) @ mixing + noise
        for j in range(cfg.samples_per_archetype):
            caps = frozenset(v for v, on in zip(vocab, indicators[j]) if on)
            sample = make_sample(
                f"a{arch.index:02d}_s{j:04d}",
                feats[j],
                arch.label,
                arch.family,
                arch.tags,
                caps,
            )
            (test if j < n_test else train).append(sample)
    return (
        Dataset(tuple(train), "train", cfg.d),
        Dataset(tuple(test), "test", cfg.d),
    )


def archetype_of(sample_id: str) -> int:
    """Recover the archetype index encoded in a synthetic sample id."""
    return int(sample_id.split("_", 1)[0][1:])
