"""Black-box evolutionary evasion in feature space.

The attacker sees only ``score(features) -> [0, 1]``. Per malware sample a
population of perturbations (restricted to a feature mask) evolves by
Gaussian mutation and truncation selection: the better half survives and
each survivor contributes one mutated child, so the best candidate is never
lost.

Modes:

``additive_only``
    deltas are clipped to be non-negative (content can be added, never
    removed), mirroring section injection.
``shift_like``
    deltas of either sign on a separate mask, mirroring content shifting.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

MODES = ("additive_only", "shift_like")


@dataclass
class AttackConfig:
    manipulable_mask: np.ndarray
    mode: str = "additive_only"
    population: int = 20
    iterations: int = 50
    mutation_scale: float = 0.5
    evasion_threshold: float = 0.5
    max_delta: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        self.manipulable_mask = np.asarray(self.manipulable_mask, dtype=bool)
        if not self.manipulable_mask.any():
            raise ValueError("the manipulable mask selects no features")
        if self.mode not in MODES:
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.mutation_scale <= 0:
            raise ValueError("mutation_scale must be positive")


@dataclass
class SampleResult:
    index: int
    initial_score: float
    final_score: float
    evaded: bool
    iterations_used: int
    best_history: list
    final_features: np.ndarray = field(repr=False)


@dataclass
class AttackReport:
    samples: list
    threshold: float

    @property
    def baseline_detection_rate(self) -> float:
        return float(np.mean([s.initial_score >= self.threshold for s in self.samples]))

    @property
    def detection_rate(self) -> float:
        return float(np.mean([s.final_score >= self.threshold for s in self.samples]))

    def summary(self) -> dict:
        return {
            "n_samples": len(self.samples),
            "threshold": self.threshold,
            "baseline_detection_rate": self.baseline_detection_rate,
            "post_attack_detection_rate": self.detection_rate,
            "evaded": int(sum(s.evaded for s in self.samples)),
        }

    def save(self, csv_path, json_path) -> None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "initial_score", "final_score", "evaded", "iterations_used"])
            for s in self.samples:
                w.writerow([s.index, repr(s.initial_score), repr(s.final_score), int(s.evaded), s.iterations_used])
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, sort_keys=True, indent=2)


def _constrain(delta: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    delta = np.where(cfg.manipulable_mask, delta, 0.0)
    if cfg.mode == "additive_only":
        delta = np.maximum(delta, 0.0)
    if cfg.max_delta is not None:
        delta = np.clip(delta, -cfg.max_delta, cfg.max_delta)
    return delta


def attack_one(score: Callable, x: np.ndarray, cfg: AttackConfig, index: int = 0) -> SampleResult:
    rng = np.random.default_rng([cfg.seed, index])
    x = np.asarray(x, dtype=np.float64)
    initial = float(score(x[None, :])[0])
    pop = np.zeros((cfg.population, x.size))
    fitness = np.full(cfg.population, initial)
    history = [initial]
    used = 0
    n_keep = cfg.population // 2
    n_child = cfg.population - n_keep
    while used < cfg.iterations and fitness.min() >= cfg.evasion_threshold:
        used += 1
        order = np.argsort(fitness, kind="stable")
        survivors, surv_fit = pop[order[:n_keep]], fitness[order[:n_keep]]
        parents = survivors[np.arange(n_child) % n_keep]
        noise = rng.normal(scale=cfg.mutation_scale, size=parents.shape)
        children = _constrain(parents + noise, cfg)
        child_fit = np.asarray(score(x[None, :] + children), dtype=np.float64)
        pop = np.concatenate([survivors, children])
        fitness = np.concatenate([surv_fit, child_fit])
        history.append(float(fitness.min()))
    best = int(np.argmin(fitness))
    final = float(fitness[best])
    return SampleResult(index, initial, final, final < cfg.evasion_threshold, used, history, x + pop[best])


def attack(score: Callable, samples: np.ndarray, cfg: AttackConfig, threads: int = 1) -> AttackReport:
    """Attack every row of ``samples`` (malware feature vectors)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or len(samples) == 0:
        raise ValueError("attack needs a non-empty 2-D array of malware samples")
    if samples.shape[1] != cfg.manipulable_mask.size:
        raise ValueError("mask length does not match the feature dimension")
    jobs = range(len(samples))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(lambda i: attack_one(score, samples[i], cfg, i), jobs))
    else:
        results = [attack_one(score, samples[i], cfg, i) for i in jobs]
    return AttackReport(results, cfg.evasion_threshold)


def load_mask(path, d: int) -> np.ndarray:
    """Mask from a file of newline-delimited feature indices."""
    mask = np.zeros(d, dtype=bool)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                idx = int(line)
                if not 0 <= idx < d:
                    raise ValueError(f"feature index {idx} out of range for d={d}")
                mask[idx] = True
    return mask


def default_masks(d: int):
    """Disjoint default masks for synthetic data: first and second quarter."""
    q = max(d // 4, 1)
    additive = np.zeros(d, dtype=bool)
    shift = np.zeros(d, dtype=bool)
    additive[:q] = True
    shift[q:2 * q] = True
    return additive, shift
