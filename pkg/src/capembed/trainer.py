"""Training loops: metric training, detection pretraining, joint fine-tuning."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .capability import CapabilityClusterMap
from .dataio import Dataset, StandardScaler, fit_scaler
from .losses import LossConfig, make_pairs, mixed_loss
from .nn import (
    REFERENCE_HIDDEN,
    DetectorNetwork,
    EmbeddingNetwork,
    append_head,
    embedding_specs,
    xavier_init,
)
from .sampler import build_epoch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 30
    lr: float = 0.001
    C: int = 20
    M: int = 4
    seed: int = 0
    normalize_embeddings: bool = False
    embedding_dim: int = 32
    hidden_dims: tuple = REFERENCE_HIDDEN
    dropout_p: float = 0.1
    pretrain_epochs: int = 30
    pretrain_batch_size: int = 80

    def __post_init__(self):
        if self.epochs < 1 or self.pretrain_epochs < 0:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden_dims"] = list(self.hidden_dims)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        loss = obj.pop("loss", {})
        if isinstance(loss, dict):
            loss_known = {f.name for f in fields(LossConfig)}
            if set(loss) - loss_known:
                raise ValueError(f"unknown loss config keys: {sorted(set(loss) - loss_known)}")
            loss = LossConfig(**loss)
        return cls(loss=loss, **obj)

    def network(self, d: int) -> EmbeddingNetwork:
        specs = embedding_specs(d, self.hidden_dims, self.embedding_dim, self.dropout_p)
        return xavier_init(specs, self.seed, normalize=self.normalize_embeddings)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def losses(self) -> list:
        return [r["loss"] for r in self.records]

    @property
    def skipped(self) -> int:
        return sum(1 for r in self.records if r["skipped"])

    def epoch_means(self) -> list:
        by_epoch: dict = {}
        for r in self.records:
            by_epoch.setdefault(r["epoch"], []).append(r["loss"])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")


def _scaled(dataset: Dataset, scaler: Optional[StandardScaler]) -> np.ndarray:
    scaler = scaler or fit_scaler(dataset)
    return scaler.transform(dataset.feature_matrix())


def _run_metric_epochs(model, x, dataset, cmap, cfg, checkpoint_dir, phase):
    detector = isinstance(model, DetectorNetwork)
    split_ids = [cmap.split_of(s.id) for s in dataset]
    caps = [s.capabilities for s in dataset]
    labels = dataset.detection_labels()
    trace = TrainLog()
    start = time.perf_counter()
    model.train()
    for epoch in range(cfg.epochs):
        plan = build_epoch(cmap, dataset, cfg.C, cfg.M, seed=[cfg.seed, epoch])
        for b, batch in enumerate(plan):
            rows = batch.indices
            pairs = make_pairs([split_ids[r] for r in rows], [caps[r] for r in rows])
            if len(rows) < 2 or (cfg.loss.uses_spearman and len(pairs) < 3):
                trace.records.append(_record(phase, epoch, b, len(rows), 0.0, {}, True))
                continue
            if detector:
                emb, scores, tape = model.forward(x[rows])
                res = mixed_loss(emb, pairs, cfg.loss, scores, labels[rows])
                grads = model.backward(tape, res.d_embeddings, res.d_scores)
            else:
                emb, tape = model.forward(x[rows])
                res = mixed_loss(emb, pairs, cfg.loss)
                grads = model.backward(tape, res.d_embeddings)
            model.sgd_step(grads, cfg.lr)
            trace.records.append(
                _record(phase, epoch, b, len(rows), res.loss, res.terms, res.spearman_skipped)
            )
        if checkpoint_dir is not None:
            model.save(Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}.npz")
        log.info("%s epoch %d mean loss %.6f", phase, epoch + 1, trace.epoch_means()[-1])
    trace.wall_clock = time.perf_counter() - start
    return trace


def _record(phase, epoch, batch, size, loss, terms, skipped) -> dict:
    return {
        "phase": phase,
        "epoch": epoch,
        "batch": batch,
        "size": int(size),
        "loss": float(loss),
        "terms": {k: float(v) for k, v in terms.items()},
        "skipped": bool(skipped),
    }


def train_metric(dataset: Dataset, cmap: CapabilityClusterMap, cfg: TrainConfig,
                 scaler: Optional[StandardScaler] = None, net: Optional[EmbeddingNetwork] = None,
                 checkpoint_dir=None):
    """Train an embedding network with the configured pair loss.

    ``net`` overrides the freshly initialized network and is trained in place.
    """
    if cfg.loss.uses_bce:
        raise ValueError("train_metric takes pair losses only; use train_multi_objective")
    x = _scaled(dataset, scaler)
    net = net if net is not None else cfg.network(dataset.d)
    trace = _run_metric_epochs(net, x, dataset, cmap, cfg, checkpoint_dir, "metric")
    return net.eval(), trace


def stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list:
    """Shuffled batches that keep the class ratio roughly constant."""
    keys = np.empty(len(labels))
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        perm = rng.permutation(idx)
        keys[perm] = (np.arange(len(idx)) + rng.random(len(idx))) / len(idx)
    order = np.argsort(keys, kind="stable")
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def pretrain_detection(dataset: Dataset, cfg: TrainConfig, scaler: Optional[StandardScaler] = None,
                       checkpoint_dir=None):
    """Train body plus sigmoid head on goodware/malware labels with BCE.

    Returns ``(detector, log)``; ``detector.body`` initializes later stages.
    """
    labels = dataset.detection_labels()
    if len(np.unique(labels)) < 2:
        raise ValueError("pretraining needs both goodware and malware samples")
    x = _scaled(dataset, scaler)
    model = append_head(cfg.network(dataset.d), seed=cfg.seed)
    bce = LossConfig(kind="bce")
    trace = TrainLog()
    start = time.perf_counter()
    model.train()
    for epoch in range(cfg.pretrain_epochs):
        rng = np.random.default_rng([cfg.seed, epoch, 7])
        for b, rows in enumerate(stratified_batches(labels, cfg.pretrain_batch_size, rng)):
            emb, scores, tape = model.forward(x[rows])
            res = mixed_loss(emb, None, bce, scores, labels[rows])
            grads = model.backward(tape, res.d_embeddings, res.d_scores)
            model.sgd_step(grads, cfg.lr)
            trace.records.append(_record("pretrain", epoch, b, len(rows), res.loss, res.terms, False))
        if checkpoint_dir is not None:
            model.save(Path(checkpoint_dir) / f"pretrain_epoch_{epoch + 1:03d}.npz")
    trace.wall_clock = time.perf_counter() - start
    return model.eval(), trace


def train_multi_objective(dataset: Dataset, cmap: CapabilityClusterMap, cfg: TrainConfig,
                          pretrained, scaler: Optional[StandardScaler] = None, checkpoint_dir=None):
    """Jointly train pair losses and the detection head from ``pretrained``.

    ``pretrained`` (a detector or a bare embedding network) is copied, not
    modified. A bare network gets a fresh head.
    """
    if isinstance(pretrained, DetectorNetwork):
        model = pretrained.copy()
    else:
        model = append_head(pretrained.copy(), seed=cfg.seed)
    if model.body.d != dataset.d or model.body.embedding_dim != cfg.embedding_dim:
        raise ValueError("pretrained network dimensions do not match the config")
    loss = cfg.loss if cfg.loss.kind == "multi_objective" else replace(cfg.loss, kind="multi_objective")
    cfg = replace(cfg, loss=loss)
    x = _scaled(dataset, scaler)
    trace = _run_metric_epochs(model, x, dataset, cmap, cfg, checkpoint_dir, "multi_objective")
    return model.eval(), trace


def replicate(run: Callable[[int], float], seeds: Sequence[int] = (0, 1, 2, 3, 4)):
    """Run ``run(seed)`` per seed; returns ``(mean, std, values)``."""
    values = np.array([float(run(s)) for s in seeds])
    return float(values.mean()), float(values.std()), values
