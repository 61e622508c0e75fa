"""Downstream heads on frozen embeddings and their evaluation metrics."""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .dataio import Dataset, StandardScaler
from .nn import sigmoid


@dataclass(frozen=True)
class EmbeddedDataset:
    ids: tuple
    embeddings: np.ndarray
    labels: np.ndarray
    families: tuple
    tags: tuple

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def subset(self, rows) -> "EmbeddedDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return EmbeddedDataset(
            tuple(self.ids[i] for i in rows),
            self.embeddings[rows],
            self.labels[rows],
            tuple(self.families[i] for i in rows),
            tuple(self.tags[i] for i in rows),
        )

    def malware(self) -> "EmbeddedDataset":
        return self.subset(np.flatnonzero(self.labels == 1))

    def tag_matrix(self, tag_list: Sequence[str]) -> np.ndarray:
        return np.array([[t in tags for t in tag_list] for tags in self.tags], dtype=np.int64).reshape(
            len(self), len(tag_list)
        )

    # export

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(len(self)):
                rec = {
                    "id": self.ids[i],
                    "embedding": [float(v) for v in self.embeddings[i]],
                    "label": int(self.labels[i]),
                    "family": self.families[i],
                    "tags": sorted(self.tags[i]),
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "EmbeddedDataset":
        ids, emb, labels, fams, tags = [], [], [], [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                ids.append(rec["id"])
                emb.append(rec["embedding"])
                labels.append(rec["label"])
                fams.append(rec.get("family"))
                tags.append(frozenset(rec.get("tags") or ()))
        dim = len(emb[0]) if emb else 0
        return cls(tuple(ids), np.asarray(emb, dtype=np.float64).reshape(len(ids), dim),
                   np.asarray(labels, dtype=np.int64), tuple(fams), tuple(tags))

    def save_binary(self, path, dtype: str = "float32") -> int:
        """Write a flat little-endian matrix plus ``<path>.json`` sidecar.

        Returns the payload size in bytes.
        """
        dt = np.dtype(dtype).newbyteorder("<")
        payload = np.ascontiguousarray(self.embeddings, dtype=dt).tobytes()
        with open(path, "wb") as fh:
            fh.write(payload)
        with open(f"{path}.json", "w", encoding="utf-8") as fh:
            json.dump({"N": len(self), "e": self.dim, "dtype": dt.str}, fh, sort_keys=True)
        return len(payload)


def load_binary_matrix(path) -> np.ndarray:
    with open(f"{path}.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    data = np.fromfile(path, dtype=np.dtype(meta["dtype"]))
    return data.reshape(meta["N"], meta["e"])


def payload_bytes(n: int, dim: int, dtype: str = "float32") -> int:
    return n * dim * np.dtype(dtype).itemsize


def from_dataset(dataset: Dataset, matrix: np.ndarray) -> EmbeddedDataset:
    return EmbeddedDataset(
        tuple(dataset.ids),
        np.asarray(matrix, dtype=np.float64),
        dataset.detection_labels(),
        tuple(s.family for s in dataset),
        tuple(s.tags for s in dataset),
    )


def extract_embeddings(net, scaler: StandardScaler, dataset: Dataset, batch_size: int = 1024) -> EmbeddedDataset:
    """Eval-mode embeddings of every sample, rows in dataset order."""
    body = getattr(net, "body", net)
    if dataset.d != body.d or scaler.d != body.d:
        raise ValueError(f"dataset has d={dataset.d}, network expects d={body.d}")
    return from_dataset(dataset, body.embed(scaler.transform(dataset.feature_matrix()), batch_size))


# gradient boosted trees


@dataclass
class _Node:
    value: float
    feature: int = -1
    threshold: float = 0.0
    left: Optional["_Node"] = None
    right: Optional["_Node"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"value": self.value}
        return {"value": self.value, "feature": self.feature, "threshold": self.threshold,
                "left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "_Node":
        if "feature" not in d:
            return cls(d["value"])
        return cls(d["value"], d["feature"], d["threshold"], cls.from_dict(d["left"]), cls.from_dict(d["right"]))


def _predict_tree(node: _Node, x: np.ndarray) -> np.ndarray:
    out = np.empty(len(x))
    stack = [(node, np.arange(len(x)))]
    while stack:
        nd, rows = stack.pop()
        if nd.is_leaf:
            out[rows] = nd.value
            continue
        go_left = x[rows, nd.feature] <= nd.threshold
        stack.append((nd.left, rows[go_left]))
        stack.append((nd.right, rows[~go_left]))
    return out


def _best_split(x: np.ndarray, r: np.ndarray, min_leaf: int):
    """Exact greedy variance-reduction split.

    Ties go to the lower feature index, then the lower threshold.
    """
    n = len(r)
    if n < 2 * min_leaf:
        return 0.0, -1, 0.0
    order = np.argsort(x, axis=0, kind="stable")
    xs = np.take_along_axis(x, order, axis=0)
    csum = np.cumsum(r[order], axis=0)[:-1]
    total = csum[-1] + r[order[-1]]
    k = np.arange(1, n)[:, None]
    valid = (xs[1:] > xs[:-1]) & (k >= min_leaf) & (n - k >= min_leaf)
    # SSE reduction relative to the unsplit node
    gain = csum ** 2 / k + (total - csum) ** 2 / (n - k) - total ** 2 / n
    gain = np.where(valid, gain, -np.inf)
    pos = np.argmax(gain, axis=0)
    per_feature = gain[pos, np.arange(x.shape[1])]
    f = int(np.argmax(per_feature))
    if not per_feature[f] > 0:
        return 0.0, -1, 0.0
    p = pos[f]
    return float(per_feature[f]), f, float((xs[p, f] + xs[p + 1, f]) / 2.0)


def _grow(x, r, depth, min_leaf) -> _Node:
    node = _Node(float(r.mean()) if len(r) else 0.0)
    if depth <= 0:
        return node
    gain, f, thr = _best_split(x, r, min_leaf)
    if f < 0:
        return node
    mask = x[:, f] <= thr
    node.feature, node.threshold = f, thr
    node.left = _grow(x[mask], r[mask], depth - 1, min_leaf)
    node.right = _grow(x[~mask], r[~mask], depth - 1, min_leaf)
    return node


@dataclass
class GbtParams:
    n_trees: int = 100
    max_depth: int = 4
    learning_rate: float = 0.1
    min_samples_leaf: int = 5


@dataclass
class GbtHead:
    """Additive regression trees on the log-odds scale."""

    trees: list
    learning_rate: float
    init_log_odds: float
    train_loss: list = field(default_factory=list)

    def decision_function(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.full(len(x), self.init_log_odds)
        for t in self.trees:
            out += self.learning_rate * _predict_tree(t, x)
        return out

    def predict_proba(self, x) -> np.ndarray:
        return sigmoid(self.decision_function(x))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({
                "format": "capembed-gbt/1",
                "learning_rate": self.learning_rate,
                "init_log_odds": self.init_log_odds,
                "trees": [t.to_dict() for t in self.trees],
            }, fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "GbtHead":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls([_Node.from_dict(t) for t in obj["trees"]], obj["learning_rate"], obj["init_log_odds"])


def log_loss(y: np.ndarray, logits: np.ndarray) -> float:
    # log(1 + e^z) - y z, computed stably
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def fit_gbt(x, target, params: GbtParams = GbtParams()) -> GbtHead:
    """Logistic gradient boosting; each tree fits the residual ``y - p``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ValueError("gradient boosting needs both classes in the target")
    base = y.mean()
    head = GbtHead([], params.learning_rate, float(np.log(base / (1.0 - base))))
    logits = np.full(len(y), head.init_log_odds)
    head.train_loss.append(log_loss(y, logits))
    for _ in range(params.n_trees):
        resid = y - sigmoid(logits)
        tree = _grow(x, resid, params.max_depth, params.min_samples_leaf)
        head.trees.append(tree)
        logits = logits + params.learning_rate * _predict_tree(tree, x)
        head.train_loss.append(log_loss(y, logits))
    return head


# nearest neighbours and metrics


def knn_predict(train: EmbeddedDataset, query: EmbeddedDataset, k: int = 1, chunk: int = 256) -> list:
    """Euclidean k-NN family vote.

    Distance ties go to the lower training index; vote ties go to the family
    whose best-ranked neighbour comes first.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(train) == 0:
        raise ValueError("empty training set")
    if any(f is None for f in train.families):
        raise ValueError("training rows without family labels")
    t = train.embeddings
    preds = []
    for start in range(0, len(query), chunk):
        q = query.embeddings[start:start + chunk]
        diff = q[:, None, :] - t[None, :, :]
        dist = np.sum(diff * diff, axis=2)
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        for row in nearest:
            fams = [train.families[i] for i in row]
            counts: dict = {}
            for f in fams:
                counts[f] = counts.get(f, 0) + 1
            top = max(counts.values())
            preds.append(next(f for f in fams if counts[f] == top))
    return preds


def accuracy(pred: Sequence, truth: Sequence) -> float:
    if not len(truth):
        raise ValueError("empty evaluation set")
    return float(np.mean([p == t for p, t in zip(pred, truth)]))


def auroc(scores, labels) -> float:
    """Mann-Whitney AU-ROC with half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AU-ROC needs both positive and negative labels")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def permutation_baseline(scores_fn, labels, n_perm: int = 200, seed: int = 0) -> np.ndarray:
    """AU-ROCs of ``scores_fn(permuted_labels)`` over label permutations."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    return np.array([scores_fn(rng.permutation(labels)) for _ in range(n_perm)])


def eval_detection(train: EmbeddedDataset, test: EmbeddedDataset, params: GbtParams = GbtParams()) -> float:
    head = fit_gbt(train.embeddings, train.labels, params)
    return auroc(head.decision_function(test.embeddings), test.labels)


def eval_family(train: EmbeddedDataset, test: EmbeddedDataset, k: int = 1) -> float:
    tr, te = train.malware(), test.malware()
    return accuracy(knn_predict(tr, te, k), te.families)


def eval_tags(runs: Sequence, tag_list: Sequence[str], params: GbtParams = GbtParams(), threads: int = 1) -> list:
    """Per-tag AU-ROC as mean and std over ``runs``.

    ``runs`` is a sequence of ``(train, test)`` embedded datasets, one per
    seeded embedding model. A tag lacking positives or negatives in any train
    or test split is skipped with a warning.
    """
    keep = []
    for tag in tag_list:
        ok = True
        for tr, te in runs:
            for part in (tr, te):
                col = part.tag_matrix([tag])[:, 0]
                if col.min() == col.max():
                    ok = False
        if ok:
            keep.append(tag)
        else:
            warnings.warn(f"tag {tag!r} is degenerate (all present or all absent); skipped")

    def one(job):
        tag, (tr, te) = job
        head = fit_gbt(tr.embeddings, tr.tag_matrix([tag])[:, 0], params)
        return auroc(head.decision_function(te.embeddings), te.tag_matrix([tag])[:, 0])

    jobs = [(tag, run) for tag in keep for run in runs]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            scores = list(ex.map(one, jobs))
    else:
        scores = [one(j) for j in jobs]

    table = []
    for t, tag in enumerate(keep):
        vals = np.array(scores[t * len(runs):(t + 1) * len(runs)])
        table.append({"tag": tag, "auroc_mean": float(vals.mean()), "auroc_std": float(vals.std()),
                      "runs": len(runs)})
    return table


def write_csv(rows: Sequence[dict], path) -> None:
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
