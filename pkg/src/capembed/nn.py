"""Dense embedding network with hand-written backpropagation.

Each hidden layer computes ``Dense -> BatchNorm -> activation -> Dropout``.
The last layer is a plain linear projection to the embedding space. Rows of
the output may optionally be L2-normalized.

Parameters live in one flat ``dict`` keyed ``"<layer>.<name>"`` (``"0.W"``,
``"0.gamma"``...); gradients use the same keys, so an SGD update is a loop
over the dict.
"""

from __future__ import annotations

import copy
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
CHECKPOINT_FORMAT = "capembed-checkpoint/1"
REFERENCE_HIDDEN = (4000, 1024, 512, 512)
ACTIVATIONS = ("sigmoid", "linear")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "sigmoid"
    use_batchnorm: bool = True
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")


def embedding_specs(d: int, hidden=REFERENCE_HIDDEN, embedding_dim: int = 32,
                    dropout_p: float = 0.1) -> list:
    """Layer specs for the reference architecture (sizes configurable)."""
    dims = [d, *hidden]
    specs = [LayerSpec(a, b, "sigmoid", True, dropout_p) for a, b in zip(dims[:-1], dims[1:])]
    specs.append(LayerSpec(dims[-1], embedding_dim, "linear", False, 0.0))
    return specs


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class _LayerCache:
    x: np.ndarray
    xhat: Optional[np.ndarray] = None
    inv_std: Optional[np.ndarray] = None
    a: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None


@dataclass
class GradientTape:
    """Activations cached by a train-mode forward pass."""

    token: int
    version: int
    layers: list = field(default_factory=list)
    pre_norm: Optional[np.ndarray] = None
    norms: Optional[np.ndarray] = None
    output: Optional[np.ndarray] = None

    @property
    def masks(self) -> list:
        return [c.mask for c in self.layers]


class StaleTapeError(RuntimeError):
    pass


class EmbeddingNetwork:
    def __init__(self, specs, params, running, seed=0, normalize=False):
        specs = list(specs)
        for prev, nxt in zip(specs[:-1], specs[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError("consecutive layer dimensions do not chain")
        last = specs[-1]
        if last.activation != "linear" or last.use_batchnorm or last.dropout_p:
            raise ValueError("final embedding layer must be linear without batchnorm/dropout")
        self.specs = specs
        self.params = params
        self.running = running
        self.seed = seed
        self.normalize = normalize
        self.training = True
        self.rng = np.random.default_rng([seed, 1])
        self._token = 0
        self._version = 0

    @property
    def d(self) -> int:
        return self.specs[0].in_dim

    @property
    def embedding_dim(self) -> int:
        return self.specs[-1].out_dim

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def copy(self) -> "EmbeddingNetwork":
        return copy.deepcopy(self)

    def forward(self, x, normalize=None, masks=None, update_stats=True):
        """Embed a ``B x d`` batch; returns ``(embeddings, tape)``.

        ``masks`` replays dropout masks from an earlier tape (used for
        gradient checks). ``update_stats=False`` leaves batchnorm running
        statistics untouched.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ValueError(f"expected a (B, {self.d}) batch, got shape {x.shape}")
        normalize = self.normalize if normalize is None else normalize
        train = self.training
        if train and x.shape[0] < 2 and any(s.use_batchnorm for s in self.specs):
            raise ValueError("train-mode batchnorm needs a batch of at least 2")

        self._token += 1
        tape = GradientTape(self._token, self._version)
        h = x
        for i, spec in enumerate(self.specs):
            cache = _LayerCache(x=h)
            z = h @ self.params[f"{i}.W"] + self.params[f"{i}.b"]
            if spec.use_batchnorm:
                run = self.running[i]
                if train:
                    mu = z.mean(axis=0)
                    var = z.var(axis=0)
                    if update_stats:
                        b = z.shape[0]
                        run["mean"] = BN_MOMENTUM * run["mean"] + (1 - BN_MOMENTUM) * mu
                        run["var"] = BN_MOMENTUM * run["var"] + (1 - BN_MOMENTUM) * var * b / (b - 1)
                else:
                    mu, var = run["mean"], run["var"]
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (z - mu) * inv_std
                cache.xhat, cache.inv_std = xhat, inv_std
                z = self.params[f"{i}.gamma"] * xhat + self.params[f"{i}.beta"]
            if spec.activation == "sigmoid":
                z = sigmoid(z)
                cache.a = z
            if train and spec.dropout_p > 0:
                mask = masks[i] if masks is not None else (
                    (self.rng.random(z.shape) >= spec.dropout_p) / (1.0 - spec.dropout_p)
                )
                cache.mask = mask
                z = z * mask
            tape.layers.append(cache)
            h = z

        if normalize:
            norms = np.linalg.norm(h, axis=1, keepdims=True)
            tape.pre_norm, tape.norms = h, norms
            h = h / np.where(norms > 0, norms, 1.0)
        tape.output = h
        return h, tape

    def embed(self, x, batch_size: int = 1024) -> np.ndarray:
        """Eval-mode embeddings, leaving the network's mode unchanged."""
        was_training = self.training
        self.eval()
        try:
            x = np.asarray(x, dtype=np.float64)
            out = [self.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        finally:
            self.training = was_training
        return np.concatenate(out) if out else np.zeros((0, self.embedding_dim))

    def _check_tape(self, tape: GradientTape):
        if not tape.layers or tape.token != self._token or tape.version != self._version:
            raise StaleTapeError("tape does not belong to the latest forward pass")
        if not self.training:
            raise StaleTapeError("backward requires a train-mode forward")

    def backward(self, tape: GradientTape, d_embeddings, return_input_grad=False):
        """Exact parameter gradients for the forwarded batch."""
        self._check_tape(tape)
        g = np.asarray(d_embeddings, dtype=np.float64)
        if g.shape != tape.output.shape:
            raise ValueError("upstream gradient shape does not match the embeddings")
        if tape.norms is not None:
            y = tape.output
            safe = np.where(tape.norms > 0, tape.norms, 1.0)
            g = (g - y * np.sum(y * g, axis=1, keepdims=True)) / safe
            g = np.where(tape.norms > 0, g, 0.0)

        grads = {}
        for i in range(len(self.specs) - 1, -1, -1):
            spec, cache = self.specs[i], tape.layers[i]
            if cache.mask is not None:
                g = g * cache.mask
            if spec.activation == "sigmoid":
                g = g * cache.a * (1.0 - cache.a)
            if spec.use_batchnorm:
                grads[f"{i}.gamma"] = np.sum(g * cache.xhat, axis=0)
                grads[f"{i}.beta"] = np.sum(g, axis=0)
                dxhat = g * self.params[f"{i}.gamma"]
                b = g.shape[0]
                g = (cache.inv_std / b) * (
                    b * dxhat - dxhat.sum(axis=0) - cache.xhat * np.sum(dxhat * cache.xhat, axis=0)
                )
            grads[f"{i}.W"] = cache.x.T @ g
            grads[f"{i}.b"] = g.sum(axis=0)
            g = g @ self.params[f"{i}.W"].T
        grads = {k: grads[k] for k in self.params}
        return (grads, g) if return_input_grad else grads

    def sgd_step(self, grads, lr: float):
        for k, p in self.params.items():
            gk = grads[k]
            if gk.shape != p.shape:
                raise ValueError(f"gradient for {k} has shape {gk.shape}, expected {p.shape}")
        for k in self.params:
            self.params[k] = self.params[k] - lr * grads[k]
        self._version += 1
        return self

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # checkpoints

    def _meta(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "kind": "embedding",
            "specs": [asdict(s) for s in self.specs],
            "normalize": self.normalize,
            "seed": self.seed,
            "rng_state": self.rng.bit_generator.state,
        }

    def _arrays(self) -> dict:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        for i, run in enumerate(self.running):
            if run:
                arrays[f"running/{i}.mean"] = run["mean"]
                arrays[f"running/{i}.var"] = run["var"]
        return arrays

    def save(self, path) -> None:
        write_checkpoint(path, self._meta(), self._arrays())


def xavier_init(specs, seed: int, normalize: bool = False) -> EmbeddingNetwork:
    """Glorot-uniform weights, zero biases, identity batchnorm."""
    rng = np.random.default_rng(seed)
    params, running = {}, []
    for i, spec in enumerate(specs):
        bound = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        params[f"{i}.W"] = rng.uniform(-bound, bound, size=(spec.in_dim, spec.out_dim))
        params[f"{i}.b"] = np.zeros(spec.out_dim)
        if spec.use_batchnorm:
            params[f"{i}.gamma"] = np.ones(spec.out_dim)
            params[f"{i}.beta"] = np.zeros(spec.out_dim)
            running.append({"mean": np.zeros(spec.out_dim), "var": np.ones(spec.out_dim)})
        else:
            running.append({})
    return EmbeddingNetwork(specs, params, running, seed=seed, normalize=normalize)


def forward(net: EmbeddingNetwork, batch, normalize=None):
    return net.forward(batch, normalize=normalize)


def backward(net: EmbeddingNetwork, tape: GradientTape, d_embeddings):
    return net.backward(tape, d_embeddings)


def sgd_step(net, grads, lr: float):
    return net.sgd_step(grads, lr)


class DetectorNetwork:
    """Embedding body plus a ``Dense(e -> 1) -> sigmoid`` detection head.

    The head reads the body's emitted embedding (after normalization when
    enabled). Head parameters are keyed ``"head.W"`` and ``"head.b"``.
    """

    def __init__(self, body: EmbeddingNetwork, head_params: dict):
        self.body = body
        self.head_params = head_params

    @property
    def params(self) -> dict:
        return {**self.body.params, **self.head_params}

    @property
    def training(self) -> bool:
        return self.body.training

    def train(self):
        self.body.train()
        return self

    def eval(self):
        self.body.eval()
        return self

    def copy(self) -> "DetectorNetwork":
        return copy.deepcopy(self)

    def forward(self, x, normalize=None, masks=None, update_stats=True):
        """Returns ``(embeddings, scores, tape)``."""
        emb, tape = self.body.forward(x, normalize=normalize, masks=masks, update_stats=update_stats)
        logits = emb @ self.head_params["head.W"][:, 0] + self.head_params["head.b"][0]
        return emb, sigmoid(logits), tape

    def score(self, x, batch_size: int = 1024) -> np.ndarray:
        emb = self.body.embed(x, batch_size=batch_size)
        return sigmoid(emb @ self.head_params["head.W"][:, 0] + self.head_params["head.b"][0])

    def backward(self, tape, d_embeddings, d_scores, return_input_grad=False):
        scores = sigmoid(tape.output @ self.head_params["head.W"][:, 0] + self.head_params["head.b"][0])
        if d_scores is None:
            d_scores = np.zeros_like(scores)
        d_logit = np.asarray(d_scores, dtype=np.float64) * scores * (1.0 - scores)
        head = {
            "head.W": (tape.output.T @ d_logit)[:, None],
            "head.b": np.array([d_logit.sum()]),
        }
        d_emb = np.asarray(d_embeddings, dtype=np.float64) + np.outer(d_logit, self.head_params["head.W"][:, 0])
        out = self.body.backward(tape, d_emb, return_input_grad=return_input_grad)
        if return_input_grad:
            body, dx = out
            return {**body, **head}, dx
        return {**out, **head}

    def sgd_step(self, grads, lr: float):
        self.body.sgd_step({k: grads[k] for k in self.body.params}, lr)
        for k in self.head_params:
            if grads[k].shape != self.head_params[k].shape:
                raise ValueError(f"gradient for {k} has the wrong shape")
            self.head_params[k] = self.head_params[k] - lr * grads[k]
        return self

    def save(self, path) -> None:
        meta = self.body._meta()
        meta["kind"] = "detector"
        arrays = self.body._arrays()
        arrays.update({f"param/{k}": v for k, v in self.head_params.items()})
        write_checkpoint(path, meta, arrays)


def append_head(net: EmbeddingNetwork, head: Optional[LayerSpec] = None, seed: int = 0) -> DetectorNetwork:
    """Attach a scalar sigmoid detection head to ``net``."""
    head = head or LayerSpec(net.embedding_dim, 1, "sigmoid", False, 0.0)
    if head.in_dim != net.embedding_dim or head.out_dim != 1:
        raise ValueError("head must map the embedding dimension to one output")
    rng = np.random.default_rng([seed, 2])
    bound = np.sqrt(6.0 / (head.in_dim + 1))
    return DetectorNetwork(net, {
        "head.W": rng.uniform(-bound, bound, size=(head.in_dim, 1)),
        "head.b": np.zeros(1),
    })


def write_checkpoint(path, meta: dict, arrays: dict) -> None:
    payload = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    payload.update({k: np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()})
    buf = io.BytesIO()
    np.savez(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Load an :class:`EmbeddingNetwork` or :class:`DetectorNetwork`."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        arrays = {k: z[k].copy() for k in z.files if k != "meta"}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
    specs = [LayerSpec(**s) for s in meta["specs"]]
    params = {}
    for i, spec in enumerate(specs):
        names = ("W", "b", "gamma", "beta") if spec.use_batchnorm else ("W", "b")
        for n in names:
            params[f"{i}.{n}"] = arrays[f"param/{i}.{n}"]
    running = [
        {"mean": arrays[f"running/{i}.mean"], "var": arrays[f"running/{i}.var"]} if s.use_batchnorm else {}
        for i, s in enumerate(specs)
    ]
    net = EmbeddingNetwork(specs, params, running, seed=meta["seed"], normalize=meta["normalize"])
    net.rng.bit_generator.state = meta["rng_state"]
    net.eval()
    if meta["kind"] == "detector":
        return DetectorNetwork(net, {"head.W": arrays["param/head.W"], "head.b": arrays["param/head.b"]})
    return net
