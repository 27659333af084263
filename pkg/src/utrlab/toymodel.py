"""Frozen toy transformer with trainable bottleneck adapters.

Layout of one forward pass (row-vector convention, ``y = x @ W.T + b``)::

    x_t = E[token_t] (+ P[t] if positional_encoding == "additive_before_embedding_adapter")
    h_t = x_t + EA(x_t)  (+ P[t] if positional_encoding == "additive_after_embedding_adapter")
    z_t = h_t + Attn1(h)_t                # single head, causal or full
    u_t = z_t + LA(z_t)
    y_t = u_t + Attn2(u)_t                # second frozen layer
    logit = w . mean_t(y_t) + c           # binary logistic loss

``E``, ``P`` and both attention blocks are frozen.  Without the second block
the gradient reaching the layer adapter would be identical at every position
of a sentence, and positions sharing a ReLU pattern could not be told apart.

The embedding adapter (EA), layer adapter (LA) and the classifier head are
trainable.  Gradients are computed analytically;
:func:`numerical_adapter_gradients` is the finite-difference oracle used to
validate them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_labels, check_sequences
from . import defenses

CHECKPOINT_FORMAT = "utrlab-model"
CHECKPOINT_VERSION = 1

ATTENTION_MODES = ("unidirectional", "bidirectional")
PE_MODES = ("none", "additive_before_embedding_adapter", "additive_after_embedding_adapter")
ACTIVATIONS = ("relu", "gelu")
ADAPTER_NAMES = ("embedding", "layer")
ATTENTION_KEYS = ("wq", "wk", "wv", "wo", "w2q", "w2k", "w2v", "w2o")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 200
    d_hidden: int = 64
    reduction_factor: int = 2
    attention_mode: str = "bidirectional"
    positional_encoding: str = "additive_after_embedding_adapter"
    max_seq_len: int = 8
    adapter_activation: str = "relu"
    adapter_depth: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.d_hidden < 1:
            raise ValueError("d_hidden must be >= 1")
        if self.reduction_factor not in (1, 2, 4, 8):
            raise ValueError(f"reduction_factor must be one of 1, 2, 4, 8; got {self.reduction_factor}")
        if self.d_hidden % self.reduction_factor:
            raise ValueError(
                f"d_hidden={self.d_hidden} is not divisible by reduction_factor={self.reduction_factor}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.positional_encoding not in PE_MODES:
            raise ValueError(f"positional_encoding must be one of {PE_MODES}")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if self.adapter_activation not in ACTIVATIONS:
            raise ValueError(f"adapter_activation must be one of {ACTIVATIONS}")
        if self.adapter_depth < 1:
            raise ValueError("adapter_depth must be >= 1")

    @property
    def d_bottleneck(self) -> int:
        return self.d_hidden // self.reduction_factor

    def to_dict(self) -> dict:
        d = asdict(self)
        d["d_bottleneck"] = self.d_bottleneck
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bottleneck = d.pop("d_bottleneck", None)
        cfg = cls(**d)
        if bottleneck is not None and bottleneck != cfg.d_bottleneck:
            raise ValueError(f"d_bottleneck={bottleneck} inconsistent with d_hidden/reduction_factor")
        return cfg


# -- activations -------------------------------------------------------------

_GELU_C = np.sqrt(2.0 / np.pi)


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t)


def _act_grad(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (x > 0).astype(np.float64)
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)


# -- parameters --------------------------------------------------------------

@dataclass
class Adapter:
    """Bottleneck adapter: ``out = x + up(act(... act(down(x))))``.

    ``weights[0]`` / ``biases[0]`` are the down-projection, ``weights[-1]`` /
    ``biases[-1]`` the up-projection; depth > 1 inserts square bottleneck
    layers in between.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    @property
    def down_weight(self) -> np.ndarray:
        return self.weights[0]

    @property
    def down_bias(self) -> np.ndarray:
        return self.biases[0]

    @property
    def up_weight(self) -> np.ndarray:
        return self.weights[-1]

    @property
    def up_bias(self) -> np.ndarray:
        return self.biases[-1]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x: np.ndarray):
        cache = [x]
        a = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            pre = a @ w.T + b
            cache.append(pre)
            a = _act(self.activation, pre)
            cache.append(a)
        out = x + a @ self.weights[-1].T + self.biases[-1]
        return out, cache

    def backward(self, cache, d_out: np.ndarray):
        """Return (dx, grads) where grads mirrors ``weights``/``biases``."""
        n_hidden = len(self.weights) - 1
        gw = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        a_last = cache[-1]
        gw[-1] = d_out.T @ a_last
        gb[-1] = d_out.sum(axis=0)
        da = d_out @ self.weights[-1]
        for i in range(n_hidden - 1, -1, -1):
            pre = cache[1 + 2 * i]
            inp = cache[2 * i]
            dpre = da * _act_grad(self.activation, pre)
            gw[i] = dpre.T @ inp
            gb[i] = dpre.sum(axis=0)
            da = dpre @ self.weights[i]
        return d_out + da, AdapterGradients(gw, gb)


@dataclass
class AdapterGradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def grad_down_weight(self) -> np.ndarray:
        return self.weights[0]

    @property
    def grad_down_bias(self) -> np.ndarray:
        return self.biases[0]

    @property
    def grad_up_weight(self) -> np.ndarray:
        return self.weights[-1]

    @property
    def grad_up_bias(self) -> np.ndarray:
        return self.biases[-1]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_tensors(cls, tensors) -> "AdapterGradients":
        tensors = list(tensors)
        if len(tensors) % 2 or not tensors:
            raise ValueError("adapter gradients need an even, non-zero number of tensors")
        return cls([np.asarray(t) for t in tensors[0::2]], [np.asarray(t) for t in tensors[1::2]])

    def scaled(self, c: float) -> "AdapterGradients":
        return AdapterGradients([c * w for w in self.weights], [c * b for b in self.biases])

    def __add__(self, other: "AdapterGradients") -> "AdapterGradients":
        return AdapterGradients([a + b for a, b in zip(self.weights, other.weights)],
                                [a + b for a, b in zip(self.biases, other.biases)])


@dataclass
class ForwardTrace:
    """Per-sequence adapter inputs recorded during :func:`forward`."""

    embedding_adapter_inputs: list[np.ndarray] = field(default_factory=list)
    layer_adapter_inputs: list[np.ndarray] = field(default_factory=list)
    down_preactivations: dict = field(default_factory=lambda: {"embedding": [], "layer": []})
    logits: list[float] = field(default_factory=list)


class Model:
    """Frozen backbone plus trainable adapters and head.  Build with :func:`init_model`."""

    def __init__(self, config: ModelConfig, embedding, positional, attention: dict,
                 adapters: dict, head_weight, head_bias: float):
        self.config = config
        self.embedding = embedding
        self.positional = positional
        self.attention = attention
        self.adapters = adapters
        self.head_weight = head_weight
        self.head_bias = float(head_bias)
        for arr in [embedding, positional, *attention.values()]:
            if arr is not None:
                arr.setflags(write=False)

    def frozen_tensors(self) -> list[np.ndarray]:
        out = [self.embedding]
        if self.positional is not None:
            out.append(self.positional)
        return out + [self.attention[k] for k in ATTENTION_KEYS]

    def trainable_tensors(self) -> list[np.ndarray]:
        out = []
        for name in ADAPTER_NAMES:
            out += self.adapters[name].tensors()
        return out + [self.head_weight, np.array([self.head_bias])]

    def copy(self) -> "Model":
        adapters = {k: Adapter([w.copy() for w in a.weights], [b.copy() for b in a.biases], a.activation)
                    for k, a in self.adapters.items()}
        return Model(self.config, self.embedding, self.positional, self.attention, adapters,
                     self.head_weight.copy(), self.head_bias)


def init_model(config: ModelConfig) -> Model:
    if not isinstance(config, ModelConfig):
        raise TypeError("config must be a ModelConfig")
    rng = np.random.default_rng(config.seed)
    d, k = config.d_hidden, config.d_bottleneck
    a = 1.0 / np.sqrt(d)

    def uniform(*shape):
        return rng.uniform(-a, a, size=shape)

    embedding = uniform(config.vocab_size, d)
    positional = uniform(config.max_seq_len, d) if config.positional_encoding != "none" else None
    attention = {name: uniform(d, d) for name in ATTENTION_KEYS}
    adapters = {}
    for name in ADAPTER_NAMES:
        shapes = [(k, d)] + [(k, k)] * (config.adapter_depth - 1) + [(d, k)]
        weights = [uniform(*s) for s in shapes]
        biases = [np.zeros(s[0]) for s in shapes]
        adapters[name] = Adapter(weights, biases, config.adapter_activation)
    head_weight = uniform(d)
    return Model(config, embedding, positional, attention, adapters, head_weight, 0.0)


# -- forward / backward ------------------------------------------------------

def embed(model: Model, token_id: int, position: int) -> np.ndarray:
    """The vector the embedding adapter receives for ``token_id`` at ``position``."""
    cfg = model.config
    if not 0 <= token_id < cfg.vocab_size:
        raise ValueError(f"token_id {token_id} outside [0, {cfg.vocab_size})")
    if not 0 <= position < cfg.max_seq_len:
        raise ValueError(f"position {position} outside [0, {cfg.max_seq_len})")
    v = model.embedding[token_id].copy()
    if cfg.positional_encoding == "additive_before_embedding_adapter":
        v = v + model.positional[position]
    return v


def _attention_forward(model: Model, h: np.ndarray, prefix: str = "w"):
    att = {k: model.attention[prefix + k] for k in ("q", "k", "v", "o")}
    L, d = h.shape
    q, k, v = h @ att["q"], h @ att["k"], h @ att["v"]
    scores = (q @ k.T) / np.sqrt(d)
    if model.config.attention_mode == "unidirectional":
        scores = np.where(np.tril(np.ones((L, L), dtype=bool)), scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    o = w @ v
    z = h + o @ att["o"]
    return z, (h, q, k, v, w, o)


def _attention_backward(model: Model, cache, dz: np.ndarray, prefix: str = "w") -> np.ndarray:
    att = {k: model.attention[prefix + k] for k in ("q", "k", "v", "o")}
    h, q, k, v, w, o = cache
    d = h.shape[1]
    do = dz @ att["o"].T
    dw = do @ v.T
    dv = w.T @ do
    ds = w * (dw - (dw * w).sum(axis=1, keepdims=True))
    dq = ds @ k / np.sqrt(d)
    dk = ds.T @ q / np.sqrt(d)
    return dz + dq @ att["q"].T + dk @ att["k"].T + dv @ att["v"].T


def _sequence_forward(model: Model, ids: np.ndarray):
    cfg = model.config
    L = ids.shape[0]
    x = model.embedding[ids]
    if cfg.positional_encoding == "additive_before_embedding_adapter":
        x = x + model.positional[:L]
    h, ea_cache = model.adapters["embedding"].forward(x)
    if cfg.positional_encoding == "additive_after_embedding_adapter":
        h = h + model.positional[:L]
    z, att_cache = _attention_forward(model, h)
    u, la_cache = model.adapters["layer"].forward(z)
    y, att2_cache = _attention_forward(model, u, "w2")
    pooled = y.mean(axis=0)
    logit = float(model.head_weight @ pooled + model.head_bias)
    return logit, (x, ea_cache, att_cache, z, la_cache, att2_cache, pooled)


def _bce(logit: float, y: float) -> float:
    # log(1 + exp(logit)) - y * logit, computed stably
    return float(np.logaddexp(0.0, logit) - y * logit)


def _sigmoid(x: float) -> float:
    return float(0.5 * (1.0 + np.tanh(0.5 * x)))


def forward(model: Model, batch, labels):
    """Batch-mean logistic loss plus a trace of every adapter input."""
    cfg = model.config
    seqs = check_sequences(batch, cfg.max_seq_len, cfg.vocab_size)
    ys = check_labels(labels, len(seqs))
    trace = ForwardTrace()
    total = 0.0
    for ids, y in zip(seqs, ys):
        logit, (x, ea_cache, _, z, la_cache, _, _) = _sequence_forward(model, ids)
        total += _bce(logit, y)
        trace.embedding_adapter_inputs.append(x)
        trace.layer_adapter_inputs.append(z)
        trace.down_preactivations["embedding"].append(ea_cache[1])
        trace.down_preactivations["layer"].append(la_cache[1])
        trace.logits.append(logit)
    return total / len(seqs), trace


def _gradients(model: Model, batch, labels, with_head: bool = False):
    cfg = model.config
    seqs = check_sequences(batch, cfg.max_seq_len, cfg.vocab_size)
    ys = check_labels(labels, len(seqs))
    B = len(seqs)
    ea_total = la_total = None
    g_head_w = np.zeros(cfg.d_hidden)
    g_head_b = 0.0
    for ids, y in zip(seqs, ys):
        logit, (x, ea_cache, att_cache, z, la_cache, att2_cache, pooled) = _sequence_forward(model, ids)
        dlogit = (_sigmoid(logit) - y) / B
        g_head_w += dlogit * pooled
        g_head_b += dlogit
        L = ids.shape[0]
        dy = np.tile(dlogit * model.head_weight / L, (L, 1))
        du = _attention_backward(model, att2_cache, dy, "w2")
        dz, g_la = model.adapters["layer"].backward(la_cache, du)
        dh = _attention_backward(model, att_cache, dz)
        _, g_ea = model.adapters["embedding"].backward(ea_cache, dh)
        ea_total = g_ea if ea_total is None else ea_total + g_ea
        la_total = g_la if la_total is None else la_total + g_la
    grads = {"embedding": ea_total, "layer": la_total}
    if with_head:
        return grads, g_head_w, g_head_b
    return grads


def adapter_gradients(model: Model, batch, labels) -> dict:
    """Exact gradients of the batch-mean loss w.r.t. both adapters.

    Returns ``{"embedding": AdapterGradients, "layer": AdapterGradients}``.
    """
    return _gradients(model, batch, labels)


def numerical_adapter_gradients(model: Model, batch, labels, h: float = 1e-5) -> dict:
    """Central finite differences over every adapter parameter (slow; test oracle)."""
    out = {}
    for name in ADAPTER_NAMES:
        adapter = model.adapters[name]
        gw, gb = [], []
        for group, sink in ((adapter.weights, gw), (adapter.biases, gb)):
            for param in group:
                g = np.zeros_like(param)
                flat, gflat = param.reshape(-1), g.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    up, _ = forward(model, batch, labels)
                    flat[i] = orig - h
                    down, _ = forward(model, batch, labels)
                    flat[i] = orig
                    gflat[i] = (up - down) / (2 * h)
                sink.append(g)
        out[name] = AdapterGradients(gw, gb)
    return out


def hidden_for_candidate(model: Model, sequence) -> np.ndarray:
    """Layer-adapter inputs, one row per position, for a candidate sequence."""
    cfg = model.config
    (ids,) = check_sequences([sequence], cfg.max_seq_len, cfg.vocab_size)
    _, (_, _, _, z, _, _, _) = _sequence_forward(model, ids)
    return z


class CandidateEncoder:
    """Vectorized layer-adapter inputs for many equal-length candidates.

    Per (position, token) it precomputes the embedding-adapter output and its
    query, key and value-times-output projections, so scoring a beam level is
    gathers plus small einsums.  ``tokens`` restricts the tables to the ids a
    search can emit.  Only valid while the adapters are not being trained.
    """

    def __init__(self, model: Model, tokens=None):
        self.model = model
        cfg = model.config
        tokens = np.arange(cfg.vocab_size) if tokens is None else np.asarray(sorted(tokens), dtype=np.int64)
        self.index = np.full(cfg.vocab_size, -1, dtype=np.int64)
        self.index[tokens] = np.arange(tokens.size)
        ea = model.adapters["embedding"]
        emb = model.embedding[tokens]
        L, n, d = cfg.max_seq_len, tokens.size, cfg.d_hidden
        if cfg.positional_encoding == "additive_before_embedding_adapter":
            h, _ = ea.forward((emb[None, :, :] + model.positional[:, None, :]).reshape(-1, d))
            h = h.reshape(L, n, d)
        else:
            base, _ = ea.forward(emb)
            if cfg.positional_encoding == "additive_after_embedding_adapter":
                h = base[None, :, :] + model.positional[:, None, :]
            else:
                h = np.broadcast_to(base, (L, n, d))
        att = model.attention
        self.h = np.ascontiguousarray(h)
        self.q = self.h @ att["wq"]
        self.k = self.h @ att["wk"]
        self.vo = (self.h @ att["wv"]) @ att["wo"]
        self.scale = 1.0 / np.sqrt(d)
        self.causal = cfg.attention_mode == "unidirectional"

    def hidden(self, seqs: np.ndarray, last_only: bool = False) -> np.ndarray:
        """``seqs`` is (M, L) token ids; returns (M, L, d), or (M, d) if ``last_only``."""
        seqs = np.asarray(seqs, dtype=np.int64)
        M, L = seqs.shape
        local = self.index[seqs]
        if np.any(local < 0):
            raise ValueError("candidate uses a token the encoder was not built for")
        pos = np.arange(L)[None, :]
        k = self.k[pos, local]
        vo = self.vo[pos, local]
        if last_only:
            q = self.q[L - 1, local[:, -1]]
            s = np.einsum("md,mld->ml", q, k) * self.scale
            if not self.causal:
                raise ValueError("last-position encoding is only meaningful with causal attention")
            s = s - s.max(axis=1, keepdims=True)
            w = np.exp(s)
            w /= w.sum(axis=1, keepdims=True)
            return self.h[L - 1, local[:, -1]] + np.einsum("ml,mld->md", w, vo)
        q = self.q[pos, local]
        s = np.einsum("mid,mjd->mij", q, k) * self.scale
        if self.causal:
            s = np.where(np.tril(np.ones((L, L), dtype=bool))[None], s, -np.inf)
        s = s - s.max(axis=2, keepdims=True)
        w = np.exp(s)
        w /= w.sum(axis=2, keepdims=True)
        return self.h[pos, local] + np.einsum("mij,mjd->mid", w, vo)


# -- training ----------------------------------------------------------------

def _predict(model: Model, seqs) -> np.ndarray:
    return np.array([_sequence_forward(model, np.asarray(s))[0] > 0 for s in seqs], dtype=np.float64)


def accuracy(model: Model, sequences, labels) -> float:
    cfg = model.config
    seqs = check_sequences(sequences, cfg.max_seq_len, cfg.vocab_size)
    ys = check_labels(labels, len(seqs))
    return float(np.mean(_predict(model, seqs) == ys))


def train_utility(model: Model, dataset, steps: int, lr: float, defense=None,
                  batch_size: int = 16, seed: int = 0) -> float:
    """SGD on adapters and head with (optionally defended) gradients.

    ``dataset`` needs ``sequences`` and ``labels``; every fourth example is
    held out for the returned accuracy.  The model is updated in place.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    seqs = list(dataset.sequences)
    labels = np.asarray(dataset.labels, dtype=np.float64)
    if len(np.unique(labels)) < 2:
        raise ValueError("dataset has a single class; accuracy would be meaningless")
    idx = np.arange(len(seqs))
    held = idx[idx % 4 == 3]
    train = idx[idx % 4 != 3]
    if len(held) == 0 or len(train) == 0:
        raise ValueError("dataset too small to hold out an evaluation split")
    defense = defense or defenses.DefenseConfig()
    rng = np.random.default_rng(seed)
    noise_rng = np.random.default_rng(defense.seed)
    for _ in range(steps):
        pick = rng.choice(train, size=min(batch_size, len(train)), replace=False)
        grads, gw_head, gb_head = _gradients(model, [seqs[i] for i in pick], labels[pick], with_head=True)
        tensors = grads["embedding"].tensors() + grads["layer"].tensors() + [gw_head, np.array([gb_head])]
        tensors = defenses.apply(tensors, defense, noise_rng)
        params = model.trainable_tensors()
        for p, g in zip(params[:-1], tensors[:-1]):
            p -= lr * g
        model.head_bias -= lr * float(tensors[-1][0])
    return accuracy(model, [seqs[i] for i in held], labels[held])


# -- checkpoints -------------------------------------------------------------

def save_model(model: Model, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "embedding": model.embedding.tolist(),
        "positional": None if model.positional is None else model.positional.tolist(),
        "attention": {k: v.tolist() for k, v in model.attention.items()},
        "adapters": {name: {"weights": [w.tolist() for w in a.weights],
                            "biases": [b.tolist() for b in a.biases]}
                     for name, a in model.adapters.items()},
        "head_weight": model.head_weight.tolist(),
        "head_bias": model.head_bias,
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> Model:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    config = ModelConfig.from_dict(doc["config"])
    arr = lambda x: np.array(x, dtype=np.float64)  # noqa: E731
    adapters = {name: Adapter([arr(w) for w in a["weights"]], [arr(b) for b in a["biases"]],
                              config.adapter_activation)
                for name, a in doc["adapters"].items()}
    positional = None if doc["positional"] is None else arr(doc["positional"])
    return Model(config, arr(doc["embedding"]), positional,
                 {k: arr(v) for k, v in doc["attention"].items()}, adapters,
                 arr(doc["head_weight"]), doc["head_bias"])
