"""In-process federated exchange: a client computes adapter gradients, the server observes them.

The observable is a :class:`GradientUpdate`.  Defenses are applied to it
before it leaves the client; :func:`serialize_update` fixes the wire format
so a networked harness could replace the in-process hand-off.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import defenses
from .defenses import DefenseConfig
from .toymodel import AdapterGradients, Model, adapter_gradients

MAGIC = b"UTRG"
WIRE_VERSION = 1


@dataclass
class ClientDataset:
    sequences: list
    labels: list
    # ground truth for scoring only; never handed to the attack
    source_texts: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.sequences) != len(self.labels):
            raise ValueError("sequences and labels differ in length")
        if self.source_texts and len(self.source_texts) != len(self.sequences):
            raise ValueError("source_texts and sequences differ in length")
        if any(len(s) == 0 for s in self.sequences):
            raise ValueError("empty sequence in client dataset")

    def __len__(self):
        return len(self.sequences)


@dataclass
class GradientUpdate:
    embedding_adapter: AdapterGradients
    layer_adapter: AdapterGradients
    batch_size: int
    round_id: int = 0

    def tensors(self) -> list[np.ndarray]:
        return self.embedding_adapter.tensors() + self.layer_adapter.tensors()

    def with_tensors(self, tensors) -> "GradientUpdate":
        tensors = list(tensors)
        n = len(self.embedding_adapter.tensors())
        return GradientUpdate(AdapterGradients.from_tensors(tensors[:n]),
                              AdapterGradients.from_tensors(tensors[n:]),
                              self.batch_size, self.round_id)

    def scaled(self, c: float) -> "GradientUpdate":
        return self.with_tensors([c * t for t in self.tensors()])


PRECISIONS = ("float64", "float32")


def client_round(model: Model, dataset: ClientDataset, batch_indices, round_id: int = 0,
                 defense: DefenseConfig | None = None, precision: str = "float64") -> GradientUpdate:
    """Gradients of one local step on ``dataset[batch_indices]``, optionally defended.

    ``precision="float32"`` rounds every released tensor to single precision,
    as a client training in float32 would send it.
    """
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {PRECISIONS}; got {precision!r}")
    idx = list(batch_indices)
    if not idx:
        raise ValueError("empty batch selection")
    n = len(dataset)
    if any(not 0 <= i < n for i in idx):
        raise IndexError(f"batch index out of range for dataset of size {n}")
    grads = adapter_gradients(model, [dataset.sequences[i] for i in idx], [dataset.labels[i] for i in idx])
    update = GradientUpdate(grads["embedding"], grads["layer"], len(idx), round_id)
    if defense is not None and defense.kind == "dp":
        update = apply_dp(update, defense)
    elif defense is not None and defense.kind == "prune":
        update = apply_pruning(update, defense)
    if precision == "float32":
        update = update.with_tensors([t.astype(np.float32).astype(np.float64) for t in update.tensors()])
    return update


def apply_dp(update: GradientUpdate, d: DefenseConfig) -> GradientUpdate:
    if d.kind != "dp":
        raise ValueError(f"apply_dp needs a dp defense config; got kind={d.kind!r}")
    rng = np.random.default_rng(d.seed)
    return update.with_tensors(defenses.clip_and_noise(update.tensors(), d.sigma, d.clip_bound, rng))


def apply_pruning(update: GradientUpdate, d: DefenseConfig) -> GradientUpdate:
    if d.kind != "prune":
        raise ValueError(f"apply_pruning needs a prune defense config; got kind={d.kind!r}")
    return update.with_tensors(defenses.prune(update.tensors(), d.prune_rate))


class DPDefense(TransformerMixin, BaseEstimator):
    """Stateless transformer form of :func:`apply_dp` (``transform`` takes an update)."""

    def __init__(self, sigma: float = 0.0, clip_bound: float = 1.0, seed: int = 0):
        self.sigma = sigma
        self.clip_bound = clip_bound
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def transform(self, update: GradientUpdate) -> GradientUpdate:
        return apply_dp(update, DefenseConfig("dp", sigma=self.sigma, clip_bound=self.clip_bound, seed=self.seed))


class GradientPruning(TransformerMixin, BaseEstimator):
    def __init__(self, prune_rate: float = 0.9):
        self.prune_rate = prune_rate

    def fit(self, X=None, y=None):
        return self

    def transform(self, update: GradientUpdate) -> GradientUpdate:
        return apply_pruning(update, DefenseConfig("prune", prune_rate=self.prune_rate))


# -- wire format -------------------------------------------------------------
#
#   magic "UTRG" | u16 version | u32 batch_size | i64 round_id | u16 n_adapters
#   per adapter:  u32 n_tensors
#   per tensor:   u8 ndim | ndim x u32 dims | u64 payload bytes | float64 LE data
#
# All integers little-endian.

_HEADER = struct.Struct("<4sHIqH")


def serialize_update(update: GradientUpdate) -> bytes:
    parts = [_HEADER.pack(MAGIC, WIRE_VERSION, update.batch_size, update.round_id, 2)]
    for adapter in (update.embedding_adapter, update.layer_adapter):
        tensors = adapter.tensors()
        parts.append(struct.pack("<I", len(tensors)))
        for t in tensors:
            t = np.ascontiguousarray(t, dtype="<f8")
            parts.append(struct.pack("<B", t.ndim))
            parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
            parts.append(struct.pack("<Q", t.nbytes))
            parts.append(t.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"truncated update: need {n} bytes for {what} at offset {self.pos}, "
                             f"only {len(self.data) - self.pos} left")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def deserialize_update(data: bytes) -> GradientUpdate:
    r = _Reader(bytes(data))
    magic, version, batch_size, round_id, n_adapters = r.unpack(_HEADER.format, "header")
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r} at offset 0")
    if version != WIRE_VERSION:
        raise ValueError(f"unsupported wire version {version} at offset 4")
    if n_adapters != 2:
        raise ValueError(f"expected 2 adapters, found {n_adapters} at offset {_HEADER.size - 2}")
    adapters = []
    for a in range(n_adapters):
        at = r.pos
        (n_tensors,) = r.unpack("<I", f"adapter {a} tensor count")
        if n_tensors == 0 or n_tensors % 2:
            raise ValueError(f"adapter {a} declares {n_tensors} tensors at offset {at}; "
                             "need a non-zero even count")
        tensors = []
        for i in range(n_tensors):
            (ndim,) = r.unpack("<B", f"tensor {i} ndim")
            shape = r.unpack(f"<{ndim}I", f"tensor {i} shape")
            at = r.pos
            (nbytes,) = r.unpack("<Q", f"tensor {i} length")
            if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"tensor {i} length {nbytes} does not match shape {shape} at offset {at}")
            raw = r.take(nbytes, f"tensor {i} data")
            tensors.append(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))
        adapters.append(AdapterGradients.from_tensors(tensors))
    if r.pos != len(r.data):
        raise ValueError(f"{len(r.data) - r.pos} trailing bytes at offset {r.pos}")
    return GradientUpdate(adapters[0], adapters[1], batch_size, round_id)
