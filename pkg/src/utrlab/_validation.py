"""Small input-validation helpers shared across modules."""

from __future__ import annotations

import numpy as np


def check_vector(v, name: str = "vector", dim: int | None = None) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D; got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} has dimension {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_matrix(m, name: str = "matrix", cols: int | None = None) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, cols or 0)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D; got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise ValueError(f"{name} has {arr.shape[1]} columns, expected {cols}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_positive(value, name: str) -> float:
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number; got {value!r}")
    return float(value)


def check_sequences(batch, max_len: int, vocab_size: int) -> list[np.ndarray]:
    if len(batch) == 0:
        raise ValueError("batch is empty")
    out = []
    for i, seq in enumerate(batch):
        arr = np.asarray(seq, dtype=np.int64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError(f"sequence {i} must be a non-empty 1-D list of token ids")
        if arr.size > max_len:
            raise ValueError(f"sequence {i} has length {arr.size} > max_seq_len {max_len}")
        if arr.min() < 0 or arr.max() >= vocab_size:
            raise ValueError(f"sequence {i} contains token ids outside [0, {vocab_size})")
        out.append(arr)
    return out


def check_labels(labels, n: int) -> np.ndarray:
    arr = np.asarray(labels, dtype=np.float64)
    if arr.shape != (n,):
        raise ValueError(f"expected {n} labels; got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("labels must be 0 or 1")
    return arr
