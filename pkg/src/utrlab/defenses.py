"""Gradient defenses on plain lists of tensors: clipped Gaussian noise and magnitude pruning."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

DEFENSE_KINDS = ("none", "dp", "prune")


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"
    sigma: float = 0.0
    clip_bound: float = 1.0
    prune_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"defense kind must be one of {DEFENSE_KINDS}; got {self.kind!r}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0; got {self.sigma}")
        if not self.clip_bound > 0:
            raise ValueError(f"clip_bound must be > 0; got {self.clip_bound}")
        if not 0 <= self.prune_rate < 1:
            raise ValueError(f"prune_rate must lie in [0, 1); got {self.prune_rate}")

    def to_dict(self) -> dict:
        return asdict(self)


def clip_and_noise(tensors, sigma: float, clip_bound: float, rng: np.random.Generator):
    """Per-tensor L2 clipping to ``clip_bound`` followed by N(0, (sigma*clip_bound)^2) noise."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0; got {sigma}")
    out = []
    for g in tensors:
        g = np.asarray(g, dtype=np.float64)
        norm = np.linalg.norm(g)
        factor = min(1.0, clip_bound / norm) if norm > 0 else 1.0
        clipped = g * factor if factor < 1.0 else g.copy()
        noise = rng.standard_normal(g.shape) * (sigma * clip_bound)
        out.append(clipped + noise)
    return out


def prune(tensors, rate: float):
    """Zero the ``floor(rate * n)`` smallest-magnitude entries of each tensor.

    Ties are broken by flat index (earlier entries are pruned first).
    """
    if not 0 <= rate < 1:
        raise ValueError(f"prune rate must lie in [0, 1); got {rate}")
    out = []
    for g in tensors:
        g = np.array(g, dtype=np.float64)
        flat = g.reshape(-1)
        # guard against 0.999 * 1000 == 998.999...
        n_zero = int(np.floor(rate * flat.size + 1e-9))
        if n_zero:
            order = np.lexsort((np.arange(flat.size), np.abs(flat)))
            flat[order[:n_zero]] = 0.0
        out.append(g)
    return out


def apply(tensors, config: DefenseConfig, rng: np.random.Generator | None = None):
    if config.kind == "none":
        return [np.array(t, dtype=np.float64) for t in tensors]
    if config.kind == "dp":
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        return clip_and_noise(tensors, config.sigma, config.clip_bound, rng)
    return prune(tensors, config.prune_rate)
