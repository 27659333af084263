"""Orthonormal subspaces built from gradient-ratio vectors, and span queries on them.

The basis is produced by block Gram-Schmidt run twice per vector ("twice is
enough"), which matches modified Gram-Schmidt's orthogonality in practice.  All queries are read-only, so a :class:`Subspace`
can be shared freely between workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_positive, check_vector

DEFAULT_DROP_TOLERANCE = 1e-8


@dataclass(frozen=True)
class Subspace:
    ambient_dim: int
    basis: np.ndarray = field(repr=False)
    drop_tolerance: float = DEFAULT_DROP_TOLERANCE

    def __post_init__(self):
        self.basis.setflags(write=False)

    @property
    def rank(self) -> int:
        return self.basis.shape[0]

    @classmethod
    def empty(cls, ambient_dim: int, drop_tolerance: float = DEFAULT_DROP_TOLERANCE) -> "Subspace":
        return cls(ambient_dim, np.zeros((0, ambient_dim)), drop_tolerance)


def orthonormalize(spanning_vectors, drop_tolerance: float = DEFAULT_DROP_TOLERANCE,
                   ambient_dim: int | None = None) -> Subspace:
    """Orthonormal basis for the span of ``spanning_vectors`` (rows).

    A vector is dropped as dependent when its residual against the basis built
    so far has norm <= ``drop_tolerance`` times its own norm.  Input order fixes
    the basis.
    """
    check_positive(drop_tolerance, "drop_tolerance")
    vectors = list(spanning_vectors) if not isinstance(spanning_vectors, np.ndarray) else spanning_vectors
    if len(vectors) == 0:
        if ambient_dim is None:
            raise ValueError("ambient_dim is required when no spanning vectors are given")
        return Subspace.empty(ambient_dim, drop_tolerance)
    if not isinstance(vectors, np.ndarray):
        dims = {np.asarray(v).shape for v in vectors}
        if len(dims) != 1:
            raise ValueError(f"spanning vectors have mismatched shapes: {sorted(dims)}")
    mat = check_matrix(np.asarray(vectors, dtype=np.float64), "spanning_vectors")
    dim = mat.shape[1]
    if ambient_dim is not None and ambient_dim != dim:
        raise ValueError(f"spanning vectors have dimension {dim}, expected {ambient_dim}")

    basis = np.empty((min(mat.shape[0], dim), dim))
    rank = 0
    for row in mat:
        norm = np.linalg.norm(row)
        if norm == 0.0:
            continue
        w = row / norm
        for _ in range(2):
            q = basis[:rank]
            w = w - (q @ w) @ q
        resid = np.linalg.norm(w)
        if resid <= drop_tolerance:
            continue
        basis[rank] = w / resid
        rank += 1
        if rank == dim:
            break
    return Subspace(dim, basis[:rank].copy(), drop_tolerance)


def project(s: Subspace, v) -> np.ndarray:
    """Orthogonal projection of ``v`` (or of each row of a 2-D ``v``) onto ``s``."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape[-1] != s.ambient_dim:
        raise ValueError(f"vector has dimension {arr.shape[-1]}, subspace lives in {s.ambient_dim}")
    if s.rank == 0:
        return np.zeros_like(arr)
    return (arr @ s.basis.T) @ s.basis


def residual_ratios(s: Subspace, vectors) -> np.ndarray:
    """Vectorized ``||v - P(v)|| / ||v||`` over the rows of ``vectors``."""
    mat = np.asarray(vectors, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != s.ambient_dim:
        raise ValueError(f"expected shape (m, {s.ambient_dim}); got {mat.shape}")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0):
        raise ValueError("residual ratio is undefined for the zero vector")
    resid = mat - project(s, mat)
    ratios = np.linalg.norm(resid, axis=1) / norms
    return np.clip(ratios, 0.0, 1.0)


def residual_ratio(s: Subspace, v) -> float:
    v = check_vector(v, "v", s.ambient_dim)
    return float(residual_ratios(s, v[None, :])[0])


def in_span(s: Subspace, v, epsilon: float) -> bool:
    # relative residual, so one epsilon works across embedding scales
    check_positive(epsilon, "epsilon")
    return residual_ratio(s, v) < epsilon


def span_similarity(s: Subspace, v) -> float:
    return 1.0 - residual_ratio(s, v)


class SpanProjector(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` learns the span of the rows of ``X``.

    ``transform`` projects rows onto it, ``score_samples`` returns span
    similarity and ``predict`` the membership decision at ``epsilon``.
    """

    def __init__(self, drop_tolerance: float = DEFAULT_DROP_TOLERANCE, epsilon: float = 1e-3):
        self.drop_tolerance = drop_tolerance
        self.epsilon = epsilon

    def fit(self, X, y=None):
        X = check_matrix(X, "X")
        self.subspace_ = orthonormalize(X, self.drop_tolerance, ambient_dim=X.shape[1])
        self.n_features_in_ = X.shape[1]
        self.rank_ = self.subspace_.rank
        return self

    def transform(self, X):
        check_is_fitted(self, "subspace_")
        return project(self.subspace_, check_matrix(X, "X", self.n_features_in_))

    def residual_ratio(self, X):
        check_is_fitted(self, "subspace_")
        return residual_ratios(self.subspace_, check_matrix(X, "X", self.n_features_in_))

    def score_samples(self, X):
        return 1.0 - self.residual_ratio(X)

    def predict(self, X):
        check_positive(self.epsilon, "epsilon")
        return self.residual_ratio(X) < self.epsilon
