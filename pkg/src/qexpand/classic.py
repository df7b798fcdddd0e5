"""Generalised weighted-sum query expansion and the classic weighting rules.

Every method here builds ``normalize(sum_i w_i d_i)`` over the query (slot 0)
and its top-ranked neighbours; they differ only in how ``w`` is chosen.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Iterable

import numpy as np

from .errors import ConfigError, DegenerateError, ShapeError
from .index import VectorIndex
from .svm import svm_train

METHODS = ("none", "aqe", "aqewd", "dqe", "alpha-qe", "lattqe")
WEIGHT_MODES = ("similarity", "tempered-softmax")


@dataclass(frozen=True)
class QEMethodConfig:
    method: str = "none"
    nqe: int = 0
    alpha: float = 3.0
    svm_c: float = 0.1
    neg: int = 5
    checkpoint: str | None = None
    weight_mode: str = "similarity"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown QE method {self.method!r}; expected one of {METHODS}")
        if self.nqe < 0:
            raise ConfigError("nqe must be >= 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.svm_c <= 0:
            raise ConfigError("svm_c must be > 0")
        if self.method == "dqe" and self.neg < 1:
            raise ConfigError("dqe needs neg >= 1")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"unknown weight mode {self.weight_mode!r}")

    def with_nqe(self, nqe: int) -> QEMethodConfig:
        return replace(self, nqe=nqe)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def label(self) -> str:
        if self.method == "alpha-qe":
            return f"alpha-qe(a={self.alpha:g})"
        return self.method


def aggregate(q: np.ndarray, neighbors: np.ndarray, weights: Iterable[float]) -> np.ndarray:
    """L2-normalised ``w_0 q + sum_i w_i d_i``."""
    q = np.asarray(q)
    neighbors = np.asarray(neighbors).reshape(-1, q.shape[-1])
    w = np.asarray(list(weights) if not isinstance(weights, np.ndarray) else weights,
                   dtype=np.float64)
    if w.shape != (len(neighbors) + 1,):
        raise ShapeError(f"{w.size} weights for query + {len(neighbors)} neighbours")
    if w[0] > 0 and not np.any(w[1:]):
        return q.copy()
    total = w[0] * q.astype(np.float64) + w[1:] @ neighbors.astype(np.float64)
    length = np.linalg.norm(total)
    if not np.isfinite(length) or length == 0:
        raise DegenerateError("weighted sum of query and neighbours is the zero vector")
    return (total / length).astype(q.dtype)


def weights_aqe(k: int) -> np.ndarray:
    return np.ones(k + 1)


def weights_aqewd(k: int) -> np.ndarray:
    if k <= 0:
        return np.ones(1)
    return (k - np.arange(k + 1)) / k


def weights_alpha(neighbor_sims, alpha: float) -> np.ndarray:
    """``[1, max(s_1,0)^alpha, ...]``; slot 0 is the query's self-similarity."""
    sims = np.clip(np.asarray(neighbor_sims, dtype=np.float64), 0.0, None)
    return np.concatenate([[1.0], sims ** alpha])


def dqe_vector(q: np.ndarray, positives: np.ndarray, negatives: np.ndarray, c: float,
               seed: int = 0) -> np.ndarray:
    """Train a linear SVM (query + neighbours vs. far items) and return its unit normal."""
    pos = np.vstack([np.asarray(q)[None], np.asarray(positives).reshape(-1, len(q))])
    fit = svm_train(pos, negatives, c, seed=seed)
    length = np.linalg.norm(fit.w)
    if length == 0:
        raise DegenerateError("DQE classifier has zero weight vector")
    return (fit.w / length).astype(np.asarray(q).dtype)


def classic_weights(config: QEMethodConfig, neighbor_sims: np.ndarray) -> np.ndarray:
    k = len(neighbor_sims)
    if config.method == "aqe":
        return weights_aqe(k)
    if config.method == "aqewd":
        return weights_aqewd(k)
    if config.method == "alpha-qe":
        return weights_alpha(neighbor_sims, config.alpha)
    raise ConfigError(f"{config.method} has no closed-form weight vector")


def expand_query(q: np.ndarray, index: VectorIndex, config: QEMethodConfig, *,
                 exclude: Iterable[str] | None = None, model=None) -> np.ndarray:
    """Expand one query against ``index`` with the configured method."""
    q = np.asarray(q, dtype=index.rows.dtype)
    if config.method == "none":
        return q
    exclude = list(exclude) if exclude else None
    neighbors = index.knn(q, config.nqe, exclude)
    vectors = index.rows[neighbors.rows]
    if config.method == "dqe":
        far = index.bottom_k(q, config.neg, exclude)
        return dqe_vector(q, vectors, index.rows[far.rows], config.svm_c)
    if config.method == "lattqe":
        from .attention import expand_query_lattqe, load_model_cached
        model = model if model is not None else load_model_cached(config.checkpoint)
        return expand_query_lattqe(q, vectors, model, config.weight_mode)
    return aggregate(q, vectors, classic_weights(config, neighbors.sims))
