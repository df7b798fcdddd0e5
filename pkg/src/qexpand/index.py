"""Exact cosine-similarity search over an in-memory embedding matrix."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ShapeError


def normalize_rows(rows: np.ndarray, ids: Sequence[str] | None = None) -> np.ndarray:
    """L2-normalise every row, refusing all-zero rows.

    Rows already unit-norm to within 1e-6 are returned untouched, so stored
    embeddings survive a save/load cycle bit for bit.
    """
    rows = np.asarray(rows)
    if not np.issubdtype(rows.dtype, np.floating):
        rows = rows.astype(np.float32)
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        who = ids[bad[0]] if ids is not None else f"row {bad[0]}"
        raise DataError(f"cannot normalise all-zero embedding {who}")
    scale = np.where(np.abs(norms - 1.0) <= 1e-6, 1.0, norms)
    out = (rows / scale[:, None]).astype(rows.dtype)
    keep = scale == 1.0
    out[keep] = rows[keep]
    return out


@dataclass(eq=False)
class EmbeddingMatrix:
    """N x D unit-norm rows with unique string ids."""

    rows: np.ndarray
    ids: list[str]
    classes: list[str | None] = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows)
        if self.rows.ndim != 2:
            raise ShapeError(f"embedding matrix must be 2-D, got shape {self.rows.shape}")
        self.ids = [str(i) for i in self.ids]
        if len(self.ids) != self.rows.shape[0]:
            raise ShapeError(f"{len(self.ids)} ids for {self.rows.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("embedding ids are not unique")
        if not self.classes:
            self.classes = [None] * len(self.ids)

    @classmethod
    def from_raw(cls, rows, ids, classes=None) -> EmbeddingMatrix:
        ids = [str(i) for i in ids]
        return cls(normalize_rows(rows, ids), ids, list(classes) if classes is not None else [])

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def row_of(self, item_id: str) -> int:
        return self.positions[item_id]

    @cached_property
    def positions(self) -> dict[str, int]:
        return {i: r for r, i in enumerate(self.ids)}


@dataclass(eq=False)
class NeighborList:
    """Ranked neighbours of one query; ``rows`` index into the searched matrix."""

    ids: list[str]
    sims: np.ndarray
    rows: np.ndarray
    query_id: str | None = None
    ranks: np.ndarray | None = None  # 1-based original ranks when the list was thinned

    def __len__(self) -> int:
        return len(self.ids)

    def head(self, k: int) -> NeighborList:
        return NeighborList(self.ids[:k], self.sims[:k], self.rows[:k], self.query_id)

    def entries(self) -> list[tuple[str, float]]:
        return [(i, float(s)) for i, s in zip(self.ids, self.sims)]


class VectorIndex:
    """Brute-force exact search. Immutable after construction."""

    def __init__(self, matrix: EmbeddingMatrix):
        self.matrix = matrix
        self.rows = matrix.rows
        # rank of each row's id in ascending id order, used as the tie-breaker
        order = sorted(range(matrix.n), key=lambda r: matrix.ids[r])
        self._id_rank = np.empty(matrix.n, dtype=np.int64)
        self._id_rank[order] = np.arange(matrix.n)

    @property
    def n(self) -> int:
        return self.matrix.n

    @property
    def dim(self) -> int:
        return self.matrix.dim

    def similarities(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=self.rows.dtype)
        if q.ndim != 1 or q.shape[0] != self.dim:
            raise ShapeError(f"query has shape {q.shape}, index dim is {self.dim}")
        return self.rows @ q

    def _select(self, sims: np.ndarray, k: int, exclude_rows, largest: bool) -> np.ndarray:
        keys = sims if largest else -sims
        candidates = np.arange(self.n)
        if exclude_rows:
            keep = np.ones(self.n, dtype=bool)
            keep[list(exclude_rows)] = False
            candidates = candidates[keep]
        k = min(max(int(k), 0), candidates.size)
        if k == 0:
            return candidates[:0]
        ck = keys[candidates]
        if k < candidates.size:
            # everything tied with the k-th best must be kept for the id tie-break
            kth = np.partition(ck, candidates.size - k)[candidates.size - k]
            sel = ck >= kth
            candidates, ck = candidates[sel], ck[sel]
        tie = self._id_rank[candidates] if largest else -self._id_rank[candidates]
        order = np.lexsort((tie, -ck))
        return candidates[order[:k]]

    def _exclude_rows(self, exclude: Iterable[str] | None) -> list[int]:
        if not exclude:
            return []
        pos = self.matrix.positions
        return [pos[i] for i in exclude if i in pos]

    def knn(self, q: np.ndarray, k: int, exclude: Iterable[str] | None = None,
            query_id: str | None = None) -> NeighborList:
        """The ``k`` most similar rows, descending, ties by ascending id."""
        if k < 0:
            raise ShapeError("k must be non-negative")
        sims = self.similarities(q)
        rows = self._select(sims, k, self._exclude_rows(exclude), largest=True)
        return NeighborList([self.matrix.ids[r] for r in rows], sims[rows], rows, query_id)

    def bottom_k(self, q: np.ndarray, k: int, exclude: Iterable[str] | None = None,
                 query_id: str | None = None) -> NeighborList:
        """The ``k`` least similar rows, ascending similarity.

        Ties are ordered by descending id so that ``bottom_k(q, N)`` is exactly
        the reverse of ``knn(q, N)``.
        """
        if k < 0:
            raise ShapeError("k must be non-negative")
        sims = self.similarities(q)
        rows = self._select(sims, k, self._exclude_rows(exclude), largest=False)
        return NeighborList([self.matrix.ids[r] for r in rows], sims[rows], rows, query_id)

    def ranking(self, q: np.ndarray, exclude: Iterable[str] | None = None) -> NeighborList:
        return self.knn(q, self.n, exclude)

    def search(self, queries: np.ndarray, k: int, excludes: Sequence[Iterable[str] | None] | None = None,
               threads: int = 1) -> list[NeighborList]:
        """Per-query ``knn`` over a batch; the split across threads cannot change results."""
        queries = np.asarray(queries)
        excludes = list(excludes) if excludes is not None else [None] * len(queries)

        def one(i):
            return self.knn(queries[i], k, excludes[i])

        if threads <= 1:
            return [one(i) for i in range(len(queries))]
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(len(queries))))
