"""Mean average precision with junk handling, nQE sweeps and regime groups."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .classic import QEMethodConfig, expand_query
from .errors import ConfigError, DataError, InvalidArgumentError
from .formats import QueryAnnotation
from .index import EmbeddingMatrix, VectorIndex

PROTOCOLS = ("easy", "medium", "hard")
REPORTED_PROTOCOLS = ("medium", "hard")


class UndefinedAP(InvalidArgumentError):
    """Raised when a query has no positives under the chosen protocol."""


def _ap_from_ranks(ranks: np.ndarray, n_pos: int) -> float:
    """AP from the 0-based filtered ranks of the retrieved positives (ascending)."""
    if n_pos == 0:
        raise UndefinedAP("average precision is undefined without positives")
    if ranks.size == 0:
        return 0.0
    j = np.arange(ranks.size, dtype=np.float64)
    r = ranks.astype(np.float64)
    before = np.divide(j, r, out=np.ones_like(j), where=r > 0)
    after = (j + 1) / (r + 1)
    return float(np.sum((before + after) / 2.0) / n_pos)


def average_precision(ranked: Sequence[str], positives: Iterable[str], junk: Iterable[str] = ()) -> float:
    """Trapezoidal AP over ``ranked`` after removing junk items.

    Positives that never appear in ``ranked`` contribute zero.
    """
    positives, junk = set(positives), set(junk)
    ranks, rank = [], 0
    for item in ranked:
        if item in junk:
            continue
        if item in positives:
            ranks.append(rank)
        rank += 1
    return _ap_from_ranks(np.asarray(ranks, dtype=np.int64), len(positives))


@dataclass
class EvalReport:
    method: str
    protocol: str
    per_query_ap: dict[str, float]
    dataset: str = "synthetic"
    nqe: int = 0
    ndba: int = 0
    config: dict = field(default_factory=dict)

    @property
    def map(self) -> float:
        if not self.per_query_ap:
            return float("nan")
        return float(np.mean(list(self.per_query_ap.values())))

    def row(self) -> dict:
        return {"method": self.method, "dataset": self.dataset, "protocol": self.protocol,
                "nQE": self.nqe, "nDBA": self.ndba, "mAP": self.map}


def expand_queries(index: VectorIndex, queries: EmbeddingMatrix, config: QEMethodConfig,
                   model=None, threads: int = 1) -> np.ndarray:
    """Expanded version of every query row; each query's own id is excluded."""
    if config.method == "lattqe":
        from .attention import load_model_cached

        model = model if model is not None else load_model_cached(config.checkpoint)
        sets = [index.rows[index.knn(q, config.nqe, [qid]).rows]
                for q, qid in zip(queries.rows, queries.ids)]
        out = []
        for start in range(0, queries.n, 256):
            stop = start + 256
            out.append(model.expand_batch(queries.rows[start:stop], sets[start:stop],
                                          config.weight_mode))
        return np.vstack(out) if out else np.zeros((0, index.dim), dtype=index.rows.dtype)

    def one(i):
        return expand_query(queries.rows[i], index, config, exclude=[queries.ids[i]])

    if threads <= 1:
        expanded = [one(i) for i in range(queries.n)]
    else:
        with ThreadPoolExecutor(threads) as pool:
            expanded = list(pool.map(one, range(queries.n)))
    return np.asarray(expanded, dtype=index.rows.dtype).reshape(queries.n, index.dim)


def _query_ap(index: VectorIndex, q: np.ndarray, qid: str, ann: QueryAnnotation,
              protocols: Sequence[str]) -> dict[str, float | None]:
    ranked_rows = index.ranking(q, exclude=[qid]).rows
    positions = index.matrix.positions
    out: dict[str, float | None] = {}
    for protocol in protocols:
        positives, junk = ann.resolve(protocol)
        if not positives:
            out[protocol] = None
            continue
        is_pos = np.zeros(index.n, dtype=bool)
        is_junk = np.zeros(index.n, dtype=bool)
        is_pos[[positions[i] for i in positives if i in positions]] = True
        is_junk[[positions[i] for i in junk if i in positions]] = True
        keep = ~is_junk[ranked_rows]
        ranks = np.flatnonzero(is_pos[ranked_rows][keep])
        out[protocol] = _ap_from_ranks(ranks, len(positives))
    return out


def evaluate_protocols(index: VectorIndex, queries: EmbeddingMatrix,
                       annotations: Mapping[str, QueryAnnotation], config: QEMethodConfig,
                       protocols: Sequence[str] = REPORTED_PROTOCOLS, *, model=None,
                       dataset: str = "synthetic", ndba: int = 0, threads: int = 1,
                       expanded: np.ndarray | None = None) -> list[EvalReport]:
    """Expand every query, search ``index`` and score it under each protocol."""
    for p in protocols:
        if p not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {p!r}")
    missing = [qid for qid in queries.ids if qid not in annotations]
    if missing:
        raise DataError(f"no annotation for query {missing[0]!r} ({len(missing)} missing)")
    if expanded is None:
        expanded = expand_queries(index, queries, config, model=model, threads=threads)

    def one(i):
        qid = queries.ids[i]
        return _query_ap(index, expanded[i], qid, annotations[qid], protocols)

    if threads <= 1:
        per_query = [one(i) for i in range(queries.n)]
    else:
        with ThreadPoolExecutor(threads) as pool:
            per_query = list(pool.map(one, range(queries.n)))
    reports = []
    for p in protocols:
        aps = {qid: res[p] for qid, res in zip(queries.ids, per_query) if res[p] is not None}
        reports.append(EvalReport(config.label, p, aps, dataset, config.nqe, ndba, config.to_dict()))
    return reports


def evaluate(index: VectorIndex, queries: EmbeddingMatrix, annotations: Mapping[str, QueryAnnotation],
             config: QEMethodConfig, protocol: str = "medium", **kwargs) -> EvalReport:
    return evaluate_protocols(index, queries, annotations, config, [protocol], **kwargs)[0]


def mean_map(reports: Sequence[EvalReport]) -> float:
    return float(np.mean([r.map for r in reports]))


def sweep_nqe(index: VectorIndex, queries: EmbeddingMatrix, annotations: Mapping[str, QueryAnnotation],
              methods: Sequence[QEMethodConfig], nqe_values: Sequence[int],
              protocols: Sequence[str] = REPORTED_PROTOCOLS, *, model=None,
              threads: int = 1) -> dict[tuple[str, int], float]:
    """Mean mAP over ``protocols`` for every (method, nQE) cell."""
    table: dict[tuple[str, int], float] = {}
    for method in methods:
        for nqe in nqe_values:
            reports = evaluate_protocols(index, queries, annotations, method.with_nqe(nqe),
                                         protocols, model=model, threads=threads)
            table[(method.label, nqe)] = mean_map(reports)
    return table


@dataclass
class GroupResult:
    group: int
    n_queries: int
    mean_statistic: float
    map_before: float
    map_after: float

    @property
    def relative_improvement(self) -> float:
        if self.map_before == 0:
            return float("nan")
        return 100.0 * (self.map_after - self.map_before) / self.map_before


GROUPINGS = ("by-n-relevants", "by-preqe-ap")


def group_analysis(before: Mapping[str, float], after: Mapping[str, float],
                   relevant_counts: Mapping[str, int] | None = None,
                   grouping: str = "by-n-relevants") -> list[GroupResult]:
    """Split queries at the 33rd/66th percentile of a statistic and compare mAP per group."""
    if set(before) != set(after):
        raise ConfigError("before/after AP sets cover different queries")
    if len(before) < 3:
        raise ConfigError("group analysis needs at least 3 queries")
    qids = sorted(before)
    if grouping == "by-n-relevants":
        if relevant_counts is None:
            raise ConfigError("by-n-relevants grouping needs relevant counts")
        stat = np.array([relevant_counts[q] for q in qids], dtype=np.float64)
    elif grouping == "by-preqe-ap":
        stat = np.array([before[q] for q in qids], dtype=np.float64)
    else:
        raise ConfigError(f"unknown grouping {grouping!r}; expected one of {GROUPINGS}")
    p33, p66 = np.percentile(stat, [33, 66])
    labels = np.where(stat <= p33, 0, np.where(stat <= p66, 1, 2))
    b = np.array([before[q] for q in qids])
    a = np.array([after[q] for q in qids])
    results = []
    for g in range(3):
        sel = labels == g
        if not sel.any():
            results.append(GroupResult(g, 0, float("nan"), float("nan"), float("nan")))
            continue
        results.append(GroupResult(g, int(sel.sum()), float(stat[sel].mean()),
                                   float(b[sel].mean()), float(a[sel].mean())))
    return results
