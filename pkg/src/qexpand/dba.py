"""Database-side augmentation: expand every database row offline and reindex."""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .classic import QEMethodConfig, expand_query
from .errors import QEError
from .evaluation import expand_queries
from .formats import write_embeddings
from .index import EmbeddingMatrix, NeighborList, VectorIndex

log = logging.getLogger(__name__)


def augment_database(index: VectorIndex, config: QEMethodConfig, ndba: int, model=None,
                     threads: int = 1) -> EmbeddingMatrix:
    """Each row becomes its own expansion over the original index (itself excluded).

    A row whose expansion fails keeps its original vector; the failure is logged.
    """
    src = index.matrix
    if ndba == 0 or config.method == "none":
        return EmbeddingMatrix(src.rows.copy(), list(src.ids), list(src.classes))
    cfg = config.with_nqe(ndba)
    try:
        rows = expand_queries(index, src, cfg, model=model, threads=threads)
    except (QEError, ArithmeticError) as exc:
        log.warning("batched augmentation failed (%s); retrying row by row", exc)
        rows = np.empty_like(src.rows)
        for i, (vec, rid) in enumerate(zip(src.rows, src.ids)):
            rows[i] = _expand_or_keep(vec, rid, index, cfg, model)
    return EmbeddingMatrix(np.asarray(rows, dtype=src.rows.dtype), list(src.ids), list(src.classes))


def _expand_or_keep(vec, rid, index, cfg, model):
    try:
        return expand_query(vec, index, cfg, exclude=[rid], model=model)
    except (QEError, ArithmeticError) as exc:
        log.warning("row %s: expansion failed (%s); keeping original vector", rid, exc)
        return vec


def dba_then_qe(index: VectorIndex, dba_config: QEMethodConfig, ndba: int,
                qe_config: QEMethodConfig, queries: EmbeddingMatrix, *, k: int | None = None,
                dba_model=None, qe_model=None, threads: int = 1) -> list[NeighborList]:
    """Augment the database, then expand each query against it and rank."""
    augmented = VectorIndex(augment_database(index, dba_config, ndba, dba_model, threads))
    expanded = expand_queries(augmented, queries, qe_config, model=qe_model, threads=threads)
    k = augmented.n if k is None else k
    return [augmented.knn(q, k, [qid], query_id=qid) for q, qid in zip(expanded, queries.ids)]


def file_sha256(path) -> str | None:
    if not path:
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_augmented(path, matrix: EmbeddingMatrix, config: QEMethodConfig, ndba: int,
                    model=None) -> Path:
    """QEXP matrix plus ``<path>.json`` provenance; returns the provenance path."""
    path = Path(path)
    write_embeddings(path, matrix.rows)
    provenance = {"method": config.method, "nDBA": ndba,
                  "checkpoint_sha256": file_sha256(config.checkpoint),
                  "T": model.temperature if model is not None else None,
                  "weight_mode": config.weight_mode, "ids": matrix.ids}
    out = path.with_name(path.name + ".json")
    out.write_text(json.dumps(provenance, indent=1), encoding="utf-8")
    return out
