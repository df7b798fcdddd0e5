"""Synthetic clustered corpora and the on-disk corpus directory layout.

A corpus directory holds ``embeddings.qexp``, ``metadata.jsonl`` and
``annotations.json``. Items belong to one of the splits ``train`` (training
classes), ``db`` (database members of evaluation classes), ``query``
(held-out evaluation queries, never searched) and ``distractor`` (no class).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError
from .formats import (ItemMeta, QueryAnnotation, read_annotations, read_embeddings,
                      read_metadata, write_annotations, write_embeddings, write_metadata)
from .index import EmbeddingMatrix, normalize_rows

DATABASE_SPLITS = ("db", "val", "distractor")


@dataclass
class SynthConfig:
    n_classes: int = 200
    items_per_class: tuple[int, int] = (5, 50)
    dim: int = 64
    sigma: float = 0.12
    n_distractors: int = 2000
    query_fraction: float = 0.1
    val_fraction: float = 0.5
    train_distractor_fraction: float = 0.0
    easy_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.items_per_class
        self.items_per_class = (int(lo), int(hi))
        if lo < 1 or hi < lo:
            raise ConfigError(f"items_per_class must satisfy 1 <= lo <= hi, got {self.items_per_class}")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.n_classes < 1 or self.dim < 1 or self.n_distractors < 0:
            raise ConfigError("n_classes and dim must be positive, n_distractors >= 0")
        if not 0 <= self.val_fraction <= 1 or not 0 <= self.query_fraction <= 1:
            raise ConfigError("fractions must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["items_per_class"] = list(self.items_per_class)
        return d


@dataclass(eq=False)
class Corpus:
    rows: np.ndarray
    items: list[ItemMeta]
    annotations: dict[str, QueryAnnotation] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.items) != len(self.rows):
            raise DataError(f"{len(self.items)} metadata entries for {len(self.rows)} rows")

    def select(self, splits: Iterable[str]) -> EmbeddingMatrix:
        wanted = set(splits)
        keep = [i for i, it in enumerate(self.items) if it.split in wanted]
        return EmbeddingMatrix(self.rows[keep], [self.items[i].id for i in keep],
                               [self.items[i].cls for i in keep])

    def database(self) -> EmbeddingMatrix:
        return self.select(DATABASE_SPLITS)

    def train(self) -> EmbeddingMatrix:
        return self.select(["train"])

    def queries(self) -> EmbeddingMatrix:
        return self.select(["query"])

    def save(self, directory) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        write_embeddings(out / "embeddings.qexp", self.rows)
        write_metadata(out / "metadata.jsonl", self.items)
        write_annotations(out / "annotations.json", self.annotations.values())

    @classmethod
    def load(cls, directory) -> Corpus:
        src = Path(directory)
        rows = read_embeddings(src / "embeddings.qexp")
        items = read_metadata(src / "metadata.jsonl", n_rows=len(rows))
        ann_path = src / "annotations.json"
        annotations = read_annotations(ann_path) if ann_path.exists() else {}
        return cls(normalize_rows(rows, [i.id for i in items]), items, annotations)


def _sphere(rng, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_corpus(config: SynthConfig) -> Corpus:
    """Clusters of ``normalize(center + sigma * gaussian)`` plus uniform distractors."""
    rng = np.random.default_rng(config.seed)
    d = config.dim
    centers = _sphere(rng, config.n_classes, d)
    lo, hi = config.items_per_class
    counts = rng.integers(lo, hi + 1, size=config.n_classes)
    n_val = int(round(config.val_fraction * config.n_classes))
    val_classes = set(rng.permutation(config.n_classes)[:n_val].tolist())

    rows: list[np.ndarray] = []
    items: list[ItemMeta] = []
    annotations: dict[str, QueryAnnotation] = {}

    def add(vec, cls, split, tag):
        items.append(ItemMeta(len(items), tag, cls, split))
        rows.append(vec)

    for c in range(config.n_classes):
        members = centers[c] + config.sigma * rng.standard_normal((counts[c], d))
        members /= np.linalg.norm(members, axis=1, keepdims=True)
        cls = f"c{c:04d}"
        ids = [f"{cls}-{j:03d}" for j in range(counts[c])]
        if c not in val_classes:
            for vec, tag in zip(members, ids):
                add(vec, cls, "train", tag)
            continue
        n_q = min(max(1, int(round(config.query_fraction * counts[c]))), counts[c] - 1)
        n_q = max(n_q, 0)
        for j, (vec, tag) in enumerate(zip(members, ids)):
            add(vec, cls, "query" if j < n_q else "db", tag)
        positives = ids[n_q:]
        for j in range(n_q):
            easy: list[str] = []
            if config.easy_fraction > 0 and positives:
                sims = members[n_q:] @ members[j]
                n_easy = int(round(config.easy_fraction * len(positives)))
                easy = [positives[i] for i in np.argsort(-sims, kind="stable")[:n_easy]]
            hard = [p for p in positives if p not in set(easy)]
            annotations[ids[j]] = QueryAnnotation(ids[j], easy, hard, [])

    n_train_dis = int(round(config.train_distractor_fraction * config.n_distractors))
    for j, vec in enumerate(_sphere(rng, config.n_distractors + n_train_dis, d)):
        split = "distractor" if j < config.n_distractors else "train"
        add(vec, None, split, f"x{j:06d}")

    return Corpus(np.asarray(rows, dtype=np.float32), items, annotations)


def baseline_map(corpus: Corpus, protocols=("medium", "hard")) -> float:
    """No-expansion mean mAP of a corpus; used to calibrate ``sigma``."""
    from .classic import QEMethodConfig
    from .evaluation import evaluate_protocols
    from .index import VectorIndex

    reports = evaluate_protocols(VectorIndex(corpus.database()), corpus.queries(),
                                 corpus.annotations, QEMethodConfig("none"), protocols)
    return float(np.mean([r.map for r in reports]))


def calibrate_sigma(config: SynthConfig, target: tuple[float, float] = (0.5, 0.7),
                    lo: float = 0.0, hi: float = 1.0, iters: int = 12) -> tuple[float, float]:
    """Bisection on ``sigma`` until the no-QE mAP falls inside ``target``.

    Returns ``(sigma, baseline mAP)``.
    """
    mid_target = sum(target) / 2
    sigma, score = config.sigma, float("nan")
    for _ in range(iters):
        sigma = (lo + hi) / 2
        cfg = SynthConfig(**{**config.to_dict(), "sigma": sigma})
        score = baseline_map(generate_corpus(cfg))
        if target[0] <= score <= target[1] and abs(score - mid_target) < 0.03:
            break
        if score > mid_target:
            lo = sigma
        else:
            hi = sigma
    return sigma, score
