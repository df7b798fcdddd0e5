"""Discriminative training of the attention aggregator.

One update: sample a batch of training queries with randomly truncated and
randomly thinned neighbour lists, expand them with the current model, mine
hard negatives for the expanded queries from the current pool, and minimise a
contrastive loss (plus the auxiliary relevance loss) with Adam.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .attention import LAttQEModel, ModelConfig
from .classic import QEMethodConfig
from .errors import ConfigError, NumericError
from .evaluation import REPORTED_PROTOCOLS, evaluate_protocols, mean_map
from .formats import QueryAnnotation, save_model
from .index import EmbeddingMatrix, NeighborList, VectorIndex
from .tensor import Adam, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    margin: float = 0.1
    lr: float = 1e-4
    lr_decay: float = 0.99
    weight_decay: float = 1e-6
    batch_size: int = 64
    negatives: int = 5
    pool_size: int = 20000
    pool_refresh: int = 2000
    neighbor_range: tuple[int, int] = (32, 64)
    drop_max: float = 0.6
    aux_weight: float = 1.0
    max_epochs: int = 100
    updates_per_epoch: int = 100
    val_nqe: int = 64
    temperature_updates: int = 200
    temperature_lr: float = 1e-2
    seed: int = 0
    drop_prob: float | None = None  # forces the per-query drop probability (testing hook)
    rotation_augment: bool = False  # present each batch in a random orthonormal frame

    def __post_init__(self):
        self.neighbor_range = (int(self.neighbor_range[0]), int(self.neighbor_range[1]))
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        lo, hi = self.neighbor_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad neighbour range {self.neighbor_range}")
        if self.batch_size < 1 or self.negatives < 0 or self.pool_refresh < 1:
            raise ConfigError("batch_size and pool_refresh must be >= 1, negatives >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["neighbor_range"] = list(self.neighbor_range)
        return d


def contrastive_loss(q_hat, d, y, margin: float) -> Tensor:
    """``y z^2 + (1-y) max(0, m - z)^2`` with ``z = ||q_hat - d||`` (summed over rows)."""
    q_hat = T.as_tensor(q_hat)
    diff = T.sub(q_hat, T.as_tensor(d, q_hat))
    z = T.norm(diff, axis=-1)
    y = np.asarray(y, dtype=q_hat.dtype)
    hinge = T.relu(T.sub(T.as_tensor(np.asarray(margin, dtype=q_hat.dtype)), z))
    per = T.add(T.mul(T.mul(z, z), y), T.mul(T.mul(hinge, hinge), 1 - y))
    return T.sum(per)


@dataclass
class TrainingSet:
    """Training items with integer class codes and a cached neighbour table."""

    matrix: EmbeddingMatrix
    max_neighbors: int = 64

    def __post_init__(self):
        if self.matrix.n == 0:
            raise ConfigError("training split is empty")
        self.index = VectorIndex(self.matrix)
        codes: dict[str, int] = {}
        labels = []
        for i, c in enumerate(self.matrix.classes):
            # unlabelled items each get their own negative code
            labels.append(codes.setdefault(c, len(codes)) if c is not None else -1 - i)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.neighbor_rows = np.full((self.matrix.n, self.max_neighbors), -1, dtype=np.int64)
        for r in range(self.matrix.n):
            nl = self.index.knn(self.matrix.rows[r], self.max_neighbors, [self.matrix.ids[r]])
            self.neighbor_rows[r, :len(nl)] = nl.rows
        counts = np.bincount(self.labels[self.labels >= 0]) if (self.labels >= 0).any() else np.zeros(0)
        self.query_rows = np.flatnonzero((self.labels >= 0) & (counts[np.maximum(self.labels, 0)] >= 2)
                                         if counts.size else np.zeros(self.matrix.n, dtype=bool))
        if self.query_rows.size == 0:
            raise ConfigError("training split has no class with two or more items")

    def top(self, row: int, n: int) -> np.ndarray:
        rows = self.neighbor_rows[row, :n]
        return rows[rows >= 0]


@dataclass
class ValidationSet:
    index: VectorIndex
    queries: EmbeddingMatrix
    annotations: Mapping[str, QueryAnnotation]

    def __post_init__(self):
        if self.queries.n == 0 or self.index.n == 0:
            raise ConfigError("validation split is empty")


def sample_neighbors(data: TrainingSet, row: int, rng: np.random.Generator,
                     config: TrainConfig) -> NeighborList:
    """Top-n neighbours (n uniform in the configured range) with random dropping.

    ``ranks`` on the result keeps each survivor's 1-based original rank.
    """
    lo, hi = config.neighbor_range
    n = int(rng.integers(lo, hi + 1))
    rows = data.top(row, min(n, data.max_neighbors))
    p = config.drop_prob if config.drop_prob is not None else rng.uniform(0.0, config.drop_max)
    keep = rng.random(rows.size) >= p
    ranks = np.flatnonzero(keep) + 1
    rows = rows[keep]
    sims = data.matrix.rows[rows] @ data.matrix.rows[row]
    return NeighborList([data.matrix.ids[r] for r in rows], sims, rows, data.matrix.ids[row], ranks)


def mine_negatives(q_hat: np.ndarray, pool_rows: np.ndarray, pool_vectors: np.ndarray,
                   pool_labels: np.ndarray, query_label: int, count: int) -> np.ndarray:
    """Most similar pool rows of other classes, at most one per class."""
    if pool_rows.size == 0:
        raise ConfigError("negative pool is empty")
    sims = pool_vectors @ q_hat
    chosen: list[int] = []
    used: set[int] = set()
    for j in np.argsort(-sims, kind="stable"):
        lab = int(pool_labels[j])
        if lab == query_label or lab in used:
            continue
        used.add(lab)
        chosen.append(int(pool_rows[j]))
        if len(chosen) == count:
            break
    return np.asarray(chosen, dtype=np.int64)


@dataclass
class TrainingSample:
    query_id: str
    neighbor_ids: list[str]
    positive_id: str
    negative_ids: list[str]
    relevant: np.ndarray  # per neighbour, same class as the query


@dataclass
class Batch:
    x: np.ndarray          # (B, n, D) inputs, slot i <-> rank i
    mask: np.ndarray       # (B, n) valid slots
    relevant: np.ndarray   # (B, n) aux targets
    query_rows: np.ndarray
    positives: np.ndarray  # (B,) rows
    samples: list[NeighborList] = field(default_factory=list)
    negatives: list[np.ndarray] = field(default_factory=list)  # filled in by mining
    rotation: np.ndarray | None = None  # (D, D) orthogonal map applied to ``x``

    def describe(self, data: TrainingSet) -> list[TrainingSample]:
        ids = data.matrix.ids
        out = []
        for b, (r, s) in enumerate(zip(self.query_rows, self.samples)):
            negs = self.negatives[b] if b < len(self.negatives) else []
            out.append(TrainingSample(ids[r], list(s.ids), ids[self.positives[b]],
                                      [ids[n] for n in negs], self.relevant[b, s.ranks] > 0
                                      if s.ranks is not None else np.zeros(0, dtype=bool)))
        return out


def random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian with the sign fix)."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


class Trainer:
    """Owns the sampling state (rng, pool, update counter) of one training run."""

    def __init__(self, model: LAttQEModel, data: TrainingSet, config: TrainConfig,
                 validation: ValidationSet | None = None):
        self.model = model
        self.data = data
        self.config = config
        self.validation = validation
        self.rng = np.random.default_rng(config.seed)
        self.updates = 0
        self.pool_refreshes = 0
        self.optimizer = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.refresh_pool()

    # ------------------------------------------------------------ sampling
    def refresh_pool(self) -> None:
        n = self.data.matrix.n
        size = min(self.config.pool_size, n)
        self.pool = np.sort(self.rng.choice(n, size=size, replace=False))
        self.pool_vectors = self.data.matrix.rows[self.pool]
        self.pool_labels = self.data.labels[self.pool]
        self.pool_refreshes += 1

    def _positive(self, row: int) -> int:
        label = self.data.labels[row]
        same = self.pool[(self.pool_labels == label) & (self.pool != row)]
        if same.size == 0:
            same = np.flatnonzero(self.data.labels == label)
            same = same[same != row]
        return int(same[self.rng.integers(same.size)])

    def sample_batch(self, size: int | None = None) -> Batch:
        size = size or self.config.batch_size
        rows = self.rng.choice(self.data.query_rows, size=size,
                               replace=size > self.data.query_rows.size)
        samples = [sample_neighbors(self.data, int(r), self.rng, self.config) for r in rows]
        batch = self.build_batch(rows, samples, [self._positive(int(r)) for r in rows])
        if self.config.rotation_augment:
            batch.rotation = random_rotation(self.rng, batch.x.shape[-1]).astype(batch.x.dtype)
            batch.x = batch.x @ batch.rotation
        return batch

    def build_batch(self, rows, samples: Sequence[NeighborList], positives) -> Batch:
        d = self.data.matrix.dim
        width = max([int(s.ranks.max()) if len(s) else 0 for s in samples] + [0]) + 1
        x = np.zeros((len(rows), width, d), dtype=self.model.dtype)
        mask = np.zeros((len(rows), width), dtype=bool)
        relevant = np.zeros((len(rows), width), dtype=self.model.dtype)
        for b, (r, s) in enumerate(zip(rows, samples)):
            x[b, 0] = self.data.matrix.rows[r]
            mask[b, 0] = True
            relevant[b, 0] = 1.0
            if len(s):
                x[b, s.ranks] = self.data.matrix.rows[s.rows]
                mask[b, s.ranks] = True
                relevant[b, s.ranks] = self.data.labels[s.rows] == self.data.labels[r]
        return Batch(x, mask, relevant, np.asarray(rows), np.asarray(positives), list(samples))

    # ------------------------------------------------------------ loss
    def batch_loss(self, batch: Batch, mode: str = "similarity", aux: bool = True,
                   remine: bool = True):
        """Total loss of a batch; with ``remine=False`` the negatives already
        stored on the batch are reused (keeps the loss smooth for gradient checks)."""
        model, cfg = self.model, self.config
        q_hat, t, _ = model.forward(batch.x, batch.mask, mode)
        if batch.rotation is not None:  # back to the frame of the stored rows
            q_hat = T.matmul(q_hat, batch.rotation.T)
        rows = self.data.matrix.rows
        loss = contrastive_loss(q_hat, rows[batch.positives], np.ones(len(batch.positives)), cfg.margin)
        if cfg.negatives > 0:
            if remine or len(batch.negatives) != len(batch.query_rows):
                batch.negatives = [
                    mine_negatives(q_hat.data[b], self.pool, self.pool_vectors, self.pool_labels,
                                   int(self.data.labels[r]), cfg.negatives)
                    for b, r in enumerate(batch.query_rows)]
            negs = np.zeros((len(batch.query_rows), cfg.negatives, rows.shape[1]), dtype=model.dtype)
            neg_mask = np.zeros((len(batch.query_rows), cfg.negatives), dtype=model.dtype)
            for b, found in enumerate(batch.negatives):
                negs[b, :found.size] = rows[found]
                neg_mask[b, :found.size] = 1.0
            z = T.norm(T.sub(T.reshape(q_hat, (q_hat.shape[0], 1, q_hat.shape[1])), Tensor(negs)), axis=-1)
            hinge = T.relu(T.sub(T.as_tensor(np.asarray(cfg.margin, dtype=model.dtype)), z))
            loss = T.add(loss, T.sum(T.mul(T.mul(hinge, hinge), neg_mask)))
        if aux and cfg.aux_weight and model.config.use_aux_head:
            bce = T.bce_with_logits(model.aux_tensor(t), batch.relevant)
            valid = batch.mask.astype(model.dtype)
            per_sample = T.div(T.sum(T.mul(bce, valid), axis=-1), valid.sum(axis=-1))
            loss = T.add(loss, T.mul(T.sum(per_sample), cfg.aux_weight))
        return loss

    def train_step(self, batch: Batch | None = None) -> float:
        batch = batch or self.sample_batch()
        self.model.zero_grad()
        loss = self.batch_loss(batch)
        if not np.isfinite(loss.data).all():
            raise NumericError(f"non-finite loss {loss.item()} at update {self.updates}")
        loss.backward()
        self.optimizer.step()
        self.updates += 1
        if self.updates % self.config.pool_refresh == 0:
            self.refresh_pool()
        return loss.item()

    # ------------------------------------------------------------ validation
    def validate(self, model: LAttQEModel | None = None) -> float:
        if self.validation is None:
            return float("nan")
        v = self.validation
        cfg = QEMethodConfig("lattqe", nqe=min(self.config.val_nqe, self.model.config.kmax))
        reports = evaluate_protocols(v.index, v.queries, v.annotations, cfg, REPORTED_PROTOCOLS,
                                     model=model or self.model)
        return mean_map(reports)


@dataclass
class FitResult:
    model: LAttQEModel
    curve: list[float]
    initial_map: float
    best_epoch: int  # 1-based; 0 means the initial model was kept
    log: list[dict] = field(default_factory=list)


def fit(train: EmbeddingMatrix | TrainingSet, validation: ValidationSet, config: TrainConfig,
        model_config: ModelConfig | None = None, *, model: LAttQEModel | None = None,
        on_epoch: Callable[[dict], None] | None = None, log_path=None,
        checkpoint_path=None) -> FitResult:
    """Train for ``max_epochs`` and keep the epoch with the best validation mAP.

    ``log_path`` receives one JSON line per epoch; ``checkpoint_path`` is
    rewritten (LQEM) whenever the validation mAP improves.
    """
    data = train if isinstance(train, TrainingSet) else TrainingSet(
        train, max_neighbors=max(config.neighbor_range[1], 1))
    model = model or LAttQEModel(model_config or ModelConfig(dim=data.matrix.dim), seed=config.seed)
    if model.config.kmax < config.neighbor_range[1]:
        raise ConfigError(f"neighbour range {config.neighbor_range} exceeds kmax={model.config.kmax}")
    trainer = Trainer(model, data, config, validation)
    initial = trainer.validate()
    curve: list[float] = []
    records: list[dict] = []
    best_state, best_epoch, best = model.state_dict(), 0, -np.inf
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        losses = [trainer.train_step() for _ in range(config.updates_per_epoch)]
        score = trainer.validate()
        curve.append(score)
        rec = {"epoch": epoch, "update": trainer.updates, "loss": float(np.mean(losses)),
               "val_map": score, "lr": trainer.optimizer.lr,
               "wall_ms": round(1000 * (time.perf_counter() - start), 1)}
        records.append(rec)
        log.info(json.dumps(rec))
        if on_epoch:
            on_epoch(rec)
        if log_path:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        if score > best:
            best, best_epoch, best_state = score, epoch, model.state_dict()
            if checkpoint_path:
                save_model(checkpoint_path, model, {"epoch": epoch, "val_map": score,
                                                    "train_config": config.to_dict()})
        trainer.optimizer.lr *= config.lr_decay
    result_model = model.copy()
    result_model.load_state_dict(best_state)
    return FitResult(result_model, curve, initial, best_epoch, records)


def fit_dba_temperature(model: LAttQEModel, train: EmbeddingMatrix | TrainingSet,
                        config: TrainConfig, steps: int | None = None) -> float:
    """Freeze everything except the softmax temperature and fit it (in log space)."""
    data = train if isinstance(train, TrainingSet) else TrainingSet(
        train, max_neighbors=max(config.neighbor_range[1], 1))
    steps = config.temperature_updates if steps is None else steps
    trainer = Trainer(model, data, config)
    temperature = model.params["log_t"]
    opt = Adam([temperature], lr=config.temperature_lr)
    for _ in range(steps):
        batch = trainer.sample_batch()
        model.zero_grad()
        loss = trainer.batch_loss(batch, mode="tempered-softmax", aux=False)
        if not np.isfinite(loss.data).all():
            raise NumericError("non-finite loss while fitting the temperature")
        loss.backward()
        opt.step()
        trainer.updates += 1
        if trainer.updates % config.pool_refresh == 0:
            trainer.refresh_pool()
    model.zero_grad()
    return model.temperature
