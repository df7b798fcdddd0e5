"""Learnable attention-based query expansion.

The query and its neighbours (plus learnable per-rank embeddings) go through a
stack of post-norm transformer encoders. The cosine between the transformed
query and each transformed item becomes that item's weight, and the expanded
query is the weighted sum of the *original* vectors.

Internally everything runs batched on ``(B, n, D)`` arrays with a ``(B, n)``
validity mask. Slot ``i`` always carries rank ``i``'s positional embedding, so
a dropped neighbour simply becomes a masked slot and later neighbours keep
their original rank.
"""
from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .classic import WEIGHT_MODES, aggregate
from .errors import CapacityError, ConfigError, DegenerateError, InvalidArgumentError, ShapeError
from .tensor import Parameter, Tensor


@dataclass
class ModelConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 8
    kmax: int = 64
    use_positional_encoding: bool = True
    position_only: bool = False
    use_self_attention: bool = True
    use_aux_head: bool = True
    weight_mode: str = "similarity"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.dim <= 0 or self.layers < 0 or self.kmax < 0:
            raise ConfigError("dim, layers and kmax must be positive")
        if self.heads <= 0 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"unknown weight mode {self.weight_mode!r}")

    @classmethod
    def paper_scale(cls, **overrides) -> ModelConfig:
        return cls(**{"dim": 2048, "layers": 3, "heads": 64, "kmax": 64, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(eq=False)
class TransformedSet:
    """Encoder outputs for one query: row 0 is the transformed query."""

    vectors: np.ndarray

    @property
    def query(self) -> np.ndarray:
        return self.vectors[0]

    @property
    def items(self) -> np.ndarray:
        return self.vectors[1:]

    def __len__(self) -> int:
        return len(self.vectors)


def _xavier(rng, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class LAttQEModel:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------ parameters
    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Parameter(np.array(value, dtype=self.dtype), name=name)

    def _init_params(self, rng) -> None:
        c, d = self.config, self.config.dim
        zeros, ones = np.zeros(d), np.ones(d)
        self._add("pe", rng.normal(0.0, 0.02, size=(c.kmax + 1, d)))
        for layer in range(c.layers):
            p = f"layer{layer}."
            if c.use_self_attention:
                for proj in ("q", "k", "v", "o"):
                    self._add(p + f"attn.w{proj}", _xavier(rng, d, d, self.dtype))
                    self._add(p + f"attn.b{proj}", zeros)
            else:
                self._add(p + "mix.w", _xavier(rng, d, d, self.dtype))
                self._add(p + "mix.b", zeros)
            self._add(p + "ln1.g", ones)
            self._add(p + "ln1.b", zeros)
            self._add(p + "ffn.w1", _xavier(rng, d, d, self.dtype))
            self._add(p + "ffn.b1", zeros)
            self._add(p + "ffn.w2", _xavier(rng, d, d, self.dtype))
            self._add(p + "ffn.b2", zeros)
            self._add(p + "ln2.g", ones)
            self._add(p + "ln2.b", zeros)
        self._add("aux.w", _xavier(rng, d, 1, self.dtype))
        self._add("aux.b", np.zeros(1))
        self._add("log_t", np.zeros(1))

    def parameters(self, include_temperature: bool = False) -> list[Parameter]:
        return [p for name, p in self.params.items() if include_temperature or name != "log_t"]

    def parameter_groups(self) -> dict[str, list[Parameter]]:
        groups: dict[str, list[Parameter]] = {}
        for name, p in self.params.items():
            key = name.split(".")[0]
            if key == "log_t":
                continue
            groups.setdefault(key, []).append(p)
        return groups

    @property
    def temperature(self) -> float:
        return float(np.exp(self.params["log_t"].data[0]))

    @temperature.setter
    def temperature(self, value: float) -> None:
        if value <= 0:
            raise InvalidArgumentError("temperature must be positive")
        self.params["log_t"].data = np.array([np.log(value)], dtype=self.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if tuple(v.shape) != self.params[k].shape:
                raise ShapeError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.dtype)

    def copy(self) -> LAttQEModel:
        other = LAttQEModel.__new__(LAttQEModel)
        other.config = ModelConfig.from_dict(self.config.to_dict())
        other.dtype = self.dtype
        other.params = {k: Parameter(p.data.copy(), name=k) for k, p in self.params.items()}
        return other

    # ------------------------------------------------------------ batched tape ops
    def _check_inputs(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.config.dim:
            raise ShapeError(f"inputs have dim {x.shape[-1]}, model expects {self.config.dim}")
        if x.shape[-2] - 1 > self.config.kmax:
            raise CapacityError(
                f"{x.shape[-2] - 1} neighbours exceed the model's kmax={self.config.kmax}")

    def positional_tensor(self, x: np.ndarray) -> Tensor:
        self._check_inputs(x)
        n = x.shape[-2]
        c = self.config
        if c.position_only:
            pe = T.getitem(self.params["pe"], slice(0, n))
            return T.add(T.Tensor(np.zeros(x.shape, dtype=self.dtype)), pe)
        xt = Tensor(x.astype(self.dtype, copy=False))
        if not c.use_positional_encoding:
            return xt
        return T.add(xt, T.getitem(self.params["pe"], slice(0, n)))

    def encode_tensor(self, h: Tensor, mask: np.ndarray | None) -> Tensor:
        c, p = self.config, self.params
        if h.shape[-1] != c.dim:
            raise ShapeError(f"encoder input dim {h.shape[-1]} != {c.dim}")
        for layer in range(c.layers):
            pre = f"layer{layer}."
            if c.use_self_attention:
                attn = {k: p[pre + "attn." + k] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
                mixed = T.multi_head_attention(h, attn, c.heads, mask)
            else:
                mixed = T.linear(h, p[pre + "mix.w"], p[pre + "mix.b"])
            h = T.layer_norm(T.add(h, mixed), p[pre + "ln1.g"], p[pre + "ln1.b"], c.ln_eps)
            ff = T.linear(T.relu(T.linear(h, p[pre + "ffn.w1"], p[pre + "ffn.b1"])),
                          p[pre + "ffn.w2"], p[pre + "ffn.b2"])
            h = T.layer_norm(T.add(h, ff), p[pre + "ln2.g"], p[pre + "ln2.b"], c.ln_eps)
        return h

    def weights_tensor(self, t: Tensor, mask: np.ndarray, mode: str) -> Tensor:
        """Cosine of each transformed slot to the transformed query (slot 0)."""
        if mode not in WEIGHT_MODES:
            raise ConfigError(f"unknown weight mode {mode!r}")
        mask = np.asarray(mask, dtype=bool)
        norms = T.norm(t, axis=-1)
        if np.any((norms.data <= 0) & mask):
            raise DegenerateError("transformed vector has zero norm")
        q = T.getitem(t, (slice(None), slice(0, 1)))
        dots = T.dot(t, q, axis=-1)
        # pad masked slots so they can never divide by zero
        safe = T.add(norms, (~mask).astype(self.dtype))
        cos = T.div(dots, T.mul(safe, T.getitem(safe, (slice(None), slice(0, 1)))))
        if mode == "similarity":
            return T.mul(cos, mask.astype(self.dtype))
        return T.softmax(cos, T.exp(self.params["log_t"]), axis=-1, mask=mask)

    def aggregate_tensor(self, x: np.ndarray, w: Tensor) -> Tensor:
        b, n, d = x.shape
        s = T.reshape(T.matmul(T.reshape(w, (b, 1, n)), Tensor(x.astype(self.dtype, copy=False))), (b, d))
        length = T.norm(s, axis=-1, keepdims=True)
        if np.any(length.data <= 0) or not np.all(np.isfinite(length.data)):
            raise DegenerateError("weighted sum of query and neighbours is the zero vector")
        return T.div(s, length)

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None, mode: str | None = None):
        """Batched pass. Returns ``(expanded (B,D), transformed (B,n,D), weights (B,n))``."""
        x = np.asarray(x)
        if mask is None:
            mask = np.ones(x.shape[:2], dtype=bool)
        mode = mode or self.config.weight_mode
        t = self.encode_tensor(self.positional_tensor(x), mask)
        w = self.weights_tensor(t, mask, mode)
        xm = np.where(mask[..., None], x, 0).astype(self.dtype)
        return self.aggregate_tensor(xm, w), t, w

    def aux_tensor(self, t: Tensor) -> Tensor:
        if not self.config.use_aux_head:
            raise InvalidArgumentError("auxiliary head is disabled for this model")
        logits = T.linear(t, self.params["aux.w"], self.params["aux.b"])
        return T.reshape(logits, logits.shape[:-1])

    # ------------------------------------------------------------ inference helpers
    def weights_batch(self, queries: np.ndarray, neighbor_sets: Sequence[np.ndarray],
                      mode: str | None = None) -> list[np.ndarray]:
        """Per-query weight vectors ``[w_0..w_k]`` computed in one padded pass."""
        queries = np.asarray(queries)
        sizes = [len(s) for s in neighbor_sets]
        n = max(sizes, default=0) + 1
        x = np.zeros((len(queries), n, self.config.dim), dtype=self.dtype)
        mask = np.zeros((len(queries), n), dtype=bool)
        x[:, 0] = queries
        mask[:, 0] = True
        for i, s in enumerate(neighbor_sets):
            if len(s):
                x[i, 1:len(s) + 1] = s
                mask[i, 1:len(s) + 1] = True
        self._check_inputs(x)
        with T.no_grad():
            _, _, w = self.forward(x, mask, mode)
        return [w.data[i, :k + 1].astype(np.float64) for i, k in enumerate(sizes)]

    def expand_batch(self, queries: np.ndarray, neighbor_sets: Sequence[np.ndarray],
                     mode: str | None = None) -> np.ndarray:
        """Expand many queries at once; neighbour sets may differ in length."""
        queries = np.asarray(queries)
        weights = self.weights_batch(queries, neighbor_sets, mode)
        return np.stack([aggregate(q, s, w) for q, s, w in zip(queries, neighbor_sets, weights)])


def _sequence(q: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    q = np.asarray(q)
    neighbors = np.asarray(neighbors).reshape(-1, q.shape[-1])
    return np.vstack([q[None], neighbors])


def positional_encode(model: LAttQEModel, inputs: np.ndarray) -> np.ndarray:
    """``inputs[i] + p_i`` for a (k+1, D) sequence whose row 0 is the query."""
    with T.no_grad():
        return model.positional_tensor(np.asarray(inputs)[None]).data[0]


def encode(model: LAttQEModel, inputs: np.ndarray) -> TransformedSet:
    inputs = np.asarray(inputs, dtype=model.dtype)
    with T.no_grad():
        t = model.encode_tensor(Tensor(inputs[None]), np.ones((1, len(inputs)), dtype=bool))
    return TransformedSet(t.data[0])


def attention_weights(t: TransformedSet | np.ndarray, mode: str = "similarity",
                      temperature: float = 1.0) -> np.ndarray:
    vectors = t.vectors if isinstance(t, TransformedSet) else np.asarray(t)
    if mode not in WEIGHT_MODES:
        raise ConfigError(f"unknown weight mode {mode!r}")
    vectors = vectors.astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise DegenerateError("transformed vector has zero norm")
    cos = vectors @ vectors[0] / (norms * norms[0])
    if mode == "similarity":
        return cos
    return T.softmax(cos, temperature).data


def aux_logits(model: LAttQEModel, t: TransformedSet) -> np.ndarray:
    with T.no_grad():
        return model.aux_tensor(Tensor(t.vectors[None].astype(model.dtype))).data[0]


def expand_query_lattqe(q: np.ndarray, neighbors: np.ndarray, model: LAttQEModel,
                        mode: str | None = None) -> np.ndarray:
    """Expanded query as a unit vector (same dtype as ``q``)."""
    q = np.asarray(q)
    seq = _sequence(q, neighbors)
    if len(seq) == 1:
        return q.copy()
    model._check_inputs(seq)
    mode = mode or model.config.weight_mode
    with T.no_grad():
        _, _, w = model.forward(seq[None].astype(model.dtype), None, mode)
    return aggregate(q, seq[1:], w.data[0].astype(np.float64))


@functools.lru_cache(maxsize=8)
def load_model_cached(path: str | None) -> LAttQEModel:
    if not path:
        raise ConfigError("lattqe needs a checkpoint path")
    from .formats import load_model
    return load_model(path)
