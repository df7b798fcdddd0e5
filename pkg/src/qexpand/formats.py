"""Readers and writers for the on-disk formats.

``QEXP``  embeddings: magic, u32 version, u32 N, u32 D, N*D little-endian f32.
``LQEM``  tensor checkpoints: magic, u32 version, u64 header length, a JSON
          header describing every tensor, then the concatenated raw values.
JSON-lines item metadata and JSON query annotations live next to them.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .errors import MagicError, SchemaError, TruncationError, VersionError

EMBEDDING_MAGIC = b"QEXP"
CHECKPOINT_MAGIC = b"LQEM"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "db", "query", "distractor")
_DTYPES = {"float32": "<f4", "float64": "<f8"}


# ---------------------------------------------------------------- embeddings

def write_embeddings(path, rows: np.ndarray) -> None:
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise SchemaError(f"embedding matrix must be 2-D, got {rows.shape}")
    n, d = rows.shape
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC + struct.pack("<III", FORMAT_VERSION, n, d))
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def read_embeddings(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    return parse_embeddings(blob, str(path))


def parse_embeddings(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 4:
        raise TruncationError(f"{source}: file too short for magic bytes")
    if blob[:4] != EMBEDDING_MAGIC:
        raise MagicError(f"{source}: bad magic {blob[:4]!r}, expected {EMBEDDING_MAGIC!r}")
    if len(blob) < 16:
        raise TruncationError(f"{source}: header truncated ({len(blob)} bytes)")
    version, n, d = struct.unpack_from("<III", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{source}: unsupported version {version}, reader handles {FORMAT_VERSION}")
    expected = 16 + 4 * n * d
    if len(blob) < expected:
        raise TruncationError(f"{source}: payload truncated, {len(blob)} of {expected} bytes")
    if len(blob) > expected:
        raise VersionError(
            f"{source}: {len(blob) - expected} unknown trailing bytes after a version-"
            f"{version} payload")
    return np.frombuffer(blob, dtype="<f4", count=n * d, offset=16).reshape(n, d).astype(np.float32)


# ---------------------------------------------------------------- item metadata

@dataclass(frozen=True)
class ItemMeta:
    row: int
    id: str
    cls: str | None
    split: str

    def to_json(self) -> dict:
        return {"row": self.row, "id": self.id, "class": self.cls, "split": self.split}


def write_metadata(path, items: Iterable[ItemMeta]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_json()) + "\n")


def read_metadata(path, n_rows: int | None = None) -> list[ItemMeta]:
    items: list[ItemMeta] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            items.append(_item_from(rec, f"{path}:{lineno}"))
    rows = sorted(i.row for i in items)
    if rows != list(range(len(items))):
        raise SchemaError(f"{path}: rows must cover 0..{len(items) - 1} exactly once")
    if n_rows is not None and len(items) != n_rows:
        raise SchemaError(f"{path}: {len(items)} metadata lines for {n_rows} embedding rows")
    ids = [i.id for i in items]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate item ids")
    return sorted(items, key=lambda i: i.row)


def _item_from(rec: Any, where: str) -> ItemMeta:
    if not isinstance(rec, dict):
        raise SchemaError(f"{where}: expected an object")
    for key in ("row", "id", "class", "split"):
        if key not in rec:
            raise SchemaError(f"{where}: missing field {key!r}")
    if not isinstance(rec["row"], int) or rec["row"] < 0:
        raise SchemaError(f"{where}: field 'row' must be a non-negative integer")
    if not isinstance(rec["id"], str):
        raise SchemaError(f"{where}: field 'id' must be a string")
    if rec["class"] is not None and not isinstance(rec["class"], str):
        raise SchemaError(f"{where}: field 'class' must be a string or null")
    if rec["split"] not in SPLITS:
        raise SchemaError(f"{where}: field 'split' must be one of {SPLITS}")
    return ItemMeta(rec["row"], rec["id"], rec["class"], rec["split"])


# ---------------------------------------------------------------- annotations

@dataclass
class QueryAnnotation:
    id: str
    easy: frozenset[str]
    hard: frozenset[str]
    junk: frozenset[str]

    def __post_init__(self):
        self.easy, self.hard, self.junk = frozenset(self.easy), frozenset(self.hard), frozenset(self.junk)
        if (self.easy | self.hard) & self.junk or self.easy & self.hard:
            raise SchemaError(f"query {self.id}: positive and junk sets overlap")
        if self.id in self.easy | self.hard | self.junk:
            raise SchemaError(f"query {self.id}: listed in its own annotation sets")

    def resolve(self, protocol: str) -> tuple[frozenset[str], frozenset[str]]:
        """(positives, junk) under protocol ``easy``, ``medium`` or ``hard``."""
        if protocol == "easy":
            return self.easy, self.junk | self.hard
        if protocol == "medium":
            return self.easy | self.hard, self.junk
        if protocol == "hard":
            return self.hard, self.junk | self.easy
        raise SchemaError(f"unknown protocol {protocol!r}")

    def to_json(self) -> dict:
        return {"id": self.id, "easy": sorted(self.easy), "hard": sorted(self.hard),
                "junk": sorted(self.junk)}


def write_annotations(path, annotations: Iterable[QueryAnnotation]) -> None:
    payload = {"queries": [a.to_json() for a in annotations]}
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def read_annotations(path) -> dict[str, QueryAnnotation]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(payload, dict) or not isinstance(payload.get("queries"), list):
        raise SchemaError(f"{path}: expected an object with a 'queries' list")
    out: dict[str, QueryAnnotation] = {}
    for i, rec in enumerate(payload["queries"]):
        where = f"{path}: queries[{i}]"
        if not isinstance(rec, dict) or not isinstance(rec.get("id"), str):
            raise SchemaError(f"{where}: missing string field 'id'")
        lists = {}
        for key in ("easy", "hard", "junk"):
            val = rec.get(key, [])
            if not isinstance(val, list) or not all(isinstance(v, str) for v in val):
                raise SchemaError(f"{where}: field {key!r} must be a list of strings")
            lists[key] = val
        if rec["id"] in out:
            raise SchemaError(f"{where}: duplicate query id {rec['id']!r}")
        out[rec["id"]] = QueryAnnotation(rec["id"], **lists)
    return out


# ---------------------------------------------------------------- checkpoints

def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        value = np.asarray(value)
        dtype = str(value.dtype)
        if dtype not in _DTYPES:
            raise SchemaError(f"tensor {name}: unsupported dtype {dtype}")
        raw = np.ascontiguousarray(value, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(value.shape), "dtype": dtype,
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def read_checkpoint_header(blob: bytes, source: str = "<bytes>") -> tuple[dict, int]:
    if len(blob) < 4:
        raise TruncationError(f"{source}: file too short for magic bytes")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise MagicError(f"{source}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < 16:
        raise TruncationError(f"{source}: header truncated ({len(blob)} bytes)")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{source}: unsupported version {version}, reader handles {FORMAT_VERSION}")
    if len(blob) < 16 + hlen:
        raise TruncationError(f"{source}: JSON header truncated")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{source}: unreadable JSON header ({exc})") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise SchemaError(f"{source}: header lacks a 'tensors' list")
    return header, 16 + hlen


def parse_checkpoint(blob: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    header, start = read_checkpoint_header(blob, source)
    payload = len(blob) - start
    tensors: dict[str, np.ndarray] = {}
    end = 0
    for i, ent in enumerate(header["tensors"]):
        try:
            name, shape, dtype = ent["name"], tuple(ent["shape"]), ent["dtype"]
            offset, length = int(ent["offset"]), int(ent["length"])
        except (KeyError, TypeError, ValueError):
            raise SchemaError(f"{source}: malformed tensor entry {i}") from None
        if dtype not in _DTYPES:
            raise SchemaError(f"{source}: tensor {name}: unsupported dtype {dtype}")
        itemsize = np.dtype(_DTYPES[dtype]).itemsize
        if length != itemsize * int(np.prod(shape, dtype=np.int64)):
            raise SchemaError(f"{source}: tensor {name}: length does not match shape")
        if offset + length > payload:
            raise TruncationError(f"{source}: tensor {name} extends past end of file")
        arr = np.frombuffer(blob, dtype=_DTYPES[dtype], count=length // itemsize,
                            offset=start + offset)
        tensors[name] = arr.reshape(shape).astype(dtype)
        end = max(end, offset + length)
    if payload > end:
        raise VersionError(
            f"{source}: {payload - end} unknown trailing bytes after a version-"
            f"{FORMAT_VERSION} payload")
    return tensors, header.get("meta", {})


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- models

def save_model(path, model, extra_meta: dict | None = None) -> None:
    meta = {"kind": "lattqe", "config": model.config.to_dict(),
            "temperature": model.temperature, "dtype": str(model.dtype)}
    meta.update(extra_meta or {})
    write_checkpoint(path, model.state_dict(), meta)


def load_model(path):
    from .attention import LAttQEModel, ModelConfig

    tensors, meta = read_checkpoint(path)
    if "config" not in meta:
        raise SchemaError(f"{path}: checkpoint header lacks model config")
    model = LAttQEModel(ModelConfig.from_dict(meta["config"]),
                        dtype=np.dtype(meta.get("dtype", "float32")))
    model.load_state_dict(tensors)
    return model
