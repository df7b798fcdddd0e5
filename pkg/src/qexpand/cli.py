"""Command-line workbench: ``qexpand <command> [options]``.

Defaults may come from an INI file given with ``--config``. Keys in a
``[defaults]`` section apply to every command and keys in a section named
after the command (``[train]``, ``[eval]`` ...) apply to that command only.
Keys use the long flag name with dashes or underscores; flags on the command
line win over the file.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric or
convergence error. Failures print one line to stderr of the form
``error kind=<kind> detail=<subkind> type=<class> message=<json string>``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .classic import METHODS, WEIGHT_MODES, QEMethodConfig
from .corpus import Corpus, SynthConfig, baseline_map, calibrate_sigma, generate_corpus
from .errors import ConfigError, DataError, NumericError, QEError
from .evaluation import (GROUPINGS, PROTOCOLS, REPORTED_PROTOCOLS, evaluate_protocols,
                         expand_queries, group_analysis, mean_map)
from .formats import read_checkpoint_header, save_model, write_embeddings
from .index import VectorIndex

log = logging.getLogger("qexpand")

EXIT_CODES = {"config": 1, "data": 2, "numeric": 3}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------- helpers

def resolve_threads(value: int | None) -> int:
    if value is not None:
        threads = value
    else:
        env = os.environ.get("QEXPAND_THREADS")
        try:
            threads = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"QEXPAND_THREADS must be an integer, got {env!r}") from None
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    return threads


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hashes(args) -> dict[str, str]:
    out = {}
    for key in ("corpus", "checkpoint", "dba_checkpoint"):
        value = getattr(args, key, None)
        if not value:
            continue
        p = Path(value)
        files = sorted(f for f in p.iterdir() if f.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.exists():
                out[str(f)] = sha256(f)
    return out


def write_manifest(args, out: Path, outputs: Sequence[Path]) -> Path:
    resolved = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "command": args.command,
        "config": json.loads(json.dumps(resolved, default=str)),
        "seed": args.seed,
        "threads": args.threads,
        "inputs": _input_hashes(args),
        "outputs": {str(p): sha256(p) for p in outputs if Path(p).is_file()},
        "versions": {"qexpand": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    path = out / f"manifest-{args.command}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_corpus(path) -> Corpus:
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"corpus directory {p} does not exist")
    return Corpus.load(p)


def method_config(args, method: str | None = None, nqe: int | None = None) -> QEMethodConfig:
    return QEMethodConfig(method or args.method, nqe=args.nqe if nqe is None else nqe,
                          alpha=args.alpha, svm_c=args.svm_c, neg=args.neg,
                          checkpoint=args.checkpoint, weight_mode=args.weight_mode)


def _load_model(args, path=None):
    from .formats import load_model

    path = path or getattr(args, "checkpoint", None)
    if not path:
        return None
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} does not exist")
    return load_model(path)


def write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------- commands

def cmd_synth(args, out: Path) -> list[Path]:
    cfg = SynthConfig(n_classes=args.classes, items_per_class=(args.items_min, args.items_max),
                      dim=args.dim, sigma=args.sigma, n_distractors=args.distractors,
                      query_fraction=args.query_fraction, val_fraction=args.val_fraction,
                      train_distractor_fraction=args.train_distractors,
                      easy_fraction=args.easy_fraction, seed=args.seed)
    if args.calibrate:
        sigma, score = calibrate_sigma(cfg, (args.target_min, args.target_max))
        cfg = SynthConfig(**{**cfg.to_dict(), "sigma": sigma})
        print(f"calibrated sigma={sigma:.4f} baseline mAP={score:.4f}")
    corpus = generate_corpus(cfg)
    corpus.save(out)
    (out / "synth.json").write_text(json.dumps(cfg.to_dict(), indent=1), encoding="utf-8")
    counts: dict[str, int] = {}
    for item in corpus.items:
        counts[item.split] = counts.get(item.split, 0) + 1
    print(f"wrote {len(corpus.items)} items to {out}: " +
          ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    if args.report_baseline:
        print(f"no-QE mean mAP {baseline_map(corpus):.4f}")
    return [out / "embeddings.qexp", out / "metadata.jsonl", out / "annotations.json"]


def cmd_index(args, out: Path) -> list[Path]:
    corpus = load_corpus(args.corpus)
    db = corpus.database()
    path = out / "index.qexp"
    write_embeddings(path, db.rows)
    (out / "index-ids.json").write_text(json.dumps(db.ids), encoding="utf-8")
    print(f"indexed {db.n} database rows of dimension {db.dim}")
    return [path, out / "index-ids.json"]


def _query_matrix(corpus: Corpus, ids: list[str] | None):
    queries = corpus.queries()
    if not ids:
        return queries
    pos = queries.positions
    missing = [i for i in ids if i not in pos]
    if missing:
        raise DataError(f"unknown query id {missing[0]!r}")
    from .index import EmbeddingMatrix
    keep = [pos[i] for i in ids]
    return EmbeddingMatrix(queries.rows[keep], ids, [queries.classes[k] for k in keep])


def cmd_search(args, out: Path) -> list[Path]:
    corpus = load_corpus(args.corpus)
    index = VectorIndex(corpus.database())
    queries = _query_matrix(corpus, args.queries)
    cfg = method_config(args)
    expanded = expand_queries(index, queries, cfg, model=_load_model(args), threads=args.threads)
    results = {}
    for q, qid in zip(expanded, queries.ids):
        results[qid] = [[i, round(float(s), 6)] for i, s in index.knn(q, args.k, [qid]).entries()]
    path = out / "search.json"
    path.write_text(json.dumps({"method": cfg.label, "k": args.k, "results": results}, indent=1),
                    encoding="utf-8")
    print(f"searched {queries.n} queries with {cfg.label}, top {args.k} written to {path}")
    return [path]


def cmd_expand(args, out: Path) -> list[Path]:
    corpus = load_corpus(args.corpus)
    index = VectorIndex(corpus.database())
    queries = _query_matrix(corpus, args.queries)
    cfg = method_config(args)
    expanded = expand_queries(index, queries, cfg, model=_load_model(args), threads=args.threads)
    path = out / "expanded.qexp"
    write_embeddings(path, expanded)
    (out / "expanded-ids.json").write_text(json.dumps(queries.ids), encoding="utf-8")
    print(f"expanded {queries.n} queries with {cfg.label}")
    return [path, out / "expanded-ids.json"]


def _model_config(args):
    from .attention import ModelConfig

    return ModelConfig(dim=args.dim, layers=args.layers, heads=args.heads, kmax=args.kmax,
                       use_positional_encoding=not args.no_pe, position_only=args.position_only,
                       use_self_attention=not args.no_attention, use_aux_head=not args.no_aux)


def _train_config(args):
    from .training import TrainConfig

    return TrainConfig(margin=args.margin, lr=args.lr, lr_decay=args.lr_decay,
                       weight_decay=args.weight_decay, batch_size=args.batch_size,
                       negatives=args.negatives, pool_size=args.pool_size,
                       pool_refresh=args.pool_refresh,
                       neighbor_range=(args.neighbors_min, args.neighbors_max),
                       drop_max=args.drop_max, aux_weight=args.aux_weight,
                       max_epochs=args.epochs, updates_per_epoch=args.updates_per_epoch,
                       val_nqe=args.val_nqe, temperature_updates=args.temperature_updates,
                       temperature_lr=args.temperature_lr, seed=args.seed,
                       rotation_augment=args.rotation_augment)


def cmd_train(args, out: Path) -> list[Path]:
    from .training import ValidationSet, fit

    corpus = load_corpus(args.corpus)
    validation = ValidationSet(VectorIndex(corpus.database()), corpus.queries(), corpus.annotations)
    log_path, ckpt = out / "train_log.jsonl", out / "model.lqem"
    log_path.unlink(missing_ok=True)
    result = fit(corpus.train(), validation, _train_config(args), _model_config(args),
                 log_path=log_path, checkpoint_path=ckpt,
                 on_epoch=lambda r: print(f"epoch {r['epoch']:3d} loss {r['loss']:.4f} "
                                          f"val mAP {r['val_map']:.4f}", flush=True))
    if not ckpt.exists():
        save_model(ckpt, result.model, {"epoch": 0, "val_map": result.initial_map})
    curve = [{"epoch": 0, "val_map": result.initial_map}] + [
        {"epoch": i + 1, "val_map": v} for i, v in enumerate(result.curve)]
    write_csv(out / "curve.csv", curve)
    print(f"initial val mAP {result.initial_map:.4f}; best epoch {result.best_epoch} "
          f"val mAP {max(result.curve, default=result.initial_map):.4f}")
    return [ckpt, log_path, out / "curve.csv"]


def cmd_fit_temperature(args, out: Path) -> list[Path]:
    from .training import fit_dba_temperature

    corpus = load_corpus(args.corpus)
    model = _load_model(args)
    if model is None:
        raise ConfigError("fit-temperature needs --checkpoint")
    before = model.temperature
    t = fit_dba_temperature(model, corpus.train(), _train_config(args), steps=args.steps)
    path = out / "model-tempered.lqem"
    save_model(path, model, {"temperature_fitted_from": before})
    print(f"temperature {before:.4f} -> {t:.4f}")
    return [path]


def cmd_dba(args, out: Path) -> list[Path]:
    from .dba import augment_database, write_augmented

    corpus = load_corpus(args.corpus)
    index = VectorIndex(corpus.database())
    cfg = method_config(args, nqe=args.ndba)
    model = _load_model(args)
    matrix = augment_database(index, cfg, args.ndba, model, threads=args.threads)
    path = out / "augmented.qexp"
    prov = write_augmented(path, matrix, cfg, args.ndba, model)
    print(f"augmented {matrix.n} database rows with {cfg.label} nDBA={args.ndba}")
    return [path, prov]


def _eval_reports(args, corpus: Corpus, method: str, nqe: int):
    from .dba import augment_database

    index = VectorIndex(corpus.database())
    if args.dba_method != "none" and args.ndba > 0:
        dba_cfg = QEMethodConfig(args.dba_method, nqe=args.ndba, alpha=args.alpha,
                                 svm_c=args.svm_c, neg=args.neg, checkpoint=args.dba_checkpoint,
                                 weight_mode=args.dba_weight_mode)
        dba_model = _load_model(args, args.dba_checkpoint) if args.dba_checkpoint else None
        index = VectorIndex(augment_database(index, dba_cfg, args.ndba, dba_model, args.threads))
    cfg = method_config(args, method, nqe)
    return evaluate_protocols(index, corpus.queries(), corpus.annotations, cfg, args.protocols,
                              model=_load_model(args) if method == "lattqe" else None,
                              dataset=args.dataset, ndba=args.ndba if args.dba_method != "none" else 0,
                              threads=args.threads)


def cmd_eval(args, out: Path) -> list[Path]:
    corpus = load_corpus(args.corpus)
    reports = _eval_reports(args, corpus, args.method, args.nqe)
    rows = [r.row() for r in reports]
    write_csv(out / "eval.csv", rows)
    per_query = {r.protocol: r.per_query_ap for r in reports}
    (out / "eval.json").write_text(json.dumps({"rows": rows, "mean_mAP": mean_map(reports),
                                               "per_query_ap": per_query}, indent=1),
                                   encoding="utf-8")
    for r in rows:
        print(f"{r['method']:<12} {r['protocol']:<7} nQE={r['nQE']:<3} nDBA={r['nDBA']:<3} "
              f"mAP={100 * r['mAP']:.2f}")
    return [out / "eval.csv", out / "eval.json"]


def cmd_sweep(args, out: Path) -> list[Path]:
    corpus = load_corpus(args.corpus)
    rows = []
    for method in args.methods:
        for nqe in args.nqe_values:
            reports = _eval_reports(args, corpus, method, nqe)
            for r in reports:
                rows.append(r.row())
            rows.append({"method": reports[0].method, "dataset": args.dataset, "protocol": "mean",
                         "nQE": nqe, "nDBA": reports[0].ndba, "mAP": mean_map(reports)})
            print(f"{reports[0].method:<12} nQE={nqe:<3} mean mAP={100 * mean_map(reports):.2f}",
                  flush=True)
    path = out / "sweep.csv"
    write_csv(path, rows)
    return [path]


def cmd_groups(args, out: Path) -> list[Path]:
    corpus = load_corpus(args.corpus)
    before = {r.protocol: r for r in _eval_reports(args, corpus, "none", 0)}
    after = {r.protocol: r for r in _eval_reports(args, corpus, args.method, args.nqe)}
    rows = []
    for protocol in args.protocols:
        b, a = before[protocol].per_query_ap, after[protocol].per_query_ap
        counts = {}
        for qid in b:
            positives, _ = corpus.annotations[qid].resolve(protocol)
            counts[qid] = len(positives)
        for g in group_analysis(b, a, counts, args.grouping):
            rows.append({"protocol": protocol, "grouping": args.grouping, "group": g.group,
                         "n_queries": g.n_queries, "mean_statistic": g.mean_statistic,
                         "map_before": g.map_before, "map_after": g.map_after,
                         "relative_improvement": g.relative_improvement})
            print(f"{protocol:<7} group {g.group}: n={g.n_queries:<4} "
                  f"{100 * g.map_before:6.2f} -> {100 * g.map_after:6.2f} "
                  f"({g.relative_improvement:+.1f}%)")
    path = out / "groups.csv"
    write_csv(path, rows)
    return [path]


def cmd_inspect_checkpoint(args, out: Path) -> list[Path]:
    path = Path(args.checkpoint or "")
    if not path.is_file():
        raise DataError(f"checkpoint {path} does not exist")
    from .formats import parse_checkpoint

    blob = path.read_bytes()
    header, _ = read_checkpoint_header(blob, str(path))
    parse_checkpoint(blob, str(path))  # full validation
    summary = {"path": str(path), "sha256": hashlib.sha256(blob).hexdigest(),
               "meta": header.get("meta", {}),
               "tensors": [{k: t[k] for k in ("name", "shape", "dtype")} for t in header["tensors"]],
               "n_parameters": int(sum(np.prod(t["shape"], dtype=np.int64) for t in header["tensors"]))}
    target = out / "checkpoint.json"
    target.write_text(json.dumps(summary, indent=1), encoding="utf-8")
    print(json.dumps({k: summary[k] for k in ("path", "n_parameters")}))
    return [target]


# ---------------------------------------------------------------- parser

def _add_method_args(p, method_default="none", nqe_default: int | None = 0):
    p.add_argument("--method", choices=METHODS, default=method_default)
    if nqe_default is not None:
        p.add_argument("--nqe", type=int, default=nqe_default)
    p.add_argument("--alpha", type=float, default=3.0)
    p.add_argument("--svm-c", type=float, default=0.1)
    p.add_argument("--neg", type=int, default=5, help="DQE negatives (bottom-ranked items)")
    p.add_argument("--checkpoint", help="LQEM model for lattqe")
    p.add_argument("--weight-mode", choices=WEIGHT_MODES, default="similarity")


def _add_eval_args(p):
    p.add_argument("--protocols", type=_names, default=list(REPORTED_PROTOCOLS))
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--dba-method", choices=METHODS, default="none")
    p.add_argument("--ndba", type=int, default=0)
    p.add_argument("--dba-checkpoint")
    p.add_argument("--dba-weight-mode", choices=WEIGHT_MODES, default="tempered-softmax")


def _add_model_args(p):
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--kmax", type=int, default=64)
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--no-pe", action="store_true")
    p.add_argument("--position-only", action="store_true")
    p.add_argument("--no-aux", action="store_true")


def _add_train_args(p):
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--updates-per-epoch", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=0.99)
    p.add_argument("--weight-decay", type=float, default=1e-6)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--negatives", type=int, default=5)
    p.add_argument("--pool-size", type=int, default=20000)
    p.add_argument("--pool-refresh", type=int, default=2000)
    p.add_argument("--neighbors-min", type=int, default=32)
    p.add_argument("--neighbors-max", type=int, default=64)
    p.add_argument("--drop-max", type=float, default=0.6)
    p.add_argument("--aux-weight", type=float, default=1.0)
    p.add_argument("--val-nqe", type=int, default=64)
    p.add_argument("--temperature-updates", type=int, default=200)
    p.add_argument("--temperature-lr", type=float, default=1e-2)
    p.add_argument("--rotation-augment", action="store_true",
                   help="train in a random orthonormal frame per batch (isotropic corpora)")


COMMANDS = {
    "synth": cmd_synth, "index": cmd_index, "search": cmd_search, "expand": cmd_expand,
    "train": cmd_train, "fit-temperature": cmd_fit_temperature, "dba": cmd_dba,
    "eval": cmd_eval, "sweep": cmd_sweep, "groups": cmd_groups,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="qexpand-out", help="output directory")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (env QEXPAND_THREADS; default 1)")
    common.add_argument("--config", help="INI file with defaults")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = _Parser(prog="qexpand", description="Query expansion workbench")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--classes", type=int, default=200)
    p.add_argument("--items-min", type=int, default=5)
    p.add_argument("--items-max", type=int, default=50)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--sigma", type=float, default=0.17)
    p.add_argument("--distractors", type=int, default=2000)
    p.add_argument("--query-fraction", type=float, default=0.1)
    p.add_argument("--val-fraction", type=float, default=0.5)
    p.add_argument("--train-distractors", type=float, default=0.0,
                   help="unlabelled training items as a fraction of --distractors")
    p.add_argument("--easy-fraction", type=float, default=0.0)
    p.add_argument("--calibrate", action="store_true", help="tune sigma to the target band")
    p.add_argument("--target-min", type=float, default=0.5)
    p.add_argument("--target-max", type=float, default=0.7)
    p.add_argument("--report-baseline", action="store_true")

    p = sub.add_parser("index", parents=[common], help="validate and export the database")
    p.add_argument("--corpus", required=True)

    for name, text in (("search", "rank the database for each query"),
                       ("expand", "write expanded query vectors")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--corpus", required=True)
        p.add_argument("--queries", type=_names, help="comma-separated query ids (default all)")
        _add_method_args(p)
        if name == "search":
            p.add_argument("--k", type=int, default=100)

    p = sub.add_parser("train", parents=[common], help="train the attention aggregator")
    p.add_argument("--corpus", required=True)
    _add_model_args(p)
    _add_train_args(p)

    p = sub.add_parser("fit-temperature", parents=[common], help="fit the softmax temperature")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=None)
    _add_train_args(p)

    p = sub.add_parser("dba", parents=[common], help="database-side augmentation")
    p.add_argument("--corpus", required=True)
    _add_method_args(p, "aqe")
    p.add_argument("--ndba", type=int, default=2)

    p = sub.add_parser("eval", parents=[common], help="mAP of one method")
    p.add_argument("--corpus", required=True)
    _add_method_args(p)
    _add_eval_args(p)

    p = sub.add_parser("sweep", parents=[common], help="mAP over methods x nQE values")
    p.add_argument("--corpus", required=True)
    p.add_argument("--methods", type=_names, default=["aqe", "aqewd", "alpha-qe", "dqe"])
    p.add_argument("--nqe", dest="nqe_values", type=_ints, default=[0, 1, 2, 4, 8, 16, 32, 64])
    _add_method_args(p, nqe_default=None)
    p.set_defaults(nqe=0)
    _add_eval_args(p)

    p = sub.add_parser("groups", parents=[common], help="per-regime relative improvement")
    p.add_argument("--corpus", required=True)
    _add_method_args(p, "aqe", 2)
    _add_eval_args(p)
    p.add_argument("--grouping", choices=GROUPINGS, default="by-n-relevants")

    p = sub.add_parser("inspect-checkpoint", parents=[common], help="summarise an LQEM file")
    p.add_argument("checkpoint")
    return parser


def apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Install defaults from ``--config`` into the chosen subparser."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("command", nargs="?")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    ini = configparser.ConfigParser()
    try:
        if not ini.read(known.config, encoding="utf-8"):
            raise DataError(f"config file {known.config} not found")
    except configparser.Error as exc:
        raise ConfigError(f"{known.config}: {exc}".replace("\n", " ")) from None
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    target = sub.choices.get(known.command)
    if target is None:
        return
    dests = {a.dest: a for a in target._actions}
    values = {}
    for section in ("defaults", known.command):
        if ini.has_section(section):
            values.update(ini.items(section))
    overrides = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest == "nqe" and known.command == "sweep":
            dest = "nqe_values"
        action = dests.get(dest)
        if action is None:
            raise ConfigError(f"{known.config}: unknown key {key!r} for {known.command}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            overrides[dest] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                overrides[dest] = action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"{known.config}: bad value for {key!r}: {exc}") from None
        else:
            overrides[dest] = raw
        if action.choices is not None and overrides[dest] not in action.choices:
            raise ConfigError(f"{known.config}: {key}={raw!r} not in {list(action.choices)}")
    target.set_defaults(**overrides)


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.threads = resolve_threads(args.threads)
    if getattr(args, "protocols", None):
        bad = [p for p in args.protocols if p not in PROTOCOLS]
        if bad:
            raise ConfigError(f"unknown protocol {bad[0]!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = COMMANDS[args.command](args, out)
    write_manifest(args, out, outputs)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except QEError as exc:
        kind = _family(exc)
        _fail(kind, exc)
        return EXIT_CODES[kind]
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        _fail("data", exc)
        return EXIT_CODES["data"]


def _family(exc: Exception) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, DataError):
        return "data"
    return "numeric"


def _fail(kind: str, exc: Exception) -> None:
    print(f"error kind={kind} detail={getattr(exc, 'kind', 'os')} type={type(exc).__name__} message={json.dumps(str(exc))}",
          file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
