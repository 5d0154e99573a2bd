"""Command-line pipeline: prepare -> train -> predict -> eval.

Every command reads one JSON config (``--config``) with four sections:
``data``, ``model``, ``training`` and ``evaluation``. Relative paths in the
config are resolved against the config file's directory; artifacts go to
``--out``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Any, Dict, List, Optional

from .dataprep import (
    Corpus,
    DataError,
    Vocabulary,
    prepare,
    read_raw,
    read_relations,
    write_relations,
)
from .evaluation import RankedRun, RunFormatError, evaluate_run, parse_metric, read_qrels, read_trec_run, write_qrels, write_trec_run
from .models import ConfigError, ModelConfig, ModelFormatError, build_model, load_model, save_model
from .training import MODE_OF, BatchSource, Objective, OptimizerConfig, Validation, score_relations, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

DICT_FILE = "word_dict.txt"
CORPUS_FILE = "corpus.txt"
RELATION_FILE = "relation.txt"
QRELS_FILE = "qrels.txt"
MODEL_FILE = "model.bin"
REPORT_FILE = "train_report.txt"
SCORES_FILE = "scores.txt"
RUN_FILE = "run.trec"
EVAL_FILE = "eval_per_query.txt"

SECTIONS = {
    "data": {
        "raw": None,
        "left_length": 5,
        "right_length": 10,
        "min_count": 1,
        "max_doc_fraction": 1.0,
        "stopwords": [],
        "embedding_file": None,
    },
    "model": None,  # validated by ModelConfig
    "training": {
        "objective": "pairwise-hinge",
        "margin": 1.0,
        "optimizer": "adam",
        "lr": 0.01,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "epochs": 10,
        "batch_mode": "pairwise",
        "batch_size": 32,
        "num_neg": 1,
        "seed": 0,
        "validation_metric": None,
    },
    "evaluation": {"metrics": ["map", "ndcg@5", "p@1"], "run_name": "textmatch"},
}
MODEL_DERIVED = ("vocab_size", "left_length", "right_length", "embedding_source")


class UsageError(Exception):
    pass


def load_config(path: str, seed: Optional[int] = None) -> Dict[str, Any]:
    """Read, default-fill and cross-validate a run config."""
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    base = os.path.dirname(os.path.abspath(path))
    cfg: Dict[str, Any] = {"_base": base}
    for name, defaults in SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be an object")
        if defaults is None:
            cfg[name] = dict(section)
            continue
        bad = set(section) - set(defaults)
        if bad:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
        cfg[name] = {**defaults, **section}
    model = cfg["model"]
    if "kind" not in model:
        raise ConfigError("model section needs a 'kind'")
    bad = set(model) & set(MODEL_DERIVED)
    if bad:
        raise ConfigError(f"model keys {sorted(bad)} are derived from the data section")
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    if set(model) - known:
        raise ConfigError(f"unknown keys in section 'model': {sorted(set(model) - known)}")
    tr = cfg["training"]
    if seed is not None:
        tr["seed"] = seed
        model["seed"] = seed
    try:
        objective = Objective(tr["objective"], tr["margin"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if tr["batch_mode"] != MODE_OF[objective.kind]:
        raise ConfigError(
            f"batch_mode {tr['batch_mode']!r} does not match objective {objective.kind!r} "
            f"(needs {MODE_OF[objective.kind]!r})"
        )
    for m in cfg["evaluation"]["metrics"] + ([tr["validation_metric"]] if tr["validation_metric"] else []):
        try:
            parse_metric(m)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    for key in ("raw", "embedding_file"):
        if cfg["data"][key] is not None:
            cfg["data"][key] = os.path.join(base, cfg["data"][key])
    return cfg


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    return path


def _model_config(cfg, vocab: Vocabulary) -> ModelConfig:
    d = dict(cfg["model"])
    d.update(
        vocab_size=vocab.size,
        left_length=cfg["data"]["left_length"],
        right_length=cfg["data"]["right_length"],
        embedding_source=cfg["data"]["embedding_file"] or "random",
    )
    return ModelConfig.from_dict(d)


def cmd_prepare(cfg, out: str, echo=print):
    data = cfg["data"]
    if data["raw"] is None:
        raise ConfigError("data.raw (raw dataset path) is required for prepare")
    with open(_require(data["raw"]), encoding="utf-8") as f:
        rows = read_raw(f)
    prep = prepare(
        rows,
        data["left_length"],
        data["right_length"],
        data["min_count"],
        data["max_doc_fraction"],
        data["stopwords"],
    )
    os.makedirs(out, exist_ok=True)
    prep.vocab.write(os.path.join(out, DICT_FILE))
    prep.corpus.write(os.path.join(out, CORPUS_FILE))
    write_relations(prep.relations, os.path.join(out, RELATION_FILE))
    write_qrels({(r.tid_left, r.tid_right): r.label for r in prep.relations}, os.path.join(out, QRELS_FILE))
    n_left = sum(1 for t in prep.corpus if t.startswith("L"))
    echo(f"vocabulary\t{len(prep.vocab)}")
    echo(f"left_texts\t{n_left}")
    echo(f"right_texts\t{len(prep.corpus) - n_left}")
    echo(f"relations\t{len(prep.relations)}")


def _load_prepared(out: str):
    vocab = Vocabulary.read(_require(os.path.join(out, DICT_FILE)))
    corpus = Corpus.read(_require(os.path.join(out, CORPUS_FILE)))
    relations = read_relations(_require(os.path.join(out, RELATION_FILE)))
    return vocab, corpus, relations


def cmd_train(cfg, out: str, model_path: Optional[str] = None, echo=print):
    tr = cfg["training"]
    vocab, corpus, relations = _load_prepared(out)
    if cfg["data"]["embedding_file"]:
        _require(cfg["data"]["embedding_file"])
    model = build_model(_model_config(cfg, vocab), vocab)
    source = BatchSource(tr["batch_mode"], relations, corpus, tr["batch_size"], tr["num_neg"])
    opt = OptimizerConfig(tr["optimizer"], tr["lr"], tr["beta1"], tr["beta2"], tr["eps"], tr["epochs"], tr["seed"])
    validation = Validation(relations, corpus, tr["validation_metric"]) if tr["validation_metric"] else None
    report = train(model, source, Objective(tr["objective"], tr["margin"]), opt, validation, log=echo)
    save_model(model, model_path or os.path.join(out, MODEL_FILE))
    report.write(os.path.join(out, REPORT_FILE))


def cmd_predict(cfg, out: str, model_path: Optional[str] = None, relation_path: Optional[str] = None, echo=print):
    model = load_model(_require(model_path or os.path.join(out, MODEL_FILE)))
    corpus = Corpus.read(_require(os.path.join(out, CORPUS_FILE)))
    relations = read_relations(_require(relation_path or os.path.join(out, RELATION_FILE)))
    scores = score_relations(model, relations, corpus)
    with open(os.path.join(out, SCORES_FILE), "w", encoding="utf-8", newline="\n") as f:
        for r, s in zip(relations, scores):
            f.write(f"{r.tid_left}\t{r.tid_right}\t{s:.6f}\n")
    run = RankedRun.from_scores((r.tid_left, r.tid_right, s) for r, s in zip(relations, scores))
    write_trec_run(run, cfg["evaluation"]["run_name"], os.path.join(out, RUN_FILE))
    echo(f"scored\t{len(relations)}")


def cmd_eval(cfg, out: str, run_path=None, qrels_path=None, metrics: Optional[List[str]] = None, echo=print):
    metrics = metrics or cfg["evaluation"]["metrics"]
    with open(_require(run_path or os.path.join(out, RUN_FILE)), encoding="utf-8") as f:
        run = read_trec_run(f)
    with open(_require(qrels_path or os.path.join(out, QRELS_FILE)), encoding="utf-8") as f:
        qrels = read_qrels(f)
    means, table = evaluate_run(run, qrels, metrics)
    for m in metrics:
        echo(f"{m}\t{means[m]:.6f}")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, EVAL_FILE), "w", encoding="utf-8", newline="\n") as f:
        for qid, row in table.items():
            for m in metrics:
                f.write(f"{qid}\t{m}\t{row[m]:.6f}\n")
    return means


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="textmatch", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["prepare", "train", "predict", "eval"])
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", default=".", help="directory for prepared data and artifacts")
    p.add_argument("--model", help="model file (default OUT/model.bin)")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--relations", help="relation file to score (predict)")
    p.add_argument("--run", help="TREC run file (eval)")
    p.add_argument("--qrels", help="TREC qrels file (eval)")
    p.add_argument("--metrics", nargs="+", help="metrics to report (eval)")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, args.seed)
        if args.command == "prepare":
            cmd_prepare(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.out, args.model)
        elif args.command == "predict":
            cmd_predict(cfg, args.out, args.model, args.relations)
        else:
            for m in args.metrics or ():
                try:
                    parse_metric(m)
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None
            cmd_eval(cfg, args.out, args.run, args.qrels, args.metrics)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, RunFormatError, ModelFormatError, IndexError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
