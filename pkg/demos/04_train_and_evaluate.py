"""
Training on the bundled toy set and ranking with TREC output
============================================================

Each query in the toy set has one relevant candidate that shares words
with it. A few epochs of pairwise hinge training are enough to rank it
first.
"""

import sys
from importlib import resources

from textmatch.dataprep import prepare, read_raw
from textmatch.evaluation import format_trec_run
from textmatch.models import ModelConfig, build_model
from textmatch.training import (
    BatchSource,
    Objective,
    OptimizerConfig,
    Validation,
    evaluate_model,
    rank_relations,
    train,
)

with open(str(resources.files("textmatch") / "data" / "toy.tsv"), encoding="utf-8") as f:
    prep = prepare(read_raw(f), left_length=5, right_length=10)

kind = sys.argv[1] if len(sys.argv) > 1 else "matchpyramid"
model = build_model(ModelConfig(kind=kind, vocab_size=prep.vocab.size, seed=0))
print("before training:", evaluate_model(model, prep.relations, prep.corpus, ["map", "ndcg@3", "p@1"]))

report = train(
    model,
    BatchSource("pairwise", prep.relations, prep.corpus, batch_size=20, num_neg=4),
    Objective("pairwise-hinge", margin=1.0),
    OptimizerConfig("adam", lr=0.01, epochs=10, seed=0),
    Validation(prep.relations, prep.corpus, "map"),
    log=print,
)
print(f"trained in {report.wall_time:.1f}s")
print("after training:", evaluate_model(model, prep.relations, prep.corpus, ["map", "ndcg@3", "p@1"]))

# the first query's ranking in TREC run format
run = rank_relations(model, prep.relations, prep.corpus)
first = next(iter(run))
print(format_trec_run({first: run[first]}, kind), end="")
