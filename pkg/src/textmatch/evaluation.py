"""Ranking metrics and TREC run/qrels I/O."""

from __future__ import annotations

import math
import re
from collections import OrderedDict
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np


class RunFormatError(ValueError):
    pass


def precision_at_k(grades: Sequence[int], k: int) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return sum(1 for g in grades[:k] if g > 0) / k


def average_precision(grades: Sequence[int], total_relevant: int) -> float:
    if total_relevant <= 0:
        return 0.0
    hits, acc = 0, 0.0
    for rank, g in enumerate(grades, 1):
        if g > 0:
            hits += 1
            acc += hits / rank
    return acc / total_relevant


def dcg(grades: Sequence[int], k: int) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(grades[:k]))


def ndcg_at_k(grades: Sequence[int], all_grades: Iterable[int], k: int) -> float:
    """Exponential-gain NDCG; 0 when the ideal DCG is 0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ideal = dcg(sorted(all_grades, reverse=True), k)
    if ideal == 0.0:
        return 0.0
    return dcg(grades, k) / ideal


def mrr(grades: Sequence[int]) -> float:
    for rank, g in enumerate(grades, 1):
        if g > 0:
            return 1.0 / rank
    return 0.0


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


class RankedRun(OrderedDict):
    """query id -> list of (doc id, score), sorted by score desc then doc id asc."""

    def add_query(self, qid: str, docs: Iterable[Tuple[str, float]]):
        docs = list(docs)
        ids = [d for d, _ in docs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate doc ids for query {qid!r}")
        self[qid] = sorted(((d, float(s)) for d, s in docs), key=lambda ds: (-ds[1], ds[0]))

    @classmethod
    def from_scores(cls, triples: Iterable[Tuple[str, str, float]]) -> "RankedRun":
        """Group ``(qid, docid, score)`` triples by query in first-seen order."""
        grouped: "OrderedDict[str, List[Tuple[str, float]]]" = OrderedDict()
        for q, d, s in triples:
            grouped.setdefault(q, []).append((d, s))
        run = cls()
        for q, docs in grouped.items():
            run.add_query(q, docs)
        return run


QrelSet = Dict[Tuple[str, str], int]


def read_qrels(lines: Iterable[str]) -> QrelSet:
    """Parse TREC qrels lines ``qid iter docid grade``."""
    qrels: QrelSet = {}
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise RunFormatError(f"qrels line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            grade = int(parts[3])
        except ValueError:
            raise RunFormatError(f"qrels line {lineno}: grade {parts[3]!r} is not an integer") from None
        if grade < 0:
            raise RunFormatError(f"qrels line {lineno}: negative grade")
        qrels[parts[0], parts[2]] = grade
    return qrels


def write_qrels(qrels: Mapping[Tuple[str, str], int], path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for (q, d), g in qrels.items():
            f.write(f"{q} 0 {d} {g}\n")


def format_trec_run(run: RankedRun, run_name: str) -> str:
    lines = []
    for qid, docs in run.items():
        for rank, (doc, score) in enumerate(docs, 1):
            lines.append(f"{qid} Q0 {doc} {rank} {score:.6f} {run_name}\n")
    return "".join(lines)


def write_trec_run(run: RankedRun, run_name: str, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_trec_run(run, run_name))


def read_trec_run(lines: Iterable[str]) -> RankedRun:
    """Parse a six-field TREC run, ordering docs by the rank column."""
    grouped: "OrderedDict[str, List[Tuple[int, str, float]]]" = OrderedDict()
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 6:
            raise RunFormatError(f"run line {lineno}: expected 6 space-separated fields, got {len(parts)}")
        qid, _, doc, rank, score, _ = parts
        try:
            grouped.setdefault(qid, []).append((int(rank), doc, float(score)))
        except ValueError:
            raise RunFormatError(f"run line {lineno}: bad rank or score") from None
    run = RankedRun()
    for qid, rows in grouped.items():
        rows.sort()
        run[qid] = [(d, s) for _, d, s in rows]
    return run


# ---------------------------------------------------------------------------
# aggregate evaluation
# ---------------------------------------------------------------------------

_METRIC = re.compile(r"^(map|mrr|p@(\d+)|ndcg@(\d+))$")


def parse_metric(name: str) -> Tuple[str, int]:
    m = _METRIC.match(name.strip().lower())
    if not m:
        raise ValueError(f"unknown metric {name!r}; use map, mrr, p@k or ndcg@k")
    k = int(m.group(2) or m.group(3) or 0)
    if name.lower().startswith(("p@", "ndcg@")) and k < 1:
        raise ValueError(f"metric {name!r} needs k >= 1")
    return m.group(1).split("@")[0], k


def query_metric(name: str, grades: Sequence[int], judged: Sequence[int]) -> float:
    kind, k = parse_metric(name)
    if kind == "map":
        return average_precision(grades, sum(1 for g in judged if g > 0))
    if kind == "mrr":
        return mrr(grades)
    if kind == "p":
        return precision_at_k(grades, k)
    return ndcg_at_k(grades, judged, k)


def evaluate_run(
    run: RankedRun, qrels: Mapping[Tuple[str, str], int], metrics: Sequence[str]
) -> Tuple[Dict[str, float], Dict[str, Dict[str, float]]]:
    """Mean of each metric over the run's queries, plus the per-query table.

    Queries without judgements score 0 and still count toward the mean.
    """
    if not run:
        raise ValueError("cannot evaluate an empty run")
    judged: Dict[str, List[int]] = {}
    for (q, _), g in qrels.items():
        judged.setdefault(q, []).append(g)
    table: Dict[str, Dict[str, float]] = OrderedDict()
    for qid, docs in run.items():
        grades = [qrels.get((qid, d), 0) for d, _ in docs]
        table[qid] = {m: query_metric(m, grades, judged.get(qid, [])) for m in metrics}
    means = {m: float(np.mean([table[q][m] for q in run])) for m in metrics}
    return means, table
