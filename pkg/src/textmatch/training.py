"""Objectives, optimizers and the training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Graph, Parameter, backward, forward
from .dataprep import Batch, Corpus, RelationRecord, make_batches
from .evaluation import RankedRun, evaluate_run

OBJECTIVES = ("pointwise-mse", "pointwise-logistic", "pairwise-hinge", "listwise-softmax-ce")
MODE_OF = {
    "pointwise-mse": "pointwise",
    "pointwise-logistic": "pointwise",
    "pairwise-hinge": "pairwise",
    "listwise-softmax-ce": "listwise",
}
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Objective:
    kind: str
    margin: float = 1.0

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.kind!r}; expected one of {OBJECTIVES}")
        if self.kind == "pairwise-hinge" and not self.margin > 0:
            raise ValueError(f"hinge margin must be positive, got {self.margin}")

    @property
    def mode(self) -> str:
        return MODE_OF[self.kind]


def listwise_targets(labels: np.ndarray, groups: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Grades normalised to sum 1 within each group (uniform if all zero)."""
    p = np.empty(len(labels))
    for a, b in groups:
        g = np.asarray(labels[a:b], dtype=np.float64)
        p[a:b] = g / g.sum() if g.sum() > 0 else 1.0 / (b - a)
    return p


def loss(
    graph: Graph,
    objective: Objective,
    scores: int,
    groups: Optional[Sequence[Tuple[int, int]]] = None,
    name: str = "labels",
) -> Tuple[int, Callable[[np.ndarray], Dict[str, np.ndarray]]]:
    """Append the objective on top of ``scores``; return (loss node, label feed).

    Pairwise scores are laid out as ``[positives; negatives]``. Listwise
    needs ``groups`` as (start, stop) ranges over the score vector.
    """
    (n,) = graph.shape(scores)
    if n == 0:
        raise ValueError("empty batch")
    kind = objective.kind
    if kind == "pairwise-hinge":
        if n % 2:
            raise ValueError("pairwise scores must hold positives then negatives")
        half = n // 2
        pos = graph.slice(scores, 0, 0, half)
        neg = graph.slice(scores, 0, half, n)
        margin = graph.constant(objective.margin)
        node = graph.mean(graph.relu(graph.add(graph.sub(margin, pos), neg)))
        return node, lambda labels: {}
    if kind == "listwise-softmax-ce":
        groups = list(groups) if groups else [(0, n)]
        targets = graph.input(name, (n,))
        terms = []
        for a, b in groups:
            logp = graph.log(graph.softmax(graph.slice(scores, 0, a, b), axis=0))
            terms.append(graph.sum(graph.mul(graph.slice(targets, 0, a, b), logp)))
        total = terms[0]
        for t in terms[1:]:
            total = graph.add(total, t)
        node = graph.scale(total, -1.0 / len(groups))
        return node, lambda labels: {name: listwise_targets(np.asarray(labels), groups)}
    y = graph.input(name, (n,))
    feed = lambda labels: {name: np.asarray(labels, dtype=np.float64)}
    if kind == "pointwise-mse":
        diff = graph.sub(scores, y)
        return graph.mean(graph.mul(diff, diff)), feed
    p = graph.clip(graph.sigmoid(scores), PROB_FLOOR, 1.0 - PROB_FLOOR)
    one = graph.constant(1.0)
    ll = graph.add(graph.mul(y, graph.log(p)), graph.mul(graph.sub(one, y), graph.log(graph.sub(one, p))))
    return graph.scale(graph.mean(ll), -1.0), feed


def loss_value(objective: Objective, scores, labels=None, groups=None) -> float:
    """Evaluate an objective on plain score arrays."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty batch")
    g = Graph()
    s = g.input("scores", scores.shape)
    node, feed = loss(g, objective, s, groups)
    bind = {"scores": scores}
    if objective.kind != "pairwise-hinge":
        bind.update(feed(labels))
    return float(forward(g, bind)[node])


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


class Optimizer:
    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Sequence[Parameter], grads: Dict[str, np.ndarray]):
        for p in params:
            g = grads[p.name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {p.name!r} has shape {g.shape}, expected {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
        c = self.config
        self.t += 1
        for p in params:
            g = grads[p.name]
            if c.kind == "sgd":
                p.value = p.value - c.lr * g
                continue
            m = self.m.get(p.name, np.zeros_like(g))
            v = self.v.get(p.name, np.zeros_like(g))
            m = c.beta1 * m + (1.0 - c.beta1) * g
            v = c.beta2 * v + (1.0 - c.beta2) * g * g
            self.m[p.name], self.v[p.name] = m, v
            mhat = m / (1.0 - c.beta1 ** self.t)
            vhat = v / (1.0 - c.beta2 ** self.t)
            p.value = p.value - c.lr * mhat / (np.sqrt(vhat) + c.eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class BatchSource:
    """Regenerates batches for each epoch from relations and a corpus."""

    mode: str
    relations: Sequence[RelationRecord]
    corpus: Corpus
    batch_size: int = 32
    num_neg: int = 1

    def __call__(self, seed: int) -> List[Batch]:
        return make_batches(self.mode, self.relations, self.corpus, seed, self.batch_size, self.num_neg)


@dataclass
class Validation:
    relations: Sequence[RelationRecord]
    corpus: Corpus
    metric: str = "map"


@dataclass
class TrainReport:
    losses: List[float] = field(default_factory=list)
    metrics: List[Optional[float]] = field(default_factory=list)
    wall_time: float = 0.0

    def lines(self) -> str:
        out = []
        for i, (l, m) in enumerate(zip(self.losses, self.metrics), 1):
            out.append(f"{i}\t{l:.12g}\t{'' if m is None else format(m, '.12g')}\n")
        return "".join(out)

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.lines())


def score_relations(model, relations: Sequence[RelationRecord], corpus: Corpus, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(relations), batch_size):
        chunk = relations[start : start + batch_size]
        out.append(
            model.score_pairs(
                corpus.wid_matrix([r.tid_left for r in chunk]), corpus.wid_matrix([r.tid_right for r in chunk])
            )
        )
    return np.concatenate(out) if out else np.zeros(0)


def rank_relations(model, relations: Sequence[RelationRecord], corpus: Corpus) -> RankedRun:
    scores = score_relations(model, relations, corpus)
    return RankedRun.from_scores((r.tid_left, r.tid_right, s) for r, s in zip(relations, scores))


def evaluate_model(model, relations, corpus, metrics=("map",)) -> Dict[str, float]:
    run = rank_relations(model, relations, corpus)
    qrels = {(r.tid_left, r.tid_right): r.label for r in relations}
    return evaluate_run(run, qrels, list(metrics))[0]


class _StepCache:
    def __init__(self, model, objective: Objective):
        self.model = model
        self.objective = objective
        self.graphs: Dict[tuple, tuple] = {}

    def get(self, batch: Batch):
        n = batch.left.shape[0]
        groups = tuple(batch.groups) if batch.groups else None
        key = (batch.mode, n, groups)
        if key not in self.graphs:
            g = Graph()
            width = 2 * n if batch.mode == "pairwise" else n
            scores, feed = self.model.build_score(g, width)
            node, label_feed = loss(g, self.objective, scores, groups)
            self.graphs[key] = (g, node, feed, label_feed)
        return self.graphs[key]

    def bindings(self, batch: Batch):
        g, node, feed, label_feed = self.get(batch)
        if batch.mode == "pairwise":
            bind = feed(np.concatenate([batch.left, batch.left]), np.concatenate([batch.right, batch.right_neg]))
        else:
            bind = feed(batch.left, batch.right)
            bind.update(label_feed(batch.labels))
        return g, node, bind


def train(
    model,
    batches: Union[BatchSource, Sequence[Batch]],
    objective: Objective,
    optimizer: OptimizerConfig,
    validation: Optional[Validation] = None,
    log: Optional[Callable[[str], None]] = None,
) -> TrainReport:
    """Optimise ``model`` in place.

    A :class:`BatchSource` is regenerated every epoch with seed
    ``optimizer.seed + epoch``; a fixed batch list is reused as is.
    """
    mode = batches.mode if isinstance(batches, BatchSource) else (batches[0].mode if batches else None)
    if mode is not None and mode != objective.mode:
        raise ValueError(f"objective {objective.kind} needs {objective.mode} batches, got {mode}")
    start = time.perf_counter()
    report = TrainReport()
    opt = Optimizer(optimizer)
    steps = _StepCache(model, objective)
    params = model.trainable()
    for epoch in range(optimizer.epochs):
        epoch_batches = batches(optimizer.seed + epoch) if isinstance(batches, BatchSource) else batches
        total = 0.0
        for batch in epoch_batches:
            g, node, bind = steps.bindings(batch)
            vals = forward(g, bind)
            total += float(vals[node])
            grads = backward(g, node, vals)
            opt.step(params, grads)
        report.losses.append(total / max(len(epoch_batches), 1))
        metric = None
        if validation is not None:
            metric = evaluate_model(model, validation.relations, validation.corpus, [validation.metric])[
                validation.metric
            ]
        report.metrics.append(metric)
        if log:
            log(f"epoch {epoch + 1}: loss {report.losses[-1]:.6f}" + ("" if metric is None else f" {validation.metric} {metric:.4f}"))
    report.wall_time = time.perf_counter() - start
    return report
