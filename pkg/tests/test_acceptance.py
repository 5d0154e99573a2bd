"""Acceptance gate: one test per criterion, each reporting PASS or FAIL.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance
criteria" section at the end of the output.
"""

import math
import time
from importlib import resources

import numpy as np

import metric_oracle as oracle
from gradcases import CASES, model_case, sample
from gru_reference import naive_gru2d
from test_cli import ARTIFACTS, run_all, write_config
from textmatch import layers
from textmatch.autodiff import Graph, forward, grad_check
from textmatch.dataprep import (
    PAD,
    Corpus,
    CorpusEntry,
    RelationRecord,
    batches_pairwise,
    build_vocabulary,
    encode_tokens,
    prepare,
    read_raw,
    tokenize,
)
from textmatch.evaluation import (
    RankedRun,
    average_precision,
    evaluate_run,
    format_trec_run,
    ndcg_at_k,
    read_trec_run,
    write_trec_run,
)
from textmatch.models import KINDS, ModelConfig, build_model
from textmatch.training import BatchSource, Objective, OptimizerConfig, Validation, loss_value, train
from test_evaluation import GOLDEN, golden_run

TOL = 1e-4


def test_criterion_1_op_gradients(verdict):
    start = time.perf_counter()
    worst = {}
    for name, case in CASES.items():
        worst[name] = max(grad_check(*sample(case, seed), step=1e-5, tolerance=TOL).worst for seed in range(100))
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if v > TOL}
    top = max(worst, key=worst.get)
    ok = verdict(
        1,
        not bad and elapsed < 120,
        f"{len(CASES)} ops x 100 instances, worst {top} {worst[top]:.2e} (tol {TOL}), {elapsed:.1f}s (limit 120s)",
    )
    assert ok, bad


def test_criterion_2_model_gradients(verdict):
    worst = {}
    for kind in KINDS:
        errors = []
        for seed in range(5):
            _, g, loss, bind = model_case(kind, seed)
            errors.append(grad_check(g, loss, bind, 1e-5, TOL).worst)
        worst[kind] = max(errors)
    ok = verdict(2, all(v <= TOL for v in worst.values()), " ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (tol {TOL})")
    assert ok


def test_criterion_3_metric_oracle(verdict):
    rng = np.random.default_rng(12345)
    max_diff = 0.0
    for _ in range(1000):
        raw, qrels = oracle.random_run(rng, n_queries=1)
        run = RankedRun()
        for q, docs in raw.items():
            run.add_query(q, docs)
        means, _ = evaluate_run(run, qrels, oracle.METRICS)
        for m in oracle.METRICS:
            max_diff = max(max_diff, abs(means[m] - oracle.evaluate(raw, qrels, m)))
    ap = average_precision([1, 0, 1], 2)
    nd = ndcg_at_k([0, 3], [0, 3], 2)
    spots = abs(ap - 5 / 6) <= 1e-12 and abs(nd - 1 / math.log2(3)) <= 1e-12 and f"{nd:.6f}" == "0.630930"
    ok = verdict(3, max_diff <= 1e-9 and spots, f"1000 runs, max |diff| {max_diff:.1e} (tol 1e-9); AP {ap:.6f}, NDCG@2 {nd:.6f}")
    assert ok


def test_criterion_4_gru2d_reference(verdict):
    rng = np.random.default_rng(2017)
    S = rng.normal(size=(5, 7, 3))
    params = layers.init_gru2d(3, 4, rng)
    for p in params.all():
        p.value = p.value + rng.uniform(-0.5, 0.5, size=p.shape)
    g = Graph()
    out = layers.gru2d(g, g.constant(S), params)
    got = forward(g, {})[out]
    ref = naive_gru2d(S.tolist(), {k: getattr(params, k).value for k in ("W_r", "b_r", "W_c", "b_c", "W_z", "b_z")})
    diff = float(np.max(np.abs(got - ref)))
    ok = verdict(4, diff <= 1e-12, f"5x7x3 input, hidden 4, max |diff| {diff:.1e} (tol 1e-12)")
    assert ok


def _toy_prepared():
    with open(str(resources.files("textmatch") / "data" / "toy.tsv"), encoding="utf-8") as f:
        rows = read_raw(f)
    return rows, prepare(rows, 5, 10)


def test_criterion_5_overfit(verdict):
    rows, prep = _toy_prepared()
    queries = {r[1] for r in rows}
    shape_ok = len(queries) == 50 and len(rows) == 250 and len(prep.vocab) <= 100
    for q in queries:
        cands = [r for r in rows if r[1] == q]
        pos = [r for r in cands if r[0] > 0]
        shape_ok &= len(cands) == 5 and len(pos) == 1
        shape_ok &= len(set(tokenize(q)) & set(tokenize(pos[0][2]))) >= 3
    results = {}
    for kind in KINDS:
        model = build_model(ModelConfig(kind=kind, vocab_size=prep.vocab.size, seed=0))
        report = train(
            model,
            BatchSource("pairwise", prep.relations, prep.corpus, batch_size=20, num_neg=4),
            Objective("pairwise-hinge"),
            OptimizerConfig("adam", lr=0.01, epochs=50, seed=0),
            Validation(prep.relations, prep.corpus, "map"),
        )
        reached = next((i + 1 for i, v in enumerate(report.metrics) if v >= 0.95), None)
        results[kind] = (reached, report.metrics[-1], report.wall_time)
    ok = shape_ok and all(r is not None and t < 60 for r, _, t in results.values())
    detail = " ".join(f"{k}: MAP>=0.95 at epoch {r}, final {m:.3f}, {t:.1f}s;" for k, (r, m, t) in results.items())
    verdict(5, ok, f"toy 50x5 vocab {len(prep.vocab)} ({'ok' if shape_ok else 'BAD'}); {detail}")
    assert ok


def test_criterion_6_pipeline_determinism(verdict, tmp_path):
    config = write_config(tmp_path)
    run_all(config, tmp_path / "a")
    run_all(config, tmp_path / "b")
    differing = [n for n in ARTIFACTS if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]
    ok = verdict(6, not differing, f"{len(ARTIFACTS)} artifacts compared, differing: {differing or 'none'}")
    assert ok


def test_criterion_7_trec_format(verdict, tmp_path):
    path = tmp_path / "run.trec"
    write_trec_run(golden_run(), "run", path)
    golden = path.read_bytes() == GOLDEN.read_bytes()
    rng = np.random.default_rng(7)
    fields_ok = roundtrip_ok = True
    for _ in range(50):
        raw, _ = oracle.random_run(rng)
        run = RankedRun.from_scores((q, d, round(s, 6)) for q, docs in raw.items() for d, s in docs)
        text = format_trec_run(run, "r")
        fields_ok &= all(len(line.split(" ")) == 6 for line in text.splitlines())
        back = read_trec_run(text.splitlines())
        roundtrip_ok &= {q: [d for d, _ in v] for q, v in back.items()} == {q: [d for d, _ in v] for q, v in run.items()}
    ok = verdict(7, golden and fields_ok and roundtrip_ok, f"golden bytes {golden}, 6 fields {fields_ok}, round-trip {roundtrip_ok}")
    assert ok


def test_criterion_8_dataprep_invariants(verdict):
    rng = np.random.default_rng(8)
    rels = [RelationRecord(int(rng.integers(0, 4)), f"q{rng.integers(0, 400)}", f"d{i}") for i in range(10_000)]
    corpus = Corpus.from_entries(
        [CorpusEntry(f"q{i}", (2,), 1) for i in range(400)] + [CorpusEntry(r.tid_right, (3,), 1) for r in rels]
    )
    label = {(r.tid_left, r.tid_right): r.label for r in rels}
    batches = batches_pairwise(rels, corpus, batch_size=64, num_neg=3, seed=8)
    pairs = [(q, p, n) for b in batches for q, p, n in zip(b.left_tids, b.right_tids, b.neg_tids)]
    violations = sum(1 for q, p, n in pairs if not label[q, p] > label.get((q, n), -1))
    violations += sum(int(np.sum(b.labels[:, 0] <= b.labels[:, 1])) for b in batches)

    vocab = build_vocabulary([[f"w{i}" for i in range(30)]])
    words = [f"w{i}" for i in range(40)]  # w30..w39 are out of vocabulary
    encode_failures = 0
    for _ in range(10_000):
        tokens = list(rng.choice(words, size=int(rng.integers(0, 15))))
        length = int(rng.integers(1, 12))
        wids, n = encode_tokens(tokens, vocab, length)
        good = (
            len(wids) == length
            and n == min(len(tokens), length)
            and all(w == PAD for w in wids[n:])
            and all(w != PAD for w in wids[:n])
            and all(0 <= w < vocab.size for w in wids)
            and all(vocab.decode(w) == t for w, t in zip(wids, tokens) if t in vocab)
        )
        encode_failures += not good
    ok = verdict(
        8,
        violations == 0 and encode_failures == 0 and len(pairs) > 0,
        f"{len(pairs)} pairs from 10000 relations, {violations} order violations; 10000 encode cases, {encode_failures} failures",
    )
    assert ok


def test_criterion_9_loss_spot_values(verdict):
    hinge = loss_value(Objective("pairwise-hinge", 1.0), [0.2, 0.5])
    listwise = loss_value(Objective("listwise-softmax-ce"), [0.7] * 4, [1, 0, 0, 0])
    mse = loss_value(Objective("pointwise-mse"), [0.3, -1.2, 4.0], [0.3, -1.2, 4.0])
    errs = [abs(hinge - 1.3), abs(listwise - math.log(4)), abs(mse)]
    ok = verdict(9, max(errs) <= 1e-12, f"hinge {hinge!r}, listwise {listwise!r} (ln 4), mse {mse!r}; max err {max(errs):.1e} (tol 1e-12)")
    assert ok
