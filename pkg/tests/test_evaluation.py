import io
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import metric_oracle as oracle
from textmatch.evaluation import (
    RankedRun,
    RunFormatError,
    average_precision,
    evaluate_run,
    format_trec_run,
    mrr,
    ndcg_at_k,
    parse_metric,
    precision_at_k,
    read_qrels,
    read_trec_run,
    write_qrels,
    write_trec_run,
)

GOLDEN = Path(__file__).parent / "data" / "golden.trec"


def golden_run():
    run = RankedRun()
    run.add_query("q1", [("d1", 1.0), ("d3", 2.5), ("d2", 1.0)])
    run.add_query("q10", [("a", -0.125)])
    run.add_query("q2", [("x9", 1e-9)])
    return run


class TestMetricExamples:
    def test_precision(self):
        assert precision_at_k([1, 0, 1, 0], 2) == 0.5
        assert precision_at_k([2, 1, 3], 3) == 1.0
        assert precision_at_k([1, 1, 1], 10) == pytest.approx(0.3, abs=1e-15)

    def test_average_precision(self):
        assert average_precision([1, 1, 0], 2) == 1.0
        assert average_precision([1, 0, 1], 2) == pytest.approx(5 / 6, abs=1e-15)
        assert average_precision([0, 0], 0) == 0.0

    def test_ndcg(self):
        assert ndcg_at_k([3, 2, 0], [3, 2, 0], 3) == 1.0
        assert ndcg_at_k([0, 3], [0, 3], 2) == pytest.approx(1 / math.log2(3), abs=1e-15)
        assert ndcg_at_k([0, 3], [0, 3], 2) == pytest.approx(0.630930, abs=1e-6)
        assert ndcg_at_k([0, 0], [0, 0], 2) == 0.0

    def test_mrr(self):
        assert mrr([0, 0, 1]) == pytest.approx(1 / 3)
        assert mrr([2, 0]) == 1.0
        assert mrr([0, 0]) == 0.0

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            precision_at_k([1], 0)
        with pytest.raises(ValueError):
            ndcg_at_k([1], [1], 0)


class TestEvaluateRun:
    def test_perfect_single_query(self):
        run = RankedRun.from_scores([("q", "a", 2.0), ("q", "b", 1.0)])
        means, _ = evaluate_run(run, {("q", "a"): 1, ("q", "b"): 0}, ["map", "ndcg@2"])
        assert means == {"map": 1.0, "ndcg@2": 1.0}

    def test_map_is_mean_of_queries(self):
        run = RankedRun.from_scores([("q1", "a", 1.0), ("q2", "b", 2.0), ("q2", "c", 1.0)])
        qrels = {("q1", "a"): 1, ("q2", "c"): 1, ("q2", "b"): 0}
        means, table = evaluate_run(run, qrels, ["map"])
        assert table["q1"]["map"] == 1.0 and table["q2"]["map"] == 0.5
        assert means["map"] == 0.75

    def test_unjudged_query_scores_zero(self):
        run = RankedRun.from_scores([("q1", "a", 1.0), ("q9", "z", 1.0)])
        means, table = evaluate_run(run, {("q1", "a"): 1}, ["map", "mrr", "p@1", "ndcg@3"])
        assert all(v == 0.0 for v in table["q9"].values())
        assert means["map"] == 0.5

    def test_empty_run_rejected(self):
        with pytest.raises(ValueError):
            evaluate_run(RankedRun(), {}, ["map"])

    def test_parse_metric(self):
        assert parse_metric("NDCG@5") == ("ndcg", 5)
        assert parse_metric("map") == ("map", 0)
        for bad in ("p@0", "recall", "ndcg@"):
            with pytest.raises(ValueError):
                parse_metric(bad)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            raw, qrels = oracle.random_run(rng)
            run = RankedRun()
            for q, docs in raw.items():
                run.add_query(q, docs)
            means, _ = evaluate_run(run, qrels, oracle.METRICS)
            for m in oracle.METRICS:
                assert abs(means[m] - oracle.evaluate(raw, qrels, m)) <= 1e-9, m


class TestMetricProperties:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.integers(1, 40))
    def test_bounded(self, grades, k):
        n_rel = sum(g > 0 for g in grades)
        for v in (precision_at_k(grades, k), average_precision(grades, n_rel), ndcg_at_k(grades, grades, k), mrr(grades)):
            assert 0.0 <= v <= 1.0 + 1e-15

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 3), min_size=1, max_size=20), st.integers(0, 10), st.integers(0, 2**31 - 1))
    def test_nonrelevant_tail_permutation(self, head, n_tail, seed):
        # a zero-grade tail appended after the last relevant document
        tail = [0] * n_tail
        grades = head + tail
        n_rel = sum(g > 0 for g in grades)
        shuffled_tail = list(np.random.default_rng(seed).permutation(tail))
        assert average_precision(head + shuffled_tail, n_rel) == average_precision(grades, n_rel)
        assert mrr(head + shuffled_tail) == mrr(grades)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 3), st.integers(1, 20), st.integers(1, 25))
    def test_ndcg_equal_grades(self, grade, n, k):
        assert ndcg_at_k([grade] * n, [grade] * n, k) == (1.0 if grade > 0 else 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_score_transform(self, seed):
        raw, qrels = oracle.random_run(np.random.default_rng(seed))
        triples = [(q, d, s) for q, docs in raw.items() for d, s in docs]
        base, _ = evaluate_run(RankedRun.from_scores(triples), qrels, oracle.METRICS)
        moved, _ = evaluate_run(
            RankedRun.from_scores((q, d, math.exp(s)) for q, d, s in triples), qrels, oracle.METRICS
        )
        assert base == moved


class TestTrecFormat:
    def test_ranking_sorted_with_docid_ties(self):
        run = golden_run()
        assert [d for d, _ in run["q1"]] == ["d3", "d1", "d2"]

    def test_golden_file(self, tmp_path):
        path = tmp_path / "run.trec"
        write_trec_run(golden_run(), "run", path)
        assert path.read_bytes() == GOLDEN.read_bytes()

    def test_six_fields(self):
        for line in format_trec_run(golden_run(), "run").splitlines():
            assert len(line.split(" ")) == 6

    def test_example_lines(self):
        run = RankedRun.from_scores([("q1", "d3", 2.5), ("q1", "d1", 1.0)])
        assert format_trec_run(run, "run") == "q1 Q0 d3 1 2.500000 run\nq1 Q0 d1 2 1.000000 run\n"

    def test_empty_run_empty_file(self, tmp_path):
        write_trec_run(RankedRun(), "x", tmp_path / "e.trec")
        assert (tmp_path / "e.trec").read_bytes() == b""

    def test_roundtrip(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            raw, _ = oracle.random_run(rng)
            run = RankedRun.from_scores((q, d, round(s, 6)) for q, docs in raw.items() for d, s in docs)
            back = read_trec_run(io.StringIO(format_trec_run(run, "r")))
            assert list(back) == list(run)
            for q in run:
                assert [d for d, _ in back[q]] == [d for d, _ in run[q]]
                np.testing.assert_allclose([s for _, s in back[q]], [s for _, s in run[q]], atol=5e-7)

    def test_bad_run_line(self):
        with pytest.raises(RunFormatError, match="line 2"):
            read_trec_run(["q Q0 d 1 1.0 r", "q Q0 d 1 1.0"])

    def test_duplicate_doc_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            RankedRun.from_scores([("q", "d", 1.0), ("q", "d", 2.0)])

    def test_qrels_roundtrip(self, tmp_path):
        qrels = {("q1", "d1"): 2, ("q1", "d2"): 0, ("q2", "d1"): 1}
        write_qrels(qrels, tmp_path / "qrels.txt")
        assert (tmp_path / "qrels.txt").read_text() == "q1 0 d1 2\nq1 0 d2 0\nq2 0 d1 1\n"
        with open(tmp_path / "qrels.txt") as f:
            assert read_qrels(f) == qrels

    def test_bad_qrels(self):
        with pytest.raises(RunFormatError, match="negative"):
            read_qrels(["q 0 d -1"])
