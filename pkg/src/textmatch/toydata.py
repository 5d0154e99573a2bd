"""Synthetic separable ranking data for smoke tests and demos."""

from __future__ import annotations

from typing import List, Tuple

import numpy as np


def make_toy_rows(
    n_queries: int = 50,
    n_candidates: int = 5,
    vocab_size: int = 100,
    query_length: int = 5,
    doc_length: int = 10,
    overlap: int = 3,
    seed: int = 0,
) -> List[Tuple[int, str, str]]:
    """Raw ``(label, query, doc)`` rows.

    Each query has one relevant candidate sharing ``overlap`` of its tokens;
    the other candidates share none.
    """
    if overlap > min(query_length, doc_length):
        raise ValueError("overlap exceeds text length")
    rng = np.random.default_rng(seed)
    words = np.array([f"w{i:02d}" for i in range(vocab_size)])
    rows = []
    for _ in range(n_queries):
        q = rng.choice(vocab_size, size=query_length, replace=False)
        others = np.setdiff1d(np.arange(vocab_size), q)
        rel_slot = int(rng.integers(n_candidates))
        for slot in range(n_candidates):
            if slot == rel_slot:
                shared = rng.choice(q, size=overlap, replace=False)
                rest = rng.choice(others, size=doc_length - overlap, replace=False)
                doc = rng.permutation(np.concatenate([shared, rest]))
            else:
                doc = rng.choice(others, size=doc_length, replace=False)
            rows.append((int(slot == rel_slot), " ".join(words[q]), " ".join(words[doc])))
    return rows


def format_rows(rows) -> str:
    return "".join(f"{label}\t{left}\t{right}\n" for label, left, right in rows)
