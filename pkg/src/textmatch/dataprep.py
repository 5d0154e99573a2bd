"""Unified data format and batch generation.

A raw dataset is turned into three artifacts: a word dictionary (word ->
wid), a corpus (tid -> fixed-length wid sequence) and a relation list
(labelled tid pairs). Batches are then drawn pointwise, pairwise or
listwise from relations + corpus.
"""

from __future__ import annotations

import os
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

PAD = 0
OOV = 1
FIRST_WID = 2


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def tokenize(text: str) -> List[str]:
    """Lowercase and split on ASCII whitespace."""
    return text.lower().split()


@dataclass
class Vocabulary:
    word_to_id: Dict[str, int]
    frequency: Dict[str, int]
    id_to_word: Dict[int, str] = field(init=False)

    def __post_init__(self):
        self.id_to_word = {i: w for w, i in self.word_to_id.items()}

    @property
    def size(self) -> int:
        """Number of rows an embedding table needs (reserved ids included)."""
        return FIRST_WID + len(self.word_to_id)

    def __len__(self):
        return len(self.word_to_id)

    def __contains__(self, word):
        return word in self.word_to_id

    def encode(self, word: str) -> int:
        return self.word_to_id.get(word, OOV)

    def decode(self, wid: int) -> str:
        if wid == PAD:
            return "<pad>"
        if wid == OOV:
            return "<oov>"
        return self.id_to_word[wid]

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for word, wid in sorted(self.word_to_id.items(), key=lambda kv: kv[1]):
                f.write(f"{word}\t{wid}\t{self.frequency[word]}\n")

    @classmethod
    def read(cls, path) -> "Vocabulary":
        mapping, freq = {}, {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected word<TAB>wid<TAB>frequency")
                try:
                    mapping[parts[0]] = int(parts[1])
                    freq[parts[0]] = int(parts[2])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-integer wid or frequency") from None
        return cls(mapping, freq)


def build_vocabulary(
    token_sequences: Sequence[Sequence[str]],
    min_count: int = 1,
    max_doc_fraction: float = 1.0,
    stopwords: Iterable[str] = (),
) -> Vocabulary:
    """Filter words by frequency, document fraction and a stopword list.

    Surviving words get wids 2, 3, ... by descending corpus frequency, ties
    broken lexicographically.
    """
    if not token_sequences:
        raise DataError("cannot build a vocabulary from no texts")
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    if not 0.0 < max_doc_fraction <= 1.0:
        raise ValueError(f"max_doc_fraction must lie in (0, 1], got {max_doc_fraction}")
    stop = set(stopwords)
    freq: Counter = Counter()
    docfreq: Counter = Counter()
    for seq in token_sequences:
        freq.update(seq)
        docfreq.update(set(seq))
    n_docs = len(token_sequences)
    kept = [
        w
        for w, c in freq.items()
        if c >= min_count and docfreq[w] / n_docs <= max_doc_fraction and w not in stop
    ]
    if not kept:
        raise DataError("every word was removed by the vocabulary filters")
    kept.sort(key=lambda w: (-freq[w], w))
    return Vocabulary(
        {w: FIRST_WID + i for i, w in enumerate(kept)}, {w: freq[w] for w in kept}
    )


@dataclass(frozen=True)
class CorpusEntry:
    tid: str
    wids: Tuple[int, ...]
    original_length: int


def encode_tokens(tokens: Sequence[str], vocab: Vocabulary, fixed_length: int) -> Tuple[Tuple[int, ...], int]:
    if fixed_length < 1:
        raise ValueError(f"fixed_length must be >= 1, got {fixed_length}")
    ids = [vocab.encode(t) for t in tokens[:fixed_length]]
    n = len(ids)
    return tuple(ids + [PAD] * (fixed_length - n)), n


def encode_corpus(
    texts: Mapping[str, Sequence[str]], vocab: Vocabulary, fixed_length: int
) -> List[CorpusEntry]:
    """Map tokens to wids, keep the first ``fixed_length`` and pad the tail."""
    out = []
    for tid, tokens in texts.items():
        wids, n = encode_tokens(tokens, vocab, fixed_length)
        out.append(CorpusEntry(tid, wids, n))
    return out


class Corpus(OrderedDict):
    """tid -> CorpusEntry, preserving insertion order."""

    @classmethod
    def from_entries(cls, entries: Iterable[CorpusEntry]) -> "Corpus":
        c = cls()
        for e in entries:
            c[e.tid] = e
        return c

    def lookup(self, tid: str) -> CorpusEntry:
        try:
            return self[tid]
        except KeyError:
            raise DataError(f"unknown tid {tid!r}") from None

    def wid_matrix(self, tids: Sequence[str]) -> np.ndarray:
        rows = [self.lookup(t).wids for t in tids]
        lengths = {len(r) for r in rows}
        if len(lengths) > 1:
            raise DataError(f"texts in one batch have different fixed lengths {sorted(lengths)}")
        return np.asarray(rows, dtype=np.int64)

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for e in self.values():
                f.write(f"{e.tid}\t{e.original_length}\t{' '.join(map(str, e.wids))}\n")

    @classmethod
    def read(cls, path) -> "Corpus":
        c = cls()
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected tid<TAB>length<TAB>wids")
                try:
                    wids = tuple(int(w) for w in parts[2].split())
                    n = int(parts[1])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-integer field") from None
                c[parts[0]] = CorpusEntry(parts[0], wids, n)
        return c


@dataclass(frozen=True)
class RelationRecord:
    label: int
    tid_left: str
    tid_right: str


def load_relations(lines: Iterable[str]) -> List[RelationRecord]:
    """Parse ``label<TAB>tid_left<TAB>tid_right`` lines."""
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"relation line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            label = int(parts[0])
        except ValueError:
            raise DataError(f"relation line {lineno}: label {parts[0]!r} is not an integer") from None
        if label < 0:
            raise DataError(f"relation line {lineno}: negative label {label}")
        out.append(RelationRecord(label, parts[1], parts[2]))
    return out


def read_relations(path) -> List[RelationRecord]:
    with open(path, encoding="utf-8") as f:
        return load_relations(f)


def write_relations(relations: Iterable[RelationRecord], path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in relations:
            f.write(f"{r.label}\t{r.tid_left}\t{r.tid_right}\n")


def load_embeddings(source, vocab: Vocabulary, dim: int, seed: int = 0) -> np.ndarray:
    """Build a ``[vocab.size, dim]`` table from a word2vec-style text file.

    ``source`` is a path or an iterable of lines. Words absent from the file
    are drawn uniformly from [-0.2, 0.2]; the PAD row is zeroed last.
    """
    rng = np.random.default_rng(seed)
    table = rng.uniform(-0.2, 0.2, size=(vocab.size, dim))
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as f:
            lines = f.read().splitlines()
    else:
        lines = [l.rstrip("\n") for l in source]
    for lineno, line in enumerate(lines):
        parts = line.split(" ")
        if lineno == 0 and len(parts) == 2 and all(p.lstrip("-").isdigit() for p in parts):
            continue
        if not line.strip():
            continue
        word, vals = parts[0], parts[1:]
        if len(vals) != dim:
            raise DataError(f"embedding for word {word!r} has {len(vals)} values, expected {dim}")
        if word in vocab:
            vec = np.asarray([float(v) for v in vals])
            if not np.all(np.isfinite(vec)):
                raise DataError(f"embedding for word {word!r} is not finite")
            table[vocab.word_to_id[word]] = vec
    table[PAD] = 0.0
    return table


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    mode: str
    left: np.ndarray
    right: np.ndarray  # pointwise/listwise docs; pairwise positives
    labels: np.ndarray
    right_neg: Optional[np.ndarray] = None
    groups: Optional[List[Tuple[int, int]]] = None
    left_tids: Tuple[str, ...] = ()
    right_tids: Tuple[str, ...] = ()
    neg_tids: Tuple[str, ...] = ()

    def __len__(self):
        return len(self.labels) if self.mode != "pairwise" else self.left.shape[0]


def _check_tids(relations, corpus):
    for r in relations:
        corpus.lookup(r.tid_left)
        corpus.lookup(r.tid_right)


def batches_pointwise(
    relations: Sequence[RelationRecord], corpus: Corpus, batch_size: int, seed: int = 0
) -> List[Batch]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    _check_tids(relations, corpus)
    order = np.random.default_rng(seed).permutation(len(relations))
    out = []
    for start in range(0, len(order), batch_size):
        chunk = [relations[i] for i in order[start : start + batch_size]]
        lt = tuple(r.tid_left for r in chunk)
        rt = tuple(r.tid_right for r in chunk)
        out.append(
            Batch(
                "pointwise",
                corpus.wid_matrix(lt),
                corpus.wid_matrix(rt),
                np.asarray([r.label for r in chunk], dtype=np.float64),
                left_tids=lt,
                right_tids=rt,
            )
        )
    return out


def group_by_left(relations: Sequence[RelationRecord]) -> "OrderedDict[str, List[RelationRecord]]":
    groups: "OrderedDict[str, List[RelationRecord]]" = OrderedDict()
    for r in relations:
        groups.setdefault(r.tid_left, []).append(r)
    return groups


def preference_pairs(
    relations: Sequence[RelationRecord], num_neg: int, seed: int = 0
) -> List[Tuple[RelationRecord, RelationRecord]]:
    """(positive, negative) record pairs with strictly lower negative labels.

    Pairs are listed group by group in first-appearance order, before any
    shuffling.
    """
    if num_neg < 1:
        raise ValueError(f"num_neg must be >= 1, got {num_neg}")
    rng = np.random.default_rng(seed)
    pairs = []
    for recs in group_by_left(relations).values():
        for pos in recs:
            if pos.label <= 0:
                continue
            lower = [r for r in recs if r.label < pos.label]
            if not lower:
                continue
            k = min(num_neg, len(lower))
            picks = rng.choice(len(lower), size=k, replace=False)
            pairs.extend((pos, lower[i]) for i in picks)
    return pairs


def batches_pairwise(
    relations: Sequence[RelationRecord],
    corpus: Corpus,
    batch_size: int,
    num_neg: int = 1,
    seed: int = 0,
) -> List[Batch]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    _check_tids(relations, corpus)
    pairs = preference_pairs(relations, num_neg, seed)
    if not pairs:
        raise DataError("no preference pairs: every group lacks a positive or a lower-labelled record")
    order = np.random.default_rng(seed + 1).permutation(len(pairs))
    out = []
    for start in range(0, len(order), batch_size):
        chunk = [pairs[i] for i in order[start : start + batch_size]]
        lt = tuple(p.tid_left for p, _ in chunk)
        pt = tuple(p.tid_right for p, _ in chunk)
        nt = tuple(n.tid_right for _, n in chunk)
        out.append(
            Batch(
                "pairwise",
                corpus.wid_matrix(lt),
                corpus.wid_matrix(pt),
                np.asarray([[p.label, n.label] for p, n in chunk], dtype=np.float64),
                right_neg=corpus.wid_matrix(nt),
                left_tids=lt,
                right_tids=pt,
                neg_tids=nt,
            )
        )
    return out


def batches_listwise(
    relations: Sequence[RelationRecord], corpus: Corpus, seed: int = 0, groups_per_batch: int = 1
) -> List[Batch]:
    """One group per distinct left tid; group order is shuffled by ``seed``."""
    _check_tids(relations, corpus)
    groups = list(group_by_left(relations).values())
    order = np.random.default_rng(seed).permutation(len(groups))
    out = []
    for start in range(0, len(order), groups_per_batch):
        chosen = [groups[i] for i in order[start : start + groups_per_batch]]
        recs = [r for g in chosen for r in g]
        bounds, pos = [], 0
        for g in chosen:
            bounds.append((pos, pos + len(g)))
            pos += len(g)
        lt = tuple(r.tid_left for r in recs)
        rt = tuple(r.tid_right for r in recs)
        out.append(
            Batch(
                "listwise",
                corpus.wid_matrix(lt),
                corpus.wid_matrix(rt),
                np.asarray([r.label for r in recs], dtype=np.float64),
                groups=bounds,
                left_tids=lt,
                right_tids=rt,
            )
        )
    return out


def make_batches(mode: str, relations, corpus, seed: int, batch_size: int = 32, num_neg: int = 1) -> List[Batch]:
    if mode == "pointwise":
        return batches_pointwise(relations, corpus, batch_size, seed)
    if mode == "pairwise":
        return batches_pairwise(relations, corpus, batch_size, num_neg, seed)
    if mode == "listwise":
        return batches_listwise(relations, corpus, seed)
    raise ValueError(f"unknown batch mode {mode!r}")


# ---------------------------------------------------------------------------
# raw datasets
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    vocab: Vocabulary
    corpus: Corpus
    relations: List[RelationRecord]
    left_length: int
    right_length: int


def read_raw(lines: Iterable[str]) -> List[Tuple[int, str, str]]:
    """Parse raw ``label<TAB>text_left<TAB>text_right`` lines."""
    rows = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"raw line {lineno}: expected label<TAB>text_left<TAB>text_right")
        try:
            label = int(parts[0])
        except ValueError:
            raise DataError(f"raw line {lineno}: label {parts[0]!r} is not an integer") from None
        if label < 0:
            raise DataError(f"raw line {lineno}: negative label {label}")
        rows.append((label, parts[1], parts[2]))
    if not rows:
        raise DataError("raw dataset is empty")
    return rows


def prepare(
    rows: Sequence[Tuple[int, str, str]],
    left_length: int,
    right_length: int,
    min_count: int = 1,
    max_doc_fraction: float = 1.0,
    stopwords: Iterable[str] = (),
) -> PreparedData:
    """Assign tids ``L<n>``/``R<n>`` (deduplicated by exact text) and encode."""
    left_ids: Dict[str, str] = {}
    right_ids: Dict[str, str] = {}
    relations = []
    for label, lt, rt in rows:
        if lt not in left_ids:
            left_ids[lt] = f"L{len(left_ids)}"
        if rt not in right_ids:
            right_ids[rt] = f"R{len(right_ids)}"
        relations.append(RelationRecord(label, left_ids[lt], right_ids[rt]))
    left_tokens = {tid: tokenize(t) for t, tid in left_ids.items()}
    right_tokens = {tid: tokenize(t) for t, tid in right_ids.items()}
    vocab = build_vocabulary(
        list(left_tokens.values()) + list(right_tokens.values()),
        min_count=min_count,
        max_doc_fraction=max_doc_fraction,
        stopwords=stopwords,
    )
    corpus = Corpus.from_entries(
        encode_corpus(left_tokens, vocab, left_length) + encode_corpus(right_tokens, vocab, right_length)
    )
    return PreparedData(vocab, corpus, relations, left_length, right_length)
