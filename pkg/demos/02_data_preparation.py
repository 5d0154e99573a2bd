"""
From raw text pairs to batches
==============================

Raw rows ``label<TAB>left text<TAB>right text`` become a word dictionary,
a fixed-length corpus and a relation list. Batches are then drawn in
pointwise, pairwise or listwise form.
"""

from textmatch.dataprep import make_batches, prepare, read_raw

raw = [
    "1\twhat is a neural ranker\ta neural ranker scores documents",
    "0\twhat is a neural ranker\tthe weather is mild today",
    "0\twhat is a neural ranker\tstock prices fell",
    "2\thow to cook rice\trinse the rice then cook it in water",
    "1\thow to cook rice\tcook rice slowly",
    "0\thow to cook rice\ta neural ranker scores documents",
]
rows = read_raw(raw)
prep = prepare(rows, left_length=4, right_length=6, stopwords=["a", "the", "is"])

print("vocabulary size (with PAD and OOV):", prep.vocab.size)
print("most frequent words:", list(prep.vocab.word_to_id.items())[:5])

# every text gets a tid; duplicated texts share one
for tid, entry in prep.corpus.items():
    words = [prep.vocab.decode(w) for w in entry.wids]
    print(f"{tid:>3}  len={entry.original_length}  {entry.wids}  {' '.join(words)}")

for r in prep.relations:
    print("relation:", r.label, r.tid_left, r.tid_right)

# pointwise: plain labelled rows
for b in make_batches("pointwise", prep.relations, prep.corpus, seed=0, batch_size=4):
    print("pointwise batch", b.left.shape, b.right.shape, "labels", b.labels)

# pairwise: each positive against strictly lower-labelled documents
for b in make_batches("pairwise", prep.relations, prep.corpus, seed=0, batch_size=8, num_neg=2):
    for q, p, n, lab in zip(b.left_tids, b.right_tids, b.neg_tids, b.labels):
        print(f"pair {q}: {p} (label {lab[0]:.0f}) over {n} (label {lab[1]:.0f})")

# listwise: one group per query, the group order depends on the seed
for b in make_batches("listwise", prep.relations, prep.corpus, seed=3):
    print("listwise group", b.left_tids[0], b.right_tids, b.labels)
