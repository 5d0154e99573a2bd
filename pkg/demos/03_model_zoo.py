"""
The four matching models
========================

One representation-focused model (arci) and three interaction-focused
models (matchpyramid, drmm, matchsrnn) score the same pairs.
"""

import numpy as np

from textmatch import layers
from textmatch.autodiff import Graph, forward
from textmatch.models import KINDS, ModelConfig, build_model, expected_param_count

rng = np.random.default_rng(1)
left = rng.integers(2, 30, size=(3, 5))
right = rng.integers(2, 30, size=(3, 10))
left[:, 4] = 0  # padded query tail
right[0, 7:] = 0

for kind in KINDS:
    cfg = ModelConfig(kind=kind, vocab_size=30, seed=0)
    model = build_model(cfg)
    scores = model.score_pairs(left, right)
    print(f"{kind:>12}: {model.num_parameters():5d} parameters "
          f"(closed form {expected_param_count(cfg)}), scores {np.round(scores, 4)}")

# a look inside: the word-by-word matching matrix of one pair
model = build_model(ModelConfig(kind="matchpyramid", vocab_size=30, seed=0))
table = model.params["embedding"].value
g = Graph()
m = layers.matching_matrix(g, g.constant(table[left[0]]), g.constant(table[right[0]]), "cosine")
print("cosine matching matrix of pair 0:")
print(np.round(forward(g, {})[m], 2))

# and the histogram features DRMM sees, one row per query term
drmm = build_model(ModelConfig(kind="drmm", vocab_size=30, bins=5, seed=0))
print("matching histogram (log-count), pair 0:")
print(np.round(drmm.histograms(left[:1], right[:1])[0], 3))
