"""Config-driven matching models.

Four kinds are available:

* ``arci`` - representation-focused: each text is convolved and max-pooled
  into a vector independently, the two vectors are concatenated and scored.
* ``matchpyramid`` - dot-product matching matrix, 2-D convolution, dynamic
  grid pooling, MLP.
* ``drmm`` - per-term matching histograms scored by a shared MLP and
  combined with term-gating weights.
* ``matchsrnn`` - cosine + dot interaction tensor scanned by a 2D-GRU; the
  final cell's state is scored.

Each model exposes ``build_score(graph, n)`` which appends a scoring
fragment for ``n`` pairs to a graph, so losses can be stacked on top.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import layers
from .autodiff import Graph, Parameter, forward
from .dataprep import PAD, Vocabulary, load_embeddings

KINDS = ("arci", "matchpyramid", "drmm", "matchsrnn")

MAGIC = b"MZMF"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: str
    vocab_size: int
    embedding_dim: int = 8
    left_length: int = 5
    right_length: int = 10
    seed: int = 0
    embedding_source: str = "random"
    trainable_embeddings: bool = True
    mlp_widths: List[int] = field(default_factory=lambda: [8])
    # arci
    conv_filters: int = 8
    conv_width: int = 2
    # matchpyramid
    conv_size: List[int] = field(default_factory=lambda: [2, 2])
    grid: List[int] = field(default_factory=lambda: [2, 2])
    # drmm
    bins: int = 20
    hist_mode: str = "log-count"
    # matchsrnn
    hidden_dim: int = 4

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        dims = {
            "vocab_size": self.vocab_size,
            "embedding_dim": self.embedding_dim,
            "left_length": self.left_length,
            "right_length": self.right_length,
            "conv_filters": self.conv_filters,
            "conv_width": self.conv_width,
            "bins": self.bins,
            "hidden_dim": self.hidden_dim,
        }
        for key, v in dims.items():
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{key} must be a positive integer, got {v!r}")
        if any(not isinstance(w, int) or w < 1 for w in self.mlp_widths):
            raise ConfigError(f"mlp_widths must be positive integers, got {self.mlp_widths}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must include the two reserved ids")
        if self.kind == "arci" and self.conv_width > min(self.left_length, self.right_length):
            raise ConfigError(
                f"conv_width {self.conv_width} exceeds a text length ({self.left_length}, {self.right_length})"
            )
        if self.kind == "matchpyramid":
            if len(self.conv_size) != 2 or len(self.grid) != 2:
                raise ConfigError("conv_size and grid need two entries each")
            oh = self.left_length - self.conv_size[0] + 1
            ow = self.right_length - self.conv_size[1] + 1
            if min(self.conv_size) < 1 or oh < 1 or ow < 1:
                raise ConfigError(f"conv_size {self.conv_size} does not fit the matching matrix")
            if not (1 <= self.grid[0] <= oh and 1 <= self.grid[1] <= ow):
                raise ConfigError(f"grid {self.grid} larger than the {oh}x{ow} feature map")
        if self.kind == "drmm":
            if self.bins < 2:
                raise ConfigError("drmm needs at least 2 histogram bins")
            if self.hist_mode not in ("count", "log-count"):
                raise ConfigError(f"unknown hist_mode {self.hist_mode!r}")


Feed = Callable[[np.ndarray, np.ndarray], Dict[str, np.ndarray]]


def _mlp_params(rng, prefix: str, sizes: List[int]) -> List[Tuple[Parameter, Parameter]]:
    out = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out.append(
            (
                Parameter(f"{prefix}.{i}.W", layers.glorot(rng, a, b)),
                Parameter(f"{prefix}.{i}.b", np.zeros(b)),
            )
        )
    return out


def _mlp(graph: Graph, x: int, params) -> int:
    """Dense layers with tanh between them and a linear last layer."""
    for i, (w, b) in enumerate(params):
        x = graph.add(graph.matmul(x, graph.parameter(w)), graph.parameter(b))
        if i < len(params) - 1:
            x = graph.tanh(x)
    return x


def mlp_param_count(sizes: List[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


class Model:
    """A scoring model: parameters plus a graph builder."""

    def __init__(self, config: ModelConfig, embedding: Optional[np.ndarray] = None):
        config.validate()
        self.config = config
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()
        self._graphs: Dict[int, tuple] = {}
        rng = np.random.default_rng(config.seed)
        c = config
        V, d = c.vocab_size, c.embedding_dim
        if embedding is None:
            embedding = layers.glorot(rng, V, d)
        embedding = np.array(embedding, dtype=np.float64)
        if embedding.shape != (V, d):
            raise ConfigError(f"embedding table shape {embedding.shape} != ({V}, {d})")
        embedding[PAD] = 0.0
        self.embedding = self._register(Parameter("embedding", embedding, trainable=c.trainable_embeddings))

        if c.kind == "arci":
            F, k = c.conv_filters, c.conv_width
            self.conv_w = self._register(Parameter("conv.W", layers.glorot(rng, k * d, F, (1, k, d, F))))
            self.conv_b = self._register(Parameter("conv.b", np.zeros(F)))
            head_in = 2 * F
        elif c.kind == "matchpyramid":
            F, (k1, k2) = c.conv_filters, c.conv_size
            self.conv_w = self._register(Parameter("conv.W", layers.glorot(rng, k1 * k2, F, (k1, k2, 1, F))))
            self.conv_b = self._register(Parameter("conv.b", np.zeros(F)))
            head_in = c.grid[0] * c.grid[1] * F
        elif c.kind == "drmm":
            self.gate = self._register(Parameter("gate.w", layers.glorot(rng, d, 1, (d,))))
            head_in = c.bins
        else:
            self.gru = layers.init_gru2d(2, c.hidden_dim, rng)
            for p in self.gru.all():
                self._register(p)
            head_in = c.hidden_dim
        self.mlp = _mlp_params(rng, "mlp", [head_in] + list(c.mlp_widths) + [1])
        for w, b in self.mlp:
            self._register(w)
            self._register(b)

    def _register(self, p: Parameter) -> Parameter:
        if p.name in self.params:
            raise ValueError(f"parameter {p.name!r} registered twice")
        self.params[p.name] = p
        return p

    @property
    def kind(self) -> str:
        return self.config.kind

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def trainable(self) -> List[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    # graph construction -------------------------------------------------------

    def _embed(self, graph, wids):
        return graph.gather(graph.parameter(self.embedding), wids, frozen=(PAD,))

    def build_score(self, graph: Graph, n: int, prefix: str = "") -> Tuple[int, Feed]:
        """Append a scoring fragment for ``n`` pairs; return (score node [n], feed)."""
        c = self.config
        L1, L2 = c.left_length, c.right_length
        left = graph.input(prefix + "left", (n, L1))
        if c.kind == "drmm":
            return self._build_drmm(graph, n, left, prefix)
        right = graph.input(prefix + "right", (n, L2))
        el, er = self._embed(graph, left), self._embed(graph, right)
        if c.kind == "arci":
            feats = graph.concat([self._arci_side(graph, el, n, L1), self._arci_side(graph, er, n, L2)], axis=1)
        elif c.kind == "matchpyramid":
            m = layers.matching_matrix(graph, el, er, "dot")
            x = graph.conv2d(
                graph.reshape(m, (n, L1, L2, 1)), graph.parameter(self.conv_w), graph.parameter(self.conv_b)
            )
            x = layers.grid_pool(graph, graph.relu(x), c.grid)
            feats = graph.reshape(x, (n, c.grid[0] * c.grid[1] * c.conv_filters))
        else:
            cos = graph.reshape(layers.matching_matrix(graph, el, er, "cosine"), (n, L1, L2, 1))
            dot = graph.reshape(layers.matching_matrix(graph, el, er, "dot"), (n, L1, L2, 1))
            H = layers.gru2d(graph, graph.concat([cos, dot], axis=3), self.gru)
            last = graph.slice(graph.slice(H, 1, L1 - 1, L1), 2, L2 - 1, L2)
            feats = graph.reshape(last, (n, c.hidden_dim))
        score = graph.reshape(_mlp(graph, feats, self.mlp), (n,))

        def feed(lw, rw):
            return {prefix + "left": lw, prefix + "right": rw}

        return score, feed

    def _arci_side(self, graph, emb, n, L):
        d, F, k = self.config.embedding_dim, self.config.conv_filters, self.config.conv_width
        x = graph.conv2d(graph.reshape(emb, (n, 1, L, d)), graph.parameter(self.conv_w), graph.parameter(self.conv_b))
        x = graph.reshape(graph.relu(x), (n, L - k + 1, F))
        return graph.max(x, axis=1)

    def _build_drmm(self, graph, n, left, prefix):
        c = self.config
        L1 = c.left_length
        hist = graph.input(prefix + "hist", (n, L1, c.bins))
        mask = graph.input(prefix + "left_mask", (n, L1))
        per_term = _mlp(graph, graph.reshape(hist, (n * L1, c.bins)), self.mlp)
        per_term = graph.reshape(per_term, (n, L1))
        gates = layers.term_gating(graph, self._embed(graph, left), self.gate, mask)
        score = graph.sum(graph.mul(gates, per_term), axis=1)

        def feed(lw, rw):
            return {
                prefix + "left": lw,
                prefix + "hist": self.histograms(lw, rw),
                prefix + "left_mask": layers.wid_masks(lw),
            }

        return score, feed

    def histograms(self, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        """DRMM input features from the current (frozen for this path) embeddings."""
        table = self.embedding.value
        left = np.asarray(left, dtype=np.int64)
        right = np.asarray(right, dtype=np.int64)
        h = layers.matching_histogram(
            table[left], table[right], self.config.bins, self.config.hist_mode, doc_mask=right != PAD
        )
        return h * (left != PAD)[..., None]

    # scoring ------------------------------------------------------------------

    def _check_lengths(self, left, right):
        c = self.config
        if left.ndim != 2 or left.shape[1] != c.left_length:
            raise ValueError(f"left wids must be [n, {c.left_length}], got {left.shape}")
        if right.ndim != 2 or right.shape[1] != c.right_length:
            raise ValueError(f"right wids must be [n, {c.right_length}], got {right.shape}")
        if left.shape[0] != right.shape[0]:
            raise ValueError(f"{left.shape[0]} left texts but {right.shape[0]} right texts")
        top = max(left.max(initial=0), right.max(initial=0))
        if left.min(initial=0) < 0 or right.min(initial=0) < 0 or top >= c.vocab_size:
            raise IndexError(f"wid out of embedding range [0, {c.vocab_size}): max {top}")

    def score_pairs(self, left, right) -> np.ndarray:
        left = np.asarray(left, dtype=np.int64)
        right = np.asarray(right, dtype=np.int64)
        self._check_lengths(left, right)
        n = left.shape[0]
        if n not in self._graphs:
            g = Graph()
            score, feed = self.build_score(g, n)
            self._graphs[n] = (g, score, feed)
        g, score, feed = self._graphs[n]
        return forward(g, feed(left, right))[score].copy()

    def predict_labels(self, left, right) -> np.ndarray:
        """Binary labels by thresholding the score at 0."""
        return (self.score_pairs(left, right) > 0).astype(np.int64)


def expected_param_count(c: ModelConfig) -> int:
    """Closed-form parameter count for a config."""
    V, d = c.vocab_size, c.embedding_dim
    n = V * d
    if c.kind == "arci":
        n += c.conv_width * d * c.conv_filters + c.conv_filters
        head = 2 * c.conv_filters
    elif c.kind == "matchpyramid":
        n += c.conv_size[0] * c.conv_size[1] * c.conv_filters + c.conv_filters
        head = c.grid[0] * c.grid[1] * c.conv_filters
    elif c.kind == "drmm":
        n += d
        head = c.bins
    else:
        h, m = c.hidden_dim, 2
        n += (3 * h + m) * 3 * h + 3 * h + (m + 3 * h) * h + h + (3 * h + m) * 4 * h + 4 * h
        head = h
    return n + mlp_param_count([head] + list(c.mlp_widths) + [1])


def build_model(config: ModelConfig, vocab: Optional[Vocabulary] = None) -> Model:
    config.validate()
    embedding = None
    if config.embedding_source != "random":
        if vocab is None:
            raise ConfigError("a vocabulary is needed to load an embedding file")
        if vocab.size != config.vocab_size:
            raise ConfigError(f"vocabulary has {vocab.size} ids but config says {config.vocab_size}")
        embedding = load_embeddings(config.embedding_source, vocab, config.embedding_dim, config.seed)
    return Model(config, embedding)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_model(model: Model, path):
    blob = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{p.value.ndim}I", p.value.ndim, *p.value.shape))
        parts.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("model file is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_model(path) -> Model:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from None
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ModelFormatError(f"{path} is not a model file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"model format version {version} is not supported (expected {FORMAT_VERSION})")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise ModelFormatError(f"corrupt config blob: {exc}") from None
    model = Model(cfg, np.zeros((cfg.vocab_size, cfg.embedding_dim)))
    count = r.u32()
    if count != len(model.params):
        raise ModelFormatError(f"file holds {count} parameters, model expects {len(model.params)}")
    for name, p in model.params.items():
        got = r.take(r.u32()).decode("utf-8", errors="replace")
        if got != name:
            raise ModelFormatError(f"expected parameter {name!r}, found {got!r}")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        if shape != p.shape:
            raise ModelFormatError(f"parameter {name!r} has shape {shape}, expected {p.shape}")
        size = int(np.prod(shape, dtype=np.int64))
        p.value = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        p.zero_grad()
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} trailing bytes after the last parameter")
    return model
