"""Text-matching layers built as compute-graph fragments.

All builders accept either a single example (``[L, d]``) or a batch
(``[B, L, d]``) unless stated otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Graph, Op, Parameter, ShapeError, register_op

COSINE_FLOOR = 1e-12
MASK_FLOOR = 0.5


@register_op
class CosineMatrix(Op):
    """Pairwise cosine similarity between the rows of two embedding matrices.

    The denominator is clamped at ``COSINE_FLOOR``; clamped entries are
    treated as constant zero similarity in the backward pass.
    """

    name = "cosine_matrix"
    differentiable = (True, True)

    def infer_shape(self, shapes, attrs):
        a, b = shapes
        if len(a) != len(b) or len(a) < 2 or a[-1] != b[-1] or a[:-2] != b[:-2]:
            raise ShapeError(f"cosine_matrix: incompatible shapes {a} and {b}")
        return a[:-1] + (b[-2],)

    def forward(self, xs, attrs):
        a, b = xs
        dot = np.matmul(a, np.swapaxes(b, -1, -2))
        na = np.sqrt((a * a).sum(-1))
        nb = np.sqrt((b * b).sum(-1))
        den = na[..., :, None] * nb[..., None, :]
        live = den > COSINE_FLOOR
        m = dot / np.maximum(den, COSINE_FLOOR)
        return m, (na, nb, den, live)

    def backward(self, g, xs, out, cache, attrs):
        a, b = xs
        na, nb, den, live = cache
        gd = np.where(live, g / np.maximum(den, COSINE_FLOOR), 0.0)
        gm = np.where(live, g * out, 0.0)
        inv_na2 = np.where(na > 0, 1.0 / np.maximum(na * na, COSINE_FLOOR), 0.0)
        inv_nb2 = np.where(nb > 0, 1.0 / np.maximum(nb * nb, COSINE_FLOOR), 0.0)
        ga = np.matmul(gd, b) - a * (gm.sum(-1) * inv_na2)[..., None]
        gb = np.matmul(np.swapaxes(gd, -1, -2), a) - b * (gm.sum(-2) * inv_nb2)[..., None]
        return [ga, gb]


@register_op
class IndicatorMatrix(Op):
    """``M[i, j] = 1`` where the word ids match and are not padding."""

    name = "indicator_matrix"
    differentiable = (False, False)

    def infer_shape(self, shapes, attrs):
        a, b = shapes
        if len(a) != len(b) or a[:-1] != b[:-1]:
            raise ShapeError(f"indicator_matrix: incompatible wid shapes {a} and {b}")
        return a + (b[-1],)

    def forward(self, xs, attrs):
        a, b = xs
        eq = a[..., :, None] == b[..., None, :]
        nonpad = (a != 0)[..., :, None]
        return (eq & nonpad).astype(np.float64), None

    def backward(self, g, xs, out, cache, attrs):
        return [None, None]


@register_op
class MaskedSoftmax(Op):
    """Softmax over the last axis restricted to positions where ``mask`` is 1."""

    name = "masked_softmax"
    differentiable = (True, False)

    def infer_shape(self, shapes, attrs):
        if shapes[0] != shapes[1]:
            raise ShapeError(f"masked_softmax: logits {shapes[0]} vs mask {shapes[1]}")
        return shapes[0]

    def forward(self, xs, attrs):
        x, mask = xs
        on = mask > MASK_FLOOR
        if not np.all(on.any(axis=-1)):
            raise ValueError("masked_softmax: a row has no unmasked position (no query terms)")
        shifted = np.where(on, x, -np.inf)
        top = shifted.max(axis=-1, keepdims=True)
        e = np.where(on, np.exp(np.where(on, x - top, 0.0)), 0.0)
        return e / e.sum(axis=-1, keepdims=True), None

    def backward(self, g, xs, out, cache, attrs):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return [out * (g - inner), None]


def _split3(v, h):
    return v[:, :h], v[:, h : 2 * h], v[:, 2 * h :]


@register_op
class Gru2d(Op):
    """Two-dimensional GRU scan over an interaction grid.

    Inputs: ``S`` [B, L1, L2, m], ``W_r`` [3h+m, 3h], ``b_r`` [3h],
    ``W_c`` [m+3h, h], ``b_c`` [h], ``W_z`` [3h+m, 4h], ``b_z`` [4h].
    Output: hidden states [B, L1, L2, h]. Row vectors multiply weights from
    the left (``q @ W``); gate block order is left, top, diagonal, candidate.
    """

    name = "gru2d"
    differentiable = (True,) * 7

    def infer_shape(self, shapes, attrs):
        s, wr, br, wc, bc, wz, bz = shapes
        if len(s) != 4:
            raise ShapeError(f"gru2d: input must be [B, L1, L2, m], got {s}")
        m = s[3]
        h = bc[0] if len(bc) == 1 else -1
        want = {
            "W_r": (3 * h + m, 3 * h),
            "b_r": (3 * h,),
            "W_c": (m + 3 * h, h),
            "b_c": (h,),
            "W_z": (3 * h + m, 4 * h),
            "b_z": (4 * h,),
        }
        got = dict(zip(want, (wr, br, wc, bc, wz, bz)))
        for key, shape in want.items():
            if tuple(got[key]) != shape:
                raise ShapeError(f"gru2d: {key} must have shape {shape}, got {got[key]}")
        return (s[0], s[1], s[2], h)

    def forward(self, xs, attrs):
        s, wr, br, wc, bc, wz, bz = xs
        B, L1, L2, m = s.shape
        h = bc.shape[0]
        H = np.zeros((B, L1 + 1, L2 + 1, h))  # padded with zero boundary states
        cache = {}
        for i in range(L1):
            for j in range(L2):
                hl = H[:, i + 1, j]
                ht = H[:, i, j + 1]
                hd = H[:, i, j]
                x = s[:, i, j]
                q = np.concatenate([hl, ht, hd, x], axis=1)
                r = _sigmoid(q @ wr + br)
                rl, rt, rd = _split3(r, h)
                u = np.concatenate([x, rl * hl, rt * ht, rd * hd], axis=1)
                c = np.tanh(u @ wc + bc)
                z = _softmax4(q @ wz + bz, h)
                H[:, i + 1, j + 1] = z[:, 0] * hl + z[:, 1] * ht + z[:, 2] * hd + z[:, 3] * c
                cache[i, j] = (q, r, u, c, z)
        return H[:, 1:, 1:].copy(), (H, cache)

    def backward(self, g, xs, out, cache, attrs):
        s, wr, br, wc, bc, wz, bz = xs
        H, cells = cache
        B, L1, L2, m = s.shape
        h = bc.shape[0]
        dH = np.zeros_like(H)
        dH[:, 1:, 1:] = g
        ds = np.zeros_like(s)
        dwr, dbr = np.zeros_like(wr), np.zeros_like(br)
        dwc, dbc = np.zeros_like(wc), np.zeros_like(bc)
        dwz, dbz = np.zeros_like(wz), np.zeros_like(bz)
        for i in reversed(range(L1)):
            for j in reversed(range(L2)):
                q, r, u, c, z = cells[i, j]
                hl = H[:, i + 1, j]
                ht = H[:, i, j + 1]
                hd = H[:, i, j]
                dh = dH[:, i + 1, j + 1]
                # mixing
                dz = np.stack([dh * hl, dh * ht, dh * hd, dh * c], axis=1)
                dhl = dh * z[:, 0]
                dht = dh * z[:, 1]
                dhd = dh * z[:, 2]
                dc = dh * z[:, 3]
                da = (z * (dz - (z * dz).sum(axis=1, keepdims=True))).reshape(B, 4 * h)
                dwz += q.T @ da
                dbz += da.sum(axis=0)
                dq = da @ wz.T
                # candidate
                dpc = dc * (1.0 - c * c)
                dwc += u.T @ dpc
                dbc += dpc.sum(axis=0)
                du = dpc @ wc.T
                ds[:, i, j] += du[:, :m]
                gl, gt, gd = du[:, m : m + h], du[:, m + h : m + 2 * h], du[:, m + 2 * h :]
                rl, rt, rd = _split3(r, h)
                dhl += gl * rl
                dht += gt * rt
                dhd += gd * rd
                dr = np.concatenate([gl * hl, gt * ht, gd * hd], axis=1)
                dpr = dr * r * (1.0 - r)
                dwr += q.T @ dpr
                dbr += dpr.sum(axis=0)
                dq += dpr @ wr.T
                dhl += dq[:, :h]
                dht += dq[:, h : 2 * h]
                dhd += dq[:, 2 * h : 3 * h]
                ds[:, i, j] += dq[:, 3 * h :]
                dH[:, i + 1, j] += dhl
                dH[:, i, j + 1] += dht
                dH[:, i, j] += dhd
        return [ds, dwr, dbr, dwc, dbc, dwz, dbz]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax4(a, h):
    a = a.reshape(a.shape[0], 4, h)
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def matching_matrix(graph: Graph, left: int, right: int, mode: str = "dot") -> int:
    """Word-by-word interaction matrix ``[.., L1, L2]``.

    ``dot`` and ``cosine`` take embedding nodes; ``indicator`` takes wid nodes
    and is a constant with respect to every parameter.
    """
    if mode == "dot":
        ls, rs = graph.shape(left), graph.shape(right)
        if ls[-1] != rs[-1]:
            raise ShapeError(f"matching_matrix: embedding dims differ, {ls} vs {rs}")
        axes = list(range(len(rs)))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return graph.matmul(left, graph.transpose(right, axes))
    if mode == "cosine":
        return graph.apply("cosine_matrix", left, right)
    if mode == "indicator":
        return graph.apply("indicator_matrix", left, right)
    raise ValueError(f"unknown matching mode {mode!r}")


def term_gating(graph: Graph, query_emb: int, gate: Parameter, mask: int) -> int:
    """Softmax gates over non-PAD query terms from ``gate . x_i`` logits.

    ``mask`` is a node holding 1 at real terms and 0 at padding.
    """
    logits = graph.sum(graph.mul(query_emb, graph.parameter(gate)), axis=len(graph.shape(query_emb)) - 1)
    return graph.apply("masked_softmax", logits, mask)


def grid_pool(graph: Graph, x: int, grid) -> int:
    """Dynamic max pooling of ``[n1, n2]``, ``[B, n1, n2]`` or ``[B, n1, n2, C]``."""
    shape = graph.shape(x)
    if len(shape) == 4:
        return graph.grid_pool(x, grid)
    if len(shape) == 2:
        y = graph.grid_pool(graph.reshape(x, (1,) + shape + (1,)), grid)
        return graph.reshape(y, tuple(grid))
    if len(shape) == 3:
        y = graph.grid_pool(graph.reshape(x, shape + (1,)), grid)
        return graph.reshape(y, (shape[0],) + tuple(grid))
    raise ShapeError(f"grid_pool: unsupported rank {shape}")


@dataclass
class Gru2dParams:
    W_r: Parameter
    b_r: Parameter
    W_c: Parameter
    b_c: Parameter
    W_z: Parameter
    b_z: Parameter

    def all(self):
        return [self.W_r, self.b_r, self.W_c, self.b_c, self.W_z, self.b_z]


def init_gru2d(input_dim: int, hidden: int, rng: np.random.Generator, prefix: str = "gru2d") -> Gru2dParams:
    m, h = input_dim, hidden
    return Gru2dParams(
        W_r=Parameter(f"{prefix}.W_r", glorot(rng, 3 * h + m, 3 * h)),
        b_r=Parameter(f"{prefix}.b_r", np.zeros(3 * h)),
        W_c=Parameter(f"{prefix}.W_c", glorot(rng, m + 3 * h, h)),
        b_c=Parameter(f"{prefix}.b_c", np.zeros(h)),
        W_z=Parameter(f"{prefix}.W_z", glorot(rng, 3 * h + m, 4 * h)),
        b_z=Parameter(f"{prefix}.b_z", np.zeros(4 * h)),
    )


def gru2d(graph: Graph, S: int, params: Gru2dParams) -> int:
    """Hidden states ``[.., L1, L2, h]`` of a 2D-GRU over ``S`` [.., L1, L2, m]."""
    shape = graph.shape(S)
    ids = [graph.parameter(p) for p in params.all()]
    if len(shape) == 3:
        out = graph.apply("gru2d", graph.reshape(S, (1,) + shape), *ids)
        return graph.reshape(out, graph.shape(out)[1:])
    return graph.apply("gru2d", S, *ids)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    """Uniform ``[-s, s]`` with ``s = sqrt(6 / (fan_in + fan_out))``."""
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape if shape is not None else (fan_in, fan_out))


# ---------------------------------------------------------------------------
# matching histogram (constant feature, computed outside the graph)
# ---------------------------------------------------------------------------


def cosine_similarities(query: np.ndarray, doc: np.ndarray) -> np.ndarray:
    dot = np.matmul(query, np.swapaxes(doc, -1, -2))
    nq = np.sqrt((query * query).sum(-1))
    nd = np.sqrt((doc * doc).sum(-1))
    return dot / np.maximum(nq[..., :, None] * nd[..., None, :], COSINE_FLOOR)


def histogram_from_similarities(
    sims: np.ndarray, bins: int, mode: str = "count", doc_mask: Optional[np.ndarray] = None
) -> np.ndarray:
    """Bucket similarities ``[.., L1, L2]`` into ``bins`` equal bins over [-1, 1].

    Columns where ``doc_mask`` is 0 are skipped. The last bin is closed.
    """
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    if mode not in ("count", "log-count"):
        raise ValueError(f"unknown histogram mode {mode!r}")
    sims = np.clip(np.asarray(sims, dtype=np.float64), -1.0, 1.0)
    idx = np.minimum(np.floor((sims + 1.0) / 2.0 * bins).astype(np.int64), bins - 1)
    onehot = np.eye(bins)[idx]  # [.., L1, L2, bins]
    if doc_mask is not None:
        onehot = onehot * np.asarray(doc_mask, dtype=np.float64)[..., None, :, None]
    counts = onehot.sum(axis=-2)
    return np.log1p(counts) if mode == "log-count" else counts


def matching_histogram(
    query_emb: np.ndarray,
    doc_emb: np.ndarray,
    bins: int,
    mode: str = "count",
    doc_mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per query term, histogram ``[.., L1, bins]`` of cosine similarity to doc terms.

    Without an explicit ``doc_mask``, all-zero doc rows count as padding.
    """
    query_emb = np.asarray(query_emb, dtype=np.float64)
    doc_emb = np.asarray(doc_emb, dtype=np.float64)
    if doc_mask is None:
        doc_mask = np.any(doc_emb != 0.0, axis=-1)
    return histogram_from_similarities(cosine_similarities(query_emb, doc_emb), bins, mode, doc_mask)


def wid_masks(wids: np.ndarray) -> np.ndarray:
    return (np.asarray(wids) != 0).astype(np.float64)

