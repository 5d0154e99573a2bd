"""Random gradient-check instances for every differentiable op and layer.

Each case builder takes a ``numpy.random.Generator`` and returns
``(graph, loss_node, bindings)``. Every differentiable operand is a
parameter so :func:`grad_check` perturbs it; the loss is a fixed random
projection of the op output.
"""

import numpy as np

from textmatch import layers
from textmatch.autodiff import Graph, Parameter, forward, near_kink

MAX_RESAMPLES = 50


def _p(g, rng, name, shape, lo=-1.0, hi=1.0):
    return g.parameter(Parameter(name, rng.uniform(lo, hi, size=shape)))


def _project(g, rng, out):
    shape = g.shape(out)
    if shape == ():
        return g.mul(out, g.constant(rng.normal()))
    r = g.constant(rng.normal(size=shape))
    return g.sum(g.mul(out, r))


def _dims(rng, k, lo=1, hi=4):
    return [int(x) for x in rng.integers(lo, hi + 1, size=k)]


def case_add(rng):
    g = Graph()
    n, m = _dims(rng, 2)
    kind = rng.integers(3)
    a = _p(g, rng, "a", (n, m))
    b = _p(g, rng, "b", [(n, m), (), (m,)][kind])
    return g, _project(g, rng, g.add(a, b)), {}


def case_sub(rng):
    g = Graph()
    n, m = _dims(rng, 2)
    kind = rng.integers(3)
    a = _p(g, rng, "a", [(n, m), (), (m,)][kind])
    b = _p(g, rng, "b", (n, m))
    return g, _project(g, rng, g.sub(a, b)), {}


def case_mul(rng):
    g = Graph()
    n, m, k = _dims(rng, 3)
    kind = rng.integers(3)
    a = _p(g, rng, "a", (n, m, k))
    b = _p(g, rng, "b", [(n, m, k), (1,), (k,)][kind])
    return g, _project(g, rng, g.mul(a, b)), {}


def case_matmul(rng):
    g = Graph()
    n, k, m, b = _dims(rng, 4)
    if rng.integers(2):
        x, w = _p(g, rng, "a", (b, n, k)), _p(g, rng, "b", (k, m))
    else:
        x, w = _p(g, rng, "a", (b, n, k)), _p(g, rng, "b", (b, k, m))
    return g, _project(g, rng, g.matmul(x, w)), {}


def case_transpose(rng):
    g = Graph()
    shape = tuple(_dims(rng, 3))
    a = _p(g, rng, "a", shape)
    return g, _project(g, rng, g.transpose(a, rng.permutation(3))), {}


def case_concat(rng):
    g = Graph()
    n, m = _dims(rng, 2)
    axis = int(rng.integers(2))
    parts = []
    for i in range(int(rng.integers(2, 4))):
        shape = [n, m]
        shape[axis] = int(rng.integers(1, 4))
        parts.append(_p(g, rng, f"x{i}", tuple(shape)))
    return g, _project(g, rng, g.concat(parts, axis)), {}


def case_reshape(rng):
    g = Graph()
    n, m, k = _dims(rng, 3)
    a = _p(g, rng, "a", (n, m, k))
    return g, _project(g, rng, g.reshape(a, (n * m, k))), {}


def case_slice(rng):
    g = Graph()
    shape = _dims(rng, 3, 2, 5)
    axis = int(rng.integers(3))
    start = int(rng.integers(0, shape[axis] - 1))
    stop = int(rng.integers(start + 1, shape[axis] + 1))
    a = _p(g, rng, "a", tuple(shape))
    return g, _project(g, rng, g.slice(a, axis, start, stop)), {}


def case_gather(rng):
    g = Graph()
    V, d, n, L = int(rng.integers(2, 8)), *_dims(rng, 3)
    table = _p(g, rng, "table", (V, d))
    idx = g.input("idx", (n, L))
    ids = rng.integers(0, V, size=(n, L))
    return g, _project(g, rng, g.gather(table, idx)), {"idx": ids}


def _unary(opname, lo=-2.0, hi=2.0):
    def case(rng):
        g = Graph()
        a = _p(g, rng, "a", tuple(_dims(rng, 2)), lo, hi)
        return g, _project(g, rng, g.apply(opname, a)), {}

    case.__name__ = f"case_{opname}"
    return case


case_sigmoid = _unary("sigmoid", -4, 4)
case_tanh = _unary("tanh", -2, 2)
case_relu = _unary("relu", -2, 2)
case_exp = _unary("exp", -2, 2)
case_log = _unary("log", 0.1, 3)


def case_clip(rng):
    g = Graph()
    shape = tuple(_dims(rng, 2))
    # values well inside or well outside the clip window, never near its edges
    vals = rng.uniform(-0.4, 0.4, size=shape) + rng.choice([-1.0, 0.0, 1.0], size=shape)
    a = g.parameter(Parameter("a", vals))
    return g, _project(g, rng, g.clip(a, -0.5, 0.5)), {}


def case_softmax(rng):
    g = Graph()
    shape = tuple(_dims(rng, 3))
    a = _p(g, rng, "a", shape, -2, 2)
    return g, _project(g, rng, g.softmax(a, axis=int(rng.integers(3)))), {}


def _reduce(opname):
    def case(rng):
        g = Graph()
        shape = tuple(_dims(rng, 3))
        a = _p(g, rng, "a", shape)
        axis = None if rng.integers(4) == 0 else int(rng.integers(3))
        return g, _project(g, rng, g.apply(opname, a, axis=axis)), {}

    case.__name__ = f"case_{opname}"
    return case


case_sum = _reduce("sum")
case_mean = _reduce("mean")
case_max = _reduce("max")


def case_conv2d(rng):
    g = Graph()
    B, cin, cout = _dims(rng, 3, 1, 3)
    H, W = _dims(rng, 2, 2, 5)
    kh, kw = int(rng.integers(1, H + 1)), int(rng.integers(1, W + 1))
    x = _p(g, rng, "x", (B, H, W, cin))
    w = _p(g, rng, "w", (kh, kw, cin, cout))
    b = _p(g, rng, "b", (cout,))
    return g, _project(g, rng, g.conv2d(x, w, b)), {}


def case_maxpool2d(rng):
    g = Graph()
    B, C = _dims(rng, 2, 1, 2)
    H, W = _dims(rng, 2, 2, 6)
    size = (int(rng.integers(1, H + 1)), int(rng.integers(1, W + 1)))
    x = _p(g, rng, "x", (B, H, W, C))
    return g, _project(g, rng, g.maxpool2d(x, size)), {}


def case_grid_pool(rng):
    g = Graph()
    B, C = _dims(rng, 2, 1, 2)
    n1, n2 = _dims(rng, 2, 1, 7)
    p = (int(rng.integers(1, n1 + 1)), int(rng.integers(1, n2 + 1)))
    x = _p(g, rng, "x", (B, n1, n2, C))
    return g, _project(g, rng, layers.grid_pool(g, x, p)), {}


def _matching(mode):
    def case(rng):
        g = Graph()
        B, L1, L2, d = _dims(rng, 4)
        a = _p(g, rng, "left", (B, L1, d))
        b = _p(g, rng, "right", (B, L2, d))
        return g, _project(g, rng, layers.matching_matrix(g, a, b, mode)), {}

    case.__name__ = f"case_matching_{mode}"
    return case


case_matching_dot = _matching("dot")
case_matching_cosine = _matching("cosine")


def case_term_gating(rng):
    g = Graph()
    B, L, d = _dims(rng, 3)
    emb = _p(g, rng, "emb", (B, L, d))
    gate = Parameter("gate", rng.uniform(-1, 1, size=d))
    lengths = rng.integers(1, L + 1, size=B)
    mask = (np.arange(L)[None, :] < lengths[:, None]).astype(float)
    m = g.input("mask", (B, L))
    return g, _project(g, rng, layers.term_gating(g, emb, gate, m)), {"mask": mask}


def case_gru2d(rng):
    g = Graph()
    B, m, h = _dims(rng, 3, 1, 2)
    L1, L2 = _dims(rng, 2, 1, 3)
    S = _p(g, rng, "S", (B, L1, L2, m))
    params = layers.init_gru2d(m, h, rng)
    for p in params.all():
        p.value = p.value + rng.uniform(-0.3, 0.3, size=p.shape)
    return g, _project(g, rng, layers.gru2d(g, S, params)), {}


CASES = {
    f.__name__[len("case_") :]: f
    for f in [
        case_add, case_sub, case_mul, case_matmul, case_transpose, case_concat,
        case_reshape, case_slice, case_gather, case_sigmoid, case_tanh, case_relu,
        case_exp, case_log, case_clip, case_softmax, case_sum, case_mean, case_max,
        case_conv2d, case_maxpool2d, case_grid_pool, case_matching_dot,
        case_matching_cosine, case_term_gating, case_gru2d,
    ]
}


def sample(case, seed):
    """Draw an instance whose inputs sit away from relu kinks and pooling ties."""
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RESAMPLES):
        g, loss, bind = case(rng)
        if not near_kink(g, forward(g, bind)):
            return g, loss, bind
    raise RuntimeError("could not draw an instance away from kinks")


SMALL = dict(
    vocab_size=12, embedding_dim=4, left_length=4, right_length=6, conv_filters=3,
    conv_width=2, conv_size=[2, 2], grid=[2, 2], bins=5, hidden_dim=3, mlp_widths=[4],
)


def model_case(kind, seed, n=2):
    """A small model, a padded toy batch and a projected-score loss.

    Biases are jittered away from zero so all-padding windows do not sit
    exactly on a relu kink.
    """
    from textmatch.models import ModelConfig, build_model

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(kind=kind, seed=seed, **SMALL)
    for _ in range(MAX_RESAMPLES):
        model = build_model(cfg)
        for name, p in model.params.items():
            if name.endswith(".b") or name.endswith(".b_r") or name.endswith(".b_c") or name.endswith(".b_z"):
                p.value = rng.uniform(-0.5, 0.5, size=p.shape)
        left = rng.integers(1, cfg.vocab_size, size=(n, cfg.left_length))
        right = rng.integers(1, cfg.vocab_size, size=(n, cfg.right_length))
        left[:, -1] = 0
        right[0, -2:] = 0
        g = Graph()
        score, feed = model.build_score(g, n)
        loss = g.sum(g.mul(score, g.constant(rng.normal(size=n))))
        bind = feed(left, right)
        if not near_kink(g, forward(g, bind)):
            return model, g, loss, bind
        cfg = ModelConfig(kind=kind, seed=int(rng.integers(1 << 30)), **SMALL)
    raise RuntimeError("could not draw a model instance away from kinks")
