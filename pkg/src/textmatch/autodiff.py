"""Dense tensor compute graph with reverse-mode differentiation.

Tensors are ``numpy.float64`` arrays. A :class:`Graph` is built once for a
fixed set of input shapes; :func:`forward` evaluates every node and
:func:`backward` accumulates parameter gradients in reverse topological order.

Broadcasting is deliberately narrow: an elementwise operand may be a scalar
(shape ``()`` or ``(1,)``) or a row vector matching the last axis of the
other operand. Anything else is a shape error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

Shape = Tuple[int, ...]

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when node shapes are incompatible at build or bind time."""


@dataclass
class Parameter:
    """A named trainable tensor with a gradient buffer of the same shape."""

    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Shape:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


@dataclass
class Node:
    id: int
    kind: str  # input | parameter | constant | op
    op: Optional[str]
    inputs: Tuple[int, ...]
    shape: Shape
    name: Optional[str] = None
    attrs: Dict[str, Any] = field(default_factory=dict)
    param: Optional[Parameter] = None
    value: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------


class Op:
    """Base class for graph operations.

    ``forward`` returns ``(output, cache)``; ``backward`` receives the output
    gradient and returns one gradient (or ``None``) per input.
    """

    name = ""
    differentiable: Tuple[bool, ...] = ()

    def infer_shape(self, shapes: Sequence[Shape], attrs: dict) -> Shape:
        raise NotImplementedError

    def forward(self, xs: Sequence[np.ndarray], attrs: dict):
        raise NotImplementedError

    def backward(self, g, xs, out, cache, attrs) -> List[Optional[np.ndarray]]:
        raise NotImplementedError


OPS: Dict[str, Op] = {}


def register_op(cls):
    OPS[cls.name] = cls()
    return cls


def _is_scalar(shape: Shape) -> bool:
    return shape == () or shape == (1,)


def _broadcast_shape(a: Shape, b: Shape, opname: str) -> Shape:
    if a == b:
        return a
    if _is_scalar(b):
        return a
    if _is_scalar(a):
        return b
    if len(a) >= 2 and b == a[-1:]:
        return a
    if len(b) >= 2 and a == b[-1:]:
        return b
    raise ShapeError(f"{opname}: cannot broadcast shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: Shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if _is_scalar(shape):
        return np.full(shape, g.sum())
    return g.reshape(-1, shape[-1]).sum(axis=0)


class _Elementwise(Op):
    differentiable = (True, True)

    def infer_shape(self, shapes, attrs):
        return _broadcast_shape(shapes[0], shapes[1], self.name)


@register_op
class Add(_Elementwise):
    name = "add"

    def forward(self, xs, attrs):
        return xs[0] + xs[1], None

    def backward(self, g, xs, out, cache, attrs):
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


@register_op
class Sub(_Elementwise):
    name = "sub"

    def forward(self, xs, attrs):
        return xs[0] - xs[1], None

    def backward(self, g, xs, out, cache, attrs):
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]


@register_op
class Mul(_Elementwise):
    name = "mul"

    def forward(self, xs, attrs):
        return xs[0] * xs[1], None

    def backward(self, g, xs, out, cache, attrs):
        a, b = xs
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


@register_op
class MatMul(Op):
    """``a @ b`` with ``b`` either batched like ``a`` or a shared 2-D matrix."""

    name = "matmul"
    differentiable = (True, True)

    def infer_shape(self, shapes, attrs):
        a, b = shapes
        if len(a) < 2 or len(b) < 2:
            raise ShapeError(f"matmul: operands must be at least 2-D, got {a} and {b}")
        if a[-1] != b[-2]:
            raise ShapeError(f"matmul: inner dimensions differ, {a} @ {b}")
        if len(b) == 2:
            return a[:-1] + (b[-1],)
        if a[:-2] != b[:-2]:
            raise ShapeError(f"matmul: batch dimensions differ, {a} @ {b}")
        return a[:-1] + (b[-1],)

    def forward(self, xs, attrs):
        return np.matmul(xs[0], xs[1]), None

    def backward(self, g, xs, out, cache, attrs):
        a, b = xs
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return [ga, gb]


@register_op
class Transpose(Op):
    name = "transpose"
    differentiable = (True,)

    def infer_shape(self, shapes, attrs):
        axes = attrs["axes"]
        if sorted(axes) != list(range(len(shapes[0]))):
            raise ShapeError(f"transpose: bad axes {axes} for shape {shapes[0]}")
        return tuple(shapes[0][i] for i in axes)

    def forward(self, xs, attrs):
        return np.transpose(xs[0], attrs["axes"]), None

    def backward(self, g, xs, out, cache, attrs):
        return [np.transpose(g, np.argsort(attrs["axes"]))]


@register_op
class Concat(Op):
    name = "concat"

    def infer_shape(self, shapes, attrs):
        axis = attrs["axis"]
        first = shapes[0]
        for s in shapes[1:]:
            if len(s) != len(first) or any(
                s[i] != first[i] for i in range(len(first)) if i != axis
            ):
                raise ShapeError(f"concat: incompatible shapes {list(shapes)} on axis {axis}")
        total = sum(s[axis] for s in shapes)
        return first[:axis] + (total,) + first[axis + 1 :]

    def forward(self, xs, attrs):
        return np.concatenate(xs, axis=attrs["axis"]), None

    def backward(self, g, xs, out, cache, attrs):
        bounds = np.cumsum([x.shape[attrs["axis"]] for x in xs])[:-1]
        return list(np.split(g, bounds, axis=attrs["axis"]))


@register_op
class Reshape(Op):
    name = "reshape"
    differentiable = (True,)

    def infer_shape(self, shapes, attrs):
        new = tuple(attrs["shape"])
        if math.prod(new) != math.prod(shapes[0]):
            raise ShapeError(f"reshape: cannot reshape {shapes[0]} to {new}")
        return new

    def forward(self, xs, attrs):
        return xs[0].reshape(attrs["shape"]), None

    def backward(self, g, xs, out, cache, attrs):
        return [g.reshape(xs[0].shape)]


@register_op
class Slice(Op):
    name = "slice"
    differentiable = (True,)

    def infer_shape(self, shapes, attrs):
        s = shapes[0]
        axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
        if not 0 <= start < stop <= s[axis]:
            raise ShapeError(f"slice: range [{start}, {stop}) out of bounds for axis {axis} of {s}")
        return s[:axis] + (stop - start,) + s[axis + 1 :]

    def _index(self, ndim, attrs):
        idx = [slice(None)] * ndim
        idx[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
        return tuple(idx)

    def forward(self, xs, attrs):
        return xs[0][self._index(xs[0].ndim, attrs)].copy(), None

    def backward(self, g, xs, out, cache, attrs):
        gx = np.zeros_like(xs[0])
        gx[self._index(xs[0].ndim, attrs)] = g
        return [gx]


@register_op
class Gather(Op):
    """Row lookup ``table[indices]``; indices are a non-differentiable input.

    Rows listed in the ``frozen`` attribute read as zeros and receive no
    gradient (used for the padding embedding).
    """

    name = "gather"
    differentiable = (True, False)

    def infer_shape(self, shapes, attrs):
        table, idx = shapes
        if len(table) != 2:
            raise ShapeError(f"gather: table must be 2-D, got {table}")
        return idx + (table[1],)

    def forward(self, xs, attrs):
        table, idx = xs
        ids = np.asarray(idx).astype(np.int64)
        if not np.array_equal(ids, idx):
            raise ValueError("gather: indices must be integral")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise IndexError(
                f"gather: index out of range [0, {table.shape[0]}): "
                f"min {ids.min()}, max {ids.max()}"
            )
        out = table[ids]
        for row in attrs.get("frozen", ()):
            out[ids == row] = 0.0
        return out, ids

    def backward(self, g, xs, out, cache, attrs):
        gt = np.zeros_like(xs[0])
        np.add.at(gt, cache.reshape(-1), g.reshape(-1, xs[0].shape[1]))
        for row in attrs.get("frozen", ()):
            gt[row] = 0.0
        return [gt, None]


class _Unary(Op):
    differentiable = (True,)

    def infer_shape(self, shapes, attrs):
        return shapes[0]


@register_op
class Sigmoid(_Unary):
    name = "sigmoid"

    def forward(self, xs, attrs):
        x = xs[0]
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        e = np.exp(x[~pos])
        out[~pos] = e / (1.0 + e)
        return out, None

    def backward(self, g, xs, out, cache, attrs):
        return [g * out * (1.0 - out)]


@register_op
class Tanh(_Unary):
    name = "tanh"

    def forward(self, xs, attrs):
        return np.tanh(xs[0]), None

    def backward(self, g, xs, out, cache, attrs):
        return [g * (1.0 - out * out)]


@register_op
class Relu(_Unary):
    name = "relu"

    def forward(self, xs, attrs):
        return np.maximum(xs[0], 0.0), None

    def backward(self, g, xs, out, cache, attrs):
        return [g * (xs[0] > 0)]


@register_op
class Exp(_Unary):
    name = "exp"

    def forward(self, xs, attrs):
        return np.exp(xs[0]), None

    def backward(self, g, xs, out, cache, attrs):
        return [g * out]


@register_op
class Log(_Unary):
    name = "log"

    def forward(self, xs, attrs):
        return np.log(np.maximum(xs[0], LOG_FLOOR)), None

    def backward(self, g, xs, out, cache, attrs):
        x = xs[0]
        return [np.where(x > LOG_FLOOR, g / np.maximum(x, LOG_FLOOR), 0.0)]


@register_op
class Clip(_Unary):
    name = "clip"

    def forward(self, xs, attrs):
        return np.clip(xs[0], attrs["lo"], attrs["hi"]), None

    def backward(self, g, xs, out, cache, attrs):
        x = xs[0]
        return [g * ((x >= attrs["lo"]) & (x <= attrs["hi"]))]


@register_op
class Softmax(_Unary):
    name = "softmax"

    def forward(self, xs, attrs):
        x = xs[0]
        e = np.exp(x - x.max(axis=attrs["axis"], keepdims=True))
        return e / e.sum(axis=attrs["axis"], keepdims=True), None

    def backward(self, g, xs, out, cache, attrs):
        inner = (g * out).sum(axis=attrs["axis"], keepdims=True)
        return [out * (g - inner)]


class _Reduce(Op):
    differentiable = (True,)

    def infer_shape(self, shapes, attrs):
        s = shapes[0]
        axis = attrs["axis"]
        if axis is None:
            return ()
        if not 0 <= axis < len(s):
            raise ShapeError(f"{self.name}: axis {axis} out of range for {s}")
        return s[:axis] + s[axis + 1 :]


@register_op
class ReduceSum(_Reduce):
    name = "sum"

    def forward(self, xs, attrs):
        return np.asarray(xs[0].sum(axis=attrs["axis"])), None

    def backward(self, g, xs, out, cache, attrs):
        axis = attrs["axis"]
        g = g if axis is None else np.expand_dims(g, axis)
        return [np.broadcast_to(g, xs[0].shape).copy()]


@register_op
class ReduceMean(_Reduce):
    name = "mean"

    def forward(self, xs, attrs):
        return np.asarray(xs[0].mean(axis=attrs["axis"])), None

    def backward(self, g, xs, out, cache, attrs):
        axis = attrs["axis"]
        n = xs[0].size if axis is None else xs[0].shape[axis]
        g = g if axis is None else np.expand_dims(g, axis)
        return [np.broadcast_to(g / n, xs[0].shape).copy()]


@register_op
class ReduceMax(_Reduce):
    """Max along an axis; the gradient goes to the first maximal element."""

    name = "max"

    def forward(self, xs, attrs):
        x = xs[0]
        axis = attrs["axis"]
        if axis is None:
            arg = np.argmax(x)
            return np.asarray(x.reshape(-1)[arg]), arg
        arg = np.argmax(x, axis=axis)
        return np.take_along_axis(x, np.expand_dims(arg, axis), axis).squeeze(axis), arg

    def backward(self, g, xs, out, cache, attrs):
        x = xs[0]
        axis = attrs["axis"]
        gx = np.zeros_like(x)
        if axis is None:
            gx.reshape(-1)[cache] = g
        else:
            np.put_along_axis(gx, np.expand_dims(cache, axis), np.expand_dims(g, axis), axis)
        return [gx]


def _conv_windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # [B, H', W', C, kh, kw]
    return np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))


@register_op
class Conv2d(Op):
    """Valid, stride-1 convolution on channels-last input.

    Inputs: ``x`` [B, H, W, Cin], ``w`` [kh, kw, Cin, Cout], ``b`` [Cout].
    """

    name = "conv2d"
    differentiable = (True, True, True)

    def infer_shape(self, shapes, attrs):
        x, w, b = shapes
        if len(x) != 4 or len(w) != 4:
            raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x} and {w}")
        if x[3] != w[2] or b != (w[3],):
            raise ShapeError(f"conv2d: channel mismatch, input {x}, kernel {w}, bias {b}")
        if w[0] > x[1] or w[1] > x[2]:
            raise ShapeError(f"conv2d: kernel {w[:2]} larger than input {x[1:3]}")
        return (x[0], x[1] - w[0] + 1, x[2] - w[1] + 1, w[3])

    def forward(self, xs, attrs):
        x, w, b = xs
        win = _conv_windows(x, w.shape[0], w.shape[1])
        return np.einsum("bhwcij,ijco->bhwo", win, w, optimize=True) + b, None

    def backward(self, g, xs, out, cache, attrs):
        x, w, b = xs
        kh, kw = w.shape[:2]
        win = _conv_windows(x, kh, kw)
        gw = np.einsum("bhwcij,bhwo->ijco", win, g, optimize=True)
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        gx = np.zeros_like(x)
        oh, ow = g.shape[1], g.shape[2]
        for i in range(kh):
            for j in range(kw):
                gx[:, i : i + oh, j : j + ow, :] += g @ w[i, j].T
        return [gx, gw, gb]


def pool_bounds(n: int, p: int) -> List[Tuple[int, int]]:
    """Dynamic pooling partition of ``n`` positions into ``p`` cells."""
    return [((a * n) // p, ((a + 1) * n) // p) for a in range(p)]


class _WindowMax(Op):
    """Max over rectangular windows of axes 1, 2 of a [B, H, W, C] tensor."""

    differentiable = (True,)

    def windows(self, shape, attrs):
        raise NotImplementedError

    def forward(self, xs, attrs):
        x = xs[0]
        rows, cols = self.windows(x.shape, attrs)
        out = np.empty((x.shape[0], len(rows), len(cols), x.shape[3]))
        args = {}
        for a, (r0, r1) in enumerate(rows):
            for c, (c0, c1) in enumerate(cols):
                block = x[:, r0:r1, c0:c1, :]
                flat = block.reshape(x.shape[0], -1, x.shape[3])
                arg = np.argmax(flat, axis=1)  # first occurrence, row-major
                out[:, a, c, :] = np.take_along_axis(flat, arg[:, None, :], 1)[:, 0, :]
                args[a, c] = arg
        return out, args

    def backward(self, g, xs, out, cache, attrs):
        x = xs[0]
        rows, cols = self.windows(x.shape, attrs)
        gx = np.zeros_like(x)
        bidx = np.arange(x.shape[0])[:, None]
        cidx = np.arange(x.shape[3])[None, :]
        for a, (r0, r1) in enumerate(rows):
            for c, (c0, c1) in enumerate(cols):
                arg = cache[a, c]
                width = c1 - c0
                gx[bidx, r0 + arg // width, c0 + arg % width, cidx] += g[:, a, c, :]
        return [gx]


@register_op
class MaxPool2d(_WindowMax):
    """Non-overlapping max pooling with window == stride; remainders dropped."""

    name = "maxpool2d"

    def infer_shape(self, shapes, attrs):
        x = shapes[0]
        ph, pw = attrs["size"]
        if len(x) != 4 or ph > x[1] or pw > x[2]:
            raise ShapeError(f"maxpool2d: window {attrs['size']} does not fit input {x}")
        return (x[0], x[1] // ph, x[2] // pw, x[3])

    def windows(self, shape, attrs):
        ph, pw = attrs["size"]
        rows = [(i * ph, (i + 1) * ph) for i in range(shape[1] // ph)]
        cols = [(j * pw, (j + 1) * pw) for j in range(shape[2] // pw)]
        return rows, cols


@register_op
class GridPool(_WindowMax):
    """Dynamic max pooling onto a fixed ``p1 x p2`` grid."""

    name = "grid_pool"

    def infer_shape(self, shapes, attrs):
        x = shapes[0]
        p1, p2 = attrs["grid"]
        if len(x) != 4:
            raise ShapeError(f"grid_pool: expected [B, n1, n2, C], got {x}")
        if not (1 <= p1 <= x[1] and 1 <= p2 <= x[2]):
            raise ShapeError(f"grid_pool: grid {p1}x{p2} exceeds input {x[1]}x{x[2]}")
        return (x[0], p1, p2, x[3])

    def windows(self, shape, attrs):
        p1, p2 = attrs["grid"]
        return pool_bounds(shape[1], p1), pool_bounds(shape[2], p2)


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


class Graph:
    """Append-only DAG of tensor operations.

    Builder methods return integer node ids. Predecessors always precede
    their consumers, so node order is a topological order.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.inputs: Dict[str, int] = {}
        self.params: Dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def shape(self, nid: int) -> Shape:
        return self.nodes[nid].shape

    def _append(self, **kw) -> int:
        node = Node(id=len(self.nodes), **kw)
        self.nodes.append(node)
        return node.id

    # leaves ---------------------------------------------------------------

    def input(self, name: str, shape: Sequence[int]) -> int:
        if name in self.inputs:
            raise ValueError(f"duplicate input name {name!r}")
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ShapeError(f"input {name!r}: dimensions must be positive, got {shape}")
        nid = self._append(kind="input", op=None, inputs=(), shape=shape, name=name)
        self.inputs[name] = nid
        return nid

    def parameter(self, param: Parameter) -> int:
        if param.name in self.params:
            existing = self.nodes[self.params[param.name]].param
            if existing is not param:
                raise ValueError(f"two distinct parameters named {param.name!r}")
            return self.params[param.name]
        nid = self._append(
            kind="parameter", op=None, inputs=(), shape=param.shape, name=param.name, param=param
        )
        self.params[param.name] = nid
        return nid

    def constant(self, value) -> int:
        value = np.asarray(value, dtype=np.float64)
        return self._append(kind="constant", op=None, inputs=(), shape=value.shape, value=value)

    # ops ------------------------------------------------------------------

    def apply(self, opname: str, *inputs: int, **attrs) -> int:
        op = OPS[opname]
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{opname}: unknown node id {i}")
        try:
            shape = tuple(op.infer_shape([self.nodes[i].shape for i in inputs], attrs))
        except ShapeError as exc:
            raise ShapeError(f"node {len(self.nodes)} ({opname}): {exc}") from None
        return self._append(kind="op", op=opname, inputs=tuple(inputs), shape=shape, attrs=attrs)

    def add(self, a, b):
        return self.apply("add", a, b)

    def sub(self, a, b):
        return self.apply("sub", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def scale(self, a, c: float):
        return self.mul(a, self.constant(float(c)))

    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def transpose(self, a, axes):
        return self.apply("transpose", a, axes=tuple(axes))

    def concat(self, nodes: Sequence[int], axis: int):
        return self.apply("concat", *nodes, axis=axis)

    def reshape(self, a, shape):
        return self.apply("reshape", a, shape=tuple(int(s) for s in shape))

    def slice(self, a, axis: int, start: int, stop: int):
        return self.apply("slice", a, axis=axis, start=start, stop=stop)

    def gather(self, table, indices, frozen: Sequence[int] = ()):
        return self.apply("gather", table, indices, frozen=tuple(frozen))

    def sigmoid(self, a):
        return self.apply("sigmoid", a)

    def tanh(self, a):
        return self.apply("tanh", a)

    def relu(self, a):
        return self.apply("relu", a)

    def exp(self, a):
        return self.apply("exp", a)

    def log(self, a):
        return self.apply("log", a)

    def clip(self, a, lo: float, hi: float):
        return self.apply("clip", a, lo=lo, hi=hi)

    def softmax(self, a, axis: int = -1):
        return self.apply("softmax", a, axis=axis % len(self.shape(a)))

    def sum(self, a, axis: Optional[int] = None):
        return self.apply("sum", a, axis=axis)

    def mean(self, a, axis: Optional[int] = None):
        return self.apply("mean", a, axis=axis)

    def max(self, a, axis: Optional[int] = None):
        return self.apply("max", a, axis=axis)

    def conv2d(self, x, w, b):
        return self.apply("conv2d", x, w, b)

    def maxpool2d(self, x, size):
        return self.apply("maxpool2d", x, size=tuple(size))

    def grid_pool(self, x, grid):
        return self.apply("grid_pool", x, grid=tuple(grid))

    def parameters(self) -> List[Parameter]:
        return [self.nodes[i].param for i in self.params.values()]


class Values(dict):
    """Node id -> tensor mapping produced by :func:`forward`, plus op caches."""

    def __init__(self):
        super().__init__()
        self.cache: Dict[int, Any] = {}


def forward(graph: Graph, bindings: Mapping[str, Any]) -> Values:
    """Evaluate every node of ``graph``."""
    missing = set(graph.inputs) - set(bindings)
    if missing:
        raise KeyError(f"missing bindings for inputs {sorted(missing)}")
    vals = Values()
    for node in graph.nodes:
        if node.kind == "input":
            v = np.asarray(bindings[node.name], dtype=np.float64)
            if v.shape != node.shape:
                raise ShapeError(
                    f"input {node.name!r} (node {node.id}): expected shape {node.shape}, got {v.shape}"
                )
            vals[node.id] = v
        elif node.kind == "parameter":
            if node.param.value.shape != node.shape:
                raise ShapeError(
                    f"parameter {node.name!r} changed shape: {node.shape} -> {node.param.value.shape}"
                )
            vals[node.id] = node.param.value
        elif node.kind == "constant":
            vals[node.id] = node.value
        else:
            out, cache = OPS[node.op].forward([vals[i] for i in node.inputs], node.attrs)
            vals[node.id] = np.asarray(out, dtype=np.float64)
            if cache is not None:
                vals.cache[node.id] = cache
    return vals


def backward(
    graph: Graph, loss: int, values: Values, wrt: Sequence[int] = ()
) -> Dict[str, np.ndarray]:
    """Gradient of the scalar node ``loss`` with respect to every parameter.

    Parameter ``grad`` buffers are overwritten with the result. Gradients of
    extra nodes listed in ``wrt`` are returned under the key ``"#<id>"``.
    """
    if graph.shape(loss) not in ((), (1,)):
        raise ShapeError(f"loss node {loss} must be scalar, has shape {graph.shape(loss)}")
    grads: Dict[int, np.ndarray] = {loss: np.ones(graph.shape(loss))}
    for node in reversed(graph.nodes[: loss + 1]):
        if node.kind != "op":
            continue
        g = grads.get(node.id)
        if g is None:
            continue
        op = OPS[node.op]
        xs = [values[i] for i in node.inputs]
        gins = op.backward(g, xs, values[node.id], values.cache.get(node.id), node.attrs)
        for i, gi in zip(node.inputs, gins):
            if gi is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    out: Dict[str, np.ndarray] = {}
    for name, nid in graph.params.items():
        param = graph.nodes[nid].param
        g = grads.get(nid)
        g = np.zeros_like(param.value) if g is None else np.asarray(g, dtype=np.float64).reshape(param.shape)
        param.grad = g
        out[name] = g
    for nid in wrt:
        g = grads.get(nid)
        out[f"#{nid}"] = np.zeros(graph.shape(nid)) if g is None else g
    return out


# ---------------------------------------------------------------------------
# verification helpers
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def rel_error(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(
    graph: Graph,
    loss: int,
    bindings: Mapping[str, Any],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    analytic: Optional[Dict[str, np.ndarray]] = None,
    params: Optional[Sequence[str]] = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``analytic`` may be supplied to check externally computed gradients
    (useful for sanity inversions); otherwise :func:`backward` is used.
    """
    if analytic is None:
        analytic = backward(graph, loss, forward(graph, bindings))
    names = list(graph.params) if params is None else list(params)
    report = {}
    for name in names:
        param = graph.nodes[graph.params[name]].param
        flat = param.value.reshape(-1)
        numeric = np.empty(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = float(np.sum(forward(graph, bindings)[loss]))
            flat[k] = orig - step
            fm = float(np.sum(forward(graph, bindings)[loss]))
            flat[k] = orig
            numeric[k] = (fp - fm) / (2 * step)
        err = rel_error(np.asarray(analytic[name]).reshape(-1), numeric)
        report[name] = float(err.max()) if err.size else 0.0
    return GradCheckReport(report, tolerance)


def near_kink(graph: Graph, values: Values, margin: float = 1e-3) -> bool:
    """True if any relu input or max/pool winner lies within ``margin`` of a kink.

    Windows whose maximum is exactly zero are ignored: they arise from relu's
    flat region, where every candidate has zero gradient anyway.
    """
    for node in graph.nodes:
        if node.kind != "op":
            continue
        if node.op == "relu":
            if np.any(np.abs(values[node.inputs[0]]) < margin):
                return True
        elif node.op == "max":
            x = values[node.inputs[0]]
            axis = node.attrs["axis"]
            flat = x.reshape(1, -1) if axis is None else np.moveaxis(x, axis, -1).reshape(-1, x.shape[axis])
            if _tied(flat, margin):
                return True
        elif node.op in ("maxpool2d", "grid_pool"):
            x = values[node.inputs[0]]
            rows, cols = OPS[node.op].windows(x.shape, node.attrs)
            for r0, r1 in rows:
                for c0, c1 in cols:
                    block = x[:, r0:r1, c0:c1, :]
                    flat = np.moveaxis(block, 3, 1).reshape(x.shape[0] * x.shape[3], -1)
                    if _tied(flat, margin):
                        return True
    return False


def _tied(rows: np.ndarray, margin: float) -> bool:
    if rows.shape[1] < 2:
        return False
    top2 = -np.sort(-rows, axis=1)[:, :2]
    gap = top2[:, 0] - top2[:, 1]
    return bool(np.any((gap < margin) & (top2[:, 0] != 0.0)))
