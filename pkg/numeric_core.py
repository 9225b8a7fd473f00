"""
Dense float64 tensors with reverse-mode automatic differentiation.

Operations are recorded on the active ``Graph`` (entered with ``with Graph()``)
whenever one of their inputs requires a gradient. Outside a graph every
operation is a plain numpy evaluation, which is how evaluation passes run.

Usage:
    with Graph() as graph:
        y = reduce_sum(x * x)
    grads = backward(graph, y)
    grads[x]  # Tensor holding 2x
"""

import logging
import threading
import zlib

import numpy as np

from errors import ContractError, DimensionError, DomainError

logger = logging.getLogger(__name__)

# exp(-745) underflows to zero in float64; log values are never reported below it
LOG_FLOOR = -745.0


class Tensor:
    """n-dimensional float64 array that may take part in a computation graph"""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """Constant view of the same buffer"""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_slice(self, index)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# =============================================================================
# Graph recording
# =============================================================================

class Node:
    __slots__ = ("kind", "inputs", "output", "cache", "attrs")

    def __init__(self, kind, inputs, output, cache, attrs):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.cache = cache
        self.attrs = attrs


_local = threading.local()


def _graph_stack():
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = []
        _local.graphs = stack
    return stack


def current_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Topologically ordered record of the operations of one forward pass.

    A graph is confined to the thread that entered it; nodes are appended in
    execution order, so every node's inputs precede it.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


# =============================================================================
# Operation kinds: each entry is (forward, backward)
#   forward(xs, **attrs) -> (out, cache)
#   backward(g, xs, out, cache, **attrs) -> list of input gradients
# =============================================================================

def _broadcast_shape(a, b, kind):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _add_fwd(xs):
    a, b = xs
    _broadcast_shape(a, b, "add")
    return a + b, None


def _add_bwd(g, xs, out, cache):
    a, b = xs
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _sub_fwd(xs):
    a, b = xs
    _broadcast_shape(a, b, "sub")
    return a - b, None


def _sub_bwd(g, xs, out, cache):
    a, b = xs
    return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]


def _mul_fwd(xs):
    a, b = xs
    _broadcast_shape(a, b, "mul")
    return a * b, None


def _mul_bwd(g, xs, out, cache):
    a, b = xs
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _matmul_fwd(xs, trans_b=False):
    a, b = xs
    if a.ndim not in (1, 2) or b.ndim != 2:
        raise DimensionError(f"matmul: unsupported ranks for shapes {a.shape} and {b.shape}")
    bm = b.T if trans_b else b
    if a.shape[-1] != bm.shape[0]:
        shown_b = f"{b.shape}{'ᵀ' if trans_b else ''}"
        raise DimensionError(f"matmul: shapes {a.shape} and {shown_b} do not contract")
    return a @ bm, None


def _matmul_bwd(g, xs, out, cache, trans_b=False):
    a, b = xs
    bm = b.T if trans_b else b
    a2 = a.reshape(1, -1) if a.ndim == 1 else a
    g2 = g.reshape(1, -1) if g.ndim == 1 else g
    ga = (g2 @ bm.T).reshape(a.shape)
    gbm = a2.T @ g2
    return [ga, gbm.T if trans_b else gbm]


def _sigmoid_fwd(xs):
    (x,) = xs
    return np.exp(-np.logaddexp(0.0, -x)), None


def _sigmoid_bwd(g, xs, out, cache):
    return [g * out * (1.0 - out)]


def _tanh_fwd(xs):
    (x,) = xs
    return np.tanh(x), None


def _tanh_bwd(g, xs, out, cache):
    return [g * (1.0 - out * out)]


def _exp_fwd(xs):
    (x,) = xs
    with np.errstate(over="ignore"):
        out = np.exp(x)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: argument overflows float64 (max ≈ 709.78)")
    return out, None


def _exp_bwd(g, xs, out, cache):
    return [g * out]


def _log_fwd(xs):
    (x,) = xs
    if np.any(x <= 0):
        raise DomainError(f"log: non-positive input (min {x.min()!r})")
    return np.log(x), None


def _log_bwd(g, xs, out, cache):
    (x,) = xs
    return [g / x]


def _log_clamped_fwd(xs, floor=LOG_FLOOR):
    (x,) = xs
    positive = x > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.log(np.where(positive, x, 1.0))
    live = positive & (raw >= floor)
    return np.where(live, raw, floor), live


def _log_clamped_bwd(g, xs, out, live, floor=LOG_FLOOR):
    (x,) = xs
    safe = np.where(live, x, 1.0)
    return [np.where(live, g / safe, 0.0)]


def _softmax_fwd(xs):
    (x,) = xs
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, xs, out, cache):
    return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


def _log_softmax_fwd(xs):
    (x,) = xs
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)), None


def _log_softmax_bwd(g, xs, out, cache):
    return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]


def _concat_fwd(xs, axis=-1):
    shapes = [x.shape for x in xs]
    ndim = xs[0].ndim
    ax = axis % ndim
    for shape in shapes[1:]:
        if len(shape) != ndim or any(s != r for i, (s, r) in enumerate(zip(shape, shapes[0])) if i != ax):
            raise DimensionError(f"concat: shapes {shapes[0]} and {shape} differ off axis {axis}")
    return np.concatenate(xs, axis=ax), [x.shape[ax] for x in xs]


def _concat_bwd(g, xs, out, sizes, axis=-1):
    ax = axis % g.ndim
    cuts = np.cumsum(sizes)[:-1]
    return list(np.split(g, cuts, axis=ax))


def argmax_over_axis(x, axis, mask=None):
    """Index of the maximum along ``axis``; masked-out positions never win.

    Ties resolve to the lowest index.
    """
    if mask is not None:
        x = np.where(np.broadcast_to(mask, x.shape) > 0, x, -np.inf)
    return np.argmax(x, axis=axis)


def _max_fwd(xs, axis=0, mask=None):
    (x,) = xs
    if mask is not None:
        try:
            np.broadcast_to(mask, x.shape)
        except ValueError:
            raise DimensionError(f"max: mask shape {np.shape(mask)} does not fit {x.shape}") from None
    idx = np.expand_dims(argmax_over_axis(x, axis, mask), axis)
    return np.take_along_axis(x, idx, axis=axis).squeeze(axis), idx


def _max_bwd(g, xs, out, idx, axis=0, mask=None):
    (x,) = xs
    gx = np.zeros_like(x)
    np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
    return [gx]


def _l2_norm_fwd(xs):
    (x,) = xs
    return np.sqrt(np.sum(x * x)), None


def _l2_norm_bwd(g, xs, out, cache):
    (x,) = xs
    if out == 0.0:
        return [np.zeros_like(x)]
    return [g * x / out]


def _scale_fwd(xs, factor=1.0):
    (x,) = xs
    return x * factor, None


def _scale_bwd(g, xs, out, cache, factor=1.0):
    return [g * factor]


def _dropout_fwd(xs, mask=None):
    (x,) = xs
    if mask.shape != x.shape:
        raise DimensionError(f"dropout: mask shape {mask.shape} differs from input {x.shape}")
    return x * mask, None


def _dropout_bwd(g, xs, out, cache, mask=None):
    return [g * mask]


def _slice_fwd(xs, index=()):
    (x,) = xs
    return np.array(x[index]), None


def _slice_bwd(g, xs, out, cache, index=()):
    (x,) = xs
    gx = np.zeros_like(x)
    gx[index] += g
    return [gx]


def _stack_fwd(xs, axis=0):
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        a, b = sorted(shapes)[:2]
        raise DimensionError(f"stack: shapes {a} and {b} differ")
    return np.stack(xs, axis=axis), None


def _stack_bwd(g, xs, out, cache, axis=0):
    return [np.take(g, i, axis=axis) for i in range(len(xs))]


def _sum_fwd(xs, axis=None):
    (x,) = xs
    return np.sum(x, axis=axis), None


def _sum_bwd(g, xs, out, cache, axis=None):
    (x,) = xs
    if axis is not None:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape).copy()]


def _gather_fwd(xs, indices=None):
    (table,) = xs
    if table.ndim != 2:
        raise DimensionError(f"gather: table must be 2-D, got {table.shape}")
    return table[indices], None


def _gather_bwd(g, xs, out, cache, indices=None):
    (table,) = xs
    gt = np.zeros_like(table)
    np.add.at(gt, indices, g)
    return [gt]


_OPS = {
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "tanh": (_tanh_fwd, _tanh_bwd),
    "exp": (_exp_fwd, _exp_bwd),
    "log": (_log_fwd, _log_bwd),
    "log_clamped": (_log_clamped_fwd, _log_clamped_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "log_softmax": (_log_softmax_fwd, _log_softmax_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "max": (_max_fwd, _max_bwd),
    "l2_norm": (_l2_norm_fwd, _l2_norm_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "dropout": (_dropout_fwd, _dropout_bwd),
    "slice": (_slice_fwd, _slice_bwd),
    "stack": (_stack_fwd, _stack_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "gather": (_gather_fwd, _gather_bwd),
}

OPERATION_KINDS = tuple(sorted(_OPS))


def forward_op(kind, inputs, **attrs):
    """Evaluate operation ``kind`` and record it on the active graph"""
    try:
        fwd, _ = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown operation kind '{kind}'") from None
    inputs = tuple(as_tensor(t) for t in inputs)
    out_data, cache = fwd([t.data for t in inputs], **attrs)
    graph = current_graph()
    tracked = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        graph.nodes.append(Node(kind, inputs, out, cache, attrs))
    return out


# Convenience wrappers

def add(a, b):
    return forward_op("add", [a, b])


def sub(a, b):
    return forward_op("sub", [a, b])


def mul(a, b):
    return forward_op("mul", [a, b])


def matmul(a, b, trans_b=False):
    return forward_op("matmul", [a, b], trans_b=trans_b)


def sigmoid(x):
    return forward_op("sigmoid", [x])


def tanh(x):
    return forward_op("tanh", [x])


def exp(x):
    return forward_op("exp", [x])


def log(x):
    return forward_op("log", [x])


def log_clamped(x, floor=LOG_FLOOR):
    """log(x) with non-positive or underflowing inputs pinned to ``floor``"""
    return forward_op("log_clamped", [x], floor=floor)


def softmax(x):
    return forward_op("softmax", [x])


def log_softmax(x):
    return forward_op("log_softmax", [x])


def concat(tensors, axis=-1):
    return forward_op("concat", tensors, axis=axis)


def max_over_axis(x, axis=0, mask=None):
    """Coordinatewise maximum along ``axis`` plus the winning indices"""
    x = as_tensor(x)
    out = forward_op("max", [x], axis=axis, mask=mask)
    return out, argmax_over_axis(x.data, axis, mask)


def l2_norm(x):
    return forward_op("l2_norm", [x])


def scale(x, factor):
    return forward_op("scale", [x], factor=float(factor))


def apply_dropout(x, mask):
    return forward_op("dropout", [x], mask=np.asarray(mask, dtype=np.float64))


def take_slice(x, index):
    return forward_op("slice", [x], index=index)


def stack(tensors, axis=0):
    return forward_op("stack", tensors, axis=axis)


def reduce_sum(x, axis=None):
    return forward_op("sum", [x], axis=axis)


def reduce_mean(x, axis=None):
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis=axis), 1.0 / count)


def gather_rows(table, indices):
    return forward_op("gather", [table], indices=np.asarray(indices, dtype=np.int64))


# =============================================================================
# Reverse pass
# =============================================================================

class GradientMap:
    """Gradients of one backward pass, looked up by tensor.

    Tensors the root does not depend on report zero gradients.
    """

    def __init__(self, grads, tensors):
        self._grads = grads
        self._tensors = tensors

    def array(self, tensor):
        grad = self._grads.get(id(tensor))
        if grad is None or self._tensors.get(id(tensor)) is not tensor:
            return np.zeros(tensor.shape)
        return grad

    def __getitem__(self, tensor):
        return Tensor(self.array(tensor))

    def __contains__(self, tensor):
        return self._tensors.get(id(tensor)) is tensor and id(tensor) in self._grads


def backward(graph, root):
    """Gradient of scalar ``root`` with respect to every tensor in ``graph``"""
    root = as_tensor(root)
    if root.ndim != 0:
        raise ContractError(f"backward: root must be scalar-shaped, got shape {root.shape}")
    grads = {id(root): np.ones(())}
    tensors = {id(root): root}
    for node in reversed(graph.nodes):
        for t in node.inputs:
            tensors[id(t)] = t
        tensors[id(node.output)] = node.output
        g = grads.get(id(node.output))
        if g is None:
            continue
        _, bwd = _OPS[node.kind]
        input_grads = bwd(g, [t.data for t in node.inputs], node.output.data, node.cache, **node.attrs)
        for t, gi in zip(node.inputs, input_grads):
            if not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
    return GradientMap(grads, tensors)


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference estimate of d f / d x.

    ``x`` is perturbed in place (and restored), so ``f`` may either take the
    tensor as its argument or close over a parameter that is ``x``.
    """
    if h <= 0:
        raise ContractError(f"finite difference step must be positive, got {h}")
    data = x.data
    grad = np.zeros_like(data)
    for i in np.ndindex(data.shape):
        original = data[i]
        try:
            data[i] = original + h
            f_plus = _scalar_value(f(x))
            data[i] = original - h
            f_minus = _scalar_value(f(x))
        finally:
            data[i] = original
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(grad)


def _scalar_value(value):
    value = float(value.data) if isinstance(value, Tensor) else float(value)
    if not np.isfinite(value):
        raise DomainError(f"finite difference: function evaluated to {value}")
    return value


# =============================================================================
# Randomness
# =============================================================================

def make_rng(seed, *names):
    """Generator for the named sub-stream of a root seed"""
    keys = [int(seed)] + [zlib.crc32(str(name).encode("utf-8")) for name in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))


class RngStreams:
    """Named, independently seeded generators derived from one root seed"""

    def __init__(self, seed):
        self.seed = int(seed)
        self._streams = {}

    def get(self, name):
        rng = self._streams.get(name)
        if rng is None:
            rng = make_rng(self.seed, name)
            self._streams[name] = rng
        return rng

    def __getitem__(self, name):
        return self.get(name)

    def state(self):
        return {name: rng.bit_generator.state for name, rng in sorted(self._streams.items())}

    def restore(self, state):
        for name, bit_state in state.items():
            self.get(name).bit_generator.state = bit_state


def sample_gaussian(shape, rng):
    """i.i.d. standard-normal tensor"""
    return Tensor(rng.standard_normal(tuple(int(s) for s in shape)))


def dropout_mask(shape, p, rng):
    """Inverted-dropout mask: kept entries are 1/(1-p), dropped entries 0"""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)
