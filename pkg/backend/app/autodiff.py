"""
Reverse-mode automatic differentiation over numpy arrays.

Every backward rule is written with the same primitive ops as the forward
pass, so a gradient requested with ``create_graph=True`` is itself a node that
can be differentiated again (double backpropagation).
"""
import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64

# Dense float64 array; the value carrier of every node.
Tensor = np.ndarray


class AutodiffError(ValueError):
    """Base class for errors raised by the differentiation engine."""


class ShapeError(AutodiffError):
    pass


class DomainError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def _recording(flag: bool):
    previous = is_recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = previous


def no_grad():
    """Evaluate ops without recording parents (results are constants)."""
    return _recording(False)


def enable_grad():
    return _recording(True)


def tensor(data) -> Tensor:
    return np.array(data, dtype=DTYPE)


class Node:
    """A value in a recorded computation plus the op and parents that produced it."""

    __slots__ = ("value", "op", "parents", "requires_grad", "attrs")

    def __init__(self, value, op: str = "leaf", parents: Tuple["Node", ...] = (),
                 requires_grad: bool = False, attrs: Optional[dict] = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self.attrs = attrs or {}

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Node":
        return transpose(self)

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def detach(self) -> "Node":
        return Node(self.value)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return negate(self)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


NodeLike = Union[Node, np.ndarray, float, int]


def leaf(value, requires_grad: bool = True) -> Node:
    return Node(np.array(value, dtype=DTYPE), requires_grad=requires_grad)


def constant(value) -> Node:
    return Node(value)


def as_node(value: NodeLike) -> Node:
    return value if isinstance(value, Node) else Node(value)


@dataclass(frozen=True)
class _OpDef:
    arity: int
    forward: Callable[..., np.ndarray]
    backward: Callable[..., Tuple[Optional[Node], ...]]


_OPS: Dict[str, _OpDef] = {}


def _shapes(values: Sequence[np.ndarray]) -> List[Tuple[int, ...]]:
    return [tuple(v.shape) for v in values]


def forward_op(op_tag: str, inputs: Sequence[NodeLike], **attrs) -> Node:
    """
    Apply a registered op to its inputs and record it for differentiation.

    Args:
        op_tag: Name of the op (see ``OP_TAGS``)
        inputs: Input nodes or raw values (raw values become constants)
        **attrs: Op attributes such as ``axis`` or ``factor``

    Returns:
        The output node; it records its parents only when recording is on and
        some input requires a gradient.
    """
    spec = _OPS.get(op_tag)
    if spec is None:
        raise AutodiffError(f"Unknown op '{op_tag}'")
    nodes = tuple(as_node(x) for x in inputs)
    if len(nodes) != spec.arity:
        raise AutodiffError(f"Op '{op_tag}' takes {spec.arity} inputs, got {len(nodes)}")
    values = [n.value for n in nodes]
    with np.errstate(all="ignore"):
        value = np.asarray(spec.forward(op_tag, *values, **attrs), dtype=DTYPE)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(
            f"Op '{op_tag}' produced non-finite values for input shapes {_shapes(values)}"
        )
    if is_recording() and any(n.requires_grad for n in nodes):
        return Node(value, op=op_tag, parents=nodes, requires_grad=True, attrs=attrs)
    return Node(value, op=op_tag)


def _register(op_tag: str, arity: int, forward, backward) -> None:
    _OPS[op_tag] = _OpDef(arity=arity, forward=forward, backward=backward)


def _broadcast_shape(op_tag: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"Op '{op_tag}': shapes {a.shape} and {b.shape} do not broadcast")


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def _keepdims_shape(shape: Tuple[int, ...], axis) -> Tuple[int, ...]:
    axes = _normalize_axes(axis, len(shape))
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def _unbroadcast(g: Node, shape: Tuple[int, ...]) -> Node:
    if g.shape == tuple(shape):
        return g
    return sum_to(g, shape)


def _expand(g: Node, input_shape: Tuple[int, ...], axis, keepdims: bool) -> Node:
    """Bring a reduced gradient back to the shape of the reduction's input."""
    if not keepdims:
        g = reshape(g, _keepdims_shape(input_shape, axis))
    return broadcast_to(g, input_shape)


# -- elementwise binary -----------------------------------------------------

def _fwd_add(tag, a, b):
    _broadcast_shape(tag, a, b)
    return a + b


def _bwd_add(out, g, a, b):
    return (
        _unbroadcast(g, a.shape) if a.requires_grad else None,
        _unbroadcast(g, b.shape) if b.requires_grad else None,
    )


def _fwd_sub(tag, a, b):
    _broadcast_shape(tag, a, b)
    return a - b


def _bwd_sub(out, g, a, b):
    return (
        _unbroadcast(g, a.shape) if a.requires_grad else None,
        _unbroadcast(negate(g), b.shape) if b.requires_grad else None,
    )


def _fwd_mul(tag, a, b):
    _broadcast_shape(tag, a, b)
    return a * b


def _bwd_mul(out, g, a, b):
    return (
        _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None,
        _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None,
    )


def _fwd_div(tag, a, b):
    _broadcast_shape(tag, a, b)
    if np.any(b == 0):
        raise DomainError(f"Op '{tag}': division by zero (shapes {a.shape} / {b.shape})")
    return a / b


def _bwd_div(out, g, a, b):
    ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
    gb = _unbroadcast(negate(div(mul(g, out), b)), b.shape) if b.requires_grad else None
    return ga, gb


# -- unary ------------------------------------------------------------------

def _fwd_negate(tag, a):
    return -a


def _bwd_negate(out, g, a):
    return (negate(g),)


def _fwd_scale(tag, a, factor):
    return a * float(factor)


def _bwd_scale(out, g, a, factor):
    return (scale(g, factor),)


def _fwd_relu(tag, a):
    return np.where(a > 0, a, 0.0)


def _bwd_relu(out, g, a):
    # subgradient at exactly 0 is 0
    return (mul(g, constant((a.value > 0).astype(DTYPE))),)


def _fwd_tanh(tag, a):
    return np.tanh(a)


def _bwd_tanh(out, g, a):
    return (mul(g, sub(1.0, mul(out, out))),)


def _fwd_exp(tag, a):
    return np.exp(a)


def _bwd_exp(out, g, a):
    return (mul(g, out),)


def _fwd_log(tag, a):
    if np.any(a <= 0):
        raise DomainError(f"Op '{tag}': non-positive input (shape {a.shape})")
    return np.log(a)


def _bwd_log(out, g, a):
    return (div(g, a),)


def _fwd_sqrt(tag, a):
    if np.any(a < 0):
        raise DomainError(f"Op '{tag}': negative input (shape {a.shape})")
    return np.sqrt(a)


def _bwd_sqrt(out, g, a):
    return (div(scale(g, 0.5), out),)


# -- linear algebra and shape -----------------------------------------------

def _fwd_matmul(tag, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"Op '{tag}': cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def _bwd_matmul(out, g, a, b):
    return (
        matmul(g, transpose(b)) if a.requires_grad else None,
        matmul(transpose(a), g) if b.requires_grad else None,
    )


def _fwd_transpose(tag, a):
    if a.ndim != 2:
        raise ShapeError(f"Op '{tag}': expects a 2-D input, got shape {a.shape}")
    return a.T


def _bwd_transpose(out, g, a):
    return (transpose(g),)


def _fwd_reshape(tag, a, shape):
    try:
        return a.reshape(shape)
    except ValueError:
        raise ShapeError(f"Op '{tag}': cannot reshape {a.shape} to {tuple(shape)}")


def _bwd_reshape(out, g, a, shape):
    return (reshape(g, a.shape),)


def _fwd_broadcast_to(tag, a, shape):
    try:
        return np.broadcast_to(a, shape).copy()
    except ValueError:
        raise ShapeError(f"Op '{tag}': cannot broadcast {a.shape} to {tuple(shape)}")


def _bwd_broadcast_to(out, g, a, shape):
    return (sum_to(g, a.shape),)


def _fwd_sum_to(tag, a, shape):
    shape = tuple(shape)
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"Op '{tag}': cannot reduce {a.shape} to {shape}")
    result = a.sum(axis=tuple(range(lead))) if lead else a
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and result.shape[i] != 1)
    if axes:
        result = result.sum(axis=axes, keepdims=True)
    if result.shape != shape:
        raise ShapeError(f"Op '{tag}': cannot reduce {a.shape} to {shape}")
    return result


def _bwd_sum_to(out, g, a, shape):
    return (broadcast_to(g, a.shape),)


# -- reductions -------------------------------------------------------------

def _fwd_sum(tag, a, axis=None, keepdims=False):
    return a.sum(axis=axis, keepdims=keepdims)


def _bwd_sum(out, g, a, axis=None, keepdims=False):
    return (_expand(g, a.shape, axis, keepdims),)


def _fwd_mean(tag, a, axis=None, keepdims=False):
    if a.size == 0:
        raise ShapeError(f"Op '{tag}': mean of an empty input")
    return a.mean(axis=axis, keepdims=keepdims)


def _bwd_mean(out, g, a, axis=None, keepdims=False):
    count = int(np.prod([a.shape[i] for i in _normalize_axes(axis, a.ndim)]))
    return (scale(_expand(g, a.shape, axis, keepdims), 1.0 / count),)


def _fwd_max_reduce(tag, a, axis=-1, keepdims=False):
    return a.max(axis=axis, keepdims=keepdims)


def _bwd_max_reduce(out, g, a, axis=-1, keepdims=False):
    # gradient goes to the first maximal entry only
    idx = np.expand_dims(np.argmax(a.value, axis=axis), axis)
    mask = np.zeros_like(a.value)
    np.put_along_axis(mask, idx, 1.0, axis=axis)
    return (mul(_expand(g, a.shape, axis, keepdims), constant(mask)),)


def _fwd_log_softmax(tag, a, axis=-1):
    shifted = a - a.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _bwd_log_softmax(out, g, a, axis=-1):
    probs = exp(out)
    return (sub(g, mul(probs, reduce_sum(g, axis=axis, keepdims=True))),)


def _fwd_dot(tag, a, b, axis=-1):
    if a.shape != b.shape:
        raise ShapeError(f"Op '{tag}': shapes {a.shape} and {b.shape} differ")
    return (a * b).sum(axis=axis)


def _bwd_dot(out, g, a, b, axis=-1):
    ge = _expand(g, a.shape, axis, False)
    return (
        mul(ge, b) if a.requires_grad else None,
        mul(ge, a) if b.requires_grad else None,
    )


def _fwd_l2_norm_squared(tag, a, axis=None):
    return (a * a).sum(axis=axis)


def _bwd_l2_norm_squared(out, g, a, axis=None):
    return (scale(mul(_expand(g, a.shape, axis, False), a), 2.0),)


_register("add", 2, _fwd_add, _bwd_add)
_register("sub", 2, _fwd_sub, _bwd_sub)
_register("mul", 2, _fwd_mul, _bwd_mul)
_register("div", 2, _fwd_div, _bwd_div)
_register("negate", 1, _fwd_negate, _bwd_negate)
_register("scale", 1, _fwd_scale, _bwd_scale)
_register("relu", 1, _fwd_relu, _bwd_relu)
_register("tanh", 1, _fwd_tanh, _bwd_tanh)
_register("exp", 1, _fwd_exp, _bwd_exp)
_register("log", 1, _fwd_log, _bwd_log)
_register("sqrt", 1, _fwd_sqrt, _bwd_sqrt)
_register("matmul", 2, _fwd_matmul, _bwd_matmul)
_register("transpose", 1, _fwd_transpose, _bwd_transpose)
_register("reshape", 1, _fwd_reshape, _bwd_reshape)
_register("broadcast_to", 1, _fwd_broadcast_to, _bwd_broadcast_to)
_register("sum_to", 1, _fwd_sum_to, _bwd_sum_to)
_register("sum", 1, _fwd_sum, _bwd_sum)
_register("mean", 1, _fwd_mean, _bwd_mean)
_register("max_reduce", 1, _fwd_max_reduce, _bwd_max_reduce)
_register("log_softmax", 1, _fwd_log_softmax, _bwd_log_softmax)
_register("dot", 2, _fwd_dot, _bwd_dot)
_register("l2_norm_squared", 1, _fwd_l2_norm_squared, _bwd_l2_norm_squared)

OP_TAGS = tuple(sorted(_OPS))


def add(a: NodeLike, b: NodeLike) -> Node:
    return forward_op("add", [a, b])


def sub(a: NodeLike, b: NodeLike) -> Node:
    return forward_op("sub", [a, b])


def mul(a: NodeLike, b: NodeLike) -> Node:
    return forward_op("mul", [a, b])


def div(a: NodeLike, b: NodeLike) -> Node:
    return forward_op("div", [a, b])


def negate(a: NodeLike) -> Node:
    return forward_op("negate", [a])


def scale(a: NodeLike, factor: float) -> Node:
    return forward_op("scale", [a], factor=float(factor))


def relu(a: NodeLike) -> Node:
    return forward_op("relu", [a])


def tanh(a: NodeLike) -> Node:
    return forward_op("tanh", [a])


def exp(a: NodeLike) -> Node:
    return forward_op("exp", [a])


def log(a: NodeLike) -> Node:
    return forward_op("log", [a])


def sqrt(a: NodeLike) -> Node:
    return forward_op("sqrt", [a])


def matmul(a: NodeLike, b: NodeLike) -> Node:
    return forward_op("matmul", [a, b])


def transpose(a: NodeLike) -> Node:
    return forward_op("transpose", [a])


def reshape(a: NodeLike, shape) -> Node:
    return forward_op("reshape", [a], shape=tuple(shape))


def broadcast_to(a: NodeLike, shape) -> Node:
    return forward_op("broadcast_to", [a], shape=tuple(shape))


def sum_to(a: NodeLike, shape) -> Node:
    return forward_op("sum_to", [a], shape=tuple(shape))


def reduce_sum(a: NodeLike, axis=None, keepdims: bool = False) -> Node:
    return forward_op("sum", [a], axis=axis, keepdims=keepdims)


def mean(a: NodeLike, axis=None, keepdims: bool = False) -> Node:
    return forward_op("mean", [a], axis=axis, keepdims=keepdims)


def max_reduce(a: NodeLike, axis: int = -1, keepdims: bool = False) -> Node:
    return forward_op("max_reduce", [a], axis=axis, keepdims=keepdims)


def log_softmax(a: NodeLike, axis: int = -1) -> Node:
    return forward_op("log_softmax", [a], axis=axis)


def dot(a: NodeLike, b: NodeLike, axis: int = -1) -> Node:
    return forward_op("dot", [a, b], axis=axis)


def l2_norm_squared(a: NodeLike, axis=None) -> Node:
    return forward_op("l2_norm_squared", [a], axis=axis)


@dataclass
class GradRequest:
    output: Node
    wrt: Sequence[Node]
    create_graph: bool = False


def _topological_order(root: Node) -> List[Node]:
    """Nodes reachable from root through differentiable parents, parents first."""
    order: List[Node] = []
    done = set()
    active = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            active.discard(key)
            done.add(key)
            order.append(node)
            continue
        if key in done:
            continue
        assert key not in active, "cycle in computation graph"
        active.add(key)
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.requires_grad and id(parent) not in done:
                stack.append((parent, False))
    return order


def grad(req: GradRequest) -> List[Union[Tensor, Node]]:
    """
    Differentiate a scalar output with respect to a list of nodes.

    Args:
        req: Output node, nodes to differentiate against, and whether the
            returned gradients should themselves be differentiable

    Returns:
        One gradient per entry of ``req.wrt``: nodes when ``create_graph`` is
        set, detached arrays otherwise. Unreachable entries get zeros.
    """
    output = req.output
    if output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")

    grads: Dict[int, Node] = {id(output): Node(np.ones_like(output.value))}
    with _recording(req.create_graph):
        for node in reversed(_topological_order(output)):
            g = grads.get(id(node))
            if g is None or not node.parents:
                continue
            parent_grads = _OPS[node.op].backward(node, g, *node.parents, **node.attrs)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = add(grads[key], pg) if key in grads else pg

    results: List[Union[Tensor, Node]] = []
    for w in req.wrt:
        g = grads.get(id(w))
        if g is None:
            g = Node(np.zeros_like(w.value))
        results.append(g if req.create_graph else g.value.copy())
    return results


def gradient(output: Node, wrt: Sequence[Node], create_graph: bool = False):
    """Shorthand for ``grad(GradRequest(output, wrt, create_graph))``."""
    return grad(GradRequest(output=output, wrt=list(wrt), create_graph=create_graph))


def _scalar(value) -> float:
    if isinstance(value, Node):
        return value.item()
    return float(np.asarray(value).reshape(-1)[0])


def central_difference(f: Callable[[Node], NodeLike], x, step: float = 1e-5) -> Tensor:
    """Coordinatewise central-difference gradient of a scalar function."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    x = tensor(x)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            plus = flat.copy()
            minus = flat.copy()
            plus[i] += step
            minus[i] -= step
            fp = _scalar(f(Node(plus.reshape(x.shape))))
            fm = _scalar(f(Node(minus.reshape(x.shape))))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite function value at coordinate {i}")
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    return numeric


class GradientCheck(NamedTuple):
    max_relative_error: float
    analytic: Tensor
    numeric: Tensor


def check_gradient(f: Callable[[Node], NodeLike], x, step: float = 1e-5,
                   floor: float = 1e-12) -> GradientCheck:
    x = tensor(x)
    node = leaf(x)
    out = as_node(f(node))
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteError("non-finite function value at the base point")
    analytic = gradient(out, [node])[0]
    numeric = central_difference(f, x, step)
    error = np.abs(analytic - numeric) / (np.abs(analytic) + floor)
    return GradientCheck(float(error.max()) if error.size else 0.0, analytic, numeric)


def finite_difference_check(f: Callable[[Node], NodeLike], x, step: float = 1e-5,
                            floor: float = 1e-12) -> float:
    """
    Compare the analytic gradient of ``f`` at ``x`` with central differences.

    Returns:
        max_i |analytic_i - numeric_i| / (|analytic_i| + floor)
    """
    return check_gradient(f, x, step, floor).max_relative_error
