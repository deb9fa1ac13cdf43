"""
Dense tensors with define-by-run reverse-mode automatic differentiation.

Every differentiable operation wraps its numpy result in a new Tensor and, if
any input requires a gradient, attaches a Node holding the inputs and a
backward rule. `backward()` rebuilds the Tape (the topologically ordered nodes
reachable from the loss) and walks it once in reverse.

Layers with fused kernels (batch norm, convolution, pooling, cross-entropy)
build on `record()` instead of composing the primitive ops below.
"""

import logging
import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, NumericDomainError, RangeError, ShapeError

logger = logging.getLogger(__name__)

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Axis = Union[None, int, Sequence[int]]

_SUPPORTED_DTYPES = (np.float32, np.float64)
_default_dtype = np.float64
_local = threading.local()


# ═══════════════════════════════════════════════════════════════════════════════
# PRECISION AND RECORDING STATE
# ═══════════════════════════════════════════════════════════════════════════════

def set_default_dtype(dtype) -> None:
    """Set the element type of newly created tensors (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _SUPPORTED_DTYPES:
        raise ContractError(f"unsupported tensor dtype {np.dtype(dtype).name}; use float32 or float64")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run the block without recording nodes (per thread)."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


# ═══════════════════════════════════════════════════════════════════════════════
# TENSOR, NODE, TAPE
# ═══════════════════════════════════════════════════════════════════════════════

class Node:
    """One recorded operation: its inputs, a weak link to its output, and the backward rule."""
    __slots__ = ("op", "inputs", "output", "backward_rule")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor", backward_rule: BackwardRule):
        self.op = op
        self.inputs = inputs
        self.output = weakref.ref(output)
        self.backward_rule = backward_rule


class Tensor:
    """
    n-dimensional real array with an optional gradient.

    `grad` is only ever allocated for tensors with `requires_grad=True`, and
    always has the same shape as `data`.
    """
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None, copy: bool = True):
        if copy:
            self.data = np.array(data, dtype=dtype or _default_dtype)
        else:
            self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"


class Tape:
    """Nodes reachable from one output, inputs before consumers."""

    def __init__(self, entries: List[Tuple[Tensor, Node]]):
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited or tensor._node is None:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            for parent in tensor._node.inputs:
                if parent._node is not None and id(parent) not in visited:
                    stack.append((parent, False))
        return cls([(t, t._node) for t in order])


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_rule: BackwardRule) -> Tensor:
    """Wrap an op result; attach a node when any input needs a gradient."""
    requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad, copy=False)
    if requires_grad:
        out._node = Node(op, tuple(inputs), out, backward_rule)
    return out


# ═══════════════════════════════════════════════════════════════════════════════
# BACKWARD PASS
# ═══════════════════════════════════════════════════════════════════════════════

def _check_scalar(output: Tensor) -> None:
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ContractError("output was not produced through recorded ops on tensors requiring grad")


def _propagate(output: Tensor) -> Dict[int, Tuple[Tensor, np.ndarray]]:
    tape = Tape.from_output(output)
    grads: Dict[int, Tuple[Tensor, np.ndarray]] = {id(output): (output, np.ones_like(output.data))}
    for tensor, node in reversed(tape.entries):
        entry = grads.get(id(tensor))
        if entry is None:
            continue
        input_grads = node.backward_rule(entry[1])
        for parent, g in zip(node.inputs, input_grads):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = (parent, grads[key][1] + g)
            else:
                grads[key] = (parent, g)
    logger.debug("backward visited %d nodes", len(tape))
    return grads


def backward(loss: Tensor) -> None:
    """Populate `.grad` of every requires-grad tensor reachable from `loss`, accumulating."""
    _check_scalar(loss)
    for tensor, g in _propagate(loss).values():
        g = np.array(g, dtype=tensor.dtype)
        tensor.grad = g if tensor.grad is None else tensor.grad + g


def gradients(output: Tensor, wrt: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of a scalar `output` w.r.t. `wrt`, leaving every `.grad` untouched."""
    _check_scalar(output)
    grads = _propagate(output)
    result = []
    for tensor in wrt:
        entry = grads.get(id(tensor))
        result.append(np.zeros_like(tensor.data) if entry is None else np.array(entry[1], dtype=tensor.dtype))
    return result


# ═══════════════════════════════════════════════════════════════════════════════
# PRIMITIVE OPS
# ═══════════════════════════════════════════════════════════════════════════════

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, (m×k)·(k×n) → m×n."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    a_data, b_data = a.data, b.data

    def rule(g):
        return g @ b_data.T, a_data.T @ g

    return record("matmul", a_data @ b_data, (a, b), rule)


def _add_backward(g, inputs, out, **params):
    return g, g


def _sub_backward(g, inputs, out, **params):
    return g, -g


def _mul_backward(g, inputs, out, **params):
    return g * inputs[1], g * inputs[0]


def _relu_backward(g, inputs, out, **params):
    # subgradient at exactly 0 is 0
    return (np.where(inputs[0] > 0, g, 0.0).astype(g.dtype, copy=False),)


def _exp_backward(g, inputs, out, **params):
    return (g * out,)


def _log_backward(g, inputs, out, **params):
    return (g / inputs[0],)


def _scale_backward(g, inputs, out, factor=1.0, **params):
    return (g * factor,)


_FORWARD = {
    "add": lambda x, y: x + y,
    "sub": lambda x, y: x - y,
    "mul": lambda x, y: x * y,
    "relu": lambda x: np.maximum(x, 0.0).astype(x.dtype, copy=False),
    "exp": np.exp,
    "log": np.log,
}

# Replaceable per op; the gradient checker's negative control swaps one out.
BACKWARD_RULES = {
    "add": _add_backward,
    "sub": _sub_backward,
    "mul": _mul_backward,
    "relu": _relu_backward,
    "exp": _exp_backward,
    "log": _log_backward,
    "scale": _scale_backward,
}


def elementwise(op: str, *args: Tensor, factor: float = 1.0) -> Tensor:
    """Apply one of add, sub, mul, relu, exp, log, scale elementwise."""
    if op not in BACKWARD_RULES:
        raise ContractError(f"unknown elementwise op '{op}'")
    if op in ("add", "sub", "mul"):
        a, b = args
        if a.shape != b.shape:
            raise ShapeError(op, a.shape, b.shape)
    elif len(args) != 1:
        raise ContractError(f"{op} takes exactly one tensor")
    arrays = tuple(t.data for t in args)

    if op == "scale":
        data = arrays[0] * factor
    else:
        if op == "log" and np.any(arrays[0] <= 0):
            raise NumericDomainError("log of non-positive input")
        data = _FORWARD[op](*arrays)
    data = np.asarray(data)

    def rule(g):
        return BACKWARD_RULES[op](g, arrays, data, factor=factor)

    return record(op, data, args, rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def relu(x: Tensor) -> Tensor:
    """max(x, 0) elementwise."""
    return elementwise("relu", x)


def exp(x: Tensor) -> Tensor:
    return elementwise("exp", x)


def log(x: Tensor) -> Tensor:
    return elementwise("log", x)


def scale(x: Tensor, factor: float) -> Tensor:
    return elementwise("scale", x, factor=float(factor))


def slice_channels(x: Tensor, count: int) -> Tensor:
    """Prefix of the channel axis (axis 1); the backward leaves exact zeros past `count`."""
    if x.ndim < 2:
        raise ShapeError("slice_channels", x.shape)
    channels = x.shape[1]
    if count < 1 or count > channels:
        raise RangeError(f"slice_channels: count {count} outside [1, {channels}]")
    shape = x.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :count] = g
        return (full,)

    return record("slice_channels", x.data[:, :count].copy(), (x,), rule)


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise RangeError(f"axis {a} invalid for a {ndim}-d tensor")
        normalized.append(a % ndim)
    if len(set(normalized)) != len(normalized):
        raise RangeError(f"repeated axis in {axes}")
    return tuple(sorted(normalized))


def reduce(op: str, x: Tensor, axis: Axis = None) -> Tensor:
    """sum or mean over `axis` (all axes when None)."""
    if op not in ("sum", "mean"):
        raise ContractError(f"unknown reduction '{op}'")
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    data = np.sum(x.data, axis=axes)
    if op == "mean":
        data = data / count
    factor = 1.0 if op == "sum" else 1.0 / count
    shape = x.shape

    def rule(g):
        expanded = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(expanded * factor, shape).copy(),)

    return record(op, np.asarray(data), (x,), rule)


def sum(x: Tensor, axis: Axis = None) -> Tensor:  # noqa: A001
    return reduce("sum", x, axis)


def mean(x: Tensor, axis: Axis = None) -> Tensor:
    return reduce("mean", x, axis)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("transpose", x.shape)
    return record("transpose", x.data.T.copy(), (x,), lambda g: (g.T.copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", original, tuple(shape))
    return record("reshape", data.copy(), (x,), lambda g: (g.reshape(original),))


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1."""
    if x.ndim < 2 or bias.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError("bias_add", x.shape, bias.shape)
    view = (1, -1) + (1,) * (x.ndim - 2)
    other_axes = tuple(a for a in range(x.ndim) if a != 1)

    def rule(g):
        return g, g.sum(axis=other_axes)

    return record("bias_add", x.data + bias.data.reshape(view), (x, bias), rule)


# ═══════════════════════════════════════════════════════════════════════════════
# GRADIENT CHECK
# ═══════════════════════════════════════════════════════════════════════════════

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """
    Compare analytic gradients of the scalar `f()` against central differences.

    Returns the max over all parameter entries of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    params = list(params)
    if any(p.dtype != np.float64 for p in params):
        logger.warning("grad_check on non-float64 parameters; tolerances will not hold")
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            for idx in np.ndindex(*p.shape):
                original = p.data[idx]
                p.data[idx] = original + h
                plus = float(f().data)
                p.data[idx] = original - h
                minus = float(f().data)
                p.data[idx] = original
                numeric = (plus - minus) / (2.0 * h)
                err = abs(a[idx] - numeric) / max(abs(a[idx]), abs(numeric), 1e-12)
                worst = max(worst, float(err))
    return worst
