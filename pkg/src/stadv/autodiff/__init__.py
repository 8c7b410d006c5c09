"""
Tensor Autodiff
Dense float64 tensors, a recorded computation tape and reverse-mode gradients
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from stadv.errors import ConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)


class Tensor:
    """Immutable dense tensor of float64 values stored row-major"""

    __slots__ = ("_data",)

    def __init__(self, data: Any):
        if isinstance(data, Tensor):
            array = data._data
        else:
            array = np.array(data, dtype=np.float64)
            array.setflags(write=False)
        self._data = array

    @classmethod
    def adopt(cls, array: np.ndarray) -> "Tensor":
        """Wrap a freshly computed array without copying it"""
        tensor = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        array.setflags(write=False)
        tensor._data = array
        return tensor

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    def numpy(self) -> np.ndarray:
        """Writable copy of the values"""
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError("item", self.shape, (), "tensor is not scalar")
        return float(self._data.reshape(()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    __hash__ = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self._data!r})"


ArrayLike = Union[Tensor, np.ndarray, float, Sequence[float]]


def _as_array(value: ArrayLike) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    """Forward rule, vector-Jacobian product and shape check of one operation"""
    name: str
    forward: Callable[[List[np.ndarray], Dict[str, Any]], np.ndarray]
    vjp: Callable[[np.ndarray, List[np.ndarray], np.ndarray, Dict[str, Any]], Tuple[Optional[np.ndarray], ...]]
    check: Optional[Callable[[str, List[np.ndarray], Dict[str, Any]], None]] = None
    kink: bool = False  # non-differentiable where the first input is 0


PRIMITIVES: Dict[str, Primitive] = {}


def register(primitive: Primitive) -> Primitive:
    PRIMITIVES[primitive.name] = primitive
    return primitive


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(name: str, values: List[np.ndarray], attrs: Dict[str, Any]) -> None:
    left, right = values[0].shape, values[1].shape
    try:
        np.broadcast_shapes(left, right)
    except ValueError:
        raise ShapeError(name, left, right) from None


def _check_matmul(name: str, values: List[np.ndarray], attrs: Dict[str, Any]) -> None:
    a, b = values
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(name, a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(name, a.shape, b.shape, "batch dimensions do not align") from None


def _check_axis(name: str, values: List[np.ndarray], attrs: Dict[str, Any]) -> None:
    axis = attrs.get("axis")
    ndim = values[0].ndim
    axes = () if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(name, values[0].shape, (), f"axis {ax} out of range")


def _check_broadcast_to(name: str, values: List[np.ndarray], attrs: Dict[str, Any]) -> None:
    source, target = values[0].shape, tuple(attrs["shape"])
    try:
        if np.broadcast_shapes(source, target) != target:
            raise ValueError
    except ValueError:
        raise ShapeError(name, source, target) from None


def _check_slice(name: str, values: List[np.ndarray], attrs: Dict[str, Any]) -> None:
    shape = values[0].shape
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    if not -len(shape) <= axis < len(shape) or not 0 <= start < stop <= shape[axis]:
        raise ShapeError(name, shape, (), f"slice [{start}:{stop}] on axis {axis}")


def _check_concat(name: str, values: List[np.ndarray], attrs: Dict[str, Any]) -> None:
    first = values[0].shape
    if not -len(first) <= attrs["axis"] < len(first):
        raise ShapeError(name, first, (), f"axis {attrs['axis']} out of range")
    axis = attrs["axis"] % len(first)
    for other in values[1:]:
        if len(other.shape) != len(first) or any(
            a != b for i, (a, b) in enumerate(zip(first, other.shape)) if i != axis
        ):
            raise ShapeError(name, first, other.shape)


def _check_mask(name: str, values: List[np.ndarray], attrs: Dict[str, Any]) -> None:
    _check_broadcast(name, values, attrs)
    mask = values[1]
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ShapeError(name, values[0].shape, mask.shape, "mask must contain only 0 and 1")


def _check_reshape(name: str, values: List[np.ndarray], attrs: Dict[str, Any]) -> None:
    target = tuple(attrs["shape"])
    if int(np.prod(target)) != values[0].size:
        raise ShapeError(name, values[0].shape, target)


def _reduce_count(shape: Tuple[int, ...], axis: Any) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[a] for a in axes]))


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axis: Any, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = sorted(a % len(shape) for a in axes)
        for a in axes:
            grad = np.expand_dims(grad, a)
    elif axis is None and not keepdims:
        grad = np.reshape(grad, (1,) * len(shape))
    return np.broadcast_to(grad, shape)


def _slice_key(ndim: int, axis: int, start: int, stop: int) -> Tuple[slice, ...]:
    key = [slice(None)] * ndim
    key[axis] = slice(start, stop)
    return tuple(key)


def _slice_vjp(g, values, out, attrs):
    x = values[0]
    full = np.zeros_like(x)
    full[_slice_key(x.ndim, attrs["axis"], attrs["start"], attrs["stop"])] = g
    return (full,)


def _concat_vjp(g, values, out, attrs):
    axis = attrs["axis"]
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


register(Primitive(
    "add",
    lambda v, a: v[0] + v[1],
    lambda g, v, out, a: (unbroadcast(g, v[0].shape), unbroadcast(g, v[1].shape)),
    _check_broadcast,
))
register(Primitive(
    "sub",
    lambda v, a: v[0] - v[1],
    lambda g, v, out, a: (unbroadcast(g, v[0].shape), unbroadcast(-g, v[1].shape)),
    _check_broadcast,
))
register(Primitive(
    "mul",
    lambda v, a: v[0] * v[1],
    lambda g, v, out, a: (unbroadcast(g * v[1], v[0].shape), unbroadcast(g * v[0], v[1].shape)),
    _check_broadcast,
))
register(Primitive(
    "matmul",
    lambda v, a: np.matmul(v[0], v[1]),
    lambda g, v, out, a: (
        unbroadcast(np.matmul(g, _swap(v[1])), v[0].shape),
        unbroadcast(np.matmul(_swap(v[0]), g), v[1].shape),
    ),
    _check_matmul,
))
register(Primitive(
    "masked_mul",
    lambda v, a: v[0] * v[1],
    lambda g, v, out, a: (unbroadcast(g * v[1], v[0].shape), None),
    _check_mask,
))
register(Primitive(
    "relu",
    lambda v, a: np.where(v[0] > 0.0, v[0], 0.0),
    lambda g, v, out, a: (g * (v[0] > 0.0),),
    kink=True,
))
register(Primitive(
    "sigmoid",
    lambda v, a: 0.5 * (1.0 + np.tanh(0.5 * v[0])),
    lambda g, v, out, a: (g * out * (1.0 - out),),
))
register(Primitive(
    "tanh",
    lambda v, a: np.tanh(v[0]),
    lambda g, v, out, a: (g * (1.0 - out * out),),
))
register(Primitive(
    "abs",
    lambda v, a: np.abs(v[0]),
    lambda g, v, out, a: (g * np.sign(v[0]),),
    kink=True,
))
register(Primitive(
    "square",
    lambda v, a: v[0] * v[0],
    lambda g, v, out, a: (2.0 * g * v[0],),
))
register(Primitive(
    "sqrt",
    lambda v, a: np.sqrt(v[0]),
    lambda g, v, out, a: (np.where(out > 0.0, 0.5 * g / np.where(out > 0.0, out, 1.0), 0.0),),
))
register(Primitive(
    "mean",
    lambda v, a: np.mean(v[0], axis=a.get("axis"), keepdims=a.get("keepdims", False)),
    lambda g, v, out, a: (
        _expand_reduced(g, v[0].shape, a.get("axis"), a.get("keepdims", False))
        / _reduce_count(v[0].shape, a.get("axis")),
    ),
    _check_axis,
))
register(Primitive(
    "sum",
    lambda v, a: np.sum(v[0], axis=a.get("axis"), keepdims=a.get("keepdims", False)),
    lambda g, v, out, a: (
        np.array(_expand_reduced(g, v[0].shape, a.get("axis"), a.get("keepdims", False))),
    ),
    _check_axis,
))
register(Primitive(
    "broadcast",
    lambda v, a: np.array(np.broadcast_to(v[0], tuple(a["shape"]))),
    lambda g, v, out, a: (unbroadcast(g, v[0].shape),),
    _check_broadcast_to,
))
register(Primitive(
    "slice",
    lambda v, a: np.array(v[0][_slice_key(v[0].ndim, a["axis"], a["start"], a["stop"])]),
    _slice_vjp,
    _check_slice,
))
register(Primitive(
    "concat",
    lambda v, a: np.concatenate(v, axis=a["axis"]),
    _concat_vjp,
    _check_concat,
))
register(Primitive(
    "transpose",
    lambda v, a: np.transpose(v[0], a["axes"]),
    lambda g, v, out, a: (np.transpose(g, np.argsort(a["axes"])),),
))
register(Primitive(
    "reshape",
    lambda v, a: np.reshape(v[0], tuple(a["shape"])),
    lambda g, v, out, a: (np.reshape(g, v[0].shape),),
    _check_reshape,
))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

LEAF = "leaf"
CONSTANT = "constant"


@dataclass
class Node:
    """One recorded operation and its most recent value"""
    index: int
    op: str
    inputs: Tuple[int, ...]
    attrs: Dict[str, Any]
    value: np.ndarray
    needs_grad: bool = False
    name: Optional[str] = None


def _evaluate(name: str, values: List[np.ndarray], attrs: Dict[str, Any]) -> np.ndarray:
    primitive = PRIMITIVES[name]
    if primitive.check is not None:
        primitive.check(name, values, attrs)
    with np.errstate(all="ignore"):
        out = np.asarray(primitive.forward(values, attrs), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericalError(name)
    return out


class Var:
    """Handle to a node on a tape; arithmetic records new nodes"""

    __slots__ = ("tape", "index")
    __array_priority__ = 1000

    def __init__(self, tape: "ComputationTape", index: int):
        self.tape = tape
        self.index = index

    @property
    def node(self) -> Node:
        return self.tape.nodes[self.index]

    @property
    def value(self) -> Tensor:
        return Tensor(self.node.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.node.value.shape

    def _lift(self, other: Any) -> "Var":
        return other if isinstance(other, Var) else self.tape.constant(other)

    def __add__(self, other): return self.tape.apply("add", self, self._lift(other))
    def __radd__(self, other): return self.tape.apply("add", self._lift(other), self)
    def __sub__(self, other): return self.tape.apply("sub", self, self._lift(other))
    def __rsub__(self, other): return self.tape.apply("sub", self._lift(other), self)
    def __mul__(self, other): return self.tape.apply("mul", self, self._lift(other))
    def __rmul__(self, other): return self.tape.apply("mul", self._lift(other), self)
    def __matmul__(self, other): return self.tape.apply("matmul", self, self._lift(other))
    def __rmatmul__(self, other): return self.tape.apply("matmul", self._lift(other), self)
    def __neg__(self): return self.tape.apply("mul", self, self.tape.constant(-1.0))

    def relu(self) -> "Var": return self.tape.apply("relu", self)
    def sigmoid(self) -> "Var": return self.tape.apply("sigmoid", self)
    def tanh(self) -> "Var": return self.tape.apply("tanh", self)
    def abs(self) -> "Var": return self.tape.apply("abs", self)
    def square(self) -> "Var": return self.tape.apply("square", self)
    def sqrt(self) -> "Var": return self.tape.apply("sqrt", self)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Var":
        return self.tape.apply("mean", self, axis=axis, keepdims=keepdims)

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Var":
        return self.tape.apply("sum", self, axis=axis, keepdims=keepdims)

    def broadcast_to(self, shape: Sequence[int]) -> "Var":
        return self.tape.apply("broadcast", self, shape=tuple(shape))

    def slice(self, axis: int, start: int, stop: int) -> "Var":
        return self.tape.apply("slice", self, axis=axis, start=start, stop=stop)

    def transpose(self, axes: Sequence[int]) -> "Var":
        return self.tape.apply("transpose", self, axes=tuple(axes))

    def reshape(self, shape: Sequence[int]) -> "Var":
        return self.tape.apply("reshape", self, shape=tuple(shape))

    def masked(self, mask: ArrayLike) -> "Var":
        return self.tape.apply("masked_mul", self, self.tape.constant(mask))

    def __repr__(self) -> str:
        return f"Var({self.node.op}#{self.index}, shape={self.shape})"


def concat(parts: Sequence[Var], axis: int) -> Var:
    """Concatenate variables recorded on the same tape"""
    tape = parts[0].tape
    return tape.apply("concat", *parts, axis=axis)


class ComputationTape:
    """Ordered record of primitive operations

    Nodes are appended as operations run, so every operand is recorded
    before its consumer.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.leaves: Dict[str, int] = {}

    def leaf(self, name: str, value: ArrayLike, requires_grad: bool = True) -> Var:
        """Record a named input; gradients are reported for it when requires_grad"""
        if name in self.leaves:
            raise ConfigError(f"leaf '{name}' already recorded")
        array = np.array(_as_array(value), dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericalError(LEAF)
        node = Node(len(self.nodes), LEAF, (), {}, array, needs_grad=requires_grad, name=name)
        self.nodes.append(node)
        self.leaves[name] = node.index
        return Var(self, node.index)

    def constant(self, value: ArrayLike) -> Var:
        array = np.array(_as_array(value), dtype=np.float64)
        node = Node(len(self.nodes), CONSTANT, (), {}, array)
        self.nodes.append(node)
        return Var(self, node.index)

    def apply(self, op: str, *inputs: Var, **attrs: Any) -> Var:
        if op not in PRIMITIVES:
            raise ConfigError(f"unknown primitive '{op}'")
        for var in inputs:
            if var.tape is not self:
                raise ConfigError(f"{op}: operand recorded on a different tape")
        values = [self.nodes[var.index].value for var in inputs]
        out = _evaluate(op, values, attrs)
        needs_grad = any(self.nodes[var.index].needs_grad for var in inputs)
        node = Node(len(self.nodes), op, tuple(var.index for var in inputs), attrs, out, needs_grad)
        self.nodes.append(node)
        return Var(self, node.index)

    def var(self, name: str) -> Var:
        return Var(self, self.leaves[name])

    def __len__(self) -> int:
        return len(self.nodes)


def forward(tape: ComputationTape, leaves: Mapping[str, ArrayLike]) -> Dict[int, Tensor]:
    """Replay the tape with new leaf values

    Leaves that are not rebound keep their recorded values. The tape keeps
    the replayed values so a following backward() differentiates at them.

    Returns:
        Mapping from node index to its value
    """
    for name in leaves:
        if name not in tape.leaves:
            raise ConfigError(f"unknown leaf '{name}'")
    for name, value in leaves.items():
        array = np.array(_as_array(value), dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericalError(LEAF)
        tape.nodes[tape.leaves[name]].value = array
    for node in tape.nodes:
        if node.op in (LEAF, CONSTANT):
            continue
        values = [tape.nodes[i].value for i in node.inputs]
        node.value = _evaluate(node.op, values, node.attrs)
    return {node.index: Tensor(node.value) for node in tape.nodes}


def backward(tape: ComputationTape, loss: Var) -> Dict[str, Tensor]:
    """Reverse sweep from a scalar loss

    Returns:
        Gradient of the loss for every leaf recorded with requires_grad;
        leaves the loss does not depend on get zeros
    """
    loss_value = tape.nodes[loss.index].value
    if loss_value.size != 1:
        raise ShapeError("backward", loss_value.shape, (), "loss must be scalar")

    grads: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss.index] = np.ones_like(loss_value)

    for node in reversed(tape.nodes[: loss.index + 1]):
        grad = grads[node.index]
        if grad is None or node.op in (LEAF, CONSTANT) or not node.needs_grad:
            continue
        values = [tape.nodes[i].value for i in node.inputs]
        input_grads = PRIMITIVES[node.op].vjp(grad, values, node.value, node.attrs)
        for source, input_grad in zip(node.inputs, input_grads):
            if input_grad is None or not tape.nodes[source].needs_grad:
                continue
            if grads[source] is None:
                grads[source] = np.array(input_grad, dtype=np.float64)
            else:
                grads[source] = grads[source] + input_grad

    result = {}
    for name, index in tape.leaves.items():
        node = tape.nodes[index]
        if not node.needs_grad:
            continue
        grad = grads[index]
        result[name] = Tensor.adopt(np.zeros_like(node.value) if grad is None else grad)
    return result


def reduce_gradients(parts: Iterable[Mapping[str, Tensor]]) -> Dict[str, Tensor]:
    """Sum per-tape leaf gradients in the order given"""
    totals: Dict[str, np.ndarray] = {}
    for grads in parts:
        for name, grad in grads.items():
            if name in totals:
                totals[name] = totals[name] + grad.data
            else:
                totals[name] = np.array(grad.data)
    return {name: Tensor.adopt(total) for name, total in totals.items()}


def grad_check(
    fn: Callable[[Var], Var],
    point: ArrayLike,
    step: float = 1e-5,
) -> float:
    """Compare the analytic gradient of ``fn`` with central differences

    Args:
        fn: Builds a scalar loss from the input variable (the tape is ``x.tape``)
        point: Where to check
        step: Finite-difference step, must be > 0

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|);
        coordinates whose ±step evaluations straddle a ReLU/abs kink are skipped
    """
    if step <= 0:
        raise ConfigError("grad_check step must be > 0")
    base = np.array(_as_array(point), dtype=np.float64)
    tape = ComputationTape()
    x = tape.leaf("x", base)
    loss = fn(x)
    analytic = backward(tape, loss)["x"].data

    kink_nodes = [node for node in tape.nodes if node.op in PRIMITIVES and PRIMITIVES[node.op].kink]

    def evaluate(values: np.ndarray) -> Tuple[float, List[np.ndarray]]:
        forward(tape, {"x": values})
        value = tape.nodes[loss.index].value
        if not np.all(np.isfinite(value)):
            raise NumericalError("grad_check")
        signs = [np.sign(tape.nodes[node.inputs[0]].value) for node in kink_nodes]
        return float(value.reshape(())), signs

    worst = 0.0
    skipped = 0
    flat = base.reshape(-1)
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] += step
        plus, plus_signs = evaluate(shifted.reshape(base.shape))
        shifted[i] -= 2.0 * step
        minus, minus_signs = evaluate(shifted.reshape(base.shape))
        if any(not np.array_equal(a, b) for a, b in zip(plus_signs, minus_signs)):
            skipped += 1
            continue
        numeric = (plus - minus) / (2.0 * step)
        exact = analytic.reshape(-1)[i]
        worst = max(worst, abs(exact - numeric) / max(1.0, abs(exact)))

    forward(tape, {"x": base})
    if skipped:
        logger.debug("grad_check skipped %d coordinate(s) at activation kinks", skipped)
    return worst
