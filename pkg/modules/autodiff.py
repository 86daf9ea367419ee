"""
Autodiff Module
Define-by-run reverse-mode differentiation over dense numpy arrays.

Every primitive applied to a Var is recorded on the Var's Tape in execution
order, so the node list is topologically sorted by construction. A backward
pass walks it once, from the output down to the parameter leaves.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from modules.errors import NumericalError, ShapeError, TapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Coordinate = Tuple[str, Tuple[int, ...]]


@dataclass
class Node:
    """One recorded primitive: its inputs (tape indices) and its backward rule."""

    op: str
    inputs: Tuple[int, ...]
    backward: Optional[Backward] = None
    leaf: Optional[str] = None


class Var:
    """Handle to a value recorded on a tape. Values are read-only."""

    __slots__ = ("tape", "index", "value")

    # numpy operands on the left defer to our reflected operators
    __array_ufunc__ = None
    __iter__ = None

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Var":
        return transpose(self)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self) -> str:
        op = self.tape.nodes[self.index].op
        return f"Var(op={op}, shape={self.shape})"


class Tape:
    """
    Ordered record of primitives for a single evaluation.

    A tape is consumed by its backward pass; record a fresh one per forward
    pass. Tapes must not be shared between threads.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: List[Node] = []
        self.values: List[np.ndarray] = []
        self.leaves: Dict[str, int] = {}
        self.relu_masks: List[np.ndarray] = []
        self.output: Optional[Var] = None
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, node: Node, value: np.ndarray) -> Var:
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass; record a new one")
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"{node.op}: produced non-finite values")
        value.setflags(write=False)
        self.nodes.append(node)
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value)

    def leaf(self, name: str, value: ArrayLike) -> Var:
        """Record a named differentiable input (a parameter)."""
        if name in self.leaves:
            raise TapeError(f"leaf {name!r} recorded twice")
        var = self._push(Node("leaf", (), None, leaf=name), np.array(value, dtype=self.dtype))
        self.leaves[name] = var.index
        return var

    def constant(self, value: ArrayLike) -> Var:
        return self._push(Node("constant", ()), np.array(value, dtype=self.dtype))

    def record(self, op: str, inputs: Sequence[Var], value: np.ndarray, backward: Backward) -> Var:
        value = np.asarray(value, dtype=self.dtype)
        return self._push(Node(op, tuple(v.index for v in inputs), backward), value)

    def gradient(self, output: Optional[Var] = None, seed: Optional[ArrayLike] = None) -> Dict[str, np.ndarray]:
        """Return d(seed . output)/d(leaf) for every named leaf, then consume the tape."""
        if self.consumed:
            raise TapeError("tape already consumed; gradients can be taken once per recording")
        output = output if output is not None else self.output
        if output is None:
            raise TapeError("no output to differentiate")
        if output.tape is not self:
            raise TapeError("output was recorded on a different tape")
        if seed is None:
            if output.size != 1:
                raise TapeError(f"seed required for non-scalar output of shape {output.shape}")
            seed = np.ones(output.shape, dtype=self.dtype)
        seed = np.asarray(seed, dtype=self.dtype)
        if seed.shape != output.shape:
            raise TapeError(f"seed shape {seed.shape} does not match output shape {output.shape}")

        pending: Dict[int, np.ndarray] = {output.index: seed}
        leaf_grads: Dict[str, np.ndarray] = {}
        for index in range(output.index, -1, -1):
            grad = pending.pop(index, None)
            if grad is None:
                continue
            node = self.nodes[index]
            if node.leaf is not None:
                leaf_grads[node.leaf] = grad
                continue
            if node.backward is None:
                continue
            for source, contribution in zip(node.inputs, node.backward(grad)):
                if contribution is None:
                    continue
                if source in pending:
                    pending[source] = pending[source] + contribution
                else:
                    pending[source] = contribution
        self.consumed = True
        return {
            name: np.asarray(leaf_grads.get(name, np.zeros_like(self.values[i])), dtype=self.dtype)
            for name, i in self.leaves.items()
        }


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _tape_of(*items) -> Tape:
    tapes = {id(x.tape): x.tape for x in items if isinstance(x, Var)}
    if not tapes:
        raise TapeError("at least one operand must be a Var")
    if len(tapes) > 1:
        raise TapeError("operands were recorded on different tapes")
    return next(iter(tapes.values()))


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so grad matches shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Var, b: Var) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("add", a, b)
    return tape.record(
        "add", (a, b), a.value + b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("sub", a, b)
    return tape.record(
        "sub", (a, b), a.value - b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("mul", a, b)
    return tape.record(
        "mul", (a, b), a.value * b.value,
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("div", a, b)
    if np.any(b.value == 0):
        raise NumericalError("div: division by zero")
    return tape.record(
        "div", (a, b), a.value / b.value,
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
        ),
    )


def matmul(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape[1]} vs {b.shape[0]}) for {a.shape} @ {b.shape}")
    return tape.record(
        "matmul", (a, b), a.value @ b.value,
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def transpose(a: Var) -> Var:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D operand, got {a.shape}")
    return a.tape.record("transpose", (a,), a.value.T, lambda g: (g.T,))


def concat(items: Sequence[Var], axis: int = 0) -> Var:
    tape = _tape_of(*items)
    items = [_lift(tape, x) for x in items]
    ndim = items[0].ndim
    for x in items:
        if x.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch {[v.shape for v in items]}")
        for d in range(ndim):
            if d != axis % ndim and x.shape[d] != items[0].shape[d]:
                raise ShapeError(f"concat: dimension {d} differs among {[v.shape for v in items]}")
    offsets = np.cumsum([x.shape[axis] for x in items])[:-1]

    def backward(g):
        return np.split(g, offsets, axis=axis)

    return tape.record("concat", items, np.concatenate([x.value for x in items], axis=axis), backward)


def relu(a: Var) -> Var:
    mask = a.value > 0
    a.tape.relu_masks.append(mask)
    return a.tape.record("relu", (a,), a.value * mask, lambda g: (g * mask,))


def exp(a: Var) -> Var:
    value = np.exp(a.value)
    return a.tape.record("exp", (a,), value, lambda g: (g * value,))


def log(a: Var) -> Var:
    if np.any(a.value <= 0):
        raise NumericalError(f"log: non-positive input (min {a.value.min():.3e})")
    return a.tape.record("log", (a,), np.log(a.value), lambda g: (g / a.value,))


def sqrt(a: Var) -> Var:
    if np.any(a.value <= 0):
        raise NumericalError(f"sqrt: non-positive input (min {a.value.min():.3e})")
    value = np.sqrt(a.value)
    return a.tape.record("sqrt", (a,), value, lambda g: (g / (2.0 * value),))


def softmax(a: Var, axis: int = -1) -> Var:
    """Max-shifted softmax along axis."""
    if a.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} in shape {a.shape}")
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return a.tape.record("softmax", (a,), y, backward)


def logsumexp(a: Var, axis: int = -1, keepdims: bool = True) -> Var:
    """Max-shifted log-sum-exp along axis."""
    if a.shape[axis] == 0:
        raise ShapeError(f"logsumexp: empty axis {axis} in shape {a.shape}")
    peak = a.value.max(axis=axis, keepdims=True)
    value = peak + np.log(np.exp(a.value - peak).sum(axis=axis, keepdims=True))
    weights = np.exp(a.value - value)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    out = value if keepdims else np.squeeze(value, axis=axis)
    return a.tape.record("logsumexp", (a,), out, backward)


def reduce_sum(a: Var, axis: Optional[int] = None, keepdims: bool = False) -> Var:
    """Row/column (or full) reduction."""
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return a.tape.record("sum", (a,), value, backward)


def reduce_mean(a: Var, axis: Optional[int] = None, keepdims: bool = False) -> Var:
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def take(a: Var, key) -> Var:
    """Slice or gather entries; the backward pass scatter-adds."""
    try:
        value = np.array(a.value[key])
    except IndexError as exc:
        raise ShapeError(f"take: {exc} for shape {a.shape}") from None

    def backward(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, key, g)
        return (out,)

    return a.tape.record("take", (a,), value, backward)


def broadcast_to(a: Var, shape: Tuple[int, ...]) -> Var:
    try:
        value = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return a.tape.record("broadcast_to", (a,), value, lambda g: (_unbroadcast(g, a.shape),))


def reshape(a: Var, shape: Tuple[int, ...]) -> Var:
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return a.tape.record("reshape", (a,), value, lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# evaluation entry points
# ---------------------------------------------------------------------------

class Bindings(dict):
    """Named leaves handed to a graph; unknown names fail loudly."""

    def __missing__(self, key):
        raise TapeError(f"input {key!r} is not bound")


Graph = Callable[[Mapping[str, Var]], Var]


@dataclass
class Evaluation:
    value: np.ndarray
    tape: Tape
    output: Var


def evaluate(graph: Graph, inputs: Mapping[str, ArrayLike], dtype=np.float64) -> Evaluation:
    """Run graph on fresh leaves for inputs, keeping the tape for a backward pass."""
    tape = Tape(dtype)
    bindings = Bindings({name: tape.leaf(name, value) for name, value in inputs.items()})
    output = graph(bindings)
    if not isinstance(output, Var) or output.tape is not tape:
        raise TapeError("graph must return a Var recorded on its own tape")
    tape.output = output
    return Evaluation(output.value, tape, output)


def gradient(tape: Tape, seed: Optional[ArrayLike] = None) -> Dict[str, np.ndarray]:
    return tape.gradient(seed=seed)


@dataclass
class GradientCheck:
    max_error: float
    worst: Optional[Coordinate]
    checked: int
    excluded: List[Coordinate] = field(default_factory=list)


def _crosses_kink(up: Tape, down: Tape) -> bool:
    if len(up.relu_masks) != len(down.relu_masks):
        return True
    return any(not np.array_equal(u, d) for u, d in zip(up.relu_masks, down.relu_masks))


def _perturbed(point: Mapping[str, np.ndarray], name: str, coord: Tuple[int, ...], step: float):
    shifted = dict(point)
    value = np.array(point[name], dtype=np.float64)
    value[coord] += step
    shifted[name] = value
    return shifted


def check_gradient(
    f: Graph,
    point: Mapping[str, ArrayLike],
    h: float = 1e-5,
    max_coordinates: Optional[int] = None,
    seed: int = 0,
) -> GradientCheck:
    """
    Compare the tape gradient of scalar f at point against central differences.

    The error per coordinate is |analytic - numeric| / max(1, |analytic|).
    Coordinates whose +h and -h evaluations take different ReLU branches sit
    on a kink and are excluded. With max_coordinates set, at most that many
    coordinates per input are checked, picked with a seeded generator.
    """
    if h <= 0:
        raise TapeError(f"finite-difference step must be positive, got {h}")
    point = {name: np.array(value, dtype=np.float64) for name, value in point.items()}
    base = evaluate(f, point)
    if base.value.size != 1:
        raise ShapeError(f"check_gradient: f must be scalar-valued, got shape {base.value.shape}")
    analytic = base.tape.gradient()
    rng = np.random.default_rng(seed)

    max_error, worst, checked, excluded = 0.0, None, 0, []
    for name, value in point.items():
        coords = list(np.ndindex(value.shape))
        if max_coordinates is not None and len(coords) > max_coordinates:
            picks = np.sort(rng.choice(len(coords), size=max_coordinates, replace=False))
            coords = [coords[k] for k in picks]
        for coord in coords:
            try:
                up = evaluate(f, _perturbed(point, name, coord, h))
                down = evaluate(f, _perturbed(point, name, coord, -h))
            except NumericalError as exc:
                raise NumericalError(f"non-finite intermediate at {name}{list(coord)}: {exc}") from exc
            if _crosses_kink(up.tape, down.tape):
                excluded.append((name, coord))
                continue
            numeric = (float(up.value.sum()) - float(down.value.sum())) / (2.0 * h)
            exact = float(analytic[name][coord])
            error = abs(exact - numeric) / max(1.0, abs(exact))
            checked += 1
            if error > max_error or worst is None:
                max_error, worst = max(error, max_error), (name, coord)
    if excluded:
        logger.debug("gradient check excluded %d kink coordinates", len(excluded))
    return GradientCheck(max_error, worst, checked, excluded)
