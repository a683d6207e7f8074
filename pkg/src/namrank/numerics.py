"""Small dense-tensor toolkit with tape-based reverse-mode differentiation.

Only the operations the ranking model needs are provided. Tensors wrap
float64 numpy arrays; a :class:`Tape` records every primitive applied to a
tensor that was created on it, and :func:`backward` replays the recorded
adjoints in reverse order.

Example::

    tape = Tape()
    w = tape.variable(np.ones((2, 2)), name="w")
    loss = sum_(matmul(w, w))
    grads = backward(tape, loss)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation is called outside its documented domain."""


class FiniteDifferenceError(ArithmeticError):
    """Raised by the finite-difference oracle on a non-finite function value."""


class Tensor:
    """An n-d float64 array, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "tape", "name", "index")

    def __init__(self, data, tape: "Tape | None" = None, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.name = name
        self.index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    output: int
    inputs: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations.

    Leaves are created with :meth:`variable`; every op whose inputs include a
    tensor on this tape appends one node.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.tensors: list[Tensor] = []
        self.variables: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _register(self, tensor: Tensor) -> int:
        tensor.tape = self
        tensor.index = len(self.tensors)
        self.tensors.append(tensor)
        return tensor.index

    def variable(self, value, name: str) -> Tensor:
        if name in self.variables:
            raise ContractError(f"variable {name!r} already on tape")
        t = Tensor(value, name=name)
        self._register(t)
        self.variables[name] = t
        return t

    def record(self, output: Tensor, inputs: Sequence[Tensor], vjp) -> None:
        self._register(output)
        idx = tuple(t.index if t.tape is self else None for t in inputs)
        self.nodes.append(_Node(output.index, idx, vjp))

    def signature(self) -> list[tuple[int, tuple[int | None, ...], tuple[int, ...]]]:
        """Structural summary used to compare two recordings."""
        return [(n.output, n.inputs, self.tensors[n.output].shape) for n in self.nodes]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("operands belong to different tapes")
            tape = t.tape
    return tape


def _apply(data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    tape = _tape_of(inputs)
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _apply(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _apply(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.data, b.data
    return _apply(av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    av, bv = a.data, b.data
    out = av / bv
    return _apply(out, (a, b),
                  lambda g: (_unbroadcast(g / bv, av.shape),
                             _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _apply(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _apply(av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _apply(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _apply(np.log(av), (a,), lambda g: (g / av,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is passed only where no clamping happened."""
    a = as_tensor(a)
    av = a.data
    inside = (av >= lo) & (av <= hi)
    return _apply(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


# --- activations --------------------------------------------------------------


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _apply(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    """x * sigmoid(x), elementwise."""
    a = as_tensor(a)
    av = a.data
    s = expit(av)
    return _apply(av * s, (a,), lambda g: (g * s * (1.0 + av * (1.0 - s)),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _apply(a.data * pos, (a,), lambda g: (g * pos,))


def softmax(a, axis: int = -1, additive_mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis`` with row-max subtraction.

    ``additive_mask`` is a constant added to the logits first (use ``-inf``
    to exclude positions); every row must keep at least one finite entry.
    """
    a = as_tensor(a)
    x = a.data if additive_mask is None else a.data + additive_mask
    m = np.max(x, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ContractError("softmax row has no finite entry")
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _apply(y, (a,), vjp)


def softmax_rows(m) -> Tensor:
    """Row-wise softmax of a 2-d tensor."""
    m = as_tensor(m)
    if m.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {m.shape}")
    return softmax(m, axis=-1)


# --- linear algebra and shape ops -----------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _apply(av @ bv, (a, b), vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _apply(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swap_last(a) -> Tensor:
    """Swap the last two axes (batched matrix transpose)."""
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply(np.concatenate([t.data for t in ts], axis=axis), ts, vjp)


def take_rows(table, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-d table; ``ids`` may have any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-d table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")
    n_rows = table.shape[0]

    def vjp(g):
        out = np.zeros((n_rows, g.shape[-1]), dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (out,)

    return _apply(table.data[ids], (table,), vjp)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _apply(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# --- differentiation --------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` for every named variable on ``tape``.

    Variables the loss does not depend on receive zero arrays.
    """
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    adj: list[np.ndarray | None] = [None] * len(tape.tensors)
    adj[loss.index] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = adj[node.output]
        if g is None:
            continue
        for i, gi in zip(node.inputs, node.vjp(g)):
            if i is None or gi is None:
                continue
            adj[i] = gi if adj[i] is None else adj[i] + gi
    grads = {}
    for name, var in tape.variables.items():
        g = adj[var.index]
        grads[name] = np.zeros_like(var.data) if g is None else np.array(g, dtype=DTYPE)
    return grads


def finite_diff_grad(f: Callable[[Mapping[str, np.ndarray]], float],
                     params: Mapping[str, np.ndarray],
                     epsilon: float = 1e-5,
                     names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of named arrays.

    ``f`` receives a dict of arrays; each coordinate is perturbed in place on
    a private copy and restored before the next one.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    work = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in params.items()}
    grads = {}
    for name in (names if names is not None else list(work)):
        arr = work[name]
        flat = arr.reshape(-1)
        g = np.zeros(flat.size, dtype=DTYPE)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            fp = float(f(work))
            flat[j] = orig - epsilon
            fm = float(f(work))
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                coord = np.unravel_index(j, arr.shape)
                raise FiniteDifferenceError(f"non-finite value perturbing {name}{list(coord)}")
            g[j] = (fp - fm) / (2.0 * epsilon)
        grads[name] = g.reshape(arr.shape)
    return grads


# Norm below which a central difference at epsilon=1e-5 cannot be told from
# roundoff (about eps_machine * |f| / epsilon per coordinate for O(1) losses).
GRAD_CHECK_FLOOR = 1e-6


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative difference ``|a-b| / max(|a|, |b|, floor)``."""
    num = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den


# --- optimisation -----------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``.

    Only names present in ``grads`` are updated.
    """
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise DimensionError(
                f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state
