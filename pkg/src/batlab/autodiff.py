"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation builds a fresh piece of tape: the output tensor remembers its
parents and a backward rule, and :func:`backward` replays the recorded graph in
reverse topological order. Gradients are needed with respect to both model
parameters (training) and inputs (attack generation), so any tensor may be
marked ``requires_grad``.

Conventions:
  * double precision everywhere,
  * ``relu`` passes zero gradient at exactly 0,
  * ``backward`` accumulates into ``.grad`` across calls until reset,
  * in checked mode every completed operation must produce finite values.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, DomainError

ArrayLike = Union[float, int, Sequence, np.ndarray]

# Checked mode: validate finiteness after each op and the log domain before it.
_checked = True


def set_checked(enabled: bool) -> bool:
    """Enable/disable checked mode; returns the previous setting."""
    global _checked
    previous = _checked
    _checked = bool(enabled)
    return previous


def is_checked() -> bool:
    return _checked


class Tensor:
    """A dense array plus the tape bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_rule")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_rule: Optional[Callable[[np.ndarray], tuple]] = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tsum(self, axis=axis)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _check_result(out: np.ndarray, op_name: str) -> None:
    if _checked and not np.all(np.isfinite(out)):
        raise DomainError(f"{op_name} produced non-finite values")


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...],
          backward_rule: Callable[[np.ndarray], tuple], op_name: str) -> Tensor:
    _check_result(out_data, op_name)
    out = Tensor(out_data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward_rule = backward_rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic --------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), rule, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as e:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from e

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), rule, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from e

    def rule(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), rule, "mul")


def neg(a: Tensor) -> Tensor:
    def rule(g):
        return (-g,)

    return _make(-a.data, (a,), rule, "neg")


# -- linear algebra ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs rank-2 operands, got ranks {a.data.ndim} and {b.data.ndim}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), rule, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a rank-2 operand, got rank {a.data.ndim}")

    def rule(g):
        return (g.T,)

    return _make(a.data.T, (a,), rule, "transpose")


# -- nonlinearities and maps -------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def rule(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), rule, "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def rule(g):
        return (g * out,)

    return _make(out, (a,), rule, "exp")


def log(a: Tensor) -> Tensor:
    if _checked and np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")

    def rule(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), rule, "log")


# -- reductions and shape ----------------------------------------------


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        def rule(g):
            return (np.broadcast_to(g, a.shape).copy(),)

        return _make(np.asarray(a.data.sum()), (a,), rule, "sum")

    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"sum: axis {axis} out of range for shape {a.shape}")

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), rule, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def rule(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(np.asarray(a.data.mean()), (a,), rule, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    def rule(g):
        return (g.reshape(a.shape),)

    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from e
    return _make(out, (a,), rule, "reshape")


# -- fused classification loss -----------------------------------------


def cross_entropy_rows(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-sample -log softmax(logits)[label], stabilized by max subtraction.

    Returns a length-batch tensor; the batched mean is
    :func:`softmax_cross_entropy`. Gradient per row is
    ``(softmax(logits) - onehot(label)) * upstream``.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy_rows needs [batch x classes] logits, got {logits.shape}")
    batch, classes = logits.shape
    if batch < 1:
        raise ContractError("cross_entropy_rows needs batch >= 1")
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.min() < 0 or labels.max() >= classes:
        raise IndexError(f"label out of range [0, {classes})")
    labels = labels.astype(np.intp)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    sumexp = expz.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sumexp)
    probs = expz / sumexp
    rows = np.arange(batch)
    out = -log_probs[rows, labels]

    def rule(g):
        grad = probs * g[:, None]
        grad[rows, labels] -= g
        return (grad,)

    return _make(out, (logits,), rule, "cross_entropy_rows")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch; gradient is (softmax - onehot)/batch."""
    return tmean(cross_entropy_rows(logits, labels))


# -- backward pass -----------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    """Parents-first ordering of the recorded graph reachable from root.

    Iterative so deep tapes cannot hit the recursion limit; the visit order is
    a pure function of graph structure, which keeps backward deterministic.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` with d(root)/d(tensor) for every reachable tensor.

    Repeated calls without ``zero_grad`` accumulate gradients.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return

    order = _topological_order(root)
    flows: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._backward_rule is None:
            continue
        parent_grads = node._backward_rule(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            prev = flows.get(id(parent))
            flows[id(parent)] = pg if prev is None else prev + pg
