"""Dense 2-D float64 kernel with recorded reverse-mode differentiation.

Everything numerical in this package runs on :class:`Tensor2D`: a row-major
matrix of 64-bit floats that doubles as a node in a computation graph. Each
operation returns a fresh node that remembers its parents and how to push
gradients back to them; :func:`backward` walks the recorded graph in reverse
topological order. Trainable values are :class:`Parameter` nodes, whose
gradients persist and accumulate across backward calls until ``zero_grad``.

Conventions: vectors are column vectors of shape ``(n, 1)``; scalar results
are ``(1, 1)``. There is no broadcasting and no batching - sequences are
short and fixed-length here, so explicit loops are the intended style.

:func:`finite_difference_grad` is the independent oracle for the analytic
backward passes. It evaluates the function being checked through plain
forward calls only and never consults any ``.grad`` field.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "GraphError",
    "Tensor2D",
    "Parameter",
    "matmul",
    "add",
    "hadamard",
    "scale",
    "tanh_map",
    "sigmoid_map",
    "softmax",
    "transpose",
    "hstack",
    "vstack",
    "pick",
    "sum_all",
    "mean_columns",
    "neg_log",
    "backward",
    "finite_difference_grad",
]


class DimensionError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class GraphError(RuntimeError):
    """backward() was invoked without a usable recorded computation."""


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("empty tensors are not supported")
    return arr


class Tensor2D:
    """Row-major float64 matrix and computation-graph node.

    ``data`` holds the value, ``grad`` the accumulated gradient of the same
    shape. Constructing from user data copies and checks finiteness; results
    of recorded operations skip those checks (they are produced internally
    from already-validated inputs).
    """

    __slots__ = ("data", "grad", "_parents", "_backprop")

    def __init__(self, data):
        self.data = _as_matrix(data)
        if not np.isfinite(self.data).all():
            raise ValueError("tensor entries must be finite")
        self.grad = np.zeros_like(self.data)
        self._parents: tuple = ()
        self._backprop: Callable[[], None] | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backprop) -> "Tensor2D":
        out = Tensor2D.__new__(Tensor2D)
        out.data = data
        out.grad = np.zeros_like(data)
        out._parents = parents
        out._backprop = backprop
        return out

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Tensor2D":
        if rows <= 0 or cols <= 0:
            raise ValueError(f"rows and cols must be positive, got ({rows}, {cols})")
        return cls(np.zeros((rows, cols)))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Entries in row-major order, length rows*cols."""
        return self.data.ravel()

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ValueError(f"item() requires a (1, 1) tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.data.shape})"


class Parameter(Tensor2D):
    """Trainable value/gradient pair.

    Unlike intermediate nodes, a Parameter's gradient survives across
    backward calls (each call adds its exact contribution) until explicitly
    reset with ``zero_grad``. ``name`` is used in optimizer diagnostics.
    """

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.name = name

    def __repr__(self) -> str:
        label = self.name or "?"
        return f"Parameter({label}, shape={self.data.shape})"


def _check_same_shape(op: str, a: Tensor2D, b: Tensor2D) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def matmul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    """Matrix product, shape (a.rows, b.cols)."""
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ for shapes {a.data.shape} and {b.data.shape}"
        )
    out = Tensor2D._result(a.data @ b.data, (a, b), None)

    def backprop():
        a.grad += out.grad @ b.data.T
        b.grad += a.data.T @ out.grad

    out._backprop = backprop
    return out


def add(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    """Elementwise sum of two same-shape tensors."""
    _check_same_shape("add", a, b)
    out = Tensor2D._result(a.data + b.data, (a, b), None)

    def backprop():
        a.grad += out.grad
        b.grad += out.grad

    out._backprop = backprop
    return out


def hadamard(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    """Elementwise product of two same-shape tensors."""
    _check_same_shape("hadamard", a, b)
    out = Tensor2D._result(a.data * b.data, (a, b), None)

    def backprop():
        a.grad += out.grad * b.data
        b.grad += out.grad * a.data

    out._backprop = backprop
    return out


def scale(a: Tensor2D, k: float) -> Tensor2D:
    """Multiply every entry by the constant ``k``."""
    k = float(k)
    out = Tensor2D._result(a.data * k, (a,), None)

    def backprop():
        a.grad += out.grad * k

    out._backprop = backprop
    return out


def tanh_map(t: Tensor2D) -> Tensor2D:
    """Elementwise tanh; outputs lie in (-1, 1)."""
    y = np.tanh(t.data)
    out = Tensor2D._result(y, (t,), None)

    def backprop():
        t.grad += out.grad * (1.0 - y * y)

    out._backprop = backprop
    return out


def sigmoid_map(t: Tensor2D) -> Tensor2D:
    """Elementwise logistic sigmoid; outputs lie in (0, 1)."""
    y = np.empty_like(t.data)
    pos = t.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-t.data[pos]))
    ez = np.exp(t.data[~pos])
    y[~pos] = ez / (1.0 + ez)
    out = Tensor2D._result(y, (t,), None)

    def backprop():
        t.grad += out.grad * y * (1.0 - y)

    out._backprop = backprop
    return out


def softmax(v: Tensor2D) -> Tensor2D:
    """Stable softmax of a vector (row or column); output sums to 1.

    Computed with max-subtraction, so shifting all inputs by a constant
    leaves the output unchanged.
    """
    r, c = v.data.shape
    if r != 1 and c != 1:
        raise ValueError(f"softmax expects a vector, got shape {(r, c)}")
    e = np.exp(v.data - v.data.max())
    y = e / e.sum()
    out = Tensor2D._result(y, (v,), None)

    def backprop():
        inner = float((y * out.grad).sum())
        v.grad += y * (out.grad - inner)

    out._backprop = backprop
    return out


def transpose(t: Tensor2D) -> Tensor2D:
    out = Tensor2D._result(t.data.T.copy(), (t,), None)

    def backprop():
        t.grad += out.grad.T

    out._backprop = backprop
    return out


def hstack(parts: Sequence[Tensor2D]) -> Tensor2D:
    """Concatenate tensors side by side (all must share a row count)."""
    if not parts:
        raise ValueError("hstack of no tensors")
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.shape[0] != rows:
            raise DimensionError(
                f"hstack: row counts differ ({rows} vs {p.data.shape[0]})"
            )
    widths = [p.data.shape[1] for p in parts]
    out = Tensor2D._result(np.hstack([p.data for p in parts]), tuple(parts), None)

    def backprop():
        at = 0
        for p, w in zip(parts, widths):
            p.grad += out.grad[:, at : at + w]
            at += w

    out._backprop = backprop
    return out


def vstack(parts: Sequence[Tensor2D]) -> Tensor2D:
    """Concatenate tensors top to bottom (all must share a column count)."""
    if not parts:
        raise ValueError("vstack of no tensors")
    cols = parts[0].data.shape[1]
    for p in parts:
        if p.data.shape[1] != cols:
            raise DimensionError(
                f"vstack: column counts differ ({cols} vs {p.data.shape[1]})"
            )
    heights = [p.data.shape[0] for p in parts]
    out = Tensor2D._result(np.vstack([p.data for p in parts]), tuple(parts), None)

    def backprop():
        at = 0
        for p, h in zip(parts, heights):
            p.grad += out.grad[at : at + h, :]
            at += h

    out._backprop = backprop
    return out


def pick(t: Tensor2D, i: int, j: int) -> Tensor2D:
    """Select one entry as a (1, 1) tensor."""
    r, c = t.data.shape
    if not (0 <= i < r and 0 <= j < c):
        raise IndexError(f"pick({i}, {j}) out of range for shape {(r, c)}")
    out = Tensor2D._result(t.data[i : i + 1, j : j + 1].copy(), (t,), None)

    def backprop():
        t.grad[i, j] += out.grad[0, 0]

    out._backprop = backprop
    return out


def sum_all(t: Tensor2D) -> Tensor2D:
    """Sum of all entries as a (1, 1) tensor."""
    out = Tensor2D._result(np.array([[t.data.sum()]]), (t,), None)

    def backprop():
        t.grad += out.grad[0, 0]

    out._backprop = backprop
    return out


def mean_columns(t: Tensor2D) -> Tensor2D:
    """Mean over columns, returned as a column vector."""
    n = t.data.shape[1]
    out = Tensor2D._result(t.data.mean(axis=1, keepdims=True), (t,), None)

    def backprop():
        t.grad += out.grad / n

    out._backprop = backprop
    return out


def neg_log(t: Tensor2D, floor: float = 1e-12) -> Tensor2D:
    """Elementwise -log(max(t, floor)).

    The floor guards against -inf on entries that have underflowed to zero;
    entries at or below the floor get zero gradient (the max branch).
    """
    clipped = np.maximum(t.data, floor)
    out = Tensor2D._result(-np.log(clipped), (t,), None)
    active = t.data > floor

    def backprop():
        t.grad += np.where(active, -out.grad / clipped, 0.0)

    out._backprop = backprop
    return out


def _topo_order(root: Tensor2D) -> list[Tensor2D]:
    # Iterative post-order: mLSTM graphs over long strings overflow the
    # recursion limit.
    order: list[Tensor2D] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor2D, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor2D) -> None:
    """Accumulate d(root)/d(node) into ``grad`` for every node below ``root``.

    ``root`` must be scalar and must be the result of at least one recorded
    operation. Intermediate gradients are reset on every call; Parameter
    gradients accumulate across calls (exactly one contribution per call)
    until ``zero_grad``.
    """
    if root.data.shape != (1, 1):
        raise GraphError(f"backward requires a scalar root, got shape {root.data.shape}")
    if not root._parents:
        raise GraphError("backward called before any recorded computation")
    order = _topo_order(root)
    for node in order:
        if not isinstance(node, Parameter):
            node.grad[:] = 0.0
    root.grad[:] = 1.0
    for node in reversed(order):
        if node._backprop is not None:
            node._backprop()


def _scalar(x) -> float:
    if isinstance(x, Tensor2D):
        return x.item()
    return float(x)


def finite_difference_grad(
    f: Callable[[Tensor2D], float], at: Tensor2D, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    Perturbs one coordinate at a time: (f(x + h e_ij) - f(x - h e_ij)) / 2h.
    ``f`` receives a fresh plain Tensor2D and may return a float or a
    (1, 1) tensor.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(at.data if isinstance(at, Tensor2D) else at, dtype=np.float64)
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        ij = it.multi_index
        plus = base.copy()
        plus[ij] += h
        minus = base.copy()
        minus[ij] -= h
        grad[ij] = (_scalar(f(Tensor2D(plus))) - _scalar(f(Tensor2D(minus)))) / (2.0 * h)
    return grad
