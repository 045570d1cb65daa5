"""Dense neural-network substrate with reverse-mode differentiation.

Everything is 64-bit float. A ``Tensor`` is a node in a define-by-run graph:
ops build the graph as they compute, and :func:`backward` replays it in
reverse to produce exact gradients for every :class:`ParamBlock` reachable
from a scalar loss. Graphs are rebuilt per minibatch; nothing is cached.

``finite_diff_grad`` is the independent test oracle for the whole module and
must never share code with the reverse-mode path.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A published value contains NaN or Inf."""


def assert_all_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite entries")


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A float64 array plus the graph edges needed for reverse mode.

    ``parents`` and ``_push`` are empty for leaves. ``_push(grad, sink)``
    propagates an upstream gradient to the parents through ``sink``.
    """

    __slots__ = ("array", "parents", "_push", "requires_grad", "param")

    # Defer mixed ndarray/Tensor arithmetic to the reflected operators below.
    __array_ufunc__ = None

    def __init__(
        self,
        array: np.ndarray,
        parents: tuple["Tensor", ...] = (),
        push: Callable | None = None,
        requires_grad: bool = False,
        param: "ParamBlock | None" = None,
    ):
        self.array = array
        self.parents = parents
        self._push = push
        self.requires_grad = requires_grad
        self.param = param

    @staticmethod
    def const(value) -> "Tensor":
        return Tensor(_as_array(value))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries."""
        return self.array.ravel()

    def item(self) -> float:
        if self.array.size != 1:
            raise ShapeMismatchError(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(()))

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        assert_all_finite(self.array, what)
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; floats and ndarrays are coerced to constant leaves.
    def __add__(self, other) -> "Tensor":
        return add(self, _coerce(other))

    def __radd__(self, other) -> "Tensor":
        return add(_coerce(other), self)

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_coerce(other)))

    def __rsub__(self, other) -> "Tensor":
        return add(_coerce(other), neg(self))

    def __mul__(self, other) -> "Tensor":
        return mul(self, _coerce(other))

    def __rmul__(self, other) -> "Tensor":
        return mul(_coerce(other), self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, _coerce(other))


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor.const(value)


class ParamBlock:
    """A named trainable array and its gradient slot (same shape).

    ``backward`` overwrites ``grad`` on every call, so calling it twice on
    the same loss yields identical results.
    """

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value) -> None:
        arr = _as_array(value).copy()
        assert_all_finite(arr, f"parameter {name!r}")
        self.name = name
        self.value = Tensor(arr, requires_grad=True)
        self.value.param = self
        self.grad = Tensor(np.zeros_like(arr))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def clone(self) -> "ParamBlock":
        return ParamBlock(self.name, self.value.array)

    def __repr__(self) -> str:
        return f"ParamBlock({self.name!r}, shape={self.shape})"


def check_unique_names(blocks: Iterable[ParamBlock]) -> None:
    seen: set[str] = set()
    for block in blocks:
        if block.name in seen:
            raise ValueError(f"duplicate parameter name {block.name!r}")
        seen.add(block.name)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(array: np.ndarray, parents: tuple[Tensor, ...], push: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(array)
    return Tensor(array, parents=parents, push=push, requires_grad=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.array + b.array

    def push(g, sink):
        sink(a, _unbroadcast(g, a.array.shape))
        sink(b, _unbroadcast(g, b.array.shape))

    return _node(out, (a, b), push)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.array * b.array

    def push(g, sink):
        sink(a, _unbroadcast(g * b.array, a.array.shape))
        sink(b, _unbroadcast(g * a.array, b.array.shape))

    return _node(out, (a, b), push)


def neg(a: Tensor) -> Tensor:
    def push(g, sink):
        sink(a, -g)

    return _node(-a.array, (a,), push)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.array.ndim != 2 or b.array.ndim != 2 or a.array.shape[1] != b.array.shape[0]:
        raise ShapeMismatchError(
            f"matmul shapes do not conform: {a.array.shape} @ {b.array.shape}"
        )
    out = a.array @ b.array

    def push(g, sink):
        sink(a, g @ b.array.T)
        sink(b, a.array.T @ g)

    return _node(out, (a, b), push)


def transpose(a: Tensor) -> Tensor:
    def push(g, sink):
        sink(a, g.T)

    return _node(a.array.T, (a,), push)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.array.shape
    out = a.array.reshape(tuple(shape))

    def push(g, sink):
        sink(a, g.reshape(orig))

    return _node(out, (a,), push)


def narrow(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along the last axis."""
    out = a.array[..., start:stop]

    def push(g, sink):
        full = np.zeros_like(a.array)
        full[..., start:stop] = g
        sink(a, full)

    return _node(out, (a,), push)


def row_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along the first axis."""
    out = a.array[start:stop]

    def push(g, sink):
        full = np.zeros_like(a.array)
        full[start:stop] = g
        sink(a, full)

    return _node(out, (a,), push)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); shape preserved."""
    out = np.maximum(a.array, 0.0)

    def push(g, sink):
        sink(a, g * (a.array > 0.0))

    return _node(out, (a,), push)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.array)

    def push(g, sink):
        sink(a, g * out)

    return _node(out, (a,), push)


def log(a: Tensor) -> Tensor:
    out = np.log(a.array)

    def push(g, sink):
        sink(a, g / a.array)

    return _node(out, (a,), push)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over axis 0; a [S×m] input becomes an [m] vector."""
    n = a.array.shape[0]
    out = a.array.mean(axis=0)

    def push(g, sink):
        sink(a, np.broadcast_to(g / n, a.array.shape).copy())

    return _node(out, (a,), push)


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out = np.asarray(a.array.sum())

    def push(g, sink):
        sink(a, np.broadcast_to(g, a.array.shape).copy())

    return _node(out, (a,), push)


def dense_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ W + b`` for x [B×d_in], W [d_in×d_out], b [d_out]."""
    if (
        x.array.ndim != 2
        or W.array.ndim != 2
        or b.array.ndim != 1
        or x.array.shape[1] != W.array.shape[0]
        or b.array.shape[0] != W.array.shape[1]
    ):
        raise ShapeMismatchError(
            f"dense_forward shapes do not conform: x {x.array.shape}, "
            f"W {W.array.shape}, b {b.array.shape}"
        )
    return add(matmul(x, W), b)


def dropout(a: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(a.array.shape) >= rate) / (1.0 - rate)
    out = a.array * mask

    def push(g, sink):
        sink(a, g * mask)

    return _node(out, (a,), push)


def softmax_nll(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Summed negative log-likelihood of integer labels under row softmax.

    Uses the log-sum-exp shift, so arbitrarily large logits stay stable.
    """
    z = logits.array
    if z.ndim != 2:
        raise ShapeMismatchError(f"softmax_nll expects [B×K] logits, got {z.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != z.shape[0]:
        raise ShapeMismatchError(
            f"softmax_nll labels shape {y.shape} does not match batch {z.shape[0]}"
        )
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise IndexError(f"label out of range [0, {z.shape[1]})")
    y = y.astype(np.intp)
    shift = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1))
    rows = np.arange(z.shape[0])
    out = np.asarray((lse - shift[rows, y]).sum())

    def push(g, sink):
        p = np.exp(shift)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, y] -= 1.0
        sink(logits, g * p)

    return _node(out, (logits,), push)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-accumulate d(loss)/d(param) for every reachable ParamBlock.

    The loss must be scalar. Gradients are written into each block's
    ``grad`` tensor (overwriting previous contents) and also returned by
    name. Repeated calls on the same graph give identical results.
    """
    if loss.array.size != 1:
        raise ShapeMismatchError(f"backward root must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.array)}
    out: dict[str, np.ndarray] = {}
    if not loss.requires_grad:
        return out

    def sink(node: Tensor, g: np.ndarray) -> None:
        if not node.requires_grad:
            return
        key = id(node)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    for node in reversed(_topo_order(loss)):
        g = grads.get(id(node))
        if g is None:
            continue
        if node.param is not None:
            node.param.grad.array[...] = g
            out[node.param.name] = node.param.grad.array
        if node._push is not None:
            node._push(g, sink)
    return out


def finite_diff_grad(
    f: Callable[[], float],
    params: Sequence[ParamBlock],
    eps: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient oracle: (f(p+eps) - f(p-eps)) / (2 eps).

    ``f`` is evaluated with the blocks' current values perturbed one
    coordinate at a time and must be deterministic under fixed noise.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    grads: dict[str, np.ndarray] = {}
    for block in params:
        flat = block.value.array.ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * eps)
        grads[block.name] = g.reshape(block.value.array.shape)
    return grads
