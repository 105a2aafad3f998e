"""Dense float32 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents
and a closure mapping the output gradient to parent gradients.  The graph
is rebuilt on every forward pass; :func:`backward` walks it once in
reverse topological order and then releases it, so calling ``backward``
a second time on the same graph raises ``RuntimeError``.

Storage is float32.  Reductions (sums, means) accumulate in float64 and
cast the result back.  :func:`precision` temporarily switches new tensors
to float64; :func:`grad_check` uses it for the finite-difference side.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
MAX_RANK = 5
_dtype = [DTYPE]


@contextlib.contextmanager
def precision(dtype):
    """Create tensors with ``dtype`` inside the block (float32 outside)."""
    _dtype.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.pop()


def current_dtype():
    return _dtype[-1]


class GraphError(RuntimeError):
    """Raised when a graph is misused (non-scalar loss, reused graph)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        arr = np.ascontiguousarray(data, dtype=_dtype[-1])
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > MAX_RANK or 0 in arr.shape:
            raise ValueError(f"unsupported tensor shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are treated as constants
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return scale(self, 1.0 / other)


def build_leaf(shape: Sequence[int], data, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor from a flat row-major buffer."""
    flat = np.asarray(data, dtype=DTYPE).reshape(-1)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != flat.size:
        raise ValueError(f"shape {shape} needs {int(np.prod(shape))} values, got {flat.size}")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def make_node(data: np.ndarray, parents: Iterable[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Register an op output.  ``backward_fn(g)`` returns one gradient per parent (or None)."""
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a shape-(1,) loss.

    Returns a mapping from every ``requires_grad`` leaf reachable from
    ``loss`` to its gradient; each leaf's ``.grad`` is set as well.  The
    graph is released afterwards.
    """
    if loss.shape != (1,):
        raise GraphError(f"backward needs a scalar loss of shape (1,), got {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(1, dtype=loss.data.dtype)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        if node._released:
            raise GraphError("graph was already consumed by a previous backward() call")
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g
            leaves[node] = g
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=p.data.dtype)
                if pg.shape != p.shape:
                    raise GraphError(f"{node.op}: gradient shape {pg.shape} != {p.shape}")
                prev = grads.get(id(p))
                grads[id(p)] = pg.copy() if prev is None else prev + pg
        node._released = True
        node._backward = None
    return leaves


def grad_check(fn: Callable[[Tensor], Tensor], x, h: float = 1e-3,
               exclude: np.ndarray | None = None, indices: Iterable[int] | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps a tensor to a shape-(1,) tensor.  The analytic gradient is
    taken at float32; the central differences re-run ``fn`` with float64
    tensors.  Elements flagged in ``exclude`` (e.g. within ``h`` of a ReLU
    kink) are skipped; ``indices`` restricts the check to some flat positions.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ValueError("h must lie in [1e-4, 1e-2]")
    x = np.array(x, dtype=DTYPE)
    leaf = Tensor(x, requires_grad=True)
    out = fn(leaf)
    if out.shape != (1,):
        raise GraphError("grad_check closure must return a scalar tensor")
    analytic = backward(out).get(leaf, np.zeros_like(x)).astype(np.float64)

    flat = x.reshape(-1).astype(np.float64)
    skip = np.zeros(flat.size, bool) if exclude is None else np.asarray(exclude, bool).reshape(-1)
    worst = 0.0
    for i in (range(flat.size) if indices is None else indices):
        if skip[i]:
            continue
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        with precision(np.float64):
            fp = fn(Tensor(plus.reshape(x.shape))).data[0]
            fm = fn(Tensor(minus.reshape(x.shape))).data[0]
        numeric = (fp - fm) / (plus[i] - minus[i])
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# ----------------------------------------------------------------------
# elementwise and reduction primitives


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return make_node(a.data * k, (a,), lambda g: (g * k,), "scale")


def add_scalar(a: Tensor, k: float) -> Tensor:
    return make_node(a.data + float(k), (a,), lambda g: (g,), "add_scalar")


def square(a: Tensor) -> Tensor:
    return make_node(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    total = np.sum(a.data, dtype=np.float64)
    return make_node(np.array([total]), (a,),
                     lambda g: (np.full(a.shape, g[0], dtype=a.data.dtype),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    total = np.sum(a.data, dtype=np.float64) / n
    return make_node(np.array([total]), (a,),
                     lambda g: (np.full(a.shape, g[0] / n, dtype=a.data.dtype),), "mean")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Full contraction sum(a * b), accumulated in float64."""
    _check_same(a, b, "dot")
    total = np.dot(a.data.reshape(-1).astype(np.float64), b.data.reshape(-1).astype(np.float64))
    return make_node(np.array([total]), (a, b),
                     lambda g: (g[0] * b.data, g[0] * a.data), "dot")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def slice_range(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the first axis."""
    if not 0 <= start < stop <= a.shape[0]:
        raise ValueError(f"bad slice [{start}:{stop}] of extent {a.shape[0]}")

    def _bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return make_node(a.data[start:stop], (a,), _bw, "slice")


def weighted_sum(terms: Sequence[tuple[float, Tensor]]) -> Tensor:
    """Σ w_i · t_i over scalar tensors."""
    live = [(float(w), t) for w, t in terms]
    total = np.float64(0.0)
    for w, t in live:
        total += w * np.float64(t.data[0])
    return make_node(np.array([total]), [t for _, t in live],
                     lambda g: tuple(g * w for w, _ in live), "weighted_sum")
