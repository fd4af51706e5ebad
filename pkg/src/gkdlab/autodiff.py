"""Define-by-run reverse-mode autodiff on float64 numpy arrays.

Every backward rule is written in terms of the same differentiable
primitives, so gradients produced with ``create_graph=True`` can be
differentiated again (double backpropagation).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def set_grad_enabled(mode: bool):
    prev = is_grad_enabled()
    _state.enabled = mode
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp

    def __repr__(self):
        return f"Node({self.op}, n_inputs={len(self.inputs)})"


class Tensor:
    """An array plus an optional link into the active computation graph."""

    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
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
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out.node = Node(op, inputs, vjp)
    return out


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    out = sum_(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, tuple(shape))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def vjp(g, out):
        ga = sum_to(g, a.shape) if a.requires_grad else None
        gb = sum_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def vjp(g, out):
        ga = sum_to(g, a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, -1.0), b.shape) if b.requires_grad else None
        return ga, gb

    return _record("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def vjp(g, out):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", a.data * b.data, (a, b), vjp)


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("elementwise-divide", a, b)
    if np.any(b.data == 0):
        raise DomainError("elementwise-divide: division by zero")

    def vjp(g, out):
        ga = sum_to(divide(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = sum_to(mul(mul(g, out), -1.0) / b, b.shape)
        return ga, gb

    return _record("elementwise-divide", a.data / b.data, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from None

    def vjp(g, out):
        ga = sum_to(matmul(g, swapaxes(b)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(swapaxes(a), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


def exp(x) -> Tensor:
    x = as_tensor(x)
    return _record("exp", np.exp(x.data), (x,), lambda g, out: (mul(g, out),))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: input has non-positive entries")
    return _record("log", np.log(x.data), (x,), lambda g, out: (divide(g, x),))


def tanh(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g, out):
        return (mul(g, sub(1.0, square(out))),)

    return _record("tanh", np.tanh(x.data), (x,), vjp)


_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    out = 0.5 * xd * (1.0 + np.tanh(_GELU_K * (xd + _GELU_C * xd**3)))

    def vjp(g, out):
        x2 = square(x)
        t = tanh(mul(x, add(1.0, mul(x2, _GELU_C))) * _GELU_K)
        dt = mul(sub(1.0, square(t)), add(1.0, mul(x2, 3.0 * _GELU_C)) * _GELU_K)
        deriv = add(mul(add(1.0, t), 0.5), mul(mul(x, dt), 0.5))
        return (mul(g, deriv),)

    return _record("gelu", out, (x,), vjp)


def square(x) -> Tensor:
    x = as_tensor(x)
    return _record("square", x.data * x.data, (x,), lambda g, out: (mul(g, mul(x, 2.0)),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("sqrt: input has non-positive entries")

    def vjp(g, out):
        return (divide(mul(g, 0.5), out),)

    return _record("sqrt", np.sqrt(x.data), (x,), vjp)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def broadcast_to(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return _record("broadcast_to", out, (x,), lambda g, out: (sum_to(g, x.shape),))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def vjp(g, out):
        return (broadcast_to(reshape(g, kept_shape), x.shape),)

    return _record("sum", np.sum(x.data, axis=axes, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def vjp(g, out):
        return (broadcast_to(reshape(g, kept_shape), x.shape) / float(count),)

    return _record("mean", np.mean(x.data, axis=axes, keepdims=keepdims), (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _record("reshape", out, (x,), lambda g, out: (reshape(g, x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _record(
        "transpose", np.transpose(x.data, axes), (x,), lambda g, out: (transpose(g, inverse),)
    )


def swapaxes(x) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g, out):
        inner = sum_(mul(g, out), axis=-1, keepdims=True)
        return (mul(out, sub(g, inner)),)

    return _record("softmax-last-axis", out, (x,), vjp)


def l2norm(x, eps: float = NORM_EPS) -> Tensor:
    """sqrt(sum(x**2, -1) + eps), keeping the reduced axis."""
    x = as_tensor(x)
    out = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True) + eps)

    def vjp(g, out):
        return (mul(g, divide(x, out)),)

    return _record("l2norm-last-axis", out, (x,), vjp)


def max_last(x) -> Tensor:
    """Maximum over the last axis (reduced). Ties route gradient to the first argmax."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=-1)
    onehot = np.zeros_like(x.data)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g, out):
        return (mul(reshape(g, g.shape + (1,)), onehot),)

    return _record("max-last-axis", out, (x,), vjp)


def index_select(x, indices, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("index-select: indices must be integers")
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"index-select: index out of range for axis {axis} of size {n}")

    def vjp(g, out):
        return (index_add(g, idx, axis, n),)

    return _record("index-select", np.take(x.data, idx, axis=axis), (x,), vjp)


def index_add(g, indices, axis: int, size: int) -> Tensor:
    """Scatter-add ``g`` into zeros along ``axis``; adjoint of index_select."""
    g = as_tensor(g)
    idx = np.asarray(indices)
    lead = g.shape[:axis]
    trail = g.shape[axis + idx.ndim :]
    out = np.zeros(lead + (size,) + trail)
    moved = np.moveaxis(out, axis, 0)
    src = np.moveaxis(g.data.reshape(lead + (idx.size,) + trail), axis, 0)
    np.add.at(moved, idx.reshape(-1), src)

    def vjp(gg, out):
        return (index_select(gg, idx, axis),)

    return _record("index-add", out, (g,), vjp)


def concatenate(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concatenate: incompatible shapes {[x.shape for x in xs]} on axis {axis}"
        ) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def vjp(g, out):
        return tuple(
            index_select(g, np.arange(bounds[i], bounds[i + 1]), ax) if x.requires_grad else None
            for i, x in enumerate(xs)
        )

    return _record("concatenate", out, xs, vjp)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "gelu": gelu,
    "softmax-last-axis": softmax,
    "sum": sum_,
    "mean": mean,
    "square": square,
    "sqrt": sqrt,
    "l2norm-last-axis": l2norm,
    "elementwise-divide": divide,
    "index-select": index_select,
    "concatenate": lambda *xs, axis=0: concatenate(xs, axis=axis),
    "reshape": reshape,
    "max-last-axis": max_last,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
    "index-add": index_add,
}


def apply_primitive(op_id: str, inputs: Sequence, **attrs) -> Tensor:
    try:
        fn = PRIMITIVES[op_id]
    except KeyError:
        raise ValueError(f"unknown primitive {op_id!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def _toposort(root: Tensor, targets: set[int]) -> tuple[list[Tensor], set[int]]:
    """Reverse-reachable nodes from ``root`` in topological order, and the ids
    of those through which some target can be reached."""
    order: list[Tensor] = []
    visited: set[int] = set()
    relevant: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        tid = id(t)
        if done:
            if tid in targets or (
                t.node is not None and any(id(p) in relevant for p in t.node.inputs)
            ):
                relevant.add(tid)
            order.append(t)
            continue
        if tid in visited:
            continue
        visited.add(tid)
        stack.append((t, True))
        if t.node is not None:
            for p in reversed(t.node.inputs):
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
    return order, relevant


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output=None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    ``inputs`` may be leaves or intermediate graph nodes. Inputs the output
    does not depend on receive zeros. With ``create_graph`` the returned
    tensors are attached to the graph and can be differentiated again.
    """
    if not isinstance(output, Tensor) or not output.requires_grad:
        raise GraphError("output is detached from the computation graph")
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        grad_output = np.ones(output.shape)
    targets = {id(t) for t in inputs}
    order, relevant = _toposort(output, targets)

    with set_grad_enabled(create_graph):
        cot: dict[int, Tensor] = {id(output): as_tensor(grad_output)}
        for t in reversed(order):
            g = cot.get(id(t))
            if g is None or t.node is None or id(t) not in relevant:
                continue
            if id(t) in targets and not any(id(p) in relevant for p in t.node.inputs):
                continue
            parent_grads = t.node.vjp(g, t)
            for p, pg in zip(t.node.inputs, parent_grads):
                if pg is None or not p.requires_grad or id(p) not in relevant:
                    continue
                prev = cot.get(id(p))
                cot[id(p)] = pg if prev is None else add(prev, pg)
        results = []
        for t in inputs:
            g = cot.get(id(t))
            results.append(g if g is not None else Tensor(np.zeros(t.shape)))
    if not create_graph:
        results = [Tensor(r.data) for r in results]
    return results


def leaves(output: Tensor) -> list[Tensor]:
    """All requires_grad leaves reachable from ``output``, in first-visit order."""
    order, _ = _toposort(output, set())
    return [t for t in order if t.is_leaf and t.requires_grad]


def backward(output: Tensor, create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Map each requires_grad leaf under ``output`` to d(output)/d(leaf)."""
    if not isinstance(output, Tensor) or not output.requires_grad:
        raise GraphError("output is detached from the computation graph")
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    ls = leaves(output)
    gs = grad(output, ls, create_graph=create_graph)
    return dict(zip(ls, gs))


def finite_difference_gradient(
    f: Callable[[Tensor], Tensor | float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``.

    Grad mode is left on: ``f`` may itself take gradients internally.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    out = np.zeros(x0.size)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(x0.copy())))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(x0.copy())))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"non-finite function value at coordinate {i}")
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x0.shape)


def finite_difference_coords(
    loss_fn: Callable[[], Tensor], param: Tensor, coords: Iterable[tuple], h: float = 1e-5
) -> np.ndarray:
    """Central differences of ``loss_fn()`` on chosen coordinates of ``param``.

    ``param.data`` is perturbed in place and restored, so ``loss_fn`` must
    rebuild its graph from the parameter on every call.
    """
    out = []
    for c in coords:
        orig = param.data[c]
        param.data[c] = orig + h
        fp = _scalar(loss_fn())
        param.data[c] = orig - h
        fm = _scalar(loss_fn())
        param.data[c] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"non-finite loss at coordinate {c}")
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)
