"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation records its parents and a closure mapping the
output gradient to parent gradients. :func:`backward` sorts the recorded
graph topologically from a scalar root and replays the closures in reverse.

Only leaves (tensors created directly with ``requires_grad=True``)
accumulate gradients across repeated ``backward`` calls; intermediate nodes
hold the gradient of the most recent pass.

Broadcasting is deliberately limited to scalar-with-tensor. Adding a bias
vector to every row of a matrix goes through the explicit :func:`add_bias`.
"""

from __future__ import annotations

import math
import threading
from collections.abc import Iterable, Mapping, Sequence
from contextlib import contextmanager

import numpy as np

from .errors import EmptySupportError, NumericError, PoisonedGradientError, ShapeError

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> Tensor:
        return tsum(self)

    def mean(self) -> Tensor:
        return mean(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- backward


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` ancestor of a scalar root."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def zero_grad(params: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.grad = None


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    """Debug check: raise if any value is NaN or infinite."""
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
    return t


# ---------------------------------------------------------- elementwise


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "add")

    def back(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "sub")

    def back(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "mul")

    def back(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "div")
    out = a.data / b.data

    def back(g):
        ga = _reduce_to(g / b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), back, "div")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free for large |x|
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{op} takes one argument")
        return _UNARY[op](_lift(args[0]))
    if op in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{op} takes two arguments")
        return _BINARY[op](*args)
    raise ValueError(f"unknown elementwise op {op!r}")


# ------------------------------------------------------------ structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), back, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _result(x.data.T, (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {orig} as {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(k, (int, slice)) or k is Ellipsis for k in parts)


def index(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx], copy=True)
    basic = _is_basic(idx)

    def back(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(out, (x,), back, "index")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty part list")
    parts = [_lift(p) for p in parts]
    ndim = parts[0].ndim
    ax = axis % ndim if ndim else 0
    for p in parts:
        if p.ndim != ndim or any(
            d != ref for k, (d, ref) in enumerate(zip(p.shape, parts[0].shape)) if k != ax
        ):
            shapes = [q.shape for q in parts]
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}")
    sizes = [p.shape[ax] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), back, "concat")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every row of ``x`` (explicit row broadcast)."""
    if b.ndim != 1 or x.ndim == 0 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")
    lead = tuple(range(x.ndim - 1))

    def back(g):
        return g, (g.sum(axis=lead) if lead else g)

    return _result(x.data + b.data, (x, b), back, "add_bias")


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),), "sum")


def mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    return mul(tsum(x), 1.0 / x.size)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise EmptySupportError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), back, "softmax")


def softmax_weighted_sum(scores: Tensor, values: Tensor) -> Tensor:
    """Return ``sum_i softmax(scores)_i * values[i]``."""
    if scores.ndim != 1 or values.ndim != 2:
        raise ShapeError(f"softmax_weighted_sum: bad shapes {scores.shape}, {values.shape}")
    m = scores.shape[0]
    if m == 0:
        raise EmptySupportError("softmax_weighted_sum over an empty support")
    if values.shape[0] != m:
        raise ShapeError(f"softmax_weighted_sum: {m} scores vs {values.shape[0]} value rows")
    w = reshape(softmax(scores), (1, m))
    return reshape(matmul(w, values), (values.shape[1],))


def mse(pred: Tensor, target) -> Tensor:
    target = _lift(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    n = pred.size
    if n == 0:
        raise ShapeError("mse of empty tensors")
    diff = pred.data - target.data

    def back(g):
        d = g * (2.0 / n) * diff
        return (d if pred.requires_grad else None), (-d if target.requires_grad else None)

    return _result(np.asarray(np.mean(diff * diff)), (pred, target), back, "mse")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    return mul(x, Tensor(keep / (1.0 - rate)))


# ------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction over a named parameter mapping.

    ``step()`` reads each parameter's ``.grad``; ``step(grads)`` applies an
    explicit name -> gradient mapping instead (used by first-order MAML to
    push adapted-parameter gradients onto the initial parameters). A missing
    gradient counts as zero.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray | None] | None = None) -> None:
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        for name, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise PoisonedGradientError(name)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(
    grads: Mapping[str, np.ndarray | None], max_norm: float
) -> tuple[dict[str, np.ndarray | None], float]:
    """Scale a gradient mapping so its global L2 norm is at most ``max_norm``.

    ``max_norm <= 0`` disables clipping. Returns the (possibly rescaled)
    gradients and the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if max_norm > 0.0 and total > max_norm:
        scale = max_norm / total
        return {k: (None if g is None else g * scale) for k, g in grads.items()}, total
    return dict(grads), total


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """In-place variant of :func:`clip_gradients` on the parameters' ``.grad``."""
    clipped, total = clip_gradients({k: p.grad for k, p in params.items()}, max_norm)
    for k, p in params.items():
        p.grad = clipped[k]
    return total
