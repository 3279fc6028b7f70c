"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable quantity in the training pipeline flows through this
module. An operation records its parents and a backward rule on the output
tensor; backward() walks the recorded graph once in reverse topological
order and accumulates gradients into the .grad buffer of every tensor that
requires them. Gradients keep accumulating across backward() calls until
zero_grads() resets them.

Compute is 64-bit throughout. 32-bit storage exists only in checkpoint
serialization, never in arithmetic.
"""

from __future__ import annotations

import numbers
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "Tensor",
    "concat",
    "cosine_similarity",
    "grad_check",
    "l2_normalize",
    "softmax",
    "stop_gradient",
    "zero_grads",
]

# guard for zero rows in l2_normalize; keeps the backward rule finite
NORM_EPS = 1e-12


def _coerce(value) -> np.ndarray:
    # np.asarray keeps 0-d shapes; ascontiguousarray would promote them to 1-d
    return np.asarray(value, dtype=np.float64, order="C")


def _ensure_tensor(value) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (numbers.Number, np.ndarray, list, tuple)):
        return Tensor(value)
    raise TypeError(f"cannot treat {type(value).__name__} as a tensor")


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    # equal shapes, a scalar on either side, or a vector against rows
    if sa == sb or sa == () or sb == ():
        return True
    if len(sa) == 1 and len(sb) >= 2 and sa[0] == sb[-1]:
        return True
    if len(sb) == 1 and len(sa) >= 2 and sb[0] == sa[-1]:
        return True
    return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # vector operand that was broadcast across leading axes
    return g.reshape(-1, shape[0]).sum(axis=0)


class Tensor:
    """N-d float64 value, optionally carrying a gradient buffer.

    data is treated as immutable once the tensor participates in a
    computation; optimizers rebind .data on leaf parameters rather than
    writing through it.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _coerce(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _node(cls, data, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        """Build an op output wired to its parents. Internal to the package."""
        t = cls.__new__(cls)
        t.data = _coerce(data)
        t.requires_grad = any(p.requires_grad for p in parents)
        t.grad = np.zeros_like(t.data) if t.requires_grad else None
        if t.requires_grad:
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t._parents = ()
            t._backward = None
        t.op = op
        return t

    # ------------------------------------------------------------------
    # introspection

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    # ------------------------------------------------------------------
    # backward pass

    def backward(self) -> None:
        """Add d(self)/d(tensor) into .grad for every tensor below self.

        self must be scalar shaped and downstream of at least one
        requires_grad tensor. Repeated calls without zero_grads()
        accumulate, which is what gradient accumulation relies on.
        """
        if self.shape != ():
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any requires_grad tensor")

        order = _toposort(self)
        # transient per-call carriers so a second backward() on the same
        # graph contributes exactly one more full pass
        carry: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}

        def accumulate(parent: "Tensor", delta: np.ndarray) -> None:
            if not parent.requires_grad:
                return
            slot = carry.get(id(parent))
            if slot is None:
                carry[id(parent)] = np.array(delta, dtype=np.float64)
            else:
                slot += delta

        for node in order:
            g = carry.pop(id(node), None)
            if g is None:
                continue
            if node.grad is not None:
                node.grad += g
            if node._backward is not None:
                node._backward(g, accumulate)

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other):
        other = _ensure_tensor(other)
        sa, sb = self.shape, other.shape
        if not _broadcast_ok(sa, sb):
            raise ShapeError(f"add: incompatible shapes {sa} and {sb}")
        a, b = self, other

        def backward(g, acc):
            acc(a, _unbroadcast(g, sa))
            acc(b, _unbroadcast(g, sb))

        return Tensor._node(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _ensure_tensor(other)
        sa, sb = self.shape, other.shape
        if not _broadcast_ok(sa, sb):
            raise ShapeError(f"sub: incompatible shapes {sa} and {sb}")
        a, b = self, other

        def backward(g, acc):
            acc(a, _unbroadcast(g, sa))
            acc(b, -_unbroadcast(g, sb))

        return Tensor._node(a.data - b.data, (a, b), backward, "sub")

    def __rsub__(self, other):
        return _ensure_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = _ensure_tensor(other)
        sa, sb = self.shape, other.shape
        if not (sa == sb or sa == () or sb == ()):
            raise ShapeError(f"mul: needs equal shapes or a scalar, got {sa} and {sb}")
        a, b = self, other

        def backward(g, acc):
            acc(a, _unbroadcast(g * b.data, sa))
            acc(b, _unbroadcast(g * a.data, sb))

        return Tensor._node(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __neg__(self):
        a = self

        def backward(g, acc):
            acc(a, -g)

        return Tensor._node(-a.data, (a,), backward, "neg")

    def __matmul__(self, other):
        other = _ensure_tensor(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {self.shape} and {other.shape}")
        a, b = self, other

        def backward(g, acc):
            acc(a, g @ b.data.T)
            acc(b, a.data.T @ g)

        return Tensor._node(a.data @ b.data, (a, b), backward, "matmul")

    def pow(self, exponent: float):
        """Elementwise power with a fixed scalar exponent >= 1."""
        c = float(exponent)
        if c < 1.0:
            raise DomainError(f"pow: exponent must be >= 1, got {c}")
        if not c.is_integer() and np.any(self.data < 0.0):
            raise DomainError("pow: fractional exponent over negative values")
        a = self

        def backward(g, acc):
            acc(a, g * c * a.data ** (c - 1.0))

        return Tensor._node(a.data**c, (a,), backward, "pow")

    def relu(self):
        mask = self.data > 0.0  # subgradient at 0 taken as 0
        a = self

        def backward(g, acc):
            acc(a, g * mask)

        return Tensor._node(np.where(mask, a.data, 0.0), (a,), backward, "relu")

    def exp(self):
        out = np.exp(self.data)
        a = self

        def backward(g, acc):
            acc(a, g * out)

        return Tensor._node(out, (a,), backward, "exp")

    def log(self):
        if np.any(self.data <= 0.0):
            raise DomainError("log: input must be strictly positive")
        a = self

        def backward(g, acc):
            acc(a, g / a.data)

        return Tensor._node(np.log(a.data), (a,), backward, "log")

    def sum(self, axis: int | None = None):
        a = self
        if axis is None:

            def backward(g, acc):
                acc(a, np.broadcast_to(g, a.shape))

            return Tensor._node(a.data.sum(), (a,), backward, "sum")
        ax = axis if axis >= 0 else a.ndim + axis
        if not 0 <= ax < a.ndim:
            raise ShapeError(f"sum: axis {axis} out of range for shape {a.shape}")

        def backward(g, acc):
            acc(a, np.repeat(np.expand_dims(g, ax), a.shape[ax], axis=ax))

        return Tensor._node(a.data.sum(axis=ax), (a,), backward, "sum")

    def mean(self, axis: int | None = None):
        a = self
        if axis is None:
            n = a.data.size
            if n == 0:
                raise ShapeError("mean of an empty tensor")

            def backward(g, acc):
                acc(a, np.broadcast_to(g / n, a.shape))

            return Tensor._node(a.data.mean(), (a,), backward, "mean")
        ax = axis if axis >= 0 else a.ndim + axis
        if not 0 <= ax < a.ndim:
            raise ShapeError(f"mean: axis {axis} out of range for shape {a.shape}")
        n = a.shape[ax]

        def backward(g, acc):
            acc(a, np.repeat(np.expand_dims(g / n, ax), n, axis=ax))

        return Tensor._node(a.data.mean(axis=ax), (a,), backward, "mean")

    def transpose(self):
        if self.ndim != 2:
            raise ShapeError(f"transpose: needs a 2-d tensor, got shape {self.shape}")
        a = self

        def backward(g, acc):
            acc(a, g.T)

        return Tensor._node(a.data.T, (a,), backward, "transpose")

    @property
    def T(self):
        return self.transpose()

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out = a.data.reshape(shape)

        def backward(g, acc):
            acc(a, g.reshape(a.shape))

        return Tensor._node(out, (a,), backward, "reshape")

    def __getitem__(self, key):
        """Basic and integer-array indexing. Gather rows with an int array,
        slice columns with t[:, a:b]. Gradients scatter-add back."""
        if isinstance(key, (list, np.ndarray)):
            key = np.asarray(key, dtype=np.int64)
        a = self
        out = a.data[key]

        def backward(g, acc):
            buf = np.zeros_like(a.data)
            np.add.at(buf, key, g)
            acc(a, buf)

        return Tensor._node(out, (a,), backward, "slice")


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order over the requires_grad subgraph."""
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
    order.reverse()
    return order


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_ensure_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [t.shape[ax] for t in ts]

    def backward(g, acc):
        start = 0
        for t, size in zip(ts, sizes):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(start, start + size)
            acc(t, g[tuple(idx)])
            start += size

    return Tensor._node(out, ts, backward, "concat")


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Softmax along an axis (rows by default), computed with a max shift."""
    if not np.all(np.isfinite(t.data)):
        raise DomainError("softmax: input must be finite")
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g, acc):
        dot = (g * y).sum(axis=axis, keepdims=True)
        acc(t, y * (g - dot))

    return Tensor._node(y, (t,), backward, "softmax")


def l2_normalize(t: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along an axis (rows by default) to unit Euclidean norm.

    Near-zero rows map near zero; the 1e-12 guard keeps forward and
    backward finite instead of dividing by zero.
    """
    rho = np.sqrt((t.data * t.data).sum(axis=axis, keepdims=True) + NORM_EPS**2)
    y = t.data / rho

    def backward(g, acc):
        dot = (g * y).sum(axis=axis, keepdims=True)
        acc(t, (g - y * dot) / rho)

    return Tensor._node(y, (t,), backward, "l2_normalize")


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine of the angle between paired slices, eps-guarded at zero norm."""
    a = _ensure_tensor(a)
    b = _ensure_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes differ, {a.shape} vs {b.shape}")
    return (l2_normalize(a, axis) * l2_normalize(b, axis)).sum(axis=axis)


def stop_gradient(t: Tensor) -> Tensor:
    """Same value, detached: gradient flow stops here."""
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.requires_grad = False
    out.grad = None
    out.op = "stop_gradient"
    out._parents = ()
    out._backward = None
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-5,
    exclude: Iterable[int] = (),
) -> float:
    """Compare backward() gradients of scalar f against central differences.

    Returns the max over flat coordinates of
    |analytic - numeric| / max(1, |analytic|). Coordinates listed in
    exclude are skipped; callers use that for kinks such as relu at 0,
    where the two-sided difference does not estimate the subgradient.
    """
    eps = float(eps)
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"grad_check: eps must be in (0, 1e-2], got {eps}")
    base = _coerce(point.data if isinstance(point, Tensor) else point)
    x = Tensor(base, requires_grad=True)
    out = f(x)
    if not isinstance(out, Tensor) or out.shape != ():
        raise ShapeError("grad_check: f must return a scalar tensor")
    out.backward()
    analytic = x.grad.reshape(-1).copy()

    skip = {int(i) for i in exclude}
    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        if i in skip:
            continue
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[i] = flat[i] - eps
        lo = f(Tensor(bumped.reshape(base.shape))).item()
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"grad_check: f not finite near coordinate {i}")
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
