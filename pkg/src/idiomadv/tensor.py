"""Dense float64 tensors with a dynamic reverse-mode tape.

Every primitive records its inputs and a closure computing the vector-Jacobian
product. :func:`backward` orders the recorded graph topologically (a
:class:`Tape`), walks it once in reverse and then consumes it: a second
backward through the same graph raises :class:`TapeStateError`.

The primitive set is deliberately closed: add, sub, mul (broadcasting), matmul,
softmax, layer_norm, gelu, embedding, reshape, transpose, sum, mean and log.
Everything else in the package is composed from these.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, NumericError, ShapeError, TapeStateError

LAYER_NORM_EPS = 1e-5

# name of a primitive whose gradient rule is deliberately corrupted (negative
# control for the gradient checker); None in normal operation
_fault_op = None


def inject_fault(op):
    """Corrupt the backward rule of primitive ``op`` (``None`` restores all)."""
    global _fault_op
    _fault_op = op


def _faulty(op, g):
    if _fault_op == op:
        return g * 1.5
    return g


def _check_finite(arr, where):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {where}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = None
        self._consumed = False

    @classmethod
    def _result(cls, data, op, parents, backward_fn):
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._consumed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        g = _faulty("add", g)
        return (
            _unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None,
        )

    return Tensor._result(data, "add", (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        g = _faulty("sub", g)
        return (
            _unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(-g, sb) if needs[1] else None,
        )

    return Tensor._result(data, "sub", (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g, needs):
        g = _faulty("mul", g)
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return Tensor._result(data, "mul", (a, b), backward)


def matmul(a, b):
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g, needs):
        g = _faulty("matmul", g)
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._result(data, "matmul", (a, b), backward)


def _rows(arr):
    return np.ascontiguousarray(arr).reshape(-1, arr.shape[-1])


def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("softmax of a scalar")
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis out of range for shape {x.shape}")
    axis %= x.ndim
    if x.shape[axis] < 2:
        raise ShapeError(f"softmax needs at least 2 entries along axis {axis}")
    moved = np.moveaxis(x.data, axis, -1)
    y = kernels.softmax_fwd(_rows(moved)).reshape(moved.shape)

    def backward(g, needs):
        gm = np.moveaxis(g, axis, -1)
        gx = kernels.softmax_bwd(_rows(y), _rows(gm)).reshape(moved.shape)
        return (_faulty("softmax", np.moveaxis(gx, -1, axis)),)

    return Tensor._result(np.moveaxis(y, -1, axis), "softmax", (x,), backward)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("layer_norm needs a non-empty last axis")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    out, xhat, rstd = kernels.layer_norm_fwd(_rows(x.data), gain.data, bias.data, float(eps))

    def backward(g, needs):
        gx, ggain, gbias = kernels.layer_norm_bwd(_rows(g), xhat, rstd, gain.data)
        return (
            _faulty("layer_norm", gx.reshape(x.shape)) if needs[0] else None,
            ggain if needs[1] else None,
            gbias if needs[2] else None,
        )

    return Tensor._result(out.reshape(x.shape), "layer_norm", (x, gain, bias), backward)


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    if x.ndim == 0:
        flat = x.data.reshape(1, 1)
    else:
        flat = _rows(x.data)
    y = kernels.gelu_fwd(flat).reshape(x.shape)

    def backward(g, needs):
        gx = kernels.gelu_bwd(flat, np.ascontiguousarray(g).reshape(flat.shape))
        return (_faulty("gelu", gx.reshape(x.shape)),)

    return Tensor._result(y, "gelu", (x,), backward)


def embedding(weight, ids):
    """Row lookup ``weight[ids]`` for an integer array ``ids``."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding ids must be integers")
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")
    data = weight.data[ids]

    def backward(g, needs):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (_faulty("embedding", gw),)

    return Tensor._result(data, "embedding", (weight,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    src = x.shape

    def backward(g, needs):
        return (_faulty("reshape", g.reshape(src)),)

    return Tensor._result(data, "reshape", (x,), backward)


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g, needs):
        return (_faulty("transpose", np.transpose(g, inverse)),)

    return Tensor._result(np.transpose(x.data, axes), "transpose", (x,), backward)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)
    src = x.shape

    def backward(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (_faulty("sum", np.broadcast_to(g, src).copy()),)

    return Tensor._result(np.asarray(data), "sum", (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    data = x.data.sum(axis=axes, keepdims=keepdims) / count
    src = x.shape

    def backward(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (_faulty("mean", np.broadcast_to(g / count, src).copy()),)

    return Tensor._result(np.asarray(data), "mean", (x,), backward)


def log(x):
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise NumericError("log of a non-positive value")
    data = np.log(x.data)

    def backward(g, needs):
        return (_faulty("log", g / x.data),)

    return Tensor._result(data, "log", (x,), backward)


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered view of the graph that produced ``output``."""

    def __init__(self, output):
        self.output = output
        self.nodes = self._order(output)

    @staticmethod
    def _order(root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def consume(self):
        for node in self.nodes:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


def backward(loss, inputs=None):
    """Populate ``.grad`` of every leaf ancestor of ``loss`` that requires grad.

    With ``inputs`` given, only those leaves receive gradients and the sweep is
    pruned to the paths that reach them. Gradients accumulate into existing
    ``.grad`` arrays.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeStateError("this graph has already been consumed by a backward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    tape = Tape(loss)
    if inputs is None:
        relevant = {id(n) for n in tape.nodes if n.requires_grad}
        targets = None
    else:
        targets = {id(t) for t in inputs}
        relevant = set()
        for node in tape.nodes:
            if id(node) in targets or any(id(p) in relevant for p in node._parents):
                relevant.add(id(node))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad and (targets is None or id(node) in targets):
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        needs = [id(p) in relevant for p in node._parents]
        for p, pg, need in zip(node._parents, node._backward(g, needs), needs):
            if not need or pg is None:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    tape.consume()


# ---------------------------------------------------------------------------
# finite-difference checker
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: tuple = ()

    def __bool__(self):
        return self.passed


def numerical_gradient(fn, point, h=1e-5):
    """Central differences of scalar ``fn(*tensors)`` at ``point``."""
    arrays = [np.array(p, dtype=np.float64) for p in point]
    out = []
    for k, arr in enumerate(arrays):
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig - h
            fm = fn(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"function is non-finite near input {k}, element {i}")
            grad.reshape(-1)[i] = (fp - fm) / (2.0 * h)
        out.append(grad)
    return out


def grad_check(fn, point, h=1e-5, tol=1e-4, floor=1e-6):
    """Compare tape gradients of ``fn`` against central differences.

    The elementwise relative error is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps round-off on near-zero entries from dominating.
    """
    arrays = [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = fn(*leaves)
    backward(loss)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    numeric = numerical_gradient(fn, arrays, h)

    worst, max_err, count = (), 0.0, 0
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        count += err.size
        if err.size and err.max() > max_err:
            max_err = float(err.max())
            worst = (k, int(err.argmax()))
    return GradCheckReport(max_err, max_err < tol, count, worst)
