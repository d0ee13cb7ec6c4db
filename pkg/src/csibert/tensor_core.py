"""Small dense tensor library with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` and a ``backward`` staticmethod, in the style of
``torch.autograd.Function``. Calling ``Op.apply(*inputs)`` runs the forward
pass on plain numpy arrays and records a node on the implicit tape (the
``parents`` of the resulting :class:`Tensor`). :meth:`Tensor.backward`
walks the tape once in reverse topological order.

Values are float64. Batched inputs are supported: ``matmul`` contracts the
last two axes and broadcasts leading ones (numpy semantics, so reductions
are performed by BLAS in a fixed order for a fixed thread count).
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Function",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "swapaxes",
    "sum_all",
    "square",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "relu",
    "grad_check",
]

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Array value plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "_fn", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self._fn: type[Function] | None = None
        self._ctx: dict | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        ``grad`` defaults to 1 and may only be omitted for scalar outputs.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._fn is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            in_grads = node._fn.backward(node._ctx, g)
            for parent, pg in zip(node.parents, in_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                pg = _unbroadcast(pg, parent.shape)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._fn is not None


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; recursion depth would otherwise scale with network depth
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
        for p in node.parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward(ctx, *arrays, **kwargs) -> ndarray`` and
    ``backward(ctx, grad) -> tuple`` (one entry per tensor input, ``None``
    for inputs without a gradient).
    """

    @staticmethod
    def forward(ctx: dict, *args, **kwargs) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    @staticmethod
    def backward(ctx: dict, grad: np.ndarray) -> tuple:  # pragma: no cover - interface
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(_as_tensor(x) for x in inputs)
        ctx: dict = {}
        out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        result = Tensor(out)
        if any(_needs_grad(t) for t in tensors):
            result.parents = tensors
            result._fn = cls
            result._ctx = ctx
        return result


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        return a + b

    @staticmethod
    def backward(ctx, grad):
        return grad, grad


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        return a - b

    @staticmethod
    def backward(ctx, grad):
        return grad, -grad


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx["b"], grad * ctx["a"]


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, grad):
        return (-grad,)


class Scale(Function):
    @staticmethod
    def forward(ctx, a, factor: float = 1.0):
        ctx["factor"] = factor
        return a * factor

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["factor"],)


class Square(Function):
    @staticmethod
    def forward(ctx, a):
        ctx["a"] = a
        return a * a

    @staticmethod
    def backward(ctx, grad):
        return (2.0 * ctx["a"] * grad,)


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx["a"], ctx["b"]
        return grad @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ grad


class SwapAxes(Function):
    @staticmethod
    def forward(ctx, a, axis1: int = -1, axis2: int = -2):
        ctx["axes"] = (axis1, axis2)
        return np.swapaxes(a, axis1, axis2)

    @staticmethod
    def backward(ctx, grad):
        return (np.swapaxes(grad, *ctx["axes"]),)


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape: tuple[int, ...] = ()):
        ctx["shape"] = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx["shape"]),)


class SumAll(Function):
    @staticmethod
    def forward(ctx, a):
        ctx["shape"] = a.shape
        return np.asarray(a.sum())

    @staticmethod
    def backward(ctx, grad):
        return (np.broadcast_to(grad, ctx["shape"]).copy(),)


class SoftmaxRows(Function):
    @staticmethod
    def forward(ctx, x, valid_mask=None):
        if valid_mask is not None:
            valid = np.broadcast_to(np.asarray(valid_mask, dtype=bool), x.shape)
            if not valid.any(axis=-1).all():
                raise ValueError("softmax row has no valid columns")
            x = np.where(valid, x, -np.inf)
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)
        ctx["y"] = y
        return y

    @staticmethod
    def backward(ctx, grad):
        y = ctx["y"]
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class LayerNorm(Function):
    @staticmethod
    def forward(ctx, x, gain, bias, eps: float = 1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        ctx.update(xhat=xhat, inv_std=inv_std, gain=gain)
        return xhat * gain + bias

    @staticmethod
    def backward(ctx, grad):
        xhat, inv_std, gain = ctx["xhat"], ctx["inv_std"], ctx["gain"]
        n = xhat.shape[-1]
        lead = tuple(range(grad.ndim - 1))
        d_gain = (grad * xhat).sum(axis=lead)
        d_bias = grad.sum(axis=lead)
        g = grad * gain
        dx = inv_std / n * (n * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        return dx, d_gain, d_bias


class Gelu(Function):
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF."""

    @staticmethod
    def forward(ctx, x):
        cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
        ctx["x"], ctx["cdf"] = x, cdf
        return x * cdf

    @staticmethod
    def backward(ctx, grad):
        x, cdf = ctx["x"], ctx["cdf"]
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (grad * (cdf + x * pdf),)


class Relu(Function):
    @staticmethod
    def forward(ctx, x):
        # derivative at exactly 0 is taken as 0
        ctx["pos"] = x > 0
        return np.where(ctx["pos"], x, 0.0)

    @staticmethod
    def backward(ctx, grad):
        return (np.where(ctx["pos"], grad, 0.0),)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def neg(a) -> Tensor:
    return Neg.apply(a)


def scale(a, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def square(a) -> Tensor:
    return Square.apply(a)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    return MatMul.apply(a, b)


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    return SwapAxes.apply(a, axis1=axis1, axis2=axis2)


def transpose(a) -> Tensor:
    return SwapAxes.apply(a, axis1=-1, axis2=-2)


def reshape(a, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def sum_all(a) -> Tensor:
    return SumAll.apply(a)


def softmax_rows(x, valid_mask=None) -> Tensor:
    """Softmax over the last axis.

    ``valid_mask`` (broadcastable to ``x``) marks columns that may receive
    weight; invalid columns get a -inf logit and therefore exactly 0 weight.
    """
    return SoftmaxRows.apply(x, valid_mask=valid_mask)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


def gelu(x) -> Tensor:
    return Gelu.apply(x)


def relu(x) -> Tensor:
    return Relu.apply(x)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Compare tape gradients of a scalar ``f()`` with central differences.

    ``f`` is re-evaluated after each in-place perturbation of a parameter's
    ``data``. Returns the worst per-parameter relative error
    ``||g_tape - g_fd|| / max(||g_tape||, ||g_fd||, floor)``.
    """
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued computation, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f().data)
            flat[i] = orig - step
            f_minus = float(f().data)
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2.0 * step)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
