"""Minimal reverse-mode autodiff over numpy arrays.

Every operation records parent links and a backward closure; ``backward()``
walks the recorded graph once in reverse topological order.  Training runs
in float32, gradient checking in float64.  Only the operations the
dual-stream backbones need are provided; there is no broadcasting beyond
what those operations require.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import kernels

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "no_grad",
    "matmul",
    "add",
    "mul",
    "concat",
    "softmax",
    "layer_norm",
    "group_norm",
    "relu",
    "gelu",
    "conv2d",
    "avg_pool2x",
    "upsample_nearest2x",
    "mean_all",
    "sum_all",
    "check_gradients",
    "GradCheckReport",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A float32/float64 array plus an optional gradient and graph node."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name", "trainable")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()
        self.name = ""
        self.trainable = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape
        out = _node(self.data.reshape(shape), (self,))
        if out._parents:
            def backward(g=out, a=self, s=src_shape):
                _accumulate(a, g.grad.reshape(s))
            out._backward = backward
        return out

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        out = _node(self.data.transpose(axes), (self,))
        if out._parents:
            def backward(g=out, a=self, inv=inverse):
                _accumulate(a, g.grad.transpose(inv))
            out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()


class Parameter(Tensor):
    """A named, trainable tensor whose gradient buffer persists across steps."""

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False
        self.grad = np.zeros_like(self.data)


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Accumulation always rebinds (never mutates in place), so holding a
    # reference to a freshly computed gradient array is safe.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        out = _node(a.data + b, (a,))
        if out._parents:
            def backward(g=out, x=a):
                _accumulate(x, g.grad)
            out._backward = backward
        return out
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data + b.data, (a, b))
    if out._parents:
        def backward(g=out, x=a, y=b):
            _accumulate(x, _unbroadcast(g.grad, x.shape))
            _accumulate(y, _unbroadcast(g.grad, y.shape))
        out._backward = backward
    return out


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        out = _node(a.data * b, (a,))
        if out._parents:
            def backward(g=out, x=a, s=b):
                _accumulate(x, g.grad * s)
            out._backward = backward
        return out
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data * b.data, (a, b))
    if out._parents:
        def backward(g=out, x=a, y=b):
            _accumulate(x, _unbroadcast(g.grad * y.data, x.shape))
            _accumulate(y, _unbroadcast(g.grad * x.data, y.shape))
        out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  Either both operands share identical leading batch
    dims, or ``b`` is a plain 2-D matrix applied to every batch item."""
    a, b = _as_tensor(a), _as_tensor(b)
    shared_weight = b.ndim == 2 and a.ndim >= 2
    if (a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]
            or not (shared_weight or a.shape[:-2] == b.shape[:-2])):
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = _node(np.matmul(a.data, b.data), (a, b))
    if out._parents:
        def backward(g=out, x=a, y=b, shared=shared_weight):
            _accumulate(x, np.matmul(g.grad, y.data.swapaxes(-1, -2)))
            if shared and x.data.ndim > 2:
                k, n = y.data.shape
                _accumulate(y, x.data.reshape(-1, k).T @ g.grad.reshape(-1, n))
            else:
                _accumulate(y, np.matmul(x.data.swapaxes(-1, -2), g.grad))
        out._backward = backward
    return out


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    base = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(base) or any(
            i != axis % len(base) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat extents mismatch off axis {axis}: {[x.shape for x in xs]}")
    out = _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs))
    if out._parents:
        sizes = [x.shape[axis] for x in xs]
        def backward(g=out, parts=xs, sizes=sizes, ax=axis):
            offset = 0
            for part, n in zip(parts, sizes):
                sl = [slice(None)] * g.grad.ndim
                sl[ax] = slice(offset, offset + n)
                _accumulate(part, g.grad[tuple(sl)])
                offset += n
        out._backward = backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax; the normalizing sum accumulates in 64-bit."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    out = _node((e / total).astype(x.dtype), (x,))
    if out._parents:
        def backward(g=out, a=x, y=out.data, ax=axis):
            gy = g.grad * y
            _accumulate(a, gy - y * gy.sum(axis=ax, keepdims=True))
        out._backward = backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shape {gain.shape}/{bias.shape} does not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _node(xhat * gain.data + bias.data, (x, gain, bias))
    if out._parents:
        def backward(g=out, a=x, gn=gain, bs=bias, xh=xhat, istd=inv, n=d):
            dy = g.grad
            reduce_axes = tuple(range(dy.ndim - 1))
            _accumulate(bs, dy.sum(axis=reduce_axes) if reduce_axes else dy)
            _accumulate(gn, (dy * xh).sum(axis=reduce_axes) if reduce_axes else dy * xh)
            dxh = dy * gn.data
            dx = istd * (dxh - dxh.mean(axis=-1, keepdims=True)
                         - xh * (dxh * xh).mean(axis=-1, keepdims=True))
            _accumulate(a, dx)
        out._backward = backward
    return out


def group_norm(x: Tensor, gain: Tensor, bias: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize (C, H, W) or (N, C, H, W) per channel group, affine per channel."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.ndim not in (3, 4):
        raise ShapeError(f"group_norm expects (C,H,W) or (N,C,H,W), got {x.shape}")
    c = x.shape[-3]
    if c % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide {c} channels")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError("group_norm affine shape does not match channel count")
    n = 1 if x.ndim == 3 else x.shape[0]
    grouped = x.data.reshape(n * groups, -1)
    mu = grouped.mean(axis=1, keepdims=True)
    var = grouped.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((grouped - mu) * inv).reshape(x.shape)
    affine = gain.data[:, None, None]
    out = _node(xhat * affine + bias.data[:, None, None], (x, gain, bias))
    if out._parents:
        def backward(g=out, a=x, gn=gain, bs=bias, xh=xhat, istd=inv, ng=groups, nb=n):
            dy = g.grad
            reduce_axes = (1, 2) if a.ndim == 3 else (0, 2, 3)
            _accumulate(bs, dy.sum(axis=reduce_axes))
            _accumulate(gn, (dy * xh).sum(axis=reduce_axes))
            dxh = (dy * gn.data[:, None, None]).reshape(nb * ng, -1)
            xh_g = xh.reshape(nb * ng, -1)
            dx = istd * (dxh - dxh.mean(axis=1, keepdims=True)
                         - xh_g * (dxh * xh_g).mean(axis=1, keepdims=True))
            _accumulate(a, dx.reshape(a.shape))
        out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _node(np.maximum(x.data, 0), (x,))
    if out._parents:
        def backward(g=out, a=x):
            _accumulate(a, g.grad * (a.data > 0))
        out._backward = backward
    return out


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form)."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = _node(x.data * cdf, (x,))
    if out._parents:
        def backward(g=out, a=x, phi=cdf):
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
            _accumulate(a, g.grad * (phi + a.data * pdf))
        out._backward = backward
    return out


def conv2d(x: Tensor, k: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, padding 1.

    Accepts (C,H,W) or a batched (N,C,H,W) input; kernels are (O,C,3,3).
    """
    x, k = _as_tensor(x), _as_tensor(k)
    if (x.ndim not in (3, 4) or k.ndim != 4 or k.shape[2:] != (3, 3)
            or k.shape[1] != x.shape[-3]):
        raise ShapeError(f"conv2d shapes incompatible: input {x.shape}, kernels {k.shape}")
    batched = x.ndim == 4
    x4 = x.data if batched else x.data[None]
    out_data = kernels.conv2d_forward(np.ascontiguousarray(x4), k.data)
    out = _node(out_data if batched else out_data[0], (x, k))
    if out._parents:
        def backward(g=out, a=x, w=k, was_batched=batched):
            g4 = g.grad if was_batched else g.grad[None]
            g4 = np.ascontiguousarray(g4)
            a4 = np.ascontiguousarray(a.data if was_batched else a.data[None])
            flipped = np.ascontiguousarray(w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gx = kernels.conv2d_forward(g4, flipped)
            _accumulate(a, gx if was_batched else gx[0])
            _accumulate(w, kernels.conv2d_grad_kernels(a4, g4))
        out._backward = backward
    return out


def avg_pool2x(x: Tensor) -> Tensor:
    """Halve the last two (spatial) axes by 2x2 averaging."""
    x = _as_tensor(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x needs even spatial extents, got {x.shape}")
    lead = x.shape[:-2]
    out = _node(x.data.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1)), (x,))
    if out._parents:
        def backward(g=out, a=x):
            gg = g.grad * 0.25
            _accumulate(a, np.repeat(np.repeat(gg, 2, axis=-2), 2, axis=-1))
        out._backward = backward
    return out


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Double the last two (spatial) axes by nearest-neighbour repetition."""
    x = _as_tensor(x)
    out = _node(np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1), (x,))
    if out._parents:
        def backward(g=out, a=x):
            h, w = a.shape[-2:]
            lead = a.shape[:-2]
            _accumulate(a, g.grad.reshape(lead + (h, 2, w, 2)).sum(axis=(-3, -1)))
        out._backward = backward
    return out


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,))
    if out._parents:
        def backward(g=out, a=x):
            _accumulate(a, np.broadcast_to(g.grad, a.shape).astype(a.dtype, copy=False))
        out._backward = backward
    return out


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _node(np.asarray(x.data.mean(), dtype=x.dtype), (x,))
    if out._parents:
        def backward(g=out, a=x):
            _accumulate(a, np.broadcast_to(g.grad / a.size, a.shape).astype(a.dtype, copy=False))
        out._backward = backward
    return out


@dataclass
class GradCheckReport:
    ok: bool
    max_rel_err: float
    worst_input: int
    worst_index: tuple
    analytic: float
    numeric: float
    note: str = ""

    def __str__(self) -> str:
        status = "pass" if self.ok else "FAIL"
        return (f"gradcheck {status}: max rel err {self.max_rel_err:.3e} at input "
                f"{self.worst_input}{list(self.worst_index)} "
                f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}) {self.note}")


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
                    tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of a scalar function against central differences.

    Every element of every input is perturbed by +-step; the relative error
    uses max(|analytic|, |numeric|, 1e-3) as denominator so near-zero
    gradients are judged on an absolute scale.
    """
    inputs = list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    loss = fn(*inputs)
    if loss.data.size != 1:
        raise ValueError("check_gradients needs a scalar-valued function")
    if not np.isfinite(loss.data).all():
        return GradCheckReport(False, math.inf, -1, (), math.nan, math.nan,
                               "non-finite function value")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad, dtype=np.float64)
                for t in inputs]

    worst = (0.0, 0, (), 0.0, 0.0)
    with no_grad():
        for idx, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            for pos in range(flat.size):
                original = flat[pos]
                flat[pos] = original + step
                f_plus = float(fn(*inputs).data)
                flat[pos] = original - step
                f_minus = float(fn(*inputs).data)
                flat[pos] = original
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    return GradCheckReport(False, math.inf, idx,
                                           np.unravel_index(pos, t.data.shape),
                                           math.nan, math.nan, "non-finite probe value")
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = float(analytic[idx].reshape(-1)[pos])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
                if rel > worst[0]:
                    worst = (rel, idx, np.unravel_index(pos, t.data.shape), a, numeric)
    rel, widx, windex, a, n = worst
    return GradCheckReport(rel <= tolerance, rel, widx, windex, a, n)
