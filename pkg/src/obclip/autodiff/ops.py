"""Differentiable operations over :class:`~obclip.autodiff.graph.Tensor`.

Shapes are never broadcast implicitly: binary ops need equal shapes, except
``scalar_mul`` (tensor times a scalar) and the explicit ``expand``.
"""

from __future__ import annotations

import builtins
import math
from typing import Sequence

import numpy as np

from .graph import AxisError, GraphError, Graph, ShapeError, Tensor, as_tensor

ARCCOS_EPS = 1e-7
NORMALIZE_EPS = 1e-12

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _graph_of(*xs: Tensor) -> Graph | None:
    g = None
    for x in xs:
        if x.graph is not None:
            if g is not None and x.graph is not g:
                raise GraphError("inputs belong to different graphs")
            g = x.graph
    return g


def _emit(op, inputs, out, backward, saved=(), flops=0) -> Tensor:
    g = _graph_of(*inputs)
    if g is None:
        return Tensor._wrap(out)
    return g.record(op, inputs, out, backward, saved, flops)


def _axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """(i,k)@(k,j) or batched (B,i,k)@(B,k,j) with equal batch sizes."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (a.ndim == b.ndim == 2 and a.shape[1] == b.shape[0]) or (
        a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1])
    if not ok:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data
    out = A @ B

    def back(g):
        return g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g

    flops = int(np.prod(out.shape)) * a.shape[-1]
    return _emit("matmul", (a, b), out, back, saved=(A, B), flops=flops)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g), flops=a.size)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A), saved=(A, B), flops=a.size)


def scalar_mul(x, s) -> Tensor:
    """``x * s`` where ``s`` is a Python number or a one-element tensor."""
    x = as_tensor(x)
    if not isinstance(s, Tensor):
        c = float(s)
        return _emit("scalar_mul", (x,), x.data * c, lambda g: (g * c,), flops=x.size)
    if s.size != 1:
        raise ShapeError("scalar_mul", x.shape, s.shape, detail="second operand must hold one element")
    X, S = x.data, s.data
    c = float(S.reshape(-1)[0])

    def back(g):
        return g * c, np.full(S.shape, float(np.sum(g * X)))

    return _emit("scalar_mul", (x, s), X * c, back, saved=(X,), flops=x.size)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _emit("neg", (x,), -x.data, lambda g: (-g,), flops=x.size)


def expand(x, shape: Sequence[int]) -> Tensor:
    """Repeat ``x`` along new leading axes so it has ``shape``."""
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    k = len(shape) - x.ndim
    if k < 0 or shape[k:] != x.shape:
        raise ShapeError("expand", x.shape, shape)
    out = np.broadcast_to(x.data, shape).copy()
    lead = tuple(range(k))
    return _emit("expand", (x,), out, lambda g: (g.sum(axis=lead),))


# --- elementwise --------------------------------------------------------------

def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,), saved=(out,), flops=x.size)


def log(x) -> Tensor:
    x = as_tensor(x)
    X = x.data
    if np.any(X <= 0):
        raise ValueError("log: input must be positive")
    return _emit("log", (x,), np.log(X), lambda g: (g / X,), saved=(X,), flops=x.size)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt: input must be non-negative")
    out = np.sqrt(x.data)
    return _emit("sqrt", (x,), out, lambda g: (g / (2.0 * out),), saved=(out,), flops=x.size)


def relu(x) -> Tensor:
    x = as_tensor(x)
    X = x.data
    return _emit("relu", (x,), np.maximum(X, 0.0), lambda g: (g * (X > 0),), saved=(X,), flops=x.size)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    X = x.data
    inner = _SQRT_2_OVER_PI * (X + 0.044715 * X ** 3)
    th = np.tanh(inner)
    out = 0.5 * X * (1.0 + th)

    def back(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * X ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * X * (1.0 - th ** 2) * dinner),)

    return _emit("gelu", (x,), out, back, saved=(X, th), flops=8 * x.size)


def clamp_max(x, hi: float) -> Tensor:
    """``min(x, hi)``; the gradient is zero wherever the ceiling is active."""
    x = as_tensor(x)
    X = x.data
    return _emit("clamp_max", (x,), np.minimum(X, hi), lambda g: (g * (X < hi),), saved=(X,))


def arccos_clamped(x, eps: float = ARCCOS_EPS) -> Tensor:
    """arccos with a bounded derivative near +-1.

    The value is ``arccos(clip(x, -1, 1))`` so exact alignment gives exactly 0;
    the derivative is evaluated at ``clip(x, -1 + eps, 1 - eps)``.
    """
    if eps <= 0:
        raise ValueError("arccos_clamped: eps must be positive")
    x = as_tensor(x)
    X = x.data
    out = np.arccos(np.clip(X, -1.0, 1.0))
    c = np.clip(X, -1.0 + eps, 1.0 - eps)
    return _emit("arccos", (x,), out, lambda g: (-g / np.sqrt(1.0 - c * c),), saved=(c,), flops=x.size)


# --- reductions and normalizations ------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    if axis is not None:
        axis = _axis("sum", axis, x.ndim)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), np.asarray(out, dtype=np.float64), back, flops=x.size)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[_axis("mean", axis, x.ndim)]
    return scalar_mul(sum(x, axis, keepdims), 1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _axis("softmax", axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), out, back, saved=(out,), flops=3 * x.size)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _axis("log_softmax", axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _emit("log_softmax", (x,), out, back, saved=(p,), flops=3 * x.size)


def layer_norm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Standardize along ``axis`` (no affine part; compose with mul/add)."""
    x = as_tensor(x)
    axis = _axis("layer_norm", axis, x.ndim)
    X = x.data
    mu = X.mean(axis=axis, keepdims=True)
    var = ((X - mu) ** 2).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * inv

    def back(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = np.mean(g * xhat, axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _emit("layer_norm", (x,), xhat, back, saved=(xhat, inv), flops=5 * x.size)


def l2_normalize(x, axis: int = -1, eps: float = NORMALIZE_EPS) -> Tensor:
    """``x / sqrt(sum(x**2) + eps)`` along ``axis``; survives zero vectors."""
    if eps <= 0:
        raise ValueError("l2_normalize: eps must be positive")
    x = as_tensor(x)
    axis = _axis("l2_normalize", axis, x.ndim)
    X = x.data
    norm = np.sqrt(np.sum(X * X, axis=axis, keepdims=True) + eps)
    out = X / norm

    def back(g):
        return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)

    return _emit("l2_normalize", (x,), out, back, saved=(out, norm), flops=3 * x.size)


# --- structural ---------------------------------------------------------------

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or any(s < 0 for s in shape):
        raise ShapeError("reshape", x.shape, shape)
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(_axis("transpose", a, x.ndim) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise AxisError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat: need at least one tensor")
    axis = _axis("concat", axis, xs[0].ndim)
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or x.shape[:axis] + x.shape[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeError("concat", ref, x.shape)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", tuple(xs), np.concatenate([x.data for x in xs], axis=axis), back)


def slice(x, index) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing: ints and slices only."""
    x = as_tensor(x)
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not isinstance(i, (int, builtins.slice, type(Ellipsis))):
            raise TypeError("slice: only ints, slices and Ellipsis are supported")
    shape = x.shape
    out = x.data[index]

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("slice", (x,), np.array(out, dtype=np.float64), back)


# --- pairwise distance primitives ---------------------------------------------

def neg_pairwise_l2(u, v) -> Tensor:
    """Entry (i, j) is ``-||u_i - v_j||_2`` for row batches ``u``, ``v`` of shape (b, d).

    Keeps the (b, b, d) difference tensor for the backward pass.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
        raise ShapeError("neg_pairwise_l2", u.shape, v.shape)
    diff = u.data[:, None, :] - v.data[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    out = -dist

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(dist > 0, -g / dist, 0.0)
        gd = diff * w[:, :, None]
        return gd.sum(axis=1), -gd.sum(axis=0)

    b1, b2, d = diff.shape
    return _emit("neg_pairwise_l2", (u, v), out, back, saved=(diff, out), flops=2 * b1 * b2 * d + b1 * b2)


def neg_pairwise_geodesic(u, v, eps: float = ARCCOS_EPS) -> Tensor:
    """Entry (i, j) is ``-sqrt(sum_k arccos^2(<u_ik, v_jk>))`` for (b, m, n) batches.

    Only the per-column inner products are formed. Keeps the (b, b, m) arc
    lengths and clamped cosines for the backward pass.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 3 or v.ndim != 3 or u.shape[1:] != v.shape[1:]:
        raise ShapeError("neg_pairwise_geodesic", u.shape, v.shape)
    U = u.data.transpose(1, 0, 2)  # (m, b, n)
    V = v.data.transpose(1, 0, 2)
    cos = np.transpose(U @ V.transpose(0, 2, 1), (1, 2, 0))  # (b, b, m)
    theta = np.arccos(np.clip(cos, -1.0, 1.0))
    c = np.clip(cos, -1.0 + eps, 1.0 - eps)
    dist = np.sqrt(np.einsum("ijk,ijk->ij", theta, theta))
    out = -dist

    def back(g):
        # d(-dist)/dcos = theta / (dist * sqrt(1 - c^2))
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(dist > 0, g / dist, 0.0)
        gc = theta * w[:, :, None] / np.sqrt(1.0 - c * c)  # (b, b, m)
        gc = gc.transpose(2, 0, 1)  # (m, b, b)
        gu = (gc @ V).transpose(1, 0, 2)
        gv = (gc.transpose(0, 2, 1) @ U).transpose(1, 0, 2)
        return gu, gv

    b1, m, n = u.shape
    b2 = v.shape[0]
    flops = b1 * b2 * m * n + 2 * b1 * b2 * m + b1 * b2
    return _emit("neg_pairwise_geodesic", (u, v), out, back, saved=(theta, c, out), flops=flops)
