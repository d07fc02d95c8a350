"""Dense float32 tensors with a reverse-mode autodiff tape.

Every differentiable op is a plain function that computes its forward value
with numpy and, when a :class:`Tape` is active and some input requires a
gradient, records a closure that maps the output gradient to input gradients.

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # 2 * x
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
# stack of active compute dtypes; float64 is only pushed by ``precision``
_PRECISION: list = [DTYPE]


def compute_dtype():
    """The dtype new tensors are created with (float32 unless overridden)."""
    return _PRECISION[-1]


class precision:
    """Temporarily evaluate ops in another float dtype (used by ``grad_check``)."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type

    def __enter__(self):
        _PRECISION.append(self.dtype)
        return self

    def __exit__(self, *exc):
        _PRECISION.pop()


class DimensionError(ValueError):
    """Shapes of the operands are incompatible."""


class ConfigurationError(ValueError):
    """Hyperparameters describe an impossible layer or schedule."""


class ContractError(RuntimeError):
    """A caller broke an API precondition (e.g. backward on a non-scalar)."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf showed up where finite values are required."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "retain_grad")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=compute_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.retain_grad = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Only one tape records at a time (the innermost ``with`` block). Nodes are
    appended in execution order, so inputs always precede their consumers.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _current_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    result = Tensor(out)
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.nodes.append(_Node(tuple(inputs), result, backward_fn))
    return result


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires a gradient.

    Nodes are visited in exact reverse recording order. Leaf gradients are
    accumulated into any existing ``.grad`` (call ``zero_grad`` between steps).
    Non-leaf tensors flagged with ``retain_grad`` also receive ``.grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        if node.output.retain_grad:
            node.output.grad = g
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = inp
    for key, g in grads.items():
        leaf = owners[key]
        g = np.asarray(g, dtype=compute_dtype()).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def _sigmoid64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, evaluated in float64 so both tails stay exact."""
    out = _sigmoid64(a.data).astype(compute_dtype())
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid64(a.data).astype(compute_dtype())
    x = a.data
    return _make(x * s, (a,), lambda g: (g * s * (1 + x * (1 - s)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def grad(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _make(out, (a,), grad)


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), grad)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(out, (a,), grad)


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties send the gradient to the first maximiser."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)

    def grad(g):
        full = np.zeros_like(a.data)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(idx, axis), gg, axis)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), grad)


# -------------------------------------------------------------------- shaping


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), grad)


# ------------------------------------------------------- attention / norms


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over a zero-length axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    # floor keeps eps=0 finite on constant rows (their centred values are 0)
    inv = (1.0 / np.sqrt(np.maximum(var + eps, 1e-30))).astype(compute_dtype())
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), grad)


def batch_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5,
               running: Optional[tuple] = None):
    """Batch normalisation over every axis except 1 (channels).

    With ``running=(mean, var)`` the given statistics are used (inference);
    otherwise batch statistics are used and returned as ``(out, mean, var)``.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    g_b = gain.data.reshape(shape)
    b_b = bias.data.reshape(shape)
    if running is not None:
        mu = running[0].reshape(shape).astype(compute_dtype())
        inv = (1.0 / np.sqrt(running[1].reshape(shape) + eps)).astype(compute_dtype())
        xhat = (x.data - mu) * inv

        def grad_eval(g):
            return g * g_b * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _make(xhat * g_b + b_b, (x, gain, bias), grad_eval), None, None

    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(compute_dtype())
    xhat = xc * inv

    def grad(g):
        dxhat = g * g_b
        dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = _make(xhat * g_b + b_b, (x, gain, bias), grad)
    return out, mu.reshape(-1), var.reshape(-1)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(compute_dtype()) / compute_dtype()(1 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# --------------------------------------------------------------- convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ConfigurationError(
            f"kernel {kernel} does not fit input {size} with padding {padding}")
    return span // stride + 1


def _conv_check(x: np.ndarray, w: np.ndarray, stride: int, padding: int, groups: int):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and OIKhKw kernel")
    if stride < 1 or padding < 0 or groups < 1:
        raise ConfigurationError("stride/groups must be positive, padding non-negative")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups:
        raise DimensionError(f"channels {c}->{o} not divisible by groups {groups}")
    if cg != c // groups:
        raise DimensionError(f"kernel expects {cg} input channels per group, input has {c // groups}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    return n, c, o, kh, kw, ho, wo


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _window(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _conv_direct(x, w, stride, padding, groups):
    n, c, o, kh, kw, ho, wo = _conv_check(x, w, stride, padding, groups)
    cg, og = c // groups, o // groups
    xp = _pad(x, padding)
    wg = w.reshape(groups, og, cg, kh, kw)
    out = np.zeros((n, groups, og, ho * wo), dtype=compute_dtype())
    for i in range(kh):
        for j in range(kw):
            xs = _window(xp, i, j, stride, ho, wo).reshape(n, groups, cg, ho * wo)
            if cg == 1:
                out += wg[None, :, :, 0, i, j, None] * xs
            else:
                out += wg[:, :, :, i, j] @ xs
    out = out.reshape(n, o, ho, wo)

    def grad(g):
        gg = g.reshape(n, groups, og, ho * wo)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wg)
        for i in range(kh):
            for j in range(kw):
                xs = _window(xp, i, j, stride, ho, wo).reshape(n, groups, cg, ho * wo)
                if cg == 1:
                    gw[:, :, 0, i, j] = np.einsum("ngop,ngp->go", gg, xs[:, :, 0])
                    gxs = (wg[None, :, :, 0, i, j, None] * gg).sum(axis=2, keepdims=True)
                else:
                    gw[:, :, :, i, j] = (gg @ np.swapaxes(xs, -1, -2)).sum(axis=0)
                    gxs = np.swapaxes(wg[:, :, :, i, j], -1, -2) @ gg
                _window(gxp, i, j, stride, ho, wo)[...] += gxs.reshape(n, c, ho, wo)
        gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]] if padding else gxp
        return gx, gw.reshape(w.shape)

    return out, grad


def _im2col(xp, kh, kw, stride, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols, xp_shape, kh, kw, stride, ho, wo):
    n, c = xp_shape[:2]
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros(xp_shape, dtype=compute_dtype())
    for i in range(kh):
        for j in range(kw):
            _window(gxp, i, j, stride, ho, wo)[...] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gxp


def _conv_im2col(x, w, stride, padding, groups):
    n, c, o, kh, kw, ho, wo = _conv_check(x, w, stride, padding, groups)
    cg, og = c // groups, o // groups
    xp = _pad(x, padding)
    parts, all_cols = [], []
    for gi in range(groups):
        xg = xp[:, gi * cg:(gi + 1) * cg]
        cols = _im2col(xg, kh, kw, stride, ho, wo)
        wmat = w[gi * og:(gi + 1) * og].reshape(og, -1)
        parts.append(cols @ wmat.T)
        all_cols.append(cols)
    out = np.concatenate(parts, axis=1).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def grad(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = np.empty_like(w)
        gxp = np.empty_like(xp)
        for gi in range(groups):
            gslice = g2[:, gi * og:(gi + 1) * og]
            wmat = w[gi * og:(gi + 1) * og].reshape(og, -1)
            gw[gi * og:(gi + 1) * og] = (gslice.T @ all_cols[gi]).reshape(og, cg, kh, kw)
            gxp[:, gi * cg:(gi + 1) * cg] = _col2im(gslice @ wmat, (n, cg) + xp.shape[2:],
                                                    kh, kw, stride, ho, wo)
        gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]] if padding else gxp
        return gx, gw

    return out, grad


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, groups: int = 1,
           algorithm: str = "auto") -> Tensor:
    """2-D cross-correlation, NCHW input and OIKhKw kernel.

    ``algorithm`` is ``"direct"`` (loop over kernel offsets), ``"im2col"``
    (one matmul per group) or ``"auto"``, which picks im2col for dense
    spatial kernels and the direct loop for depthwise and 1x1 kernels.
    Output size follows floor((H + 2p - K) / s) + 1.
    """
    if algorithm == "auto":
        kh, kw = w.shape[2:]
        dense = groups == 1 and (kh > 1 or kw > 1 or stride > 1)
        algorithm = "im2col" if dense else "direct"
    kernel = {"direct": _conv_direct, "im2col": _conv_im2col}.get(algorithm)
    if kernel is None:
        raise ConfigurationError(f"unknown conv algorithm {algorithm!r}")
    out, grad = kernel(x.data, w.data, stride, padding, groups)
    return _make(out, (x, w), grad)


# ------------------------------------------------------------------- helpers


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"non-finite values produced at {where}")
    return t


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
               indices: Optional[Iterable[tuple]] = None) -> float:
    """Max relative error between the tape gradient and central differences.

    The analytic gradient comes from the float32 tape; the central
    differences evaluate ``f`` in float64 at float32-representable points
    ``x +/- h`` and divide by the actual step, so linear functions of float32
    inputs give an exact numeric derivative. The error per element is
    |analytic - numeric| / max(1, |analytic|, |numeric|). ``indices``
    restricts the comparison to selected elements of ``x`` (default: all).
    """
    was = x.requires_grad
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    try:
        with Tape() as tape:
            out = f(x)
        if out.data.size != 1:
            raise ContractError("grad_check needs a scalar-valued function")
        backward(tape, out)
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    finally:
        x.grad = saved_grad
        x.requires_grad = was

    if indices is None:
        indices = np.ndindex(*x.shape)
    original = x.data
    work = original.astype(np.float64)
    worst = 0.0
    try:
        x.data = work
        with precision(np.float64):
            for idx in indices:
                orig = original[idx]
                hi = float(DTYPE(orig + DTYPE(h)))
                lo = float(DTYPE(orig - DTYPE(h)))
                work[idx] = hi
                f_hi = float(f(x).data)
                work[idx] = lo
                f_lo = float(f(x).data)
                work[idx] = orig
                numeric = (f_hi - f_lo) / (hi - lo)
                a = float(analytic[idx])
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    finally:
        x.data = original
    return worst


def save_tensors(tensors: dict[str, np.ndarray], blob_path: Path) -> dict:
    """Write arrays back to back as little-endian float32; return the index."""
    index = {}
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(raw)
            index[name] = {"offset": offset, "shape": list(np.shape(arr))}
            offset += len(raw)
    return index


def load_tensors(index: dict, blob_path: Path) -> dict[str, np.ndarray]:
    raw = Path(blob_path).read_bytes()
    out = {}
    for name, entry in index.items():
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=entry["offset"])
        out[name] = arr.reshape(entry["shape"]).astype(DTYPE)
    return out


def save_tensor(t: Tensor, path: Path, name: str) -> None:
    """Single-tensor blob with a JSON sidecar ``{shape, name}``."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"shape": list(t.shape), "name": name}))


def load_tensor(path: Path) -> Tensor:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"])
    return Tensor(arr.copy(), name=meta["name"])
