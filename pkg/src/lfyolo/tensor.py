"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operators are plain functions over :class:`Tensor`. When a :class:`GradTape`
is active and any operand has ``requires_grad`` set, the operator appends a
``(result, operands, backward_fn)`` record to the tape; :func:`backward`
replays the records in reverse order. Outside a tape nothing is recorded, so
inference carries no bookkeeping cost.

Convolutions are cross-correlations (no kernel flip) with symmetric zero
padding; max pooling pads with ``-inf``.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "finite_diff_check",
    "conv2d",
    "maxpool2d",
    "batchnorm",
    "leaky_relu",
    "sigmoid",
    "activation",
    "concat",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "clip",
    "minimum",
    "maximum",
    "upsample_nearest_2x",
    "combine",
    "tsum",
    "mean",
    "reshape",
    "index",
]

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    """A float64 array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of executed operators.

    Use as a context manager; tapes nest per thread and only the innermost one
    records.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._watched: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.ops)

    def watch(self, tensors: Iterable[Tensor]) -> None:
        """Register leaves that must receive a gradient even when unused."""
        for t in tensors:
            t.requires_grad = True
            self._watched.append(t)

    def leaves(self) -> list[Tensor]:
        produced = {id(out) for out, _, _ in self.ops}
        seen: dict[int, Tensor] = {}
        for t in self._watched:
            seen.setdefault(id(t), t)
        for _, inputs, _ in self.ops:
            for t in inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    stack = getattr(_local, "stack", None)
    if stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        stack[-1].ops.append((out, inputs, fn))
    return out


def backward(tape: GradTape, loss: Tensor, sources: Sequence[Tensor] | None = None):
    """Replay ``tape`` in reverse from the scalar ``loss``.

    Sets ``.grad`` on every leaf with ``requires_grad`` seen by the tape (zeros
    when the leaf is off the loss path) and returns the gradients of
    ``sources`` (default: all such leaves) in order.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
    leaves = tape.leaves()
    if loss.requires_grad and all(t is not loss for t in leaves) and not tape.ops:
        leaves.append(loss)
    for t in leaves:
        g = grads.get(id(t))
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
    if sources is None:
        sources = leaves
    out = []
    for t in sources:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        out.append(t.grad)
    return out


def numeric_gradient(fn: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` at ``x``; checks that ``fn`` is deterministic."""
    if step <= 0:
        raise ContractError("finite difference step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    first = fn(Tensor(base.copy())).data
    second = fn(Tensor(base.copy())).data
    if not np.array_equal(first, second):
        raise ContractError("fn is not deterministic: repeated evaluation differs")
    flat = base.reshape(-1)
    cd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(Tensor(base)).data)
        flat[i] = orig - step
        fm = float(fn(Tensor(base)).data)
        flat[i] = orig
        cd[i] = (fp - fm) / (2.0 * step)
    return cd.reshape(base.shape)


def analytic_gradient(fn: Callable[[Tensor], Tensor], x) -> np.ndarray:
    leaf = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
    with GradTape() as tape:
        loss = fn(leaf)
    (grad,) = backward(tape, loss, [leaf])
    return grad


def gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise relative error ``max|a - n| / max(max|a|, max|n|, 1e-12)``."""
    if analytic.shape != numeric.shape:
        raise ShapeError(f"gradient shapes differ: {analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def finite_diff_check(fn: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Relative error between tape gradients and central differences (see :func:`gradient_error`)."""
    numeric = numeric_gradient(fn, x, step)
    return gradient_error(analytic_gradient(fn, x), numeric)


# -- element-wise ---------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = _lift(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp values; gradient passes only where the value was inside the range."""
    a = _lift(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return _result(out, (a,), lambda g: (np.where(inside, g, 0.0),))


def minimum(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    pick_a = a.data <= b.data
    return _result(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                              _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def maximum(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    pick_a = a.data >= b.data
    return _result(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                              _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = _lift(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, slope * x.data), (x,),
                   lambda g: (np.where(pos, g, slope * g),))


def sigmoid(x) -> Tensor:
    x = _lift(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(x, kind: str, slope: float = 0.1) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


# -- reductions and indexing ----------------------------------------------

def tsum(a, axis=None) -> Tensor:
    a = _lift(a)
    shape = a.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), fn)


def mean(a, axis=None) -> Tensor:
    a = _lift(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / max(int(count), 1))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def index(a, key) -> Tensor:
    a = _lift(a)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.asarray(a.data[key]), (a,), fn)


# -- feature-map combinators ----------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    for i, t in enumerate(tensors[1:], start=1):
        if len(t.shape) != len(ref) or any(
            a != b for ax, (a, b) in enumerate(zip(t.shape, ref)) if ax != axis % len(ref)
        ):
            raise ShapeError(f"concat: tensor {i} has shape {t.shape}, incompatible with tensor 0 {ref}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def upsample_nearest_2x(x) -> Tensor:
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample expects a 4-D tensor, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def combine(inputs: Sequence[Tensor], kind: str) -> Tensor:
    """Concatenate along channels, add element-wise, or upsample 2x (single input)."""
    inputs = [_lift(t) for t in inputs]
    if kind == "concat_channels":
        for i, t in enumerate(inputs):
            if t.ndim != 4:
                raise ShapeError(f"combine: tensor {i} is not 4-D: {t.shape}")
        return concat(inputs, axis=1)
    if kind == "add":
        out = inputs[0]
        for i, t in enumerate(inputs[1:], start=1):
            if t.shape != inputs[0].shape:
                raise ShapeError(f"combine add: tensor {i} has shape {t.shape}, expected {inputs[0].shape}")
            out = add(out, t)
        return out
    if kind == "upsample_nearest_2x":
        if len(inputs) != 1:
            raise ShapeError(f"upsample takes a single tensor, got {len(inputs)}")
        return upsample_nearest_2x(inputs[0])
    raise ConfigError(f"unknown combine kind {kind!r}")


# -- convolution ----------------------------------------------------------

def _window(xp: np.ndarray, i: int, j: int, d: int, s: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i * d: i * d + s * (ho - 1) + 1: s, j * d: j * d + s * (wo - 1) + 1: s]


def _conv_tap(patch: np.ndarray, wk: np.ndarray, groups: int) -> np.ndarray:
    n, c, ho, wo = patch.shape
    co, cig = wk.shape
    if groups == 1:
        return np.tensordot(wk, patch, axes=(1, 1)).transpose(1, 0, 2, 3)
    mult = co // groups
    if cig == 1:
        return (patch[:, :, None] * wk.reshape(groups, mult)[None, :, :, None, None]).reshape(n, co, ho, wo)
    pg = patch.reshape(n, groups, cig, ho, wo)
    return np.einsum("ngchw,goc->ngohw", pg, wk.reshape(groups, mult, cig), optimize=True).reshape(n, co, ho, wo)


def _conv_tap_grads(patch, wk, gout, groups):
    n, c, ho, wo = patch.shape
    co, cig = wk.shape
    if groups == 1:
        gw = np.tensordot(gout, patch, axes=([0, 2, 3], [0, 2, 3]))
        gx = np.tensordot(wk, gout, axes=(0, 1)).transpose(1, 0, 2, 3)
        return gw, gx
    mult = co // groups
    go = gout.reshape(n, groups, mult, ho, wo)
    if cig == 1:
        gw = (go * patch[:, :, None]).sum(axis=(0, 3, 4)).reshape(co, 1)
        gx = (go * wk.reshape(groups, mult)[None, :, :, None, None]).sum(axis=2)
        return gw, gx
    pg = patch.reshape(n, groups, cig, ho, wo)
    wg = wk.reshape(groups, mult, cig)
    gw = np.einsum("ngohw,ngchw->goc", go, pg, optimize=True).reshape(co, cig)
    gx = np.einsum("ngohw,goc->ngchw", go, wg, optimize=True).reshape(n, c, ho, wo)
    return gw, gx


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1,
           groups: int = 1, label: str = "conv2d") -> Tensor:
    """Dilated, strided, grouped 2-D cross-correlation over NCHW input."""
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"{label}: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or dilation < 1 or groups < 1 or padding < 0:
        raise ConfigError(f"{label}: invalid stride/dilation/groups/padding {stride}/{dilation}/{groups}/{padding}")
    n, c, h, w = x.shape
    co, cig, kh, kw = weight.shape
    if co % groups:
        raise ConfigError(f"{label}: {co} output channels not divisible by {groups} groups")
    if cig * groups != c:
        raise ShapeError(
            f"{label}: input has {c} channels but weight expects {cig * groups} "
            f"({cig} per group x {groups} groups)")
    eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if h + 2 * padding < eh or w + 2 * padding < ew:
        raise ShapeError(
            f"{label}: dilated kernel {eh}x{ew} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = (h + 2 * padding - eh) // stride + 1
    wo = (w + 2 * padding - ew) // stride + 1
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    wd = weight.data
    out = np.zeros((n, co, ho, wo))
    for i in range(kh):
        for j in range(kw):
            out += _conv_tap(_window(xp, i, j, dilation, stride, ho, wo), wd[:, :, i, j], groups)
    inputs: tuple = (x, weight)
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (co,):
            raise ShapeError(f"{label}: bias shape {bias.shape} does not match {co} output channels")
        out += bias.data[None, :, None, None]
        inputs = (x, weight, bias)

    def fn(g):
        gw = np.zeros_like(wd) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                patch = _window(xp, i, j, dilation, stride, ho, wo)
                tw, tx = _conv_tap_grads(patch, wd[:, :, i, j], g, groups)
                if gw is not None:
                    gw[:, :, i, j] = tw
                if gxp is not None:
                    _window(gxp, i, j, dilation, stride, ho, wo)[...] += tx
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out, inputs, fn)


def maxpool2d(x, kernel: int, stride: int | None = None, padding: int | str = 0) -> Tensor:
    """Window maximum. ``padding="same"`` keeps spatial size (stride 1, odd kernel)."""
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-D tensor, got {x.shape}")
    if kernel < 1:
        raise ConfigError(f"maxpool kernel must be positive, got {kernel}")
    if padding == "same":
        if stride not in (None, 1):
            raise ConfigError("same-size max pooling requires stride 1")
        if kernel % 2 == 0:
            raise ConfigError(f"same-size max pooling needs an odd kernel, got {kernel}")
        stride, padding = 1, (kernel - 1) // 2
    if stride is None:
        stride = kernel
    n, c, h, w = x.shape
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ShapeError(f"maxpool kernel {kernel} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else xd
    out = np.full((n, c, ho, wo), -np.inf)
    arg = np.zeros((n, c, ho, wo), dtype=np.int32)
    for t in range(kernel * kernel):
        i, j = divmod(t, kernel)
        v = _window(xp, i, j, 1, stride, ho, wo)
        better = v > out
        out = np.where(better, v, out)
        arg[better] = t

    def fn(g):
        gxp = np.zeros(xp.shape)
        for t in range(kernel * kernel):
            i, j = divmod(t, kernel)
            _window(gxp, i, j, 1, stride, ho, wo)[...] += np.where(arg == t, g, 0.0)
        return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)

    return _result(out, (x,), fn)


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
              eps: float = 1e-5, training: bool = False, momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over (n, h, w).

    Training mode normalizes with batch statistics and updates the running
    buffers in place: ``r <- (1 - momentum) * r + momentum * batch`` (unbiased
    variance for the running estimate).
    """
    if eps <= 0:
        raise ConfigError(f"batchnorm eps must be positive, got {eps}")
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects a 4-D tensor, got {x.shape}")
    c = x.shape[1]
    for label, v in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean),
                     ("running_var", running_var)):
        if np.shape(v) != (c,):
            raise ShapeError(f"batchnorm {label} has shape {np.shape(v)}, expected ({c},)")
    gd = gamma.data[None, :, None, None]
    if training:
        m = x.data.size // c
        mu = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mu[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * m / (m - 1) if m > 1 else var)

        def fn(g):
            gsum = g.sum(axis=(0, 2, 3))
            gxhat = (g * xhat).sum(axis=(0, 2, 3))
            gx = (gd * inv[None, :, None, None] / m) * (
                m * g - gsum[None, :, None, None] - xhat * gxhat[None, :, None, None])
            return gx, gxhat, gsum
    else:
        if np.any(running_var < 0):
            raise ConfigError("batchnorm running_var must be non-negative")
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]

        def fn(g):
            return (g * (gd * inv[None, :, None, None]),
                    (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))

    out = xhat * gd + beta.data[None, :, None, None]
    return _result(out, (x, gamma, beta), fn)
