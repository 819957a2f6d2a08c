"""A small reverse-mode automatic differentiation engine on top of numpy.

Every operation in this module returns a new :class:`Tensor`. When a
:class:`Tape` is active and at least one input requires a gradient, the
operation is appended to the tape together with a closure computing the
vector-Jacobian product. ``tape.backward(loss)`` replays those closures in
reverse recording order, which is a valid topological order because an
operation can only be recorded after its inputs exist.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([2., 4.])

All data is stored as float64.
"""
from __future__ import annotations

import builtins
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, EvaluationError, LabelError, NormalizationError, ParameterError

__all__ = [
    "Tensor", "Tape", "active_tape", "as_tensor",
    "add", "sub", "mul", "div", "neg", "matmul", "einsum",
    "sum", "mean", "reshape", "transpose", "concat", "stack", "take", "pad",
    "relu", "sigmoid", "exp", "log", "abs", "square",
    "softmax", "softmax_rows", "cross_entropy", "grl",
    "conv1d", "conv1d_valid", "maxpool1d", "dropout", "BatchNormState", "batch_norm",
    "grad_check", "grad_check_params",
]

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes are thread-local and may be nested (the
    innermost one records).
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: "Tensor", inputs: tuple, backward: Callable) -> None:
        self.records.append((out, inputs, backward))

    def backward(self, loss: "Tensor", retain: Sequence["Tensor"] = ()) -> None:
        """Populate ``.grad`` of every leaf that requires a gradient.

        Gradients are written (not accumulated), so each call gives the
        gradient of this ``loss`` only. Intermediate results get ``.grad``
        only when listed in ``retain``.
        """
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise EvaluationError("backward called on a non-finite loss")
        keep = {id(t) for t in retain}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = set()
        leaves: dict[int, Tensor] = {}
        for out, inputs, _ in self.records:
            produced.add(id(out))
            for t in inputs:
                if t.requires_grad:
                    leaves.setdefault(id(t), t)
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self.records):
            key = id(out)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if key in keep:
                out.grad = g if g is not None else np.zeros_like(out.data)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                tid = id(t)
                grads[tid] = grads[tid] + gi if tid in grads else gi
        for tid, t in leaves.items():
            if tid in produced:
                continue
            g = grads.get(tid)
            t.grad = np.array(g, dtype=np.float64) if g is not None else np.zeros_like(t.data)

    def clear(self) -> None:
        """Zero the gradient of every tensor seen by this tape and drop all records."""
        for out, inputs, _ in self.records:
            for t in (out, *inputs):
                if t.grad is not None:
                    t.grad = np.zeros_like(t.data)
        self.records.clear()


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(out, inputs, backward)
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, _swap(b.data)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(_swap(a.data), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum with explicit output, e.g. ``"bnct,t->bnc"``.

    Every index of an operand must also occur in the other operand or in the
    output, and no operand may repeat an index.
    """
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, t in ((sa, a), (sb, b)):
        if len(set(s)) != len(s) or len(s) != t.ndim:
            raise DimensionError(f"einsum: subscripts {s!r} do not fit operand of shape {t.shape}")
    for s, other in ((sa, sb), (sb, sa)):
        lone = set(s) - set(other) - set(out_sub)
        if lone:
            raise DimensionError(f"einsum: index {sorted(lone)} is summed within one operand only")
    try:
        out = np.einsum(subscripts, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise DimensionError(f"einsum {subscripts!r}: shapes {a.shape}, {b.shape}: {exc}") from None

    def backward(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


# -- reductions and shape ops -------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _result(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[ax] for ax in axes])) if axes else 1
    return sum(x, axis, keepdims) * (1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat along axis {axis}: incompatible shapes {ref.shape} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def _getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out), (x,), backward)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate in backward."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    out = np.take(x.data, indices, axis=ax)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return _result(out, (x,), backward)


def pad(x, widths) -> Tensor:
    """Zero padding; ``widths`` is a per-axis list of (before, after)."""
    x = as_tensor(x)
    widths = [tuple(w) for w in widths]
    out = np.pad(x.data, widths)
    region = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _result(out, (x,), lambda g: (g[region],))


# -- activations --------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _result(out, (x,), lambda g: (np.where(out > 0, g, 0.0),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so neither branch overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, i.e. independently per row of a matrix."""
    return softmax(x, axis=-1)


LOG_FLOOR = 1e-12


def cross_entropy(probs, onehot, check: bool = True) -> Tensor:
    """Mean negative log-likelihood of one-hot targets under row distributions.

    ``probs`` has shape (L, R). The log is clamped at ``LOG_FLOOR``.
    """
    probs = as_tensor(probs)
    y = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot, dtype=np.float64)
    if probs.ndim != 2 or y.shape != probs.shape:
        raise DimensionError(f"cross_entropy: probs {probs.shape} vs targets {y.shape}")
    if check:
        if not np.isfinite(probs.data).all():
            raise EvaluationError("cross_entropy: non-finite probabilities")
        if np.any(np.abs(probs.data.sum(axis=1) - 1.0) > 1e-6):
            raise NormalizationError("cross_entropy: probability rows must sum to 1 within 1e-6")
        if np.any((y != 0) & (y != 1)) or np.any(y.sum(axis=1) != 1):
            raise LabelError("cross_entropy: targets must be one-hot rows")
    n = probs.shape[0]
    clamped = np.maximum(probs.data, LOG_FLOOR)
    out = -(y * np.log(clamped)).sum() / n

    def backward(g):
        return (np.where(probs.data > LOG_FLOOR, -g * y / (clamped * n), 0.0),)

    return _result(np.asarray(out), (probs,), backward)


def grl(x, scale: float) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient times ``-scale`` backward."""
    if scale < 0:
        raise ParameterError(f"grl scale must be >= 0, got {scale}")
    x = as_tensor(x)
    return _result(x.data.copy(), (x,), lambda g: (-scale * g,))


# -- convolution, pooling, regularisation -------------------------------------

def conv1d(x, weight, bias=None, stride: int = 1, padding: str = "valid") -> Tensor:
    """Batched 1-D cross-correlation on channels-last input.

    x: (B, L, C_in); weight: (C_out, C_in, k); bias: (C_out,) or None.
    ``padding="same"`` zero-pads so that L_out = ceil(L / stride), with the
    odd extra sample on the right.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernel {weight.shape}")
    if stride < 1:
        raise ParameterError(f"conv1d: stride must be >= 1, got {stride}")
    c_out, c_in, k = weight.shape
    batch, length, _ = x.shape
    if padding == "same":
        total = max((-(-length // stride) - 1) * stride + k - length, 0)
        left = total // 2
        xp = np.pad(x.data, ((0, 0), (left, total - left), (0, 0)))
    elif padding == "valid":
        left = 0
        xp = x.data
    else:
        raise ParameterError(f"conv1d: unknown padding {padding!r}")
    if k > xp.shape[1]:
        raise DimensionError(f"conv1d: kernel length {k} exceeds signal length {xp.shape[1]}; output would be empty")
    l_out = (xp.shape[1] - k) // stride + 1
    # columns ordered (tap, channel) so each tap's gradient slice is contiguous
    cols = sliding_window_view(xp, k, axis=1)[:, ::stride][:, :l_out]  # (B, L_out, C_in, k)
    cols = cols.transpose(0, 1, 3, 2).reshape(batch * l_out, k * c_in)
    w2 = weight.data.transpose(0, 2, 1).reshape(c_out, k * c_in)
    out = (cols @ w2.T).reshape(batch, l_out, c_out)
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs = (x, weight, bias)

    def backward(g):
        g2 = g.reshape(batch * l_out, c_out)
        gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(c_out, k, c_in).transpose(0, 2, 1)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(batch, l_out, k, c_in)
            gxp = np.zeros_like(xp)
            stop = stride * (l_out - 1) + 1
            for j in range(k):
                gxp[:, j:j + stop:stride, :] += gcols[:, :, j, :]
            gx = gxp[:, left:left + length, :]
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return _result(out, inputs, backward)


def conv1d_valid(signal, kernel, stride: int = 1) -> Tensor:
    """Valid cross-correlation of a 1-D signal with a 1-D kernel.

    Output length is ``(L - k) // stride + 1``.
    """
    signal, kernel = as_tensor(signal), as_tensor(kernel)
    if signal.ndim != 1 or kernel.ndim != 1:
        raise DimensionError(f"conv1d_valid expects 1-D tensors, got {signal.shape} and {kernel.shape}")
    out = conv1d(reshape(signal, (1, signal.shape[0], 1)), reshape(kernel, (1, 1, kernel.shape[0])),
                 stride=stride)
    return reshape(out, (out.shape[1],))


def maxpool1d(x, window: int, stride: int | None = None) -> Tensor:
    """Max pooling over the length axis; ties route the gradient to the first index.

    Accepts a 1-D signal or channels-last (B, L, C) input.
    """
    x = as_tensor(x)
    stride = window if stride is None else stride
    if x.ndim == 1:
        out = maxpool1d(reshape(x, (1, x.shape[0], 1)), window, stride)
        return reshape(out, (out.shape[1],))
    if x.ndim != 3:
        raise DimensionError(f"maxpool1d expects (L,) or (B, L, C), got {x.shape}")
    if window < 1 or stride < 1:
        raise ParameterError("maxpool1d: window and stride must be >= 1")
    if window > x.shape[1]:
        raise DimensionError(f"maxpool1d: window {window} exceeds signal length {x.shape[1]}")
    batch, length, channels = x.shape
    l_out = (length - window) // stride + 1
    if stride == window:
        # non-overlapping windows: a plain reshape keeps memory contiguous
        win = x.data[:, :l_out * window].reshape(batch, l_out, window, channels)
        arg = win.argmax(axis=2)
        out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0]

        def backward(g):
            hit = arg[:, :, None, :] == np.arange(window)[None, None, :, None]
            gx = np.zeros_like(x.data)
            gx[:, :l_out * window] = np.where(hit, g[:, :, None, :], 0.0).reshape(batch, l_out * window, channels)
            return (gx,)

        return _result(out, (x,), backward)

    win = sliding_window_view(x.data, window, axis=1)[:, ::stride][:, :l_out]  # (B, L_out, C, w)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        stop = stride * (l_out - 1) + 1
        for j in range(window):
            gx[:, j:j + stop:stride, :] += np.where(arg == j, g, 0.0)
        return (gx,)

    return _result(out, (x,), backward)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode, mask-and-rescale in train mode."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in train mode needs an explicit random generator")
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * scale, (x,), lambda g: (g * scale,))


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer over ``channels`` features."""

    channels: int
    momentum: float = 0.9
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalisation over every axis except the last (channel) axis.

    In train mode batch statistics are used and the running estimates move by
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.channels != c:
        raise DimensionError(f"batch_norm: {c} channels vs gamma {gamma.shape}, beta {beta.shape}")
    shape = x.shape
    x2 = x.data.reshape(-1, c)
    count = x2.shape[0]
    if training:
        mu = x2.mean(axis=0)
        centered = x2 - mu
        var = np.einsum("ij,ij->j", centered, centered) / count
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mu
        state.running_var = m * state.running_var + (1 - m) * var
    else:
        mu, var = state.running_mean, state.running_var
        centered = x2 - mu
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv_std
    out = (gamma.data * xhat + beta.data).reshape(shape)

    def backward(g):
        g2 = g.reshape(-1, c)
        gg = np.einsum("ij,ij->j", g2, xhat)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            if training:
                scale = gamma.data * inv_std
                gx = scale * (g2 - gb / count - xhat * (gg / count))
            else:
                gx = g2 * (gamma.data * inv_std)
            gx = gx.reshape(shape)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward)


# -- finite-difference checking -----------------------------------------------

def _scalar(value: Tensor) -> float:
    if value.data.size != 1:
        raise DimensionError(f"expected a scalar function value, got shape {value.shape}")
    v = float(value.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise EvaluationError(f"function value is not finite: {v}")
    return v


def grad_check(function: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``numeric`` is the central difference (f(x+h) - f(x-h)) / 2h.
    """
    if h <= 0:
        raise ParameterError("grad_check step must be positive")
    base = np.array(as_tensor(point).data, dtype=np.float64, copy=True)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = function(x)
    _scalar(y)
    tape.backward(y)
    analytic = x.grad
    worst = 0.0
    for idx in np.ndindex(base.shape):
        probe = base.copy()
        probe[idx] += h
        fp = _scalar(function(Tensor(probe)))
        probe[idx] -= 2 * h
        fm = _scalar(function(Tensor(probe)))
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, builtins.abs(analytic[idx] - numeric) / max(1.0, builtins.abs(numeric)))
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Like :func:`grad_check`, but perturbs parameter tensors in place.

    ``loss_fn`` takes no arguments and reads ``params`` through closure. With
    ``max_coords`` only that many randomly chosen coordinates per parameter
    are probed.
    """
    params = list(params)
    with Tape() as tape:
        y = loss_fn()
    _scalar(y)
    tape.backward(y)
    analytic = [p.grad.copy() for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(loss_fn())
            flat[i] = orig - h
            fm = _scalar(loss_fn())
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, builtins.abs(ga.reshape(-1)[i] - numeric) / max(1.0, builtins.abs(numeric)))
    return worst
