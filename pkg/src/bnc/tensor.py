"""Reverse-mode automatic differentiation on numpy arrays.

The engine is deliberately small: it provides exactly the operations the
codec, binauralizer, discriminators and losses are built from. Differentiable
ops record themselves on a process-global tape in execution order (which is
topological by construction); `backward` replays the tape in reverse and
accumulates gradients additively into every tensor that requires them.

Training runs float32 for throughput. Gradient verification runs the same
code paths at float64, where central finite differences are trustworthy.
A tape and the tensors recorded on it belong to a single worker; use
`scoped_tape` to isolate a training step or a gradient check.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

try:
    # keep large activation buffers inside the malloc arena: repeated
    # mmap/munmap of tape-retained arrays dominates step time otherwise
    import ctypes

    _libc = ctypes.CDLL("libc.so.6")
    _libc.mallopt(-3, 1 << 28)   # M_MMAP_THRESHOLD
except OSError:  # pragma: no cover - non-glibc platforms
    pass

__all__ = [
    "Tensor", "Tape", "ShapeError", "active_tape", "clear_tape",
    "scoped_tape", "no_grad", "backward", "grad_check",
    "add", "sub", "mul", "div", "neg", "pow_const", "absolute",
    "exp", "log", "sqrt", "sin", "cos", "atan2",
    "relu", "leaky_relu", "elu", "tanh", "sigmoid", "softplus", "activation",
    "clamp", "reduce_sum", "reduce_mean", "reshape", "transpose", "concat",
    "pad1d", "frame_signal", "overlap_frames",
    "linear", "conv1d", "conv1d_transpose", "conv2d",
    "complex_magnitude", "cumsum", "cummax_last", "interp_time",
    "straight_through", "channel_bias", "l1_norm", "l2_norm",
]

_EPS_DENOM = 1e-12  # guard for backward rules with a magnitude in the denominator


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


# --------------------------------------------------------------------- tape

class Tape:
    """Execution-ordered record of differentiable operations.

    Ops append their outputs as they run, so the list is topologically
    ordered by construction; one backward pass visits each recorded op
    exactly once, in reverse order.
    """

    __slots__ = ("entries",)

    def __init__(self) -> None:
        self.entries: list[Tensor] = []

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_tape = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _tape


def clear_tape() -> None:
    _tape.clear()


@contextlib.contextmanager
def scoped_tape():
    """Run a block on a fresh tape, restoring the previous one afterwards.

    Forward and backward for one step must happen inside the same scope.
    """
    global _tape
    saved = _tape
    _tape = Tape()
    try:
        yield _tape
    finally:
        _tape = saved


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


# ------------------------------------------------------------------- tensor

class Tensor:
    """A float numpy array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_adjoint")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._adjoint: np.ndarray | None = None

    # -- basic introspection

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
        _tape.entries.append(out)
    return out


def _accumulate(p: Tensor, g: np.ndarray) -> None:
    if not p.requires_grad:
        return
    if p._backward_fn is not None:
        p._adjoint = g if p._adjoint is None else p._adjoint + g
    else:
        p.grad = g if p.grad is None else p.grad + g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every tensor reachable from loss.

    Repeated calls without zeroing gradients accumulate additively.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._backward_fn is None:
        raise ValueError("loss is not the output of an operation recorded on the active tape")
    loss._adjoint = np.ones_like(loss.data)
    for t in reversed(_tape.entries):
        adj = t._adjoint
        if adj is None:
            continue
        t._adjoint = None
        t.grad = adj if t.grad is None else t.grad + adj
        t._backward_fn(adj)


# ------------------------------------------------------- elementwise binary

def _check_pair(a: Tensor, b: Tensor, name: str) -> None:
    # scalars may combine with anything; otherwise shapes must match exactly
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{name}: shape {a.shape} does not match {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.data.shape:
        return g
    return np.sum(g).reshape(t.data.shape).astype(g.dtype)


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_pair(a, b, "add")

    def back(g):
        _accumulate(a, _reduce_to(g, a))
        _accumulate(b, _reduce_to(g, b))

    return _record(a.data + b.data, (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_pair(a, b, "sub")

    def back(g):
        _accumulate(a, _reduce_to(g, a))
        _accumulate(b, _reduce_to(-g, b))

    return _record(a.data - b.data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_pair(a, b, "mul")

    def back(g):
        _accumulate(a, _reduce_to(g * b.data, a))
        _accumulate(b, _reduce_to(g * a.data, b))

    return _record(a.data * b.data, (a, b), back)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_pair(a, b, "div")

    def back(g):
        _accumulate(a, _reduce_to(g / b.data, a))
        _accumulate(b, _reduce_to(-g * a.data / (b.data * b.data), b))

    return _record(a.data / b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, -g)

    return _record(-a.data, (a,), back)


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def back(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _record(a.data ** p, (a,), back)


def absolute(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, g * np.sign(a.data))

    return _record(np.abs(a.data), (a,), back)


# --------------------------------------------------------- elementwise unary

def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def back(g):
        _accumulate(a, g * out_data)

    return _record(out_data, (a,), back)


def log(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, g / a.data)

    return _record(np.log(a.data), (a,), back)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def back(g):
        _accumulate(a, g * 0.5 / out_data)

    return _record(out_data, (a,), back)


def sin(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, g * np.cos(a.data))

    return _record(np.sin(a.data), (a,), back)


def cos(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, -g * np.sin(a.data))

    return _record(np.cos(a.data), (a,), back)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    """Angle of (x, y) in (-pi, pi]; the -pi branch is folded onto +pi."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    x = _wrap(x, y)
    _check_pair(y, x, "atan2")
    ang = np.arctan2(y.data, x.data)
    ang = np.where(ang == -np.pi, np.pi, ang) if ang.ndim else (np.pi if ang == -np.pi else ang)

    def back(g):
        denom = np.maximum(x.data * x.data + y.data * y.data, _EPS_DENOM)
        _accumulate(y, _reduce_to(g * x.data / denom, y))
        _accumulate(x, _reduce_to(-g * y.data / denom, x))

    return _record(np.asarray(ang), (y, x), back)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def back(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _record(out_data, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def back(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _record(out_data, (a,), back)


def relu(a: Tensor) -> Tensor:
    # gradient at the kink takes the right-derivative of the flat side: relu'(0) = 0
    def back(g):
        _accumulate(a, g * (a.data > 0))

    return _record(np.maximum(a.data, 0.0), (a,), back)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    def back(g):
        _accumulate(a, g * np.where(a.data > 0, 1.0, slope))

    return _record(np.where(a.data > 0, a.data, slope * a.data), (a,), back)


def elu(a: Tensor) -> Tensor:
    x = a.data
    neg = x < 0
    out_data = x.copy()
    np.expm1(x, out=out_data, where=neg)

    def back(g):
        gx = g.copy()
        np.multiply(g, out_data + 1.0, out=gx, where=neg)
        _accumulate(a, gx)

    return _record(out_data, (a,), back)


def softplus(a: Tensor) -> Tensor:
    x = a.data

    def back(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _accumulate(a, g * s)

    return _record(np.logaddexp(0.0, x), (a,), back)


_ACTIVATIONS = {
    "elu": elu,
    "relu": relu,
    "leaky_relu": lambda t: leaky_relu(t, 0.2),
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(a)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    def back(g):
        mask = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            mask &= a.data > lo
        if hi is not None:
            mask &= a.data < hi
        _accumulate(a, g * mask)

    return _record(np.clip(a.data, lo, hi), (a,), back)


# ----------------------------------------------------------------- reductions

def _axis_tuple(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    out_data = np.sum(a.data, axis=axes, keepdims=keepdims)

    def back(g):
        gg = g
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).astype(g.dtype))

    return _record(np.asarray(out_data), (a,), back)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out_data = np.mean(a.data, axis=axes, keepdims=keepdims)

    def back(g):
        gg = g
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        _accumulate(a, (np.broadcast_to(gg, a.data.shape) / count).astype(g.dtype))

    return _record(np.asarray(out_data), (a,), back)


def l1_norm(a: Tensor) -> Tensor:
    return reduce_sum(absolute(a))


def l2_norm(a: Tensor) -> Tensor:
    return sqrt(reduce_sum(mul(a, a)))


# -------------------------------------------------------------- shape moves

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def back(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _record(a.data.reshape(shape), (a,), back)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)

    def back(g):
        _accumulate(a, np.transpose(g, inv))

    return _record(np.transpose(a.data, axes), (a,), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, stop)
            _accumulate(p, g[tuple(sl)])

    return _record(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


def _getitem(a: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        _accumulate(a, full)

    return _record(a.data[idx].copy(), (a,), back)


def pad1d(a: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    if left < 0 or right < 0:
        raise ValueError("pad1d amounts must be non-negative")
    width = [(0, 0)] * (a.ndim - 1) + [(left, right)]

    def back(g):
        sl = [slice(None)] * (a.ndim - 1) + [slice(left, g.shape[-1] - right or None)]
        _accumulate(a, g[tuple(sl)])

    return _record(np.pad(a.data, width), (a,), back)


# ------------------------------------------------------------------ framing

_FRAME_IDX: dict[tuple, np.ndarray] = {}


def _frame_idx(n: int, size: int, hop: int) -> np.ndarray:
    key = (n, size, hop)
    idx = _FRAME_IDX.get(key)
    if idx is None:
        count = (n - size) // hop + 1
        idx = (np.arange(count)[:, None] * hop + np.arange(size)[None, :])
        _FRAME_IDX[key] = idx
    return idx


def frame_signal(a: Tensor, size: int, hop: int) -> Tensor:
    """Slice a 1-D signal into overlapping frames [count, size]; no padding."""
    n = a.data.shape[-1]
    if a.ndim != 1:
        raise ShapeError(f"frame_signal expects a 1-D signal, got shape {a.shape}")
    if n < size:
        raise ShapeError(f"signal length {n} is shorter than frame size {size}")
    idx = _frame_idx(n, size, hop)

    def back(g):
        flat = np.bincount(idx.reshape(-1), weights=g.reshape(-1).astype(np.float64),
                           minlength=n)
        _accumulate(a, flat.astype(a.data.dtype))

    return _record(a.data[idx], (a,), back)


def overlap_frames(frames: Tensor, hop: int, length: int) -> Tensor:
    """Adjoint of frame_signal: overlap-add frames back to a signal."""
    count, size = frames.data.shape
    idx = _frame_idx(length, size, hop)

    def back(g):
        _accumulate(frames, g[idx])

    flat = np.bincount(idx.reshape(-1), weights=frames.data.reshape(-1).astype(np.float64),
                       minlength=length)
    return _record(flat.astype(frames.data.dtype), (frames,), back)


# ------------------------------------------------------------------- linear

def linear(a: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing dimension: out[..., j] = sum_i a[..., i] w[j, i] + b[j]."""
    f_out, f_in = weight.data.shape
    if a.data.shape[-1] != f_in:
        raise ShapeError(f"linear: trailing dim {a.data.shape[-1]} does not match weight F_in {f_in}")
    lead = a.data.shape[:-1]
    a2 = a.data.reshape(-1, f_in)
    out = a2 @ weight.data.T
    if bias is not None:
        if bias.data.shape != (f_out,):
            raise ShapeError(f"linear: bias shape {bias.data.shape} != ({f_out},)")
        out = out + bias.data

    def back(g):
        g2 = g.reshape(-1, f_out)
        _accumulate(a, (g2 @ weight.data).reshape(a.data.shape))
        _accumulate(weight, g2.T @ a2)
        if bias is not None:
            _accumulate(bias, g2.sum(axis=0))

    parents = (a, weight) if bias is None else (a, weight, bias)
    return _record(out.reshape(*lead, f_out), parents, back)


# ------------------------------------------------------------- convolutions

def _gather_taps(xp: np.ndarray, k: int, stride: int, dilation: int, t_out: int) -> np.ndarray:
    """Assemble [C, K, T_out] sliding-window columns via strided slices."""
    c = xp.shape[0]
    cols = np.empty((c, k, t_out), dtype=xp.dtype)
    span = (t_out - 1) * stride + 1
    for tap in range(k):
        s = tap * dilation
        cols[:, tap, :] = xp[:, s:s + span:stride]
    return cols


def _scatter_taps(g_cols: np.ndarray, t_padded: int, stride: int, dilation: int) -> np.ndarray:
    """Adjoint of _gather_taps: accumulate [C, K, T_out] back onto [C, T_padded]."""
    c, k, t_out = g_cols.shape
    g_xp = np.zeros((c, t_padded), dtype=g_cols.dtype)
    span = (t_out - 1) * stride + 1
    for tap in range(k):
        s = tap * dilation
        g_xp[:, s:s + span:stride] += g_cols[:, tap, :]
    return g_xp


def conv1d(a: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """1-D convolution of [C_in, T] with [C_out, C_in/groups, K] -> [C_out, T_out]."""
    if a.ndim != 2:
        raise ShapeError(f"conv1d: input must be [C_in, T], got shape {a.shape}")
    c_in, t = a.data.shape
    c_out, c_in_g, k = weight.data.shape
    if stride < 1 or dilation < 1:
        raise ValueError("conv1d: stride and dilation must be >= 1")
    if c_in_g * groups != c_in:
        raise ShapeError(f"conv1d: input channels {c_in} != kernel C_in {c_in_g} x groups {groups}")
    if c_out % groups:
        raise ShapeError(f"conv1d: output channels {c_out} not divisible by groups {groups}")
    t_padded = t + 2 * padding
    span = dilation * (k - 1) + 1
    if t_padded < span:
        raise ShapeError(f"conv1d: padded length {t_padded} shorter than kernel span {span}")

    xp = np.pad(a.data, ((0, 0), (padding, padding))) if padding else a.data
    t_out = (t_padded - span) // stride + 1
    cols = _gather_taps(xp, k, stride, dilation, t_out)

    co_g = c_out // groups
    out = np.empty((c_out, t_out), dtype=a.data.dtype)
    w2 = weight.data.reshape(c_out, c_in_g * k)
    for g_i in range(groups):
        cg = cols[g_i * c_in_g:(g_i + 1) * c_in_g].reshape(c_in_g * k, t_out)
        out[g_i * co_g:(g_i + 1) * co_g] = w2[g_i * co_g:(g_i + 1) * co_g] @ cg
    if bias is not None:
        if bias.data.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {bias.data.shape} != ({c_out},)")
        out = out + bias.data[:, None]
    del cols, xp  # recomputed in backward; retaining them doubles live memory

    def back(g):
        xp_b = np.pad(a.data, ((0, 0), (padding, padding))) if padding else a.data
        cols_b = _gather_taps(xp_b, k, stride, dilation, t_out)
        g_w = np.empty_like(weight.data)
        g_cols = np.empty((c_in, k, t_out), dtype=g.dtype)
        for g_i in range(groups):
            ci, co = slice(g_i * c_in_g, (g_i + 1) * c_in_g), slice(g_i * co_g, (g_i + 1) * co_g)
            cg = cols_b[ci].reshape(c_in_g * k, t_out)
            g_w[co] = (g[co] @ cg.T).reshape(co_g, c_in_g, k)
            g_cols[ci] = (w2[co].T @ g[co]).reshape(c_in_g, k, t_out)
        g_xp = _scatter_taps(g_cols, t_padded, stride, dilation)
        if padding:
            g_xp = g_xp[:, padding:t_padded - padding]
        _accumulate(a, g_xp)
        _accumulate(weight, g_w)
        if bias is not None:
            _accumulate(bias, g.sum(axis=1))

    parents = (a, weight) if bias is None else (a, weight, bias)
    return _record(out, parents, back)


def conv1d_transpose(a: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1) -> Tensor:
    """Transposed 1-D convolution of [C_in, T] with [C_in, C_out, K] -> [C_out, T*stride].

    The raw result of length (T-1)*stride + K is symmetrically cropped down to
    exactly T*stride; requires K >= stride.
    """
    if a.ndim != 2:
        raise ShapeError(f"conv1d_transpose: input must be [C_in, T], got shape {a.shape}")
    c_in, t = a.data.shape
    c_in_w, c_out, k = weight.data.shape
    if c_in_w != c_in:
        raise ShapeError(f"conv1d_transpose: input channels {c_in} != kernel C_in {c_in_w}")
    if k < stride:
        raise ShapeError(f"conv1d_transpose: kernel length {k} < stride {stride}")
    raw_len = (t - 1) * stride + k
    crop_l = (k - stride) // 2
    out_len = t * stride

    # cols[c_out*k, t] = sum_ci w[ci, c_out, k] x[ci, t], then raw[c, t*s + k] += cols
    w2 = weight.data.reshape(c_in, c_out * k)
    cols = (w2.T @ a.data).reshape(c_out, k, t)
    raw = _scatter_taps(cols, raw_len, stride, 1)
    out = raw[:, crop_l:crop_l + out_len]
    if bias is not None:
        if bias.data.shape != (c_out,):
            raise ShapeError(f"conv1d_transpose: bias shape {bias.data.shape} != ({c_out},)")
        out = out + bias.data[:, None]

    def back(g):
        g_raw = np.zeros((c_out, raw_len), dtype=g.dtype)
        g_raw[:, crop_l:crop_l + out_len] = g
        g_cols = _gather_taps(g_raw, k, stride, 1, t).reshape(c_out * k, t)
        _accumulate(a, w2 @ g_cols)
        _accumulate(weight, (g_cols @ a.data.T).T.reshape(c_in, c_out, k))
        if bias is not None:
            _accumulate(bias, g.sum(axis=1))

    parents = (a, weight) if bias is None else (a, weight, bias)
    return _record(out, parents, back)


def _gather_taps2d(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
                   h_out: int, w_out: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, kh * kw, h_out, w_out), dtype=xp.dtype)
    h_span = (h_out - 1) * sh + 1
    w_span = (w_out - 1) * sw + 1
    for dh in range(kh):
        for dw in range(kw):
            cols[:, dh * kw + dw] = xp[:, dh:dh + h_span:sh, dw:dw + w_span:sw]
    return cols


def conv2d(a: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: tuple[int, int] = (1, 1), padding: tuple[int, int] = (0, 0)) -> Tensor:
    """2-D convolution of [C_in, H, W] with [C_out, C_in, KH, KW]."""
    if a.ndim != 3:
        raise ShapeError(f"conv2d: input must be [C_in, H, W], got shape {a.shape}")
    c_in, h, w = a.data.shape
    c_out, c_in_w, kh, kw = weight.data.shape
    if c_in_w != c_in:
        raise ShapeError(f"conv2d: input channels {c_in} != kernel C_in {c_in_w}")
    sh, sw = stride
    ph, pw = padding
    hp, wp = h + 2 * ph, w + 2 * pw
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded size ({hp},{wp}) smaller than kernel ({kh},{kw})")

    xp = np.pad(a.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else a.data
    h_out = (hp - kh) // sh + 1
    w_out = (wp - kw) // sw + 1
    cols = _gather_taps2d(xp, kh, kw, sh, sw, h_out, w_out)
    cols2 = cols.reshape(c_in * kh * kw, h_out * w_out)
    out = (weight.data.reshape(c_out, -1) @ cols2).reshape(c_out, h_out, w_out)
    if bias is not None:
        out = out + bias.data[:, None, None]
    del cols, cols2, xp

    def back(g):
        xp_b = np.pad(a.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else a.data
        cols2 = _gather_taps2d(xp_b, kh, kw, sh, sw, h_out, w_out).reshape(
            c_in * kh * kw, h_out * w_out)
        g2 = g.reshape(c_out, -1)
        _accumulate(weight, (g2 @ cols2.T).reshape(weight.data.shape))
        g_cols = (weight.data.reshape(c_out, -1).T @ g2).reshape(c_in, kh * kw, h_out, w_out)
        g_xp = np.zeros((c_in, hp, wp), dtype=g.dtype)
        h_span = (h_out - 1) * sh + 1
        w_span = (w_out - 1) * sw + 1
        for dh in range(kh):
            for dw in range(kw):
                g_xp[:, dh:dh + h_span:sh, dw:dw + w_span:sw] += g_cols[:, dh * kw + dw]
        if ph or pw:
            g_xp = g_xp[:, ph:hp - ph, pw:wp - pw]
        _accumulate(a, g_xp)
        if bias is not None:
            _accumulate(bias, g.sum(axis=(1, 2)))

    parents = (a, weight) if bias is None else (a, weight, bias)
    return _record(out, parents, back)


# ---------------------------------------------------------------- specials

def complex_magnitude(re: Tensor, im: Tensor) -> Tensor:
    """sqrt(re^2 + im^2) with a denominator guard in the backward rule."""
    _check_pair(re, im, "complex_magnitude")
    out_data = np.sqrt(re.data * re.data + im.data * im.data)

    def back(g):
        denom = np.maximum(out_data, _EPS_DENOM)
        _accumulate(re, g * re.data / denom)
        _accumulate(im, g * im.data / denom)

    return _record(out_data, (re, im), back)


def cumsum(a: Tensor, axis: int = -1) -> Tensor:
    def back(g):
        _accumulate(a, np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

    return _record(np.cumsum(a.data, axis=axis), (a,), back)


def cummax_last(a: Tensor) -> Tensor:
    """Running maximum along the last axis; gradient routes to the source element."""
    x = a.data
    n = x.shape[-1]
    run = np.maximum.accumulate(x, axis=-1)
    fresh = x >= run                                    # positions where the running max is (re)set
    pos = np.arange(n)
    src = np.maximum.accumulate(np.where(fresh, pos, -1), axis=-1)

    def back(g):
        flat_g = g.reshape(-1, n)
        flat_src = src.reshape(-1, n)
        rows = flat_src + (np.arange(flat_g.shape[0]) * n)[:, None]
        out = np.bincount(rows.reshape(-1), weights=flat_g.reshape(-1).astype(np.float64),
                          minlength=flat_g.size)
        _accumulate(a, out.reshape(a.data.shape).astype(a.data.dtype))

    return _record(run, (a,), back)


def interp_time(signal: Tensor, positions) -> Tensor:
    """Linearly interpolate [C, T_src] at real-valued read positions.

    positions: [T_out] (shared across channels) or [C, T_out]; must lie in
    [0, T_src - 1]. Differentiable in both the signal and the positions.
    """
    pos_t = positions if isinstance(positions, Tensor) else Tensor(positions)
    c, t_src = signal.data.shape
    p = pos_t.data
    if np.any(p < -1e-9) or np.any(p > t_src - 1 + 1e-9):
        raise ValueError("interp_time: positions outside [0, T_src-1]")
    shared = p.ndim == 1
    lo = np.clip(np.floor(p).astype(np.int64), 0, t_src - 2)
    frac = (p - lo).astype(signal.data.dtype)
    ch = np.arange(c)[:, None]
    lo_c = lo[None, :] if shared else lo
    frac_c = frac[None, :] if shared else frac
    s_lo = signal.data[ch, lo_c]
    s_hi = signal.data[ch, lo_c + 1]
    out = s_lo * (1.0 - frac_c) + s_hi * frac_c

    def back(g):
        flat_lo = (np.broadcast_to(ch, g.shape) * t_src + lo_c).reshape(-1)
        idx = np.concatenate([flat_lo, flat_lo + 1])
        wts = np.concatenate([(g * (1.0 - frac_c)).reshape(-1),
                              (g * frac_c).reshape(-1)]).astype(np.float64)
        g_sig = np.bincount(idx, weights=wts, minlength=c * t_src).reshape(c, t_src)
        _accumulate(signal, g_sig.astype(signal.data.dtype))
        if pos_t.requires_grad:
            slope = (s_hi - s_lo) * g
            _accumulate(pos_t, slope.sum(axis=0) if shared else slope)

    return _record(out, (signal, pos_t), back)


def straight_through(a: Tensor, values: np.ndarray) -> Tensor:
    """Forward the given values; backward passes the gradient through unchanged."""
    if values.shape != a.data.shape:
        raise ShapeError(f"straight_through: values shape {values.shape} != input {a.shape}")

    def back(g):
        _accumulate(a, g)

    return _record(values.astype(a.data.dtype), (a,), back)


def channel_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias [C] across the time axis of [C, T].

    This is the only broadcast the engine permits beyond scalars.
    """
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.ndim != 2 or b.data.shape != (a.data.shape[0],):
        raise ShapeError(f"channel_bias: expected [C, T] and [C], got {a.shape} and {b.shape}")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g.sum(axis=1))

    return _record(a.data + b.data[:, None], (a, b), back)


# ----------------------------------------------------------- finite differences

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Evaluates f at float64 regardless of x's dtype; the error for coordinate i
    is |analytic_i - numeric_i| / max(1, |numeric_i|).
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    with scoped_tape():
        y = f(x64)
        if not isinstance(y, Tensor) or y.size != 1:
            raise ValueError("grad_check expects a scalar-valued function")
        backward(y)
    analytic = x64.grad.copy() if x64.grad is not None else np.zeros_like(x64.data)
    flat = x64.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_hi = f(x64).item()
            flat[i] = orig - eps
            f_lo = f(x64).item()
            flat[i] = orig
            numeric[i] = (f_hi - f_lo) / (2.0 * eps)
    numeric = numeric.reshape(x64.data.shape)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(np.max(err)) if err.size else 0.0
