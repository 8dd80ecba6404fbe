"""Minimal N-d float tensors with tape-based reverse-mode differentiation.

The kernel inventory is deliberately small: exactly the operations the
encoder/decoder, the noise predictor and the condition classifier are built
from (convolutions, group norm, SiLU, pooling/upsampling, linear layers,
elementwise arithmetic and a few reductions), each with a hand-written
adjoint.  Every kernel output is checked for NaN/Inf and raises
``NumericError`` on failure.

Precision is float32 by default; ``using_dtype(np.float64)`` switches new
tensors to float64 for gradient verification and metric work.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "ShapeError",
    "NumericError",
    "set_default_dtype",
    "default_dtype",
    "using_dtype",
    "no_grad",
    "backward",
    "adam_step",
    "finite_difference_check",
    "conv2d",
    "conv_transpose2d",
    "linear",
    "group_norm",
    "silu",
    "sigmoid",
    "exp",
    "clamp",
    "avg_pool2d",
    "nearest_upsample",
    "add",
    "mul",
    "concat",
    "narrow",
    "gather_rows",
    "reshape",
    "mean_all",
    "sum_all",
    "global_avg_pool",
    "mse",
    "cross_entropy_logits",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a kernel."""


class NumericError(ArithmeticError):
    """Raised when a kernel produces (or receives) NaN or Inf values."""


_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    """A dense float array plus an optional gradient buffer.

    Tensors produced by kernels are treated as immutable; only leaf
    parameters are ever updated in place (by the optimizer).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        _check_finite(arr, "Tensor constructor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, kernel: str) -> "Tensor":
        _check_finite(arr, kernel)
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False, "detach")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Small operator sugar over the add/mul kernels; scalars are wrapped as
    # constant tensors of the same dtype.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), -self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the kernel set")
        return mul(self, _as_tensor(1.0 / other, self.dtype))


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    backward_fn: Callable


@dataclass
class Tape:
    """Ordered record of executed kernels.

    Kernels append nodes in execution order, which is a topological order of
    the computation graph, so replaying the list in reverse visits every node
    exactly once with its output adjoint fully accumulated.
    """

    nodes: list = field(default_factory=list)

    def record(self, out: Tensor, parents: Iterable[Tensor], backward_fn: Callable) -> None:
        self.nodes.append(_Node(out, tuple(parents), backward_fn))

    def reset(self) -> None:
        self.nodes.clear()


_TAPE = Tape()
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the context (inference / sampling)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _record(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> None:
    if out.requires_grad:
        _TAPE.record(out, parents, backward_fn)


def _wants_grad(*parents: Tensor) -> bool:
    return _GRAD_ENABLED and any(p.requires_grad for p in parents)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every contributing tensor.

    The active tape is consumed: after this call a fresh tape is in place.
    """
    global _TAPE
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape, _TAPE = _TAPE, Tape()
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
        node.out.grad = None if node.out is not loss else node.out.grad


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Elementwise kernels
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gdim, sdim) in enumerate(zip(g.shape, shape)):
        if sdim == 1 and gdim != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data + b.data, _wants_grad(a, b), "add")

    def bwd(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    _record(out, (a, b), bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data * b.data, _wants_grad(a, b), "mul")

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    _record(out, (a, b), bwd)
    return out


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor._wrap(x.data * s, _wants_grad(x), "silu")

    def bwd(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    _record(out, (x,), bwd)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor._wrap(s, _wants_grad(x), "sigmoid")

    def bwd(g):
        return (g * s * (1.0 - s),)

    _record(out, (x,), bwd)
    return out


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor._wrap(e, _wants_grad(x), "exp")

    def bwd(g):
        return (g * e,)

    _record(out, (x,), bwd)
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Elementwise clip; gradient is passed through strictly inside [lo, hi]."""
    out = Tensor._wrap(np.clip(x.data, lo, hi), _wants_grad(x), "clamp")
    mask = (x.data > lo) & (x.data < hi)

    def bwd(g):
        return (g * mask,)

    _record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# Shape kernels
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor._wrap(x.data.reshape(shape), _wants_grad(x), "reshape")

    def bwd(g):
        return (g.reshape(x.shape),)

    _record(out, (x,), bwd)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat requires at least one tensor")
    out = Tensor._wrap(
        np.concatenate([t.data for t in tensors], axis=axis),
        _wants_grad(*tensors),
        "concat",
    )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                pieces.append(np.ascontiguousarray(g[tuple(index)]))
            else:
                pieces.append(None)
        return tuple(pieces)

    _record(out, tuple(tensors), bwd)
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (inverse of concat)."""
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow range [{start}, {start + length}) exceeds size {x.shape[axis]} on axis {axis}"
        )
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    out = Tensor._wrap(np.ascontiguousarray(x.data[tuple(index)]), _wants_grad(x), "narrow")

    def bwd(g):
        full = np.zeros_like(x.data)
        full[tuple(index)] = g
        return (full,)

    _record(out, (x,), bwd)
    return out


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup into an embedding table; gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows expects 1-d indices, got shape {idx.shape}")
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= table.shape[0]):
        raise ShapeError(f"index out of range for table with {table.shape[0]} rows")
    out = Tensor._wrap(table.data[idx], _wants_grad(table), "gather_rows")

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    _record(out, (table,), bwd)
    return out


# ---------------------------------------------------------------------------
# Reductions and losses
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(x.data.sum(), dtype=x.data.dtype), _wants_grad(x), "sum_all")

    def bwd(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    _record(out, (x,), bwd)
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor._wrap(np.asarray(x.data.mean(), dtype=x.data.dtype), _wants_grad(x), "mean_all")

    def bwd(g):
        return ((np.broadcast_to(g, x.shape) / n).astype(x.data.dtype),)

    _record(out, (x,), bwd)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C), mean over the spatial dims."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    out = Tensor._wrap(x.data.mean(axis=(2, 3)), _wants_grad(x), "global_avg_pool")

    def bwd(g):
        return ((g[:, :, None, None] / (h * w)) * np.ones_like(x.data),)

    _record(out, (x,), bwd)
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = Tensor._wrap(np.asarray(np.mean(diff * diff), dtype=a.data.dtype), _wants_grad(a, b), "mse")
    scale = 2.0 / a.size

    def bwd(g):
        base = g * scale * diff
        return (
            base if a.requires_grad else None,
            -base if b.requires_grad else None,
        )

    _record(out, (a, b), bwd)
    return out


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy_logits expects (N, K) logits and (N,) labels, got {logits.shape} and {y.shape}"
        )
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    n = z.shape[0]
    nll = -logp[np.arange(n), y].mean()
    out = Tensor._wrap(np.asarray(nll, dtype=z.dtype), _wants_grad(logits), "cross_entropy_logits")

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        return (g * p / n,)

    _record(out, (logits,), bwd)
    return out


# ---------------------------------------------------------------------------
# Convolution kernels (im2col based)
# ---------------------------------------------------------------------------


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """(N, C, Hp, Wp) -> ((N, C*kh*kw, OH*OW) patch matrix, OH, OW).

    Filled with one strided slice copy per kernel offset, which keeps the
    copies contiguous and the final reshape free.
    """
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        hi = i + (oh - 1) * stride + 1
        for j in range(kw):
            wj = j + (ow - 1) * stride + 1
            cols[:, :, i, j] = xp[:, :, i:hi:stride, j:wj:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int, want_cols: bool = False):
    n = x.shape[0]
    co, ci, kh, kw = w.shape
    cols, oh, ow = _im2col(_pad_hw(x, pad), kh, kw, stride)
    out = np.matmul(w.reshape(co, ci * kh * kw), cols).reshape(n, co, oh, ow)
    if want_cols:
        return out, cols
    return out


def _conv_dw_from_cols(cols: np.ndarray, dy: np.ndarray, ci: int, kh: int, kw: int) -> np.ndarray:
    """Kernel gradient of y = conv(x, w) given the forward patch matrix."""
    n, co = dy.shape[0], dy.shape[1]
    dy_mat = dy.reshape(n, co, -1)
    # (N, O, P) @ (N, P, K) as a batched GEMM on the transposed view, then
    # reduce over the batch; BLAS consumes the transpose without a copy.
    dw = np.matmul(dy_mat, cols.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(co, ci, kh, kw)


def _conv_dw(x: np.ndarray, dy: np.ndarray, stride: int, pad: int, kh: int, kw: int) -> np.ndarray:
    """Kernel gradient of y = conv(x, w): einsum of input patches with dy."""
    cols, _, _ = _im2col(_pad_hw(x, pad), kh, kw, stride)
    return _conv_dw_from_cols(cols, dy, x.shape[1], kh, kw)


def _conv_adjoint(g: np.ndarray, w: np.ndarray, stride: int, pad: int, out_hw: tuple) -> np.ndarray:
    """Apply the transpose of the conv(., w, stride, pad) operator to g.

    Zero-stuff g by the stride, pad by (k-1) per axis, then run a stride-1
    correlation with the kernel flipped spatially and transposed in its
    channel axes; finally crop by ``pad`` and fit to ``out_hw`` (the stride
    may not divide the forward input exactly, in which case the trailing
    rows/columns never influenced the output and get zero gradient).
    """
    n, co, gh, gw = g.shape
    _, ci, kh, kw = w.shape
    th, tw = out_hw
    if stride > 1:
        stuffed = np.zeros((n, co, (gh - 1) * stride + 1, (gw - 1) * stride + 1), dtype=g.dtype)
        stuffed[:, :, ::stride, ::stride] = g
    else:
        stuffed = g
    xp = np.pad(stuffed, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    full = _conv_fwd(xp, wt, 1, 0)
    trimmed = full[:, :, pad : pad + th, pad : pad + tw]
    if trimmed.shape[2] < th or trimmed.shape[3] < tw:
        padded = np.zeros((n, ci, th, tw), dtype=g.dtype)
        padded[:, :, : trimmed.shape[2], : trimmed.shape[3]] = trimmed
        return padded
    return np.ascontiguousarray(trimmed)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation; ``x`` is NCHW, ``w`` is (C_out, C_in, kH, kW)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} has {x.shape[1]} channels, "
            f"kernel {w.shape} expects {w.shape[1]}"
        )
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d requires stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    if x.shape[2] + 2 * pad < w.shape[2] or x.shape[3] + 2 * pad < w.shape[3]:
        raise ShapeError(f"kernel {w.shape} larger than padded input {x.shape} (pad={pad})")
    kh, kw = w.shape[2], w.shape[3]
    ci = x.shape[1]
    keep_cols = _wants_grad(x, w) and w.requires_grad
    if keep_cols:
        out_arr, cols = _conv_fwd(x.data, w.data, stride, pad, want_cols=True)
    else:
        out_arr, cols = _conv_fwd(x.data, w.data, stride, pad), None
    out = Tensor._wrap(out_arr, _wants_grad(x, w), "conv2d")

    def bwd(g):
        gx = (
            _conv_adjoint(g, w.data, stride, pad, (x.shape[2], x.shape[3]))
            if x.requires_grad
            else None
        )
        gw = _conv_dw_from_cols(cols, g, ci, kh, kw) if w.requires_grad else None
        return (gx, gw)

    _record(out, (x, w), bwd)
    return out


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution; ``w`` is (C_in, C_out, kH, kW).

    Output spatial size is (H - 1) * stride - 2 * pad + kH, the exact adjoint
    of ``conv2d`` with the same stride and pad.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"conv_transpose2d channel mismatch: input {x.shape} has {x.shape[1]} channels, "
            f"kernel {w.shape} expects {w.shape[0]}"
        )
    if stride < 1 or pad < 0:
        raise ShapeError(
            f"conv_transpose2d requires stride >= 1 and pad >= 0, got stride={stride}, pad={pad}"
        )
    ci, co, kh, kw = w.shape
    th = (x.shape[2] - 1) * stride - 2 * pad + kh
    tw = (x.shape[3] - 1) * stride - 2 * pad + kw
    if th < 1 or tw < 1:
        raise ShapeError(f"conv_transpose2d output would be empty for input {x.shape} with pad={pad}")
    # Viewing w as an OIHW kernel (O=C_in, I=C_out) makes this exactly the
    # adjoint of conv2d with that kernel.
    out_arr = _conv_adjoint(x.data, w.data, stride, pad, (th, tw))
    out = Tensor._wrap(out_arr, _wants_grad(x, w), "conv_transpose2d")

    def bwd(g):
        gx = _conv_fwd(g, w.data, stride, pad) if x.requires_grad else None
        gw = _conv_dw(g, x.data, stride, pad, kh, kw) if w.requires_grad else None
        return (gx, gw)

    _record(out, (x, w), bwd)
    return out


# ---------------------------------------------------------------------------
# Linear, normalization, pooling, upsampling
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b with x (N, D), w (D, M), b (M,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear shapes incompatible: x {x.shape}, w {w.shape}, b {b.shape}")
    out = Tensor._wrap(x.data @ w.data + b.data, _wants_grad(x, w, b), "linear")

    def bwd(g):
        return (
            g @ w.data.T if x.requires_grad else None,
            x.data.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    _record(out, (x, w, b), bwd)
    return out


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int = 8, eps: float = 1e-5) -> Tensor:
    """Per-sample group normalization over (C/groups, H, W) blocks."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ShapeError(f"channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    grouped = x.data.reshape(n, groups, c // groups, h, w)
    mu = grouped.mean(axis=(2, 3, 4), keepdims=True)
    var = grouped.var(axis=(2, 3, 4), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((grouped - mu) * inv_std).reshape(n, c, h, w)
    out_arr = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    out = Tensor._wrap(out_arr, _wants_grad(x, gamma, beta), "group_norm")

    def bwd(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, c // groups, h, w)
            xhat_g = xhat.reshape(n, groups, c // groups, h, w)
            m1 = dxhat.mean(axis=(2, 3, 4), keepdims=True)
            m2 = (dxhat * xhat_g).mean(axis=(2, 3, 4), keepdims=True)
            gx = (inv_std * (dxhat - m1 - xhat_g * m2)).reshape(n, c, h, w)
        else:
            gx = None
        return (gx, ggamma, gbeta)

    _record(out, (x, gamma, beta), bwd)
    return out


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling (spatial dims must divide by k)."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % k != 0 or w % k != 0:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by pool size {k}")
    out_arr = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    out = Tensor._wrap(out_arr, _wants_grad(x), "avg_pool2d")

    def bwd(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    _record(out, (x,), bwd)
    return out


def nearest_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    if x.ndim != 4:
        raise ShapeError(f"nearest_upsample expects NCHW input, got shape {x.shape}")
    out_arr = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    out = Tensor._wrap(out_arr, _wants_grad(x), "nearest_upsample")
    n, c, h, w = x.shape

    def bwd(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    _record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments and hyperparameters for one parameter list."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """One Adam update with bias-corrected moments; parameters update in place."""
    if len(params) != len(grads):
        raise ShapeError(f"got {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data = p.data - (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# Finite-difference gradient verification
# ---------------------------------------------------------------------------


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_entries_per_param: int = 0,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare taped gradients of ``loss_fn()`` against central differences.

    Returns the maximum relative error over all checked entries.  With
    ``max_entries_per_param`` > 0 only that many randomly chosen entries per
    parameter are perturbed (for large models); 0 checks every entry.
    Run under ``using_dtype(np.float64)`` for meaningful tolerances.
    """
    zero_grads(params)
    loss = loss_fn()
    backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p, a in zip(params, analytic):
        if a is None:
            a = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if 0 < max_entries_per_param < n:
            entries = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            entries = range(n)
        for i in entries:
            original = flat[i]
            flat[i] = original + h
            with no_grad():
                up = loss_fn().item()
            flat[i] = original - h
            with no_grad():
                down = loss_fn().item()
            flat[i] = original
            numeric = (up - down) / (2.0 * h)
            a_i = a.reshape(-1)[i]
            denom = max(abs(a_i), abs(numeric), 1e-6)
            worst = max(worst, abs(a_i - numeric) / denom)
    zero_grads(params)
    return worst
