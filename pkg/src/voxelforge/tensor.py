"""Dense tensors with reverse-mode differentiation.

Every backward rule is written in terms of differentiable ops, so gradients can
themselves be differentiated (``grad(..., create_graph=True)``). The gradient
penalty relies on this.

Storage defaults to float32; reductions accumulate in float64.
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

TENSOR_MAGIC = b"VFT1"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending axis."""


class UnsupportedOpError(RuntimeError):
    """Raised when backward reaches an op that has no derivative."""


class TensorFormatError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def set_grad_enabled(flag: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = bool(flag)
    try:
        yield
    finally:
        _grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


def is_grad_enabled() -> bool:
    return _grad_enabled


# while a list is installed here, piecewise-linear ops append their branch masks
_kink_log: list | None = None


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern (one boolean mask per leaky_relu call) of the
    code run inside the block."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


class Tensor:
    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] | None = None
        self._backward = None
        self._op = "leaf"

    # -- introspection -----------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operators -----------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        if exponent == 2:
            return square(self)
        raise NotImplementedError("only square is supported")

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A learnable tensor with an accumulated gradient slot."""

    __slots__ = ("grad",)

    def __init__(self, data, name: str = "param", dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    if dtype is None and isinstance(value, np.ndarray) and value.dtype.kind == "f":
        dtype = value.dtype
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents or ():
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output=None,
         create_graph: bool = False) -> list[Tensor]:
    """Gradients of ``output`` with respect to each of ``inputs``.

    Inputs not reachable from ``output`` receive zeros. With ``create_graph``
    the returned gradients are themselves differentiable.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"grad of non-scalar output {output.shape} needs grad_output")
        seed = Tensor(np.ones_like(output.data))
    else:
        seed = as_tensor(grad_output, output)
    results: dict[int, Tensor] = {}
    if output.requires_grad:
        order = _toposort(output)
        wanted = {id(t) for t in inputs}
        # only nodes with a path down to some input need their backward run
        leads: dict[int, bool] = {}
        for node in order:
            leads[id(node)] = id(node) in wanted or any(
                leads.get(id(p), False) for p in node._parents or ())
        grads: dict[int, Tensor] = {id(output): seed}
        with set_grad_enabled(create_graph):
            for node in reversed(order):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                if id(node) in wanted:
                    results[id(node)] = g
                if node._parents is None or not leads[id(node)]:
                    continue
                if node._backward is None:
                    raise UnsupportedOpError(f"op '{node._op}' has no backward rule")
                need = tuple(p.requires_grad and leads.get(id(p), False) for p in node._parents)
                pgrads = node._backward(g, need)
                for p, pg, n in zip(node._parents, pgrads, need):
                    if not n or pg is None:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for t in inputs:
        g = results.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


def backward(output: Tensor, parameters: Iterable[Parameter] = (), inputs: Sequence[Tensor] = ()):
    """Accumulate d(output)/d(parameter) into each ``Parameter.grad``.

    Returns the gradients with respect to ``inputs`` (possibly empty).
    """
    parameters = list(parameters)
    inputs = list(inputs)
    gs = grad(output, parameters + inputs)
    for p, g in zip(parameters, gs):
        p.grad += g.data.astype(p.grad.dtype, copy=False)
    return gs[len(parameters):]


def zero_grad(parameters: Iterable[Parameter]) -> None:
    for p in parameters:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    return a, b


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to a broadcast-compatible ``shape`` (inverse of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    data = np.sum(x.data, axis=axes, keepdims=True, dtype=np.float64)
    if lead:
        data = data.reshape(data.shape[lead:])
    data = data.reshape(shape).astype(x.dtype)

    def bw(g, need):
        return (broadcast_to(g, x.shape),)

    return _node(data, (x,), bw, "sum_to")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = np.broadcast_to(x.data, shape)

    def bw(g, need):
        return (sum_to(g, x.shape),)

    return _node(data, (x,), bw, "broadcast_to")


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g, need):
        return (sum_to(g, a.shape) if need[0] else None,
                sum_to(g, b.shape) if need[1] else None)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g, need):
        return (sum_to(g, a.shape) if need[0] else None,
                sum_to(neg(g), b.shape) if need[1] else None)

    return _node(a.data - b.data, (a, b), bw, "sub")


def neg(a: Tensor) -> Tensor:
    def bw(g, need):
        return (neg(g),)

    return _node(-a.data, (a,), bw, "neg")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g, need):
        return (sum_to(mul(g, b), a.shape) if need[0] else None,
                sum_to(mul(g, a), b.shape) if need[1] else None)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if b.requires_grad:
        return mul(a, reciprocal(b))
    return mul(a, Tensor((1.0 / b.data).astype(b.dtype)))


def reciprocal(x: Tensor) -> Tensor:
    """Elementwise 1/x, defined as 0 where x == 0 (used for safe norms)."""
    with np.errstate(divide="ignore"):
        data = np.where(x.data != 0, 1.0 / np.where(x.data != 0, x.data, 1), 0).astype(x.dtype)
    out_holder: list[Tensor] = []

    def bw(g, need):
        r = out_holder[0]
        return (neg(mul(g, square(r))),)

    out = _node(data, (x,), bw, "reciprocal")
    out_holder.append(out)
    return out


def square(x: Tensor) -> Tensor:
    def bw(g, need):
        return (mul(g, mul(x, 2.0)),)

    return _node(x.data * x.data, (x,), bw, "square")


def exp(x: Tensor) -> Tensor:
    holder: list[Tensor] = []

    def bw(g, need):
        return (mul(g, holder[0]),)

    out = _node(np.exp(x.data), (x,), bw, "exp")
    holder.append(out)
    return out


def log(x: Tensor) -> Tensor:
    def bw(g, need):
        return (mul(g, reciprocal(x)),)

    return _node(np.log(x.data), (x,), bw, "log")


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function; overflow-free for large |x|."""
    z = x.data
    e = np.exp(-np.abs(z))
    data = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    # keep the range open: saturated values would otherwise round to exactly 0 or 1
    info = np.finfo(x.dtype)
    data = np.clip(data, info.tiny, 1.0 - info.epsneg)
    holder: list[Tensor] = []

    def bw(g, need):
        s = holder[0]
        return (mul(g, mul(s, sub(1.0, s))),)

    out = _node(data, (x,), bw, "sigmoid")
    holder.append(out)
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    positive = x.data >= 0
    if _kink_log is not None:
        _kink_log.append(positive)
    mask = np.where(positive, 1.0, slope).astype(x.dtype)

    def bw(g, need):
        return (mul(g, Tensor(mask)),)

    return _node(x.data * mask, (x,), bw, "leaky_relu")


def threshold(x: Tensor, level: float) -> Tensor:
    """Hard 0/1 step at ``level``. Not differentiable."""
    return _node((x.data >= level).astype(x.dtype), (x,), None, "threshold")


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def bw(g, need):
        return (reshape(g, x.shape),)

    return _node(data, (x,), bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g, need):
        return (transpose(g, inverse),)

    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), bw, "transpose")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bw(g, need):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % x.ndim for a in axes)
            kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
            g = reshape(g, kept)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * x.ndim)
        return (broadcast_to(g, x.shape),)

    return _node(np.asarray(data), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis, keepdims), 1.0 / count)


def norm(x: Tensor, axes: Sequence[int]) -> Tensor:
    """L2 norm over ``axes`` (reduced away). The gradient at a zero norm is taken as 0."""
    axes = tuple(a % x.ndim for a in axes)
    sq = np.sum(np.square(x.data, dtype=np.float64), axis=axes)
    data = np.sqrt(sq).astype(x.dtype)
    holder: list[Tensor] = []

    def bw(g, need):
        kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
        scale = reshape(mul(g, reciprocal(holder[0])), kept)
        return (mul(x, broadcast_to(scale, x.shape)),)

    out = _node(data, (x,), bw, "norm")
    holder.append(out)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner axis mismatch: left axis 1 has {a.shape[1]}, right axis 0 has {b.shape[0]}")

    def bw(g, need):
        return (matmul(g, transpose(b)) if need[0] else None,
                matmul(transpose(a), g) if need[1] else None)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis %= x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    before, after = start, x.shape[axis] - stop

    def bw(g, need):
        return (pad_axis(g, axis, before, after),)

    return _node(x.data[tuple(index)], (x,), bw, "slice")


def pad_axis(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    axis %= x.ndim
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    n = x.shape[axis]

    def bw(g, need):
        return (slice_axis(g, axis, before, before + n),)

    return _node(np.pad(x.data, widths), (x,), bw, "pad")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis %= ref.ndim
    for i, t in enumerate(tensors[1:], 1):
        if t.ndim != ref.ndim:
            raise ShapeError(f"concat: operand {i} has rank {t.ndim}, expected {ref.ndim}")
        for ax in range(ref.ndim):
            if ax != axis and t.shape[ax] != ref.shape[ax]:
                raise ShapeError(
                    f"concat: operand {i} axis {ax} has {t.shape[ax]}, expected {ref.shape[ax]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g, need):
        return tuple(slice_axis(g, axis, int(bounds[i]), int(bounds[i + 1])) if n else None
                     for i, n in enumerate(need))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(data, tuple(tensors), bw, "concat")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    z = sub(x, shift)
    return sub(z, log(sum(exp(z), axis=axis, keepdims=True)))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    return neg(mean(sum(mul(log_softmax(logits, 1), Tensor(onehot)), axis=1)))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def fully_connected(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weights + bias`` for x [B, N], weights [N, M], bias [M]."""
    if x.ndim != 2:
        raise ShapeError(f"fully_connected: input must be [B, N], got {x.shape}")
    if weights.shape[0] != x.shape[1]:
        raise ShapeError(
            f"fully_connected: input axis 1 has {x.shape[1]}, weights axis 0 has {weights.shape[0]}")
    y = matmul(x, weights)
    if bias is not None:
        if bias.shape != (weights.shape[1],):
            raise ShapeError(f"fully_connected: bias shape {bias.shape} != ({weights.shape[1]},)")
        y = add(y, bias)
    return y


_AXES = ("D", "H", "W")


def _check_conv_operands(name, x, w, stride, pad):
    if stride < 1:
        raise ShapeError(f"{name}: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"{name}: pad must be >= 0, got {pad}")
    if x.ndim != 5:
        raise ShapeError(f"{name}: input must be [B, C, D, H, W], got rank {x.ndim}")
    if w.ndim != 5:
        raise ShapeError(f"{name}: weights must be rank 5, got rank {w.ndim}")


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, w.shape[2:], axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    y = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(y.transpose(0, 4, 1, 2, 3))


def _conv_wgrad_fwd(x: np.ndarray, gy: np.ndarray, ksize, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, ksize, axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    d, h, wd = gy.shape[2:]
    win = win[:, :, :d, :h, :wd]
    return np.tensordot(gy, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


def _conv_transpose_fwd(y: np.ndarray, w: np.ndarray, stride: int, pad: int, out_spatial) -> np.ndarray:
    n = y.shape[0]
    ci = w.shape[1]
    kd, kh, kw = w.shape[2:]
    d, h, wd = y.shape[2:]
    padded = [o + 2 * pad for o in out_spatial]
    buf = np.zeros((ci, n, *padded), dtype=np.result_type(y, w))
    cols = np.tensordot(w, y, axes=([0], [1]))  # ci, kd, kh, kw, n, d, h, w
    s = stride
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                buf[:, :, a:a + s * d:s, b:b + s * h:s, c:c + s * wd:s] += cols[:, a, b, c]
    buf = buf[:, :, pad:pad + out_spatial[0], pad:pad + out_spatial[1], pad:pad + out_spatial[2]]
    return np.ascontiguousarray(buf.transpose(1, 0, 2, 3, 4))


def _conv(x: Tensor, w: Tensor, stride: int, pad: int) -> Tensor:
    data = _conv_fwd(x.data, w.data, stride, pad)
    spatial = x.shape[2:]

    def bw(g, need):
        return (_conv_transpose(g, w, stride, pad, spatial) if need[0] else None,
                _conv_wgrad(x, g, w.shape[2:], stride, pad) if need[1] else None)

    return _node(data, (x, w), bw, "conv3d")


def _conv_transpose(y: Tensor, w: Tensor, stride: int, pad: int, out_spatial) -> Tensor:
    out_spatial = tuple(int(o) for o in out_spatial)
    data = _conv_transpose_fwd(y.data, w.data, stride, pad, out_spatial)

    def bw(g, need):
        return (_conv(g, w, stride, pad) if need[0] else None,
                _conv_wgrad(g, y, w.shape[2:], stride, pad) if need[1] else None)

    return _node(data, (y, w), bw, "deconv3d")


def _conv_wgrad(x: Tensor, gy: Tensor, ksize, stride: int, pad: int) -> Tensor:
    ksize = tuple(ksize)
    data = _conv_wgrad_fwd(x.data, gy.data, ksize, stride, pad)
    spatial = x.shape[2:]

    def bw(g, need):
        return (_conv_transpose(gy, g, stride, pad, spatial) if need[0] else None,
                _conv(x, g, stride, pad) if need[1] else None)

    return _node(data, (x, gy), bw, "conv3d_weight")


def conv3d(x: Tensor, weights: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """3-D cross-correlation with zero padding.

    x is [B, C_in, D, H, W]; weights are [C_out, C_in, kD, kH, kW]; bias is [C_out].
    """
    _check_conv_operands("conv3d", x, weights, stride, pad)
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"conv3d: input channel axis (1) has {x.shape[1]}, weights expect {weights.shape[1]}")
    for i, ax in enumerate(_AXES):
        if weights.shape[2 + i] > x.shape[2 + i] + 2 * pad:
            raise ShapeError(
                f"conv3d: kernel {weights.shape[2 + i]} exceeds padded input "
                f"{x.shape[2 + i] + 2 * pad} on axis {ax}")
    y = _conv(x, weights, stride, pad)
    if bias is not None:
        y = add(y, reshape(bias, (1, -1, 1, 1, 1)))
    return y


def deconv3d(x: Tensor, weights: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0,
             output_size: Sequence[int] | None = None) -> Tensor:
    """Transposed 3-D convolution, the adjoint of :func:`conv3d` with the same weights.

    x is [B, C, D, H, W] and weights are [C, C_out, kD, kH, kW] (the layout a conv3d
    mapping C_out -> C would use). Output spatial size defaults to (in - 1)*stride - 2*pad + k.
    """
    _check_conv_operands("deconv3d", x, weights, stride, pad)
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"deconv3d: input channel axis (1) has {x.shape[1]}, weights expect {weights.shape[0]}")
    minimal = [(x.shape[2 + i] - 1) * stride - 2 * pad + weights.shape[2 + i] for i in range(3)]
    if output_size is None:
        output_size = minimal
    for i, ax in enumerate(_AXES):
        if minimal[i] < 1:
            raise ShapeError(f"deconv3d: non-positive output size {minimal[i]} on axis {ax}")
        if not minimal[i] <= output_size[i] < minimal[i] + stride:
            raise ShapeError(
                f"deconv3d: output size {output_size[i]} on axis {ax} not reachable from input "
                f"{x.shape[2 + i]} (valid range {minimal[i]}..{minimal[i] + stride - 1})")
    y = _conv_transpose(x, weights, stride, pad, output_size)
    if bias is not None:
        y = add(y, reshape(bias, (1, -1, 1, 1, 1)))
    return y


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _fd_coords(evaluate, flat: np.ndarray, eps: float, coords, kink_safe: bool, rng, stats):
    """Central differences of ``evaluate()`` w.r.t. entries of ``flat`` (edited in place).

    With ``kink_safe`` a coordinate is skipped when the +-eps evaluations take a
    different leaky_relu branch than the unperturbed point: the function is not
    differentiable on that segment, so the difference quotient measures the kink.
    Returns (indices, numeric derivatives).
    """
    if kink_safe:
        order = (rng or np.random.default_rng(0)).permutation(flat.size)
        with record_kinks() as base_branches:
            evaluate()
    else:
        order = _pick_coords(flat.size, coords, rng)
    want = flat.size if coords is None else min(coords, flat.size)
    idx, numeric, skipped = [], [], 0
    for i in order:
        if len(idx) >= want:
            break
        orig = flat[i]
        flat[i] = orig + eps
        with record_kinks() as plus:
            fp = evaluate().item()
        flat[i] = orig - eps
        with record_kinks() as minus:
            fm = evaluate().item()
        flat[i] = orig
        if kink_safe and not (_same_branches(plus, base_branches) and _same_branches(minus, base_branches)):
            skipped += 1
            continue
        idx.append(i)
        numeric.append((fp - fm) / (2 * eps))
    if stats is not None:
        stats["checked"] = stats.get("checked", 0) + len(idx)
        stats["skipped"] = stats.get("skipped", 0) + skipped
    return np.array(idx, dtype=np.int64), np.array(numeric)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-3, coords: int | None = None,
               rng: np.random.Generator | None = None, kink_safe: bool = False,
               stats: dict | None = None) -> float:
    """Max relative error between the analytic gradient of scalar ``f`` at ``x`` and
    central finite differences, ``|a - n| / max(1, |a|)``.

    Evaluation runs in float64. ``coords`` limits the check to that many randomly
    chosen coordinates. ``kink_safe`` skips coordinates whose difference quotient
    straddles a leaky_relu kink; ``stats`` (if given) accumulates checked/skipped counts.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    (g,) = grad(f(xt), [xt])
    analytic = g.data.reshape(-1).astype(np.float64)
    # grad mode stays on: f may itself differentiate (gradient penalties)
    idx, numeric = _fd_coords(lambda: f(Tensor(base, requires_grad=True)), base.reshape(-1), eps, coords,
                              kink_safe, rng, stats)
    return _rel_error(analytic[idx], numeric)


def grad_check_parameters(f: Callable[[], Tensor], parameters: Sequence[Parameter], eps: float = 1e-3,
                          coords: int | None = None, rng: np.random.Generator | None = None,
                          kink_safe: bool = False, stats: dict | None = None) -> float:
    """Like :func:`grad_check`, for a scalar closure over ``parameters`` (perturbed in place)."""
    parameters = list(parameters)
    gs = grad(f(), parameters)
    worst = 0.0
    for p, g in zip(parameters, gs):
        analytic = g.data.reshape(-1).astype(np.float64)
        idx, numeric = _fd_coords(f, p.data.reshape(-1), eps, coords, kink_safe, rng, stats)
        worst = max(worst, _rel_error(analytic[idx], numeric))
    return worst


def _pick_coords(n: int, coords: int | None, rng) -> np.ndarray:
    if coords is None or coords >= n:
        return np.arange(n)
    rng = rng or np.random.default_rng(0)
    return np.sort(rng.choice(n, size=coords, replace=False))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def write_tensor(stream, array) -> None:
    """Write ``array`` as: magic "VFT1", u8 rank, u32 dims[rank], f32 data (little-endian)."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    if arr.ndim > 255:
        raise TensorFormatError("rank exceeds 255")
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<B", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(stream, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise TensorFormatError(f"truncated tensor data: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(stream) -> np.ndarray:
    magic = _read_exact(stream, 4)
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<B", _read_exact(stream, 1))
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(stream, 4 * count), dtype="<f4")
    return data.reshape(dims).astype(np.float32)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise TensorFormatError(f"{path}: trailing bytes after tensor")
    return arr
