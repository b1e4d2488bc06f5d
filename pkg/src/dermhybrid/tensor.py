"""Dense tensors with reverse-mode automatic differentiation.

Arrays live in numpy; the graph, the operations and their backward rules are
defined here. Every op is a :class:`Function` subclass with a ``forward`` over
raw arrays and a ``backward`` that maps the output gradient to one gradient per
input. Calling :func:`backward` on a scalar loss orders the recorded graph
topologically (a :class:`ComputationRecord`) and replays it in reverse.

Broadcasting is deliberately absent: binary ops need equal shapes, apart from
scalar scaling and the explicit :func:`add_bias`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, GraphConsumedError

_state = threading.local()

DEFAULT_DTYPE = np.float32


def get_default_dtype():
    return getattr(_state, "dtype", DEFAULT_DTYPE)


@contextmanager
def default_dtype(dtype):
    """Build tensors from non-array data in ``dtype`` inside the block."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (eval-mode forward passes)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            is_float = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if is_float else get_default_dtype()
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx: Function | None = None
        self.name = name

    # -- introspection ----------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        if np.isscalar(other):
            return AddScalar.apply(self, value=float(other))
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return AddScalar.apply(self, value=-float(other))
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return AddScalar.apply(Neg.apply(self), value=float(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return Scale.apply(self, factor=float(other))
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return Scale.apply(self, factor=1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None):
        return Sum.apply(self, axis=axis)

    def mean(self, axis=None):
        return Mean.apply(self, axis=axis)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class Function:
    """One recorded operation: inputs, saved values, backward rule."""

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.saved: tuple = ()
        self.consumed = False

    def save(self, *values) -> None:
        self.saved = values

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        inputs = tuple(as_tensor(t) for t in inputs)
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        needs = grad_enabled() and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=needs, dtype=out.dtype)
        if needs:
            result._ctx = fn
        else:
            fn.saved = ()
        return result


class ComputationRecord:
    """Topologically ordered operations reachable from one output tensor."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; deep graphs (many layers) overflow recursion
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))

    @property
    def operations(self) -> list["Function"]:
        return [n._ctx for n in self.nodes if n._ctx is not None]

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._ctx is None]

    def run(self, seed_grad: np.ndarray) -> None:
        for fn in self.operations:
            if fn.consumed:
                raise GraphConsumedError("computation record already consumed by an earlier backward()")
        grads: dict[int, np.ndarray] = {id(self.root): seed_grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            fn = node._ctx
            in_grads = fn.backward(g)
            for parent, pg in zip(fn.inputs, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(
                        f"{type(fn).__name__}.backward produced gradient {pg.shape} for input {parent.shape}"
                    )
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            fn.consumed = True
            fn.saved = ()


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> list[np.ndarray]:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Returns the gradients of ``params`` in order; a parameter the loss does not
    depend on gets zeros.
    """
    if loss.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    if loss.requires_grad:
        ComputationRecord(loss).run(np.ones_like(loss.data))
    out = []
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out.append(p.grad)
    return out


def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise --------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        _check_same(a, b, "add")
        return a + b

    def backward(self, g):
        return g, g


class Sub(Function):
    def forward(self, a, b):
        _check_same(a, b, "sub")
        return a - b

    def backward(self, g):
        return g, -g


class Mul(Function):
    def forward(self, a, b):
        _check_same(a, b, "mul")
        self.save(a, b)
        return a * b

    def backward(self, g):
        a, b = self.saved
        return g * b, g * a


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Scale(Function):
    def forward(self, a, factor: float):
        self.factor = a.dtype.type(factor)
        return a * self.factor

    def backward(self, g):
        return (g * self.factor,)


class AddScalar(Function):
    def forward(self, a, value: float):
        return a + a.dtype.type(value)

    def backward(self, g):
        return (g,)


class Relu(Function):
    def forward(self, a):
        mask = a > 0
        self.save(mask)
        return np.where(mask, a, a.dtype.type(0))

    def backward(self, g):
        (mask,) = self.saved
        # derivative at exactly 0 is 0
        return (g * mask,)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Sigmoid(Function):
    def forward(self, a):
        s = _sigmoid(a)
        self.save(s)
        return s

    def backward(self, g):
        (s,) = self.saved
        return (g * s * (1 - s),)


class Silu(Function):
    def forward(self, a):
        s = _sigmoid(a)
        self.save(a, s)
        return a * s

    def backward(self, g):
        a, s = self.saved
        return (g * (s * (1 + a * (1 - s))),)


class Softplus(Function):
    """log(1 + e^x), evaluated without overflow or cancellation."""

    def forward(self, a):
        self.save(a)
        return np.maximum(a, 0) + np.log1p(np.exp(-np.abs(a)))

    def backward(self, g):
        (a,) = self.saved
        return (g * _sigmoid(a),)


class Log(Function):
    def forward(self, a):
        self.save(a)
        return np.log(a)

    def backward(self, g):
        (a,) = self.saved
        return (g / a,)


class Clip(Function):
    def forward(self, a, lo: float, hi: float):
        mask = (a >= lo) & (a <= hi)
        self.save(mask)
        return np.clip(a, lo, hi).astype(a.dtype, copy=False)

    def backward(self, g):
        (mask,) = self.saved
        return (g * mask,)


class Dropout(Function):
    """Multiply by a fixed 0/(1/keep) mask; the mask is an argument, not an input."""

    def forward(self, a, mask: np.ndarray):
        _check_same(a, mask, "dropout")
        mask = mask.astype(a.dtype, copy=False)
        self.save(mask)
        return a * mask

    def backward(self, g):
        (mask,) = self.saved
        return (g * mask,)


# -- shape ops ----------------------------------------------------------------


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        if sorted(axes) != list(range(a.ndim)):
            raise DimensionError(f"invalid permutation {axes} for rank {a.ndim}")
        self.axes = tuple(axes)
        return np.ascontiguousarray(a.transpose(self.axes))

    def backward(self, g):
        return (np.ascontiguousarray(g.transpose(np.argsort(self.axes))),)


class Concat(Function):
    def forward(self, *arrays, axis: int):
        ref = arrays[0]
        for a in arrays[1:]:
            if a.ndim != ref.ndim or any(
                a.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis % ref.ndim
            ):
                raise DimensionError(f"concat: incompatible shapes {ref.shape} and {a.shape}")
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


# -- linear algebra -----------------------------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        self.save(a, b)
        return a @ b

    def backward(self, g):
        a, b = self.saved
        return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


class AddBias(Function):
    """x[..., n] + b[n]: the one sanctioned broadcast."""

    def forward(self, x, b):
        if b.ndim != 1 or x.shape[-1] != b.shape[0]:
            raise DimensionError(f"add_bias: bias {b.shape} does not match trailing axis of {x.shape}")
        return x + b

    def backward(self, g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


# -- reductions ---------------------------------------------------------------


def _check_axis(a: np.ndarray, axis) -> None:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {a.ndim}")


class Sum(Function):
    def forward(self, a, axis=None):
        _check_axis(a, axis)
        self.in_shape, self.axis = a.shape, axis
        return np.asarray(a.sum(axis=axis), dtype=a.dtype)

    def backward(self, g):
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.in_shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None):
        _check_axis(a, axis)
        self.in_shape, self.axis = a.shape, axis
        self.count = a.size if axis is None else a.shape[axis]
        return np.asarray(a.mean(axis=axis), dtype=a.dtype)

    def backward(self, g):
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g / self.count, self.in_shape).astype(g.dtype),)


class Softmax(Function):
    def forward(self, a, axis=-1):
        _check_axis(a, axis)
        self.axis = axis
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=axis, keepdims=True)
        self.save(s)
        return s

    def backward(self, g):
        (s,) = self.saved
        return (s * (g - (g * s).sum(axis=self.axis, keepdims=True)),)


class LayerNorm(Function):
    """Normalize over the last axis, then scale by gamma and shift by beta."""

    def forward(self, x, gamma, beta, eps: float = 1e-5):
        d = x.shape[-1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise DimensionError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs features {d}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        self.save(xhat, inv, gamma)
        return xhat * gamma + beta

    def backward(self, g):
        xhat, inv, gamma = self.saved
        flat_g = g.reshape(-1, g.shape[-1])
        dgamma = (flat_g * xhat.reshape(flat_g.shape)).sum(axis=0)
        dbeta = flat_g.sum(axis=0)
        gx = g * gamma
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta


# -- convolution & pooling ----------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Conv2d(Function):
    """Cross-correlation with zero padding, NCHW layout."""

    def forward(self, x, w, b, stride: int = 1, padding: int = 0):
        if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
            raise DimensionError(f"conv2d: expected 4-D input/kernel and 1-D bias, got {x.shape}, {w.shape}, {b.shape}")
        bsz, c, h, wd = x.shape
        o, ck, kh, kw = w.shape
        if ck != c or b.shape[0] != o:
            raise DimensionError(f"conv2d: kernel {w.shape} / bias {b.shape} incompatible with input {x.shape}")
        if stride < 1 or padding < 0:
            raise DimensionError(f"conv2d: invalid stride {stride} or padding {padding}")
        if kh > h + 2 * padding or kw > wd + 2 * padding:
            raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # B, H', W', O
        out = out.transpose(0, 3, 1, 2) + b.reshape(1, o, 1, 1)
        self.stride, self.padding = stride, padding
        self.save(cols, w, xp.shape, x.shape)
        return np.ascontiguousarray(out)

    def backward(self, g):
        cols, w, xp_shape, x_shape = self.saved
        s, p = self.stride, self.padding
        _, _, ho, wo = g.shape
        kh, kw = w.shape[2:]
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        db = g.sum(axis=(0, 2, 3))
        dcols = np.tensordot(g, w, axes=([1], [0]))  # B, H', W', C, kh, kw
        dxp = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p : p + x_shape[2], p : p + x_shape[3]] if p else dxp
        return np.ascontiguousarray(dx), dw.astype(g.dtype, copy=False), db


class MaxPool2d(Function):
    """Non-overlapping 2x2 max pooling; ties route the gradient to the first max."""

    def forward(self, x):
        bsz, c, h, w = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"max_pool2d: spatial size {h}x{w} not divisible by 2")
        win = x.reshape(bsz, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)[..., None]
        self.save(idx, x.shape)
        return np.take_along_axis(win, idx, axis=-1)[..., 0]

    def backward(self, g):
        idx, (bsz, c, h, w) = self.saved
        g4 = np.zeros(g.shape + (4,), dtype=g.dtype)
        np.put_along_axis(g4, idx, g[..., None], axis=-1)
        dx = g4.reshape(bsz, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h, w)
        return (dx,)


# -- functional API -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def scale(a, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def relu(a) -> Tensor:
    return Relu.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def silu(a) -> Tensor:
    return Silu.apply(a)


def softplus(a) -> Tensor:
    return Softplus.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def clip(a, lo: float, hi: float) -> Tensor:
    return Clip.apply(a, lo=lo, hi=hi)


def dropout(a, mask: np.ndarray) -> Tensor:
    return Dropout.apply(a, mask=mask)


def add_bias(x, b) -> Tensor:
    return AddBias.apply(x, b)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def mean(a, axis=None) -> Tensor:
    return Mean.apply(a, axis=axis)


def softmax(a, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, w, b, stride=stride, padding=padding)


def max_pool2d(x) -> Tensor:
    return MaxPool2d.apply(x)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[..., in] times weight[out, in] transposed, plus optional bias[out]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
    out = matmul(flat, weight.transpose())
    if bias is not None:
        out = add_bias(out, bias)
    return out.reshape(*lead, weight.shape[0]) if x.ndim != 2 else out
