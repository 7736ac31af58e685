"""Tape-based reverse-mode autodiff over dense numpy tensors.

This is deliberately *not* a general autodiff engine: it provides exactly the
primitive set needed by the flow blocks, their convolutional subnets, the
projection head and the training losses. Storage is float32 by default
(float64 is supported for high-precision checks); every contraction and
reduction accumulates in float64 before casting back, so results do not
depend on how numpy chunks the summation.

Tensors are immutable once produced by an operation. Recording happens only
while a :class:`Tape` is active, and each tape supports exactly one backward
pass.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "TensorError",
    "NonFiniteError",
    "TapeError",
    "add",
    "sub",
    "mul",
    "exp",
    "log",
    "tanh",
    "relu",
    "matmul",
    "conv2d_1x1",
    "conv2d_3x3",
    "l2_normalize_channelwise",
    "gather_mask",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class TensorError(ValueError):
    """Shape or dtype mismatch between operands."""


class NonFiniteError(ArithmeticError):
    """An operation produced inf or nan."""


class TapeError(RuntimeError):
    """Backward misuse: non-scalar loss, foreign loss, or reused tape."""


# Stack of currently active tapes; ops record onto the innermost one.
_ACTIVE: list["Tape"] = []


class Tensor:
    """Dense real-valued array with an optional gradient slot.

    ``data`` is a numpy array (float32 or float64). ``grad`` is filled in by
    :meth:`Tape.backward` for tensors that require gradients and is ``None``
    until then (Parameters keep a persistent zero-initialized buffer).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are wrapped as constants of the same dtype
    def __add__(self, other):
        return add(self, _astensor(other, self))

    def __radd__(self, other):
        return add(_astensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _astensor(other, self))

    def __rsub__(self, other):
        return sub(_astensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _astensor(other, self))

    def __rmul__(self, other):
        return mul(_astensor(other, self), self)

    def __neg__(self):
        return mul(self, _astensor(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, mean=False)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, mean=True)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)


class Parameter(Tensor):
    """Trainable tensor. Gradients accumulate additively into ``grad``."""

    __slots__ = ("trainable",)

    def __init__(self, data, dtype=None, trainable: bool = True):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around a forward pass and call
    :meth:`backward` once on a scalar produced inside it. Operations run
    while no tape is active are evaluated but not recorded.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._outputs: set[int] = set()
        self._consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.pop()
        return False

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self._records.append((out, inputs, backward_fn))
        self._outputs.add(id(out))

    def backward(self, loss: Tensor):
        """Walk the tape in reverse, accumulating dLoss/dT into ``.grad``."""
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.shape != ():
            raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise TapeError("loss was not produced on this tape")
        self._consumed = True
        loss.grad = np.asarray(1.0, dtype=loss.dtype)
        for out, inputs, backward_fn in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            grads = backward_fn(g)
            for t, gi in zip(inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=t.dtype)
                t.grad = gi if t.grad is None else t.grad + gi


def _astensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_dtypes(name: str, *tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TensorError(f"{name}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _finish(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if _ACTIVE and out.requires_grad:
        _ACTIVE[-1]._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = np.sum(g, axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = np.sum(g, axis=axes, keepdims=True, dtype=np.float64)
    return g


def _f64(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64, copy=False)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with float64 accumulation."""
    return _f64(a) @ _f64(b)


# ---------------------------------------------------------------------------
# elementwise primitives


def _broadcast_check(name: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise TensorError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", a, b)
    _broadcast_check("add", a, b)

    def backward_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _finish("add", a.data + b.data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("sub", a, b)
    _broadcast_check("sub", a, b)

    def backward_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _finish("sub", a.data - b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", a, b)
    _broadcast_check("mul", a, b)

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _finish("mul", a.data * b.data, (a, b), backward_fn)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward_fn(g):
        return (g * out_data,)

    return _finish("exp", out_data, (x,), backward_fn)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(x.data)

    def backward_fn(g):
        return (g / x.data,)

    return _finish("log", out_data, (x,), backward_fn)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def backward_fn(g):
        return (g * (1.0 - out_data * out_data),)

    return _finish("tanh", out_data, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward_fn(g):
        return (g * (x.data > 0),)

    return _finish("relu", out_data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# reductions


def _reduce(x: Tensor, axis, keepdims: bool, mean: bool) -> Tensor:
    name = "mean" if mean else "sum"
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (axis % x.ndim,)
    else:
        axes = tuple(a % x.ndim for a in axis)
    count = 1
    for a in axes:
        count *= x.shape[a]
    red = np.sum(x.data, axis=axes, keepdims=True, dtype=np.float64)
    if mean:
        if count == 0:
            raise TensorError(f"mean over an empty axis of shape {x.shape}")
        red = red / count
    kept_shape = red.shape
    out_data = red.astype(x.dtype)
    if not keepdims:
        out_data = out_data.reshape(tuple(s for i, s in enumerate(x.shape) if i not in axes))

    def backward_fn(g):
        gb = np.asarray(g).reshape(kept_shape)
        gb = np.broadcast_to(gb, x.shape)
        if mean:
            gb = gb / count
        return (gb.astype(x.dtype),)

    return _finish(name, out_data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    _check_dtypes("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise TensorError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    ka = a.shape[1]
    kb = b.shape[1] if transpose_b else b.shape[0]
    if ka != kb:
        raise TensorError(f"matmul inner dims differ: {a.shape} vs {b.shape} (transpose_b={transpose_b})")
    if transpose_b:
        out_data = _mm(a.data, b.data.T).astype(a.dtype)
    else:
        out_data = _mm(a.data, b.data).astype(a.dtype)

    def backward_fn(g):
        if transpose_b:
            da = _mm(g, b.data).astype(a.dtype)
            db = _mm(g.T, a.data).astype(b.dtype)
        else:
            da = _mm(g, b.data.T).astype(a.dtype)
            db = _mm(a.data.T, g).astype(b.dtype)
        return (da, db)

    return _finish("matmul", out_data, (a, b), backward_fn)


def conv2d_1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution: (B,C,H,W) x (O,C) [+ (O,)] -> (B,O,H,W)."""
    _check_dtypes("conv2d_1x1", *([x, w] + ([b] if b is not None else [])))
    if x.ndim != 4 or w.ndim != 2:
        raise TensorError(f"conv2d_1x1 expects 4-D input and 2-D weight, got {x.shape} and {w.shape}")
    bs, c, h, wd = x.shape
    o, ci = w.shape
    if ci != c:
        raise TensorError(f"conv2d_1x1 channel mismatch: input {c}, weight {ci}")
    if b is not None and b.shape != (o,):
        raise TensorError(f"conv2d_1x1 bias shape {b.shape}, expected ({o},)")
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    out2 = _mm(x2, w.data.T)
    if b is not None:
        out2 = out2 + _f64(b.data)
    out_data = out2.astype(x.dtype).reshape(bs, h, wd, o).transpose(0, 3, 1, 2)

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dx = _mm(g2, w.data).astype(x.dtype).reshape(bs, h, wd, c).transpose(0, 3, 1, 2)
        dw = _mm(g2.T, x2).astype(w.dtype)
        grads = [dx, dw]
        if b is not None:
            grads.append(np.sum(g2, axis=0, dtype=np.float64).astype(b.dtype))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _finish("conv2d_1x1", out_data, inputs, backward_fn)


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1: (B,C,H,W) -> (B,O,H,W)."""
    _check_dtypes("conv2d_3x3", *([x, w] + ([b] if b is not None else [])))
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise TensorError(f"conv2d_3x3 expects (B,C,H,W) and (O,C,3,3), got {x.shape} and {w.shape}")
    bs, c, h, wd = x.shape
    o, ci = w.shape[:2]
    if ci != c:
        raise TensorError(f"conv2d_3x3 channel mismatch: input {c}, weight {ci}")
    if b is not None and b.shape != (o,):
        raise TensorError(f"conv2d_3x3 bias shape {b.shape}, expected ({o},)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    patches = win.transpose(0, 2, 3, 1, 4, 5).reshape(bs * h * wd, c * 9)
    w2 = w.data.reshape(o, c * 9)
    out2 = _mm(patches, w2.T)
    if b is not None:
        out2 = out2 + _f64(b.data)
    out_data = out2.astype(x.dtype).reshape(bs, h, wd, o).transpose(0, 3, 1, 2)

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = _mm(g2.T, patches).astype(w.dtype).reshape(o, c, 3, 3)
        dpatch = _mm(g2, w2).reshape(bs, h, wd, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((bs, c, h + 2, wd + 2), dtype=np.float64)
        for di in range(3):
            for dj in range(3):
                dxp[:, :, di : di + h, dj : dj + wd] += dpatch[..., di, dj]
        dx = dxp[:, :, 1 : h + 1, 1 : wd + 1].astype(x.dtype)
        grads = [dx, dw]
        if b is not None:
            grads.append(np.sum(g2, axis=0, dtype=np.float64).astype(b.dtype))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _finish("conv2d_3x3", out_data, inputs, backward_fn)


# ---------------------------------------------------------------------------
# structured primitives


def l2_normalize_channelwise(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize each channel vector to unit L2 norm.

    Accepts (B,C,H,W) maps (per-pixel channel vectors) or (N,C) row
    vectors. Norms below ``eps`` are floored, so zero vectors map to zero.
    """
    if x.ndim not in (2, 4):
        raise TensorError(f"l2_normalize_channelwise expects 2-D or 4-D input, got {x.shape}")
    n = np.sqrt(np.sum(_f64(x.data) ** 2, axis=1, keepdims=True))
    d = np.maximum(n, eps)
    out_data = (_f64(x.data) / d).astype(x.dtype)

    def backward_fn(g):
        y = _f64(out_data)
        g64 = _f64(g)
        dot = np.sum(g64 * y, axis=1, keepdims=True)
        active = n > eps
        gx = np.where(active, (g64 - y * dot) / d, g64 / eps)
        return (gx.astype(x.dtype),)

    return _finish("l2_normalize_channelwise", out_data, (x,), backward_fn)


def gather_mask(x: Tensor, mask) -> Tensor:
    """Select pixel positions where ``mask`` is nonzero, in row-major order.

    For a (B,C,H,W) input and a (B,H,W) mask the result is (K,C); for a
    (B,H,W) input it is (K,). K may be zero; callers guard degenerate cases.
    """
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    m = m.astype(bool)
    if x.ndim == 4:
        bs, c, h, wd = x.shape
        if m.shape != (bs, h, wd):
            raise TensorError(f"gather_mask: mask shape {m.shape} does not match input {x.shape}")
        out_data = x.data.transpose(0, 2, 3, 1)[m]

        def backward_fn(g):
            buf = np.zeros((bs, h, wd, c), dtype=x.dtype)
            buf[m] = g
            return (buf.transpose(0, 3, 1, 2),)

    elif x.ndim == 3:
        if m.shape != x.shape:
            raise TensorError(f"gather_mask: mask shape {m.shape} does not match input {x.shape}")
        out_data = x.data[m]

        def backward_fn(g):
            buf = np.zeros(x.shape, dtype=x.dtype)
            buf[m] = g
            return (buf,)

    else:
        raise TensorError(f"gather_mask expects 3-D or 4-D input, got {x.shape}")

    return _finish("gather_mask", out_data, (x,), backward_fn)
