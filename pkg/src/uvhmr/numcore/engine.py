"""Reverse-mode automatic differentiation over numpy float64 arrays.

A Tensor wraps an ndarray; primitive operations executed while a Tape is
active append (output, inputs, backward-rule) records to that tape in
execution order, which is by construction a valid topological order of the
graph.  backward() runs the records in reverse and accumulates gradients
into a dict keyed by tensor object.

Everything is float64.  There is no implicit casting: integer index arrays
stay plain numpy, float data is converted once at Tensor construction.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


# When enabled, every primitive checks its output for NaN/Inf.  Too slow to
# leave on in training loops, so tests flip it via the context manager.
CHECK_FINITE = bool(int(os.environ.get("UVHMR_CHECK_FINITE", "0")))


@contextmanager
def check_finite(enabled=True):
    global CHECK_FINITE
    prev = CHECK_FINITE
    CHECK_FINITE = enabled
    try:
        yield
    finally:
        CHECK_FINITE = prev


_TAPE_STACK = []
_GRAD_ENABLED = [True]
_LAST_TAPE = None


class Tape:
    """Ordered record of primitive operations for one reverse sweep.

    Use as a context manager; operations on tensors executed inside the
    block are recorded.  Gradient buffers are keyed by tensor identity, so
    a tape holds references to every intermediate until it is dropped.
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        global _LAST_TAPE
        popped = _TAPE_STACK.pop()
        assert popped is self
        _LAST_TAPE = self
        return False

    def _record(self, out, inputs, backward_fn):
        self._records.append((out, inputs, backward_fn))

    def gradients(self, loss):
        """Run the reverse sweep from a scalar loss.

        Returns a dict mapping every participating Tensor to its gradient
        array.  Tensors with requires_grad also get the result mirrored
        into their .grad attribute.
        """
        if loss.data.size != 1:
            raise ShapeError(
                "backward: loss must be a scalar, got shape %r" % (loss.shape,)
            )
        grads = {}
        grads[id(loss)] = np.ones_like(loss.data)
        by_id = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self._records):
            g_out = grads.get(id(out))
            if g_out is None:
                continue
            by_id[id(out)] = out
            g_inputs = backward_fn(g_out)
            for t, g in zip(inputs, g_inputs):
                if g is None:
                    continue
                key = id(t)
                by_id[key] = t
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        result = {}
        for key, g in grads.items():
            t = by_id[key]
            result[t] = g
            if t.requires_grad:
                t.grad = g
        return result


@contextmanager
def no_grad():
    """Disable recording inside the block (values still computed)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _active_tape():
    if _TAPE_STACK and _GRAD_ENABLED[-1]:
        return _TAPE_STACK[-1]
    return None


class Tensor:
    """A float64 ndarray plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
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

    def item(self):
        return float(self.data)

    def __repr__(self):
        return "Tensor(shape=%r, requires_grad=%r)" % (self.shape, self.requires_grad)

    # operator sugar; all dispatch to module-level primitives
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(out, inputs, backward_fn):
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by an operation")
    tape = _active_tape()
    if tape is not None:
        tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (reverses numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary_shapes(name, a, b):
    if a.shape == b.shape:      # the common case; broadcasting is the exception
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            "%s: shapes %r and %r do not broadcast" % (name, a.shape, b.shape)
        ) from None


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish(out, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish(out, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _finish(out, (a, b), backward)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("div", a, b)
    out = Tensor(a.data / b.data)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish(out, (a, b), backward)


def neg(a):
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _finish(out, (a,), lambda g: (-g,))


def square(a):
    a = _as_tensor(a)
    out = Tensor(a.data * a.data)
    return _finish(out, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a):
    a = _as_tensor(a)
    out = Tensor(np.sqrt(a.data))

    def backward(g):
        return (g * 0.5 / out.data,)

    return _finish(out, (a,), backward)


def exp(a):
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _finish(out, (a,), lambda g: (g * out.data,))


def sin(a):
    a = _as_tensor(a)
    out = Tensor(np.sin(a.data))
    return _finish(out, (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = _as_tensor(a)
    out = Tensor(np.cos(a.data))
    return _finish(out, (a,), lambda g: (-g * np.sin(a.data),))


def where(cond, a, b):
    """Select a where cond else b.  cond is a plain boolean array.

    Gradients route only through the selected branch, so a branch whose
    Value is NaN outside its selected region must be guarded before this
    call (see rodrigues for the pattern).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = Tensor(np.where(cond, a.data, b.data))

    def backward(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(cond, 0.0, g), b.shape)
        return ga, gb

    return _finish(out, (a, b), backward)


def relu(a):
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def backward(g):
        return (g * (a.data > 0.0),)

    return _finish(out, (a,), backward)


def matmul(a, b):
    """numpy @ semantics: 2-D mats or stacks with broadcast batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must be >=2-D, got %r and %r" % (a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            "matmul: inner dims differ, %r vs %r" % (a.shape, b.shape)
        )
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish(out, (a, b), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        return (g.reshape(a.shape),)

    return _finish(out, (a,), backward)


def transpose(a, axes=None):
    a = _as_tensor(a)
    out = Tensor(np.transpose(a.data, axes))
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _finish(out, (a,), backward)


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _finish(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for i in ax:
            count *= a.shape[i]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _finish(out, (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish(out, tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def backward(g):
        pieces = np.split(g, len(tensors), axis=axis)
        return tuple(p.reshape(t.shape) for p, t in zip(pieces, tensors))

    return _finish(out, tuple(tensors), backward)


def gather(a, indices, axis=0):
    """Take rows (or slices along axis) by an integer index array."""
    a = _as_tensor(a)
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise ShapeError("gather: indices must be integers, got dtype %s" % indices.dtype)
    if indices.ndim != 1:
        raise ShapeError("gather: indices must be 1-D, got shape %r" % (indices.shape,))
    out = Tensor(np.take(a.data, indices, axis=axis))

    def backward(g):
        ga = np.zeros_like(a.data)
        # np.add.at accumulates repeated indices, which plain fancy
        # assignment would silently drop
        if axis == 0:
            np.add.at(ga, indices, g)
        else:
            np.add.at(np.moveaxis(ga, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (ga,)

    return _finish(out, (a,), backward)


def scatter_mean(src, indices, size):
    """Average rows of src (N, D) into an output (size, D) by index.

    Output rows receiving no input stay zero.  Rows receiving k inputs get
    their mean; the backward rule routes g/k back to each contributor.
    """
    src = _as_tensor(src)
    indices = np.asarray(indices)
    if src.ndim != 2:
        raise ShapeError("scatter_mean: src must be 2-D (N, D), got %r" % (src.shape,))
    if indices.shape != (src.shape[0],):
        raise ShapeError(
            "scatter_mean: indices shape %r does not match src rows %d"
            % (indices.shape, src.shape[0])
        )
    if not np.issubdtype(indices.dtype, np.integer):
        raise ShapeError("scatter_mean: indices must be integers")
    if indices.size and (indices.min() < 0 or indices.max() >= size):
        raise ShapeError(
            "scatter_mean: index out of range [0, %d): min %d max %d"
            % (size, indices.min(), indices.max())
        )
    counts = np.bincount(indices, minlength=size).astype(np.float64)
    accum = np.zeros((size, src.shape[1]), dtype=np.float64)
    np.add.at(accum, indices, src.data)
    denom = np.maximum(counts, 1.0)
    out = Tensor(accum / denom[:, None])

    def backward(g):
        return (g[indices] / denom[indices, None],)

    return _finish(out, (src,), backward)


def softmax_over_spatial(a):
    """Softmax over the last two axes jointly, stable via max subtraction."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError("softmax_over_spatial: need >=2-D, got %r" % (a.shape,))
    flat = a.data.reshape(a.shape[:-2] + (-1,))
    shifted = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s.reshape(a.shape))

    def backward(g):
        gf = g.reshape(a.shape[:-2] + (-1,))
        dot = (gf * s).sum(axis=-1, keepdims=True)
        return ((s * (gf - dot)).reshape(a.shape),)

    return _finish(out, (a,), backward)


def cosine_similarity(a, b, axis=-1, eps=1e-12):
    """Cosine similarity along one axis; zero-norm inputs give 0.

    Built from primitives so the gradient comes for free.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    dot = sum_(mul(a, b), axis=axis)
    na = sqrt(add(sum_(square(a), axis=axis), eps))
    nb = sqrt(add(sum_(square(b), axis=axis), eps))
    return div(dot, mul(na, nb))


def stop_gradient(a):
    """Identity in value; blocks gradient flow entirely."""
    a = _as_tensor(a)
    out = Tensor(a.data.copy())
    return _finish(out, (a,), lambda g: (None,))


def _im2col(x, kh, kw, stride, pad):
    """(B, C, H, W) -> columns (B*OH*OW, C*kh*kw), plus output dims."""
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (x.shape[2] - kh) // stride + 1
    ow = (x.shape[3] - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (B, C, OH, OW, kh, kw) -> (B, OH, OW, C, kh, kw); this copy is
    # the single hottest memory operation in training
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b * oh * ow, c * kh * kw), oh, ow


def _col2im(gcols, x_shape, kh, kw, stride, pad):
    """Transpose of _im2col: scatter-add column gradients back to x."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    g = gcols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((b, c, hp, wp), dtype=np.float64)
    for i in range(kh):
        h_end = i + stride * oh
        for j in range(kw):
            w_end = j + stride * ow
            out[:, :, i:h_end:stride, j:w_end:stride] += g[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x, w, bias=None, stride=1):
    """2-D convolution (cross-correlation), 'same' padding k//2.

    x: (B, C, H, W), w: (O, C, k, k), bias: (O,) or None.
    Implemented as im2col + one GEMM; backward reuses the cached columns.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    bias = _as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d: x and w must be 4-D, got %r and %r" % (x.shape, w.shape))
    o, c, kh, kw = w.shape
    if kh != kw:
        raise ShapeError("conv2d: kernel must be square, got %r" % (w.shape,))
    if x.shape[1] != c:
        raise ShapeError(
            "conv2d: channel mismatch, x %r vs w %r" % (x.shape, w.shape)
        )
    if bias is not None and bias.shape != (o,):
        raise ShapeError("conv2d: bias shape %r, expected (%d,)" % (bias.shape, o))
    pad = kh // 2
    b = x.shape[0]
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(o, c * kh * kw)
    y = cols @ wmat.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y.reshape(b, oh, ow, o).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, o)
        gw = (gmat.T @ cols).reshape(o, c, kh, kw)
        gcols = gmat @ wmat
        gx = _col2im(gcols, x.shape, kh, kw, stride, pad)
        if bias is not None:
            return gx, gw, gmat.sum(axis=0)
        return gx, gw

    inputs = (x, w) if bias is None else (x, w, bias)
    return _finish(out, inputs, backward)


def strided_conv2d(x, w, bias=None):
    """conv2d with stride 2; halves spatial dims for even inputs."""
    return conv2d(x, w, bias=bias, stride=2)


def backward(loss):
    """Reverse sweep from `loss` using the tape that recorded it.

    Works inside the `with Tape()` block or right after it exits (the most
    recently closed tape is remembered).
    """
    tape = _TAPE_STACK[-1] if _TAPE_STACK else _LAST_TAPE
    if tape is None:
        raise RuntimeError(
            "backward: no tape; build the loss inside `with Tape():`"
        )
    return tape.gradients(loss)
