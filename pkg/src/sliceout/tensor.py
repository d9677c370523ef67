"""Dense tensors with reverse-mode autodiff, zero-copy slice views and op-level
instrumentation counters.

Storage and strided indexing are delegated to numpy: a :class:`Tensor` wraps an
``ndarray`` that may itself be a view into another tensor's buffer. Every op
records logical element traffic into the active :class:`InstrumentationCounters`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, fields

import numpy as np

from .errors import AxisError, BoundsError, LabelError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64

_state = threading.local()


@dataclass
class InstrumentationCounters:
    element_reads: int = 0
    element_writes: int = 0
    copy_bytes_allocated: int = 0
    live_activation_bytes: int = 0
    peak_activation_bytes: int = 0
    # multiply-accumulates of forward matmul/conv ops; backward ones kept apart
    multiply_ops: int = 0
    backward_multiply_ops: int = 0

    def reset(self):
        for f in fields(self):
            setattr(self, f.name, 0)

    def read(self, n):
        self.element_reads += int(n)

    def write(self, n):
        self.element_writes += int(n)

    def copy(self, nbytes):
        self.copy_bytes_allocated += int(nbytes)

    def alloc_activation(self, nbytes):
        self.live_activation_bytes += int(nbytes)
        if self.live_activation_bytes > self.peak_activation_bytes:
            self.peak_activation_bytes = self.live_activation_bytes

    def release_activation(self, nbytes):
        self.live_activation_bytes -= int(nbytes)

    def snapshot(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def counters() -> InstrumentationCounters:
    """The counters in effect for the current thread."""
    c = getattr(_state, "counters", None)
    if c is None:
        c = _state.counters = InstrumentationCounters()
    return c


@contextlib.contextmanager
def use_counters(c: InstrumentationCounters):
    prev = getattr(_state, "counters", None)
    _state.counters = c
    try:
        yield c
    finally:
        _state.counters = prev


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _root(arr):
    while isinstance(arr.base, np.ndarray):
        arr = arr.base
    return arr


class Tensor:
    """An n-dimensional array node in the autodiff graph.

    ``data`` may alias another tensor's buffer (see :func:`slice_view`); in that
    case ``offset`` and ``strides`` describe where the view sits in the shared
    buffer. Gradients are dense, full-shape arrays.
    """

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _op=""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and not (isinstance(data, np.ndarray) and data.dtype.kind == "f"):
            dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._op = _op
        self._backward = None
        self._act_bytes = 0

    # -- metadata ---------------------------------------------------------
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

    @property
    def nbytes(self):
        return self.data.nbytes

    @property
    def strides(self):
        """Strides in elements, not bytes."""
        return tuple(s // self.data.itemsize for s in self.data.strides)

    @property
    def offset(self):
        """Element offset of this tensor's first element in its root buffer."""
        root = _root(self.data)
        if root.size == 0:
            return 0
        return (self.data.__array_interface__["data"][0] - root.__array_interface__["data"][0]) // self.data.itemsize

    @property
    def is_view(self):
        return isinstance(self.data.base, np.ndarray)

    def shares_memory(self, other):
        return np.shares_memory(self.data, other.data)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        g = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{g})"

    def __len__(self):
        return self.shape[0]

    def __getitem__(self, idx):
        return self.data[idx]

    def __setitem__(self, idx, value):
        self.data[idx] = value.data if isinstance(value, Tensor) else value

    # -- autodiff ---------------------------------------------------------
    def _accumulate(self, g, index=None):
        if not self.requires_grad:
            return
        if self.grad is None:
            if index is None:
                self.grad = np.array(g, dtype=self.dtype, copy=True).reshape(self.shape)
                return
            self.grad = np.zeros(self.shape, dtype=self.dtype)
        if index is None:
            self.grad += g
        else:
            self.grad[index] += g

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def backward(self, grad=None):
        if not self.requires_grad:
            raise ShapeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError("grad must be given for non-scalar outputs")
            grad = np.ones(self.shape, dtype=self.dtype)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.dtype))
        c = counters()
        for node in reversed(order):
            if node._backward is None:
                continue
            if node.grad is not None:
                node._backward(node.grad)
            # interior nodes are released once their gradient has been pushed
            node._backward = None
            node._parents = ()
            node.grad = None
            if node._act_bytes:
                c.release_activation(node._act_bytes)
                node._act_bytes = 0

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self):
        return tsum(self)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op, is_view=False):
    """Wrap an op output, wiring it into the graph when gradients are needed."""
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, dtype=data.dtype, _parents=tuple(parents) if track else (), _op=op)
    if track:
        out._backward = backward
        if not is_view:
            out._act_bytes = out.nbytes
            counters().alloc_activation(out.nbytes)
    return out


# ---------------------------------------------------------------------------
# views
# ---------------------------------------------------------------------------


def slice_view(t: Tensor, axis: int, start: int, width: int) -> Tensor:
    """Zero-copy contiguous range ``[start, start + width)`` along ``axis``."""
    if not -t.ndim <= axis < t.ndim:
        raise AxisError(f"axis {axis} out of range for {t.ndim}-d tensor")
    axis %= t.ndim
    n = t.shape[axis]
    if width < 1 or start < 0 or start + width > n:
        raise BoundsError(f"slice [{start}, {start + width}) outside axis of length {n}")
    return region_view(t, (slice(None),) * axis + (slice(start, start + width),))


def region_view(t: Tensor, index) -> Tensor:
    """View through a tuple of unit-step slices; gradient scatters into ``t``."""
    view = t.data[index]

    def backward(g):
        t._accumulate(g, index)

    return _result(view, (t,), backward, "slice", is_view=True)


def transpose(t: Tensor) -> Tensor:
    """Swap the last two axes (a view)."""
    if t.ndim < 2:
        raise ShapeError("transpose needs at least 2 dims")
    view = np.swapaxes(t.data, -1, -2)

    def backward(g):
        t._accumulate(np.swapaxes(g, -1, -2))

    return _result(view, (t,), backward, "transpose", is_view=True)


def reshape(t: Tensor, shape) -> Tensor:
    out = t.data.reshape(shape)
    is_view = np.shares_memory(out, t.data)
    if not is_view:
        counters().copy(out.nbytes)

    def backward(g):
        t._accumulate(g.reshape(t.shape))

    return _result(out, (t,), backward, "reshape", is_view=is_view)


def concat(tensors, axis=-1) -> Tensor:
    out = np.concatenate([x.data for x in tensors], axis=axis)
    c = counters()
    c.read(out.size)
    c.write(out.size)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in tensors])

    def backward(g):
        for x, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = (slice(None),) * ax + (slice(lo, hi),)
            x._accumulate(g[idx])

    return _result(out, tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; counts p*q*r multiply-accumulates."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    p, q = a.shape
    if b.shape[0] != q:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    r = b.shape[1]
    out = a.data @ b.data
    c = counters()
    c.read(2 * p * q * r)
    c.write(p * r)
    c.multiply_ops += p * q * r

    def backward(g):
        counters().backward_multiply_ops += (a.requires_grad + b.requires_grad) * p * q * r
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(out, (a, b), backward, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over a leading batch axis."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    n, p, q = a.shape
    r = b.shape[2]
    out = a.data @ b.data
    c = counters()
    c.read(2 * n * p * q * r)
    c.write(n * p * r)
    c.multiply_ops += n * p * q * r

    def backward(g):
        counters().backward_multiply_ops += (a.requires_grad + b.requires_grad) * n * p * q * r
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, 1, 2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, 1, 2) @ g)

    return _result(out, (a, b), backward, "bmm")


def _windows(xp, kh, kw, stride):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, k: Tensor, padding=0, stride=1) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with kernel ``k`` [O,C,kh,kw]."""
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError("conv2d expects x[N,C,H,W] and k[O,C,kh,kw]")
    n, ch, h, w = x.shape
    o, kc, kh, kw = k.shape
    if kc != ch:
        raise ShapeError(f"conv2d channel mismatch: input has {ch}, kernel expects {kc}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, kh, kw, stride)  # N,C,Ho,Wo,kh,kw
    out = np.einsum("nchwij,ocij->nohw", win, k.data, optimize=True)
    macs = n * o * ho * wo * ch * kh * kw
    c = counters()
    c.read(2 * macs)
    c.write(out.size)
    c.multiply_ops += macs

    def backward(g):
        counters().backward_multiply_ops += (x.requires_grad + k.requires_grad) * macs
        if k.requires_grad:
            k._accumulate(np.einsum("nohw,nchwij->ocij", g, win, optimize=True))
        if x.requires_grad:
            gw = np.einsum("nohw,ocij->nchwij", g, k.data, optimize=True)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gw[..., i, j]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(gxp)

    return _result(out, (x, k), backward, "conv2d")


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def _count_elementwise(n_in, n_out):
    c = counters()
    c.read(n_in)
    c.write(n_out)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    out = a.data + b.data
    _count_elementwise(2 * out.size, out.size)

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _result(out, (a, b), backward, "add")


def add_bias(x: Tensor, b: Tensor, axis=-1, index=None) -> Tensor:
    """Add a per-feature vector ``b`` along ``axis`` of ``x``.

    ``index`` reads ``b`` at the given unit indices without materialising a
    gathered copy.
    """
    axis %= x.ndim
    bvals = b.data if index is None else b.data[index]
    if bvals.ndim != 1 or bvals.shape[0] != x.shape[axis]:
        raise ShapeError(f"bias of shape {bvals.shape} does not match axis {axis} of {x.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = -1
    out = x.data + bvals.reshape(bshape)
    _count_elementwise(out.size + bvals.size, out.size)
    others = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=others), index)

    return _result(out, (x, b), backward, "add_bias")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    out = a.data * b.data
    _count_elementwise(2 * out.size, out.size)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(out, (a, b), backward, "mul")


def mul_scalar(x: Tensor, s) -> Tensor:
    out = x.data * x.dtype.type(s)
    _count_elementwise(out.size, out.size)

    def backward(g):
        x._accumulate(g * x.dtype.type(s))

    return _result(out, (x,), backward, "mul_scalar")


def mul_const(x: Tensor, factors, axis=None) -> Tensor:
    """Multiply by a constant (non-differentiable) array.

    With ``axis`` set, ``factors`` is a vector applied along that axis; otherwise
    it must have ``x``'s shape.
    """
    f = np.asarray(factors, dtype=x.dtype)
    if axis is not None:
        axis %= x.ndim
        if f.ndim != 1 or f.shape[0] != x.shape[axis]:
            raise ShapeError(f"factor vector {f.shape} does not match axis {axis} of {x.shape}")
        shape = [1] * x.ndim
        shape[axis] = -1
        f = f.reshape(shape)
    elif f.shape != x.shape:
        raise ShapeError(f"factors {f.shape} do not match tensor {x.shape}")
    out = x.data * f
    _count_elementwise(2 * out.size, out.size)

    def backward(g):
        x._accumulate(g * f)

    return _result(out, (x,), backward, "mul_const")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask
    _count_elementwise(out.size, out.size)

    def backward(g):
        x._accumulate(g * mask)

    return _result(out, (x,), backward, "relu")


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    _count_elementwise(x.size, 1)

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis), dtype=x.dtype)
    _count_elementwise(x.size, out.size)
    count = x.size // max(out.size, 1)

    def backward(g):
        gg = g / count
        if axis is not None:
            gg = np.expand_dims(gg, axis)
        x._accumulate(np.broadcast_to(gg, x.shape))

    return _result(out, (x,), backward, "mean")


def softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    _count_elementwise(3 * y.size, y.size)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), backward, "softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [N,K]."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy expects logits of shape [N, K]")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)
    _count_elementwise(3 * logits.size, 1)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        logits._accumulate(d * (g / n))

    return _result(out, (logits,), backward, "cross_entropy")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
              training=True, momentum=0.1, eps=1e-5) -> Tensor:
    """Batch normalisation over axis 1 of [N,C] or [N,C,H,W].

    ``running_mean``/``running_var`` are numpy arrays updated in place, so a
    segment view of a wider statistics buffer updates only that segment.
    """
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,) or running_mean.shape != (ch,):
        raise ShapeError(f"batchnorm parameters do not match {ch} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, ch) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.size // ch
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    _count_elementwise(3 * x.size, x.size)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data.reshape(shape)
            if training:
                gx = inv.reshape(shape) * (
                    gx - gx.mean(axis=axes, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                gx = gx * inv.reshape(shape)
            x._accumulate(gx)

    return _result(out, (x, gamma, beta), backward, "batchnorm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm parameters do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    _count_elementwise(3 * x.size, x.size)
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=lead))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _result(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, inputs, epsilon=1e-6):
    """Largest relative error between backprop and central differences.

    ``f`` maps the list ``inputs`` of float64 tensors to a scalar tensor. The
    error for one coordinate is ``|a - c| / (|a| + |c| + 1e-12)``.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise NumericError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    for t in inputs:
        if t.dtype != np.float64:
            raise NumericError("grad_check requires 64-bit inputs")
        t.requires_grad = True
        t.grad = None
    out = f(inputs)
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite")
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise NumericError("grad_check inputs must be contiguous")
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + epsilon
                fp = f(inputs).item()
                flat[i] = orig - epsilon
                fm = f(inputs).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite value during finite differencing")
            cd = (fp - fm) / (2 * epsilon)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - cd) / (abs(a) + abs(cd) + 1e-12))
    return worst
