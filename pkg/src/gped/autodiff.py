"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation whose operands require gradients, in
execution order, so the recorded list is topologically sorted by construction.
:func:`backward` sweeps it once in reverse.

    tape = Tape()
    w = tape.variable(np.array(3.0))
    loss = w * w
    backward(tape, loss)
    w.grad  # array(6.)
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

LOG_FLOOR = 1e-12


class Tensor:
    """An n-dimensional float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "tape", "requires_grad")

    def __init__(self, data, tape=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None):
        return tsum(self, axis)


class Node:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs, out, backward):
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of operations; single use, cleared by :func:`backward`."""

    def __init__(self):
        self.nodes = []

    def variable(self, data):
        return Tensor(data, tape=self, requires_grad=True)

    def __len__(self):
        return len(self.nodes)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, inputs, backward_fn):
    tape = None
    for t in inputs:
        if t.requires_grad:
            tape = t.tape
            break
    out = Tensor(data, tape=tape, requires_grad=tape is not None)
    if tape is not None:
        tape.nodes.append(Node(inputs, out, backward_fn))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape, loss, params=None):
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    If ``params`` (a sequence of leaf tensors) is given, their gradients are
    returned concatenated into one flat vector, zeros for unreached leaves.
    The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            inp.grad = gi if inp.grad is None else inp.grad + gi
    tape.nodes.clear()
    if params is None:
        return None
    return np.concatenate(
        [(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params]
    )


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def neg(a):
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), bw)


def power(a, exponent):
    p = float(exponent)
    ad = a.data
    return _record(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def tsum(a, axis=None):
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axis), (a,), bw)


def mean(a):
    n = a.data.size
    return tsum(a) * (1.0 / n)


def relu(a):
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def texp(a):
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def tlog(a, floor=LOG_FLOOR):
    """Natural log of ``max(a, floor)``; zero gradient where the floor is active."""
    ad = a.data
    live = ad > floor
    safe = np.where(live, ad, floor)
    return _record(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


def tabs(a):
    sgn = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * sgn,))


def scale(a, c):
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------- reductions / heads


def softmax(a):
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (a,), bw)


def log_softmax(a):
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _record(out, (a,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def columns(a, start, stop):
    """Slice ``a[:, start:stop]``."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record(a.data[:, start:stop], (a,), bw)


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def reshape(a, shape):
    orig = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def dropout(a, rate, rng):
    """Inverted dropout; callers skip this entirely in eval mode."""
    if rate <= 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- layers


def linear(x, w, b):
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"linear expects (*, {wd.shape[1]}) input, got {xd.shape}")

    def bw(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _record(xd @ wd.T + b.data, (x, w, b), bw)


def _im2col(xd, k, stride):
    n, c, h, w = xd.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sn, sc, sh, sw = xd.strides
    view = np.lib.stride_tricks.as_strided(
        xd,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(n, c * k * k, ho * wo), ho, wo


def conv2d(x, w, b, stride=1):
    """Valid-padding 2-D cross-correlation. ``x`` is NCHW, ``w`` is (out, in, k, k)."""
    xd, wd = x.data, w.data
    o, c, k, _ = wd.shape
    if xd.ndim != 4 or xd.shape[1] != c:
        raise DimensionError(f"conv2d expects (*, {c}, H, W) input, got {xd.shape}")
    if xd.shape[2] < k or xd.shape[3] < k:
        raise DimensionError(f"conv2d kernel {k} larger than input {xd.shape[2:]}")
    n = xd.shape[0]
    xd = np.ascontiguousarray(xd)
    cols, ho, wo = _im2col(xd, k, stride)
    wm = wd.reshape(o, -1)
    out = (wm @ cols + b.data[:, None]).reshape(n, o, ho, wo)

    def bw(g):
        gm = g.reshape(n, o, ho * wo)
        dw = np.einsum("nol,nkl->ok", gm, cols).reshape(wd.shape)
        db = gm.sum(axis=(0, 2))
        dcols = (wm.T @ gm).reshape(n, c, k, k, ho, wo)
        dx = np.zeros(xd.shape)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, i, j
                ]
        return dx, dw, db

    return _record(out, (x, w, b), bw)


def maxpool2d(x, k):
    """Non-overlapping max pooling (stride = kernel), trailing rows/cols dropped."""
    xd = x.data
    n, c, h, w = xd.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise DimensionError(f"maxpool kernel {k} larger than input {(h, w)}")
    crop = xd[:, :, : ho * k, : wo * k]
    blocks = crop.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        dx = np.zeros(xd.shape)
        dx[:, :, : ho * k, : wo * k] = gb
        return (dx,)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------- oracle


def finite_diff_grad(x, loss_fn, step=1e-5):
    """Central-difference gradient of ``loss_fn`` at ``x``; error is O(step**2).

    ``x`` may be a scalar, an array, or an object with a flat ``params`` vector
    (a :class:`~gped.nn.Model`), in which case ``loss_fn`` receives that vector.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    base = getattr(x, "params", x)
    scalar = np.ndim(base) == 0
    theta = np.array(base, dtype=np.float64).reshape(-1)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + step
        up = loss_fn(theta[0] if scalar else theta.copy())
        theta[i] = orig - step
        down = loss_fn(theta[0] if scalar else theta.copy())
        theta[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad[0] if scalar else grad.reshape(np.shape(base))
