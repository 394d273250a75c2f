"""Reverse-mode automatic differentiation over dense float64 tensors.

Every primitive's backward rule is itself expressed in terms of primitives,
so gradients can be differentiated again (``create_graph=True``).  Storage is
dense row-major float64; reshape/slice copy, there are no aliasing views.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

_node_counter = itertools.count()
_grad_enabled = True


class no_grad(contextlib.ContextDecorator):
    """Disable graph recording inside the block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense n-dimensional float64 array with optional tape participation."""

    __slots__ = ("data", "requires_grad", "node_id", "op", "parents", "vjp", "fwd")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_counter)
        self.op = "leaf"
        self.parents = ()
        self.vjp = None
        self.fwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, grad={self.requires_grad})"

    # -- operator sugar (scalars are promoted to full-shape constants) --
    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.full(self.shape, float(other)))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __neg__(self):
        return mul(self, Tensor(np.full(self.shape, -1.0)))

    def __matmul__(self, other):
        return matmul(self, other)


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros_like(t):
    return Tensor(np.zeros(t.shape))


def ones_like(t):
    return Tensor(np.ones(t.shape))


def _record(op, parents, out_data, vjp, fwd):
    out = Tensor(out_data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
        out.fwd = fwd
    return out


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b):
    _check_same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (g, g), lambda x, y: x + y)


def sub(a, b):
    _check_same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (g, -g), lambda x, y: x - y)


def mul(a, b):
    _check_same_shape("mul", a, b)
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (mul(g, b), mul(g, a)), lambda x, y: x * y)


def scale(a, c):
    """Multiply by a python scalar (constant full-shape tensor underneath)."""
    return mul(a, Tensor(np.full(a.shape, float(c))))


def relu(a):
    mask = (a.data > 0).astype(np.float64)
    return _record("relu", (a,), a.data * mask,
                   lambda g: (mul(g, Tensor(mask)),),
                   lambda x: x * (x > 0))


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        y = out
        return (mul(g, mul(y, sub(ones_like(y), y))),)

    out = _record("sigmoid", (a,), out_data, vjp,
                  lambda x: 1.0 / (1.0 + np.exp(-x)))
    return out


def tanh(a):
    out_data = np.tanh(a.data)

    def vjp(g):
        y = out
        return (mul(g, sub(ones_like(y), mul(y, y))),)

    out = _record("tanh", (a,), out_data, vjp, np.tanh)
    return out


def exp(a):
    out_data = np.exp(a.data)

    def vjp(g):
        return (mul(g, out),)

    out = _record("exp", (a,), out_data, vjp, np.exp)
    return out


def log(a):
    return _record("log", (a,), np.log(a.data),
                   lambda g: (mul(g, reciprocal(a)),), np.log)


def reciprocal(a):
    out_data = 1.0 / a.data

    def vjp(g):
        return (-mul(g, mul(out, out)),)

    out = _record("reciprocal", (a,), out_data, vjp, lambda x: 1.0 / x)
    return out


def softplus(a):
    # log(1 + e^x), numerically stable
    out_data = np.logaddexp(0.0, a.data)
    return _record("softplus", (a,), out_data,
                   lambda g: (mul(g, sigmoid(a)),),
                   lambda x: np.logaddexp(0.0, x))


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    return _record("reshape", (a,), a.data.reshape(shape).copy(),
                   lambda g: (reshape(g, a.shape),),
                   lambda x: x.reshape(shape))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.transpose(a.data, axes).copy(),
                   lambda g: (transpose(g, inv),),
                   lambda x: np.transpose(x, axes))


def flip(a, axes):
    axes = tuple(axes)
    return _record("flip", (a,), np.flip(a.data, axes).copy(),
                   lambda g: (flip(g, axes),),
                   lambda x: np.flip(x, axes))


def tslice(a, index):
    """Slice with a tuple of python ``slice`` objects (copying)."""
    index = tuple(index)
    if len(index) != a.data.ndim:
        raise ValueError(f"slice: index rank {len(index)} vs tensor rank {a.data.ndim}")
    return _record("slice", (a,), a.data[index].copy(),
                   lambda g: (slice_scatter(g, a.shape, index),),
                   lambda x: x[index])


def slice_scatter(a, shape, index):
    """Adjoint of ``tslice``: embed ``a`` into zeros of ``shape`` at ``index``."""
    shape = tuple(shape)
    index = tuple(index)

    def fwd(x):
        out = np.zeros(shape)
        out[index] = x
        return out

    return _record("slice_scatter", (a,), fwd(a.data),
                   lambda g: (tslice(g, index),), fwd)


def pad2d(a, pads):
    """Zero-pad the trailing two axes by (top, bottom, left, right)."""
    t, b, l, r = pads
    nd = a.data.ndim
    index = (slice(None),) * (nd - 2) + (
        slice(t, a.shape[-2] + t), slice(l, a.shape[-1] + l))
    shape = a.shape[:-2] + (a.shape[-2] + t + b, a.shape[-1] + l + r)
    return slice_scatter(a, shape, index)


def dilate2d(a, stride):
    """Insert ``stride - 1`` zeros between entries of the trailing two axes."""
    if stride == 1:
        return a
    nd = a.data.ndim
    h, w = a.shape[-2], a.shape[-1]
    shape = a.shape[:-2] + ((h - 1) * stride + 1, (w - 1) * stride + 1)
    index = (slice(None),) * (nd - 2) + (
        slice(0, None, stride), slice(0, None, stride))
    return slice_scatter(a, shape, index)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    nd = tensors[0].data.ndim

    def vjp(g):
        outs = []
        for i in range(len(tensors)):
            index = tuple(slice(offs[i], offs[i + 1]) if d == axis % nd else slice(None)
                          for d in range(nd))
            outs.append(tslice(g, index))
        return tuple(outs)

    return _record("concat", tensors, np.concatenate([t.data for t in tensors], axis),
                   vjp, lambda *xs: np.concatenate(xs, axis))


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        out_data = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ValueError(f"broadcast: cannot broadcast {a.shape} to {shape}") from e

    ndiff = len(shape) - a.data.ndim
    axes = tuple(range(ndiff)) + tuple(
        ndiff + i for i, d in enumerate(a.shape) if d == 1 and shape[ndiff + i] != 1)

    def vjp(g):
        s = reduce_sum(g, axis=axes, keepdims=False) if axes else g
        return (reshape(s, a.shape),)

    return _record("broadcast", (a,), out_data, vjp,
                   lambda x: np.broadcast_to(x, shape).copy())


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.data.ndim)
    out_data = np.sum(a.data, axis=axes, keepdims=keepdims)
    kd_shape = tuple(1 if i in axes else d for i, d in enumerate(a.shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kd_shape), a.shape),)

    return _record("sum", (a,), out_data, vjp,
                   lambda x: np.sum(x, axis=axes, keepdims=keepdims))


def reduce_mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out_data = np.mean(a.data, axis=axes, keepdims=keepdims)
    kd_shape = tuple(1 if i in axes else d for i, d in enumerate(a.shape))

    def vjp(g):
        gg = broadcast_to(reshape(g, kd_shape), a.shape)
        return (scale(gg, 1.0 / count),)

    return _record("mean", (a,), out_data, vjp,
                   lambda x: np.mean(x, axis=axes, keepdims=keepdims))


def reduce_max(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.data.ndim)
    out_data = np.max(a.data, axis=axes, keepdims=keepdims)
    kd = np.max(a.data, axis=axes, keepdims=True)
    # subgradient: mass on the first argmax only (deterministic under ties)
    eq = (a.data == kd)
    mask = np.zeros_like(a.data)
    it = np.ndindex(*kd.shape)
    for idx in it:
        sl = tuple(slice(None) if i in axes else slice(idx[i], idx[i] + 1)
                   for i in range(a.data.ndim))
        block = eq[sl]
        flat = np.flatnonzero(block)
        m = np.zeros(block.size)
        m[flat[0]] = 1.0
        mask[sl] = m.reshape(block.shape)
    kd_shape = tuple(1 if i in axes else d for i, d in enumerate(a.shape))

    def vjp(g):
        gg = broadcast_to(reshape(g, kd_shape), a.shape)
        return (mul(gg, Tensor(mask)),)

    return _record("max", (a,), out_data, vjp,
                   lambda x: np.max(x, axis=axes, keepdims=keepdims))


# ---------------------------------------------------------------------------
# linear algebra / convolution primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _record("matmul", (a, b), a.data @ b.data,
                   lambda g: (matmul(g, transpose(b, (1, 0))),
                              matmul(transpose(a, (1, 0)), g)),
                   lambda x, y: x @ y)


def _win(x, kh, kw):
    return np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(-2, -1))


def conv2d(x, w, stride=1, pad=0):
    """2-D cross-correlation, input (N,C,H,W), weight (O,C,kh,kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: shape mismatch input {x.shape} vs weight {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    s, p = int(stride), int(pad)

    def fwd(xd, wd):
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
        win = _win(xp, kh, kw)[:, :, ::s, ::s]
        return np.einsum("nchwuv,ocuv->nohw", win, wd, optimize=True)

    out_data = fwd(x.data, w.data)
    H, W = x.shape[2], x.shape[3]
    rem_h = (H + 2 * p - kh) % s
    rem_w = (W + 2 * p - kw) % s

    def vjp(g):
        gd = dilate2d(g, s)
        # grad wrt input: full correlation with channel-transposed, flipped kernel
        gp = pad2d(gd, (kh - 1 - p, kh - 1 - p + rem_h, kw - 1 - p, kw - 1 - p + rem_w))
        wf = flip(transpose(w, (1, 0, 2, 3)), (2, 3))
        dx = conv2d(gp, wf, 1, 0)
        # grad wrt weight: correlate padded input with dilated output grad
        xp = pad2d(x, (p, p, p, p)) if p else x
        xt = transpose(xp, (1, 0, 2, 3))
        gt = transpose(gd, (1, 0, 2, 3))
        dwt = conv2d(xt, gt, 1, 0)
        if rem_h or rem_w:
            dwt = tslice(dwt, (slice(None), slice(None), slice(0, kh), slice(0, kw)))
        dw = transpose(dwt, (1, 0, 2, 3))
        return (dx, dw)

    return _record("conv2d", (x, w), out_data, vjp, fwd)


def depthwise_xcorr(z, x):
    """Per-channel valid cross-correlation of template ``z`` over search ``x``.

    Accepted shapes: (C,h,w)x(C,H,W) -> (C,H',W'); (C,h,w)x(N,C,H,W) ->
    (N,C,H',W') with the template shared across the batch; (N,C,h,w)x(N,C,H,W)
    -> (N,C,H',W') pairwise.
    """
    zc = z.shape[-3]
    xc = x.shape[-3]
    if zc != xc:
        raise ValueError(f"depthwise_xcorr: channel mismatch {z.shape} vs {x.shape}")
    if z.shape[-2] > x.shape[-2] or z.shape[-1] > x.shape[-1]:
        raise ValueError(f"depthwise_xcorr: template {z.shape} larger than search {x.shape}")
    zh, zw = z.shape[-2], z.shape[-1]

    if z.data.ndim == 3 and x.data.ndim == 3:
        spec = "chwuv,cuv->chw"
    elif z.data.ndim == 3 and x.data.ndim == 4:
        spec = "nchwuv,cuv->nchw"
    elif z.data.ndim == 4 and x.data.ndim == 4:
        spec = "nchwuv,ncuv->nchw"
    else:
        raise ValueError(f"depthwise_xcorr: unsupported ranks {z.shape} vs {x.shape}")

    def fwd(zd, xd):
        return np.einsum(spec, _win(xd, zh, zw), zd, optimize=True)

    out_data = fwd(z.data, x.data)

    def vjp(g):
        dz = depthwise_xcorr(g, x)
        if z.data.ndim == 3 and x.data.ndim == 4:
            dz = reduce_sum(dz, axis=0)
        fz = flip(z, (-2, -1))
        gp = pad2d(g, (zh - 1, zh - 1, zw - 1, zw - 1))
        dx = depthwise_xcorr(fz, gp)
        return (dz, dx)

    return _record("depthwise_xcorr", (z, x), out_data, vjp, fwd)


# ---------------------------------------------------------------------------
# tape and differentiation
# ---------------------------------------------------------------------------

class Tape:
    """Wengert list for a recorded computation, in recording order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output):
        seen = set()
        nodes = []
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t.parents)
        nodes.sort(key=lambda t: t.node_id)
        return cls(nodes)

    def replay(self):
        """Recompute every node in place from its parents.

        Returns the max abs deviation from the previously stored values:
        zero when nothing changed (a consistency check of the recorded
        forward closures), nonzero after leaf data was mutated.
        """
        worst = 0.0
        for t in self.nodes:
            if t.fwd is None or not t.parents:
                continue
            redo = np.asarray(t.fwd(*(p.data for p in t.parents)), dtype=np.float64)
            worst = max(worst, float(np.max(np.abs(redo - t.data))))
            t.data = redo
        return worst


GradMap = dict


def grad(output, params, create_graph=False):
    """Gradients of a scalar ``output`` w.r.t. each tensor in ``params``.

    With ``create_graph=True`` the gradient computation is itself recorded so
    gradients of gradients exist; otherwise the results are detached.
    """
    if output.size != 1:
        raise ValueError(f"grad: output must be scalar, got shape {output.shape}")
    params = list(params)
    for p in params:
        if not isinstance(p, Tensor) or not p.requires_grad:
            raise ValueError("grad: every param must be a requires_grad Tensor")

    tape = Tape.from_output(output)
    on_tape = {id(t) for t in tape.nodes}
    param_ids = {id(p) for p in params}
    grads = {id(output): ones_like(output)}

    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for t in reversed(tape.nodes):
            if t.vjp is None:
                continue
            # keep entries for requested params (they may be interior nodes)
            # while still propagating their gradient to parents
            if id(t) in param_ids:
                g = grads.get(id(t))
            else:
                g = grads.pop(id(t), None)
            if g is None:
                continue
            pgrads = t.vjp(g)
            for p, pg in zip(t.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                cur = grads.get(id(p))
                grads[id(p)] = pg if cur is None else add(cur, pg)
        out = GradMap()
        for p in params:
            if id(p) not in on_tape:
                out[p] = zeros_like(p)
            else:
                out[p] = grads.get(id(p), zeros_like(p))
    return out


def finite_difference_oracle(f, x, h=1e-4):
    """Central finite differences of scalar ``f`` at tensor ``x``."""
    if h <= 0:
        raise ValueError("finite_difference_oracle: h must be > 0")
    base = x.data.copy()
    out = np.zeros_like(base)
    flat = out.reshape(-1)
    for i in range(base.size):
        xp = base.copy()
        xp.reshape(-1)[i] += h
        xm = base.copy()
        xm.reshape(-1)[i] -= h
        fp = f(Tensor(xp))
        fm = f(Tensor(xm))
        fp = fp.item() if isinstance(fp, Tensor) else float(fp)
        fm = fm.item() if isinstance(fm, Tensor) else float(fm)
        flat[i] = (fp - fm) / (2.0 * h)
    return Tensor(out)
