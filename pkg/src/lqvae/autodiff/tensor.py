"""Reverse-mode automatic differentiation over numpy arrays.

Every primitive records a vector-Jacobian product (vjp) closure that is
itself written in terms of these primitives, so a backward pass executed
with ``create_graph=True`` produces gradients that can be differentiated
again (double backprop).  This is what lets the gradient-norm penalty on
the encoder be trained by ordinary gradient descent.
"""

import contextlib

import numpy as np


class AutodiffError(Exception):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise AutodiffError(f"non-finite values produced by op '{op}'")


class Tensor:
    """N-dimensional array with an optional gradient tape attachment."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_op", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "constant")
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        """Accumulate gradients of this scalar into ``.grad`` of all
        reachable leaves with ``requires_grad``."""
        if self.size != 1:
            raise AutodiffError(
                "backward() requires a scalar output; reduce first (e.g. .sum())"
            )
        leaves = [t for t in _toposort(self) if t._vjp is None and t.requires_grad]
        gs = grad(self, leaves, create_graph=False, allow_unused=True)
        for leaf, g in zip(leaves, gs):
            acc = g.data if g is not None else np.zeros_like(leaf.data)
            leaf.grad = acc if leaf.grad is None else leaf.grad + acc


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op):
    global _grad_enabled
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _sum_to_shape(t, shape):
    """Reduce a broadcasted gradient back down to ``shape``."""
    if t.shape == tuple(shape):
        return t
    extra = t.ndim - len(shape)
    if extra > 0:
        t = tsum(t, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and t.shape[i] != 1)
    if axes:
        t = tsum(t, axis=axes, keepdims=True)
    return reshape(t, tuple(shape))


# primitives ----------------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)

    def vjp(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def neg(a):
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b):
    a, b = _lift(a), _lift(b)

    def vjp(g):
        return _sum_to_shape(mul(g, b), a.shape), _sum_to_shape(mul(g, a), b.shape)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = _lift(a), _lift(b)

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return _sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape)

    with np.errstate(all="ignore"):
        data = a.data / b.data
    return _make(data, (a, b), vjp, "div")


def power(a, p):
    a = _lift(a)
    p = float(p)

    def vjp(g):
        return (mul(g, mul(Tensor(p), power(a, p - 1.0))),)

    with np.errstate(all="ignore"):
        data = a.data**p
    return _make(data, (a,), vjp, "pow")


def sqrt(a):
    return power(a, 0.5)


def exp(a):
    a = _lift(a)
    with np.errstate(all="ignore"):
        data = np.exp(a.data)
    out = _make(data, (a,), None, "exp")
    if out._parents:
        out._vjp = lambda g: (mul(g, out),)
    return out


def log(a):
    a = _lift(a)
    with np.errstate(all="ignore"):
        data = np.log(a.data)
    return _make(data, (a,), lambda g: (div(g, a),), "log")


def tanh(a):
    a = _lift(a)
    out = _make(np.tanh(a.data), (a,), None, "tanh")
    if out._parents:
        out._vjp = lambda g: (mul(g, 1.0 - mul(out, out)),)
    return out


def sigmoid(a):
    a = _lift(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = _make(s, (a,), None, "sigmoid")
    if out._parents:
        out._vjp = lambda g: (mul(g, mul(out, 1.0 - out)),)
    return out


def absolute(a):
    """|a| with sign(0) = 0 as the subgradient at the kink."""
    a = _lift(a)
    sign = Tensor(np.sign(a.data))
    return _make(np.abs(a.data), (a,), lambda g: (mul(g, sign),), "abs")


def leaky_relu(a, alpha=0.2):
    """LeakyReLU; the kink at 0 takes the slope of the negative side."""
    a = _lift(a)
    slope = Tensor(np.where(a.data > 0, 1.0, alpha))
    return _make(
        np.where(a.data > 0, a.data, alpha * a.data),
        (a,),
        lambda g: (mul(g, slope),),
        "leaky_relu",
    )


def relu(a):
    a = _lift(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),), "relu")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is zero outside the interval."""
    a = _lift(a)
    mask = Tensor(((a.data > lo) & (a.data < hi)).astype(np.float64))
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, mask),), "clip")


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            kept = (1,) * a.ndim
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
        g = reshape(g, kept)
        return (mul(g, Tensor(np.ones(a.shape))),)

    return _make(data, (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    a = _lift(a)
    orig = a.shape
    return _make(
        a.data.reshape(shape), (a,), lambda g: (reshape(g, orig),), "reshape"
    )


def transpose(a, axes=None):
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(
        np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),), "transpose"
    )


def swap_last2(a):
    a = _lift(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def matmul(a, b):
    a, b = _lift(a), _lift(b)

    def vjp(g):
        ga = matmul(g, swap_last2(b))
        gb = matmul(swap_last2(a), g)
        return _sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), vjp, "matmul")


def getitem(a, idx):
    a = _lift(a)
    return _make(a.data[idx], (a,), lambda g: (scatter(g, idx, a.shape),), "getitem")


def scatter(g, idx, shape):
    """Adjoint of getitem: place ``g`` into a zero array of ``shape``."""
    g = _lift(g)
    data = np.zeros(shape)
    np.add.at(data, idx, g.data)
    return _make(data, (g,), lambda gg: (getitem(gg, idx),), "scatter")


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for i, t in enumerate(tensors):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(getitem(g, tuple(sl)))
        return tuple(outs)

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "concat"
    )


def stop_gradient(a):
    return Tensor(np.array(_lift(a).data, copy=True))


# image patch extraction (linear, self-adjoint with fold) -------------

_unfold_cache = {}


def _unfold_indices(c, h, w, kh, kw, stride, pads):
    """Flat indices into the zero-padded (C, Hp, Wp) image for each
    (channel, kernel offset, output position) triple."""
    key = (c, h, w, kh, kw, stride, pads)
    if key in _unfold_cache:
        return _unfold_cache[key]
    pt, pb, pl, pr = pads
    hp, wp = h + pt + pb, w + pl + pr
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    ci = np.arange(c)[:, None, None, None, None, None]
    ki = np.arange(kh)[None, :, None, None, None, None]
    kj = np.arange(kw)[None, None, :, None, None, None]
    oi = np.arange(oh)[None, None, None, :, None, None] * stride
    oj = np.arange(ow)[None, None, None, None, :, None] * stride
    flat = ci * (hp * wp) + (ki + oi) * wp + (kj + oj)
    flat = np.broadcast_to(flat, (c, kh, kw, oh, ow, 1)).reshape(c * kh * kw, oh * ow)
    out = (flat, hp, wp, oh, ow)
    _unfold_cache[key] = out
    return out


def unfold(x, kh, kw, stride, pads):
    """im2col: (N,C,H,W) -> (N, C*kh*kw, OH*OW); pads = (top,bottom,left,right)."""
    x = _lift(x)
    n, c, h, w = x.shape
    idx, hp, wp, oh, ow = _unfold_indices(c, h, w, kh, kw, stride, pads)
    padded = np.zeros((n, c, hp, wp))
    pt, pb, pl, pr = pads
    padded[:, :, pt : pt + h, pl : pl + w] = x.data
    cols = padded.reshape(n, c * hp * wp)[:, idx]

    def vjp(g):
        return (fold(g, (h, w), c, kh, kw, stride, pads),)

    return _make(cols, (x,), vjp, "unfold")


def fold(cols, hw, c, kh, kw, stride, pads):
    """col2im scatter-add, the exact adjoint of :func:`unfold`."""
    cols = _lift(cols)
    h, w = hw
    idx, hp, wp, oh, ow = _unfold_indices(c, h, w, kh, kw, stride, pads)
    n = cols.shape[0]
    padded = np.zeros((n, c * hp * wp))
    np.add.at(padded, (slice(None), idx), cols.data)
    pt, pb, pl, pr = pads
    out = padded.reshape(n, c, hp, wp)[:, :, pt : pt + h, pl : pl + w]

    def vjp(g):
        return (unfold(g, kh, kw, stride, pads),)

    return _make(np.ascontiguousarray(out), (cols,), vjp, "fold")


# stable softmax family (the max shift is gradient-free by shift
# invariance of softmax) ----------------------------------------------


def log_softmax(a, axis=-1):
    a = _lift(a)
    shift = a - Tensor(a.data.max(axis=axis, keepdims=True))
    return shift - log(tsum(exp(shift), axis=axis, keepdims=True))


def softmax(a, axis=-1):
    return exp(log_softmax(a, axis=axis))


# graph traversal -----------------------------------------------------


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output, wrt, create_graph=False, allow_unused=False):
    """Gradients of a scalar ``output`` w.r.t. a list of tensors.

    With ``create_graph=True`` the returned gradients carry their own
    tape and can be differentiated again.
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    if output.size != 1:
        raise AutodiffError(
            "grad() requires a scalar output; reduce first (e.g. .sum())"
        )
    order = _toposort(output)
    target_ids = {id(t) for t in targets}

    ctx = contextlib.nullcontext() if create_graph else no_grad()
    grads = {id(output): Tensor(np.ones(output.shape))}
    results = {}
    with ctx:
        # reverse topological order: a node's adjoint is complete when visited
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in target_ids:
                results[id(node)] = g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if (
                    not parent.requires_grad
                    and parent._vjp is None
                    and id(parent) not in target_ids
                ):
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else add(acc, pg)

    out = []
    for t in targets:
        g = results.get(id(t))
        if g is None and not allow_unused:
            g = Tensor(np.zeros(t.shape))
        out.append(g)
    return out[0] if single else out
