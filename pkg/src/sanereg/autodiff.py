"""A small reverse-mode differentiation engine over numpy arrays.

Only the primitives needed for training registration models are provided:
elementwise arithmetic with broadcasting, reductions, ReLU, a 3x3 "same"
convolution, windowed box sums and multilinear sampling.

Typical use::

    tape = Tape()
    x = tape.watch(param)
    loss = (x * x).sum()
    tape.backward(loss)      # param.grad now holds 2 * x
"""

import numpy as np

from .grid import ShapeError, _corners, corner_weights, interp_stencil


class ContractError(RuntimeError):
    """Raised when an operation is used outside its contract."""


class Parameter:
    """A trainable tensor with an accumulated gradient."""

    def __init__(self, value, name=None):
        self.value = np.array(value, dtype=float)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Node:
    __slots__ = ("tape", "value", "parents", "vjp", "requires_grad", "grad",
                 "param", "index", "name")

    def __init__(self, tape, value, parents=(), vjp=None, requires_grad=False,
                 name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.grad = None
        self.param = None
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node({self.name}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Tape:
    """Records primitives in execution order; nodes are topologically sorted."""

    def __init__(self):
        self.nodes = []

    def reset(self):
        self.nodes = []

    def _push(self, node):
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def const(self, value, name=None):
        return self._push(Node(self, np.asarray(value, dtype=float), name=name))

    def var(self, value, name=None):
        return self._push(Node(self, np.array(value, dtype=float),
                               requires_grad=True, name=name))

    def watch(self, param):
        node = self.var(param.value, name=param.name)
        node.param = param
        return node

    def record(self, name, value, inputs, vjp):
        """Append a primitive result. ``vjp(g)`` returns one cotangent per input."""
        for x in inputs:
            if x.tape is not self:
                raise ContractError(f"{name}: input recorded on another tape")
        req = any(x.requires_grad for x in inputs)
        return self._push(Node(self, value, tuple(inputs), vjp if req else None,
                               req, name))

    def backward(self, loss):
        """Populate ``.grad`` on every node reachable from ``loss``.

        Gradients are also accumulated into the ``Parameter`` objects that
        were registered with :meth:`watch`.
        """
        if loss.tape is not self:
            raise ContractError("loss was recorded on another tape")
        if np.size(loss.value) != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[:loss.index + 1]):
            if node.grad is None or node.vjp is None:
                continue
            for parent, g in zip(node.parents, node.vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in self.nodes:
            if node.param is not None and node.grad is not None:
                node.param.grad = node.param.grad + node.grad


def _lift(x, tape):
    if isinstance(x, Node):
        return x
    return tape.const(x)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ContractError("at least one operand must be a Node")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(name, a, b, fwd, da, db):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    try:
        value = fwd(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"{name}: {exc}") from None
    sa, sb = np.shape(a.value), np.shape(b.value)

    def vjp(g):
        ga = _unbroadcast(da(g, a.value, b.value), sa) if a.requires_grad else None
        gb = _unbroadcast(db(g, a.value, b.value), sb) if b.requires_grad else None
        return ga, gb

    return tape.record(name, value, (a, b), vjp)


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, np.multiply,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary("div", a, b, np.divide,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def _unary(name, x, value, dfn):
    return x.tape.record(name, value, (x,), lambda g: (dfn(g),))


def neg(x):
    return _unary("neg", x, -x.value, lambda g: -g)


def square(x):
    return _unary("square", x, x.value * x.value, lambda g: 2.0 * g * x.value)


def relu(x):
    on = x.value > 0
    return _unary("relu", x, np.where(on, x.value, 0.0), lambda g: g * on)


def maximum(x, floor):
    """Elementwise ``max(x, floor)`` for a constant ``floor``."""
    on = x.value >= floor
    return _unary("maximum", x, np.where(on, x.value, floor), lambda g: g * on)


def sum_(x, axis=None):
    value = np.sum(x.value, axis=axis)
    shape = np.shape(x.value)

    def dfn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _unary("sum", x, value, dfn)


def mean(x, axis=None):
    size = np.size(x.value) if axis is None else np.prod(
        [np.shape(x.value)[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis) / float(size)


def getitem(x, idx):
    shape = np.shape(x.value)

    def dfn(g):
        out = np.zeros(shape)
        out[idx] += g
        return out

    return _unary("getitem", x, x.value[idx], dfn)


def stop_gradient(x):
    return x.tape.const(x.value)


# --- windowed sums ---------------------------------------------------------

def box_sum_array(x, window, axes):
    """Zero-padded centred box sum of odd width ``window`` along ``axes``."""
    r = window // 2
    out = np.asarray(x, dtype=float)
    for ax in axes:
        length = out.shape[ax]
        shape = list(out.shape)
        shape[ax] = 1
        cs = np.concatenate([np.zeros(shape), np.cumsum(out, axis=ax)], axis=ax)
        i = np.arange(length)
        hi = np.minimum(i + r + 1, length)
        lo = np.maximum(i - r, 0)
        out = np.take(cs, hi, axis=ax) - np.take(cs, lo, axis=ax)
    return out


def box_sum(x, window, axes):
    """Differentiable box sum; the operator is symmetric so it is its own adjoint."""
    return _unary("box_sum", x, box_sum_array(x.value, window, axes),
                  lambda g: box_sum_array(g, window, axes))


# --- convolution -----------------------------------------------------------

def _pad_cb(x, p):
    # (B, C, H, W) -> zero-padded (C, B, H + 2p, W + 2p)
    return np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (p, p), (p, p)))


def _conv2d_same(x, w):
    # one matmul against every kernel tap, then shifted accumulation
    b, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    xp = _pad_cb(x, p)
    taps = w.transpose(2, 3, 0, 1).reshape(k * k * cout, c) @ xp.reshape(c, -1)
    taps = taps.reshape(k, k, cout, b, h + 2 * p, wd + 2 * p)
    out = np.zeros((cout, b, h, wd))
    for i in range(k):
        for j in range(k):
            out += taps[i, j, :, :, i:i + h, j:j + wd]
    return out.transpose(1, 0, 2, 3)


def _conv2d_weight_grad(x, g, k):
    b, c, h, wd = x.shape
    cout = g.shape[1]
    p = k // 2
    xp = _pad_cb(x, p)
    g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
    gw = np.empty((cout, c, k, k))
    for i in range(k):
        for j in range(k):
            gw[:, :, i, j] = g2 @ xp[:, :, i:i + h, j:j + wd].reshape(c, -1).T
    return gw


def conv2d(x, w, bias=None):
    """2-D cross-correlation with odd square kernels and zero "same" padding.

    ``x`` is ``(B, Cin, H, W)`` and ``w`` is ``(Cout, Cin, k, k)``.
    """
    tape = _tape_of(x, w)
    x, w = _lift(x, tape), _lift(w, tape)
    if x.value.ndim != 4 or w.value.ndim != 4 or x.value.shape[1] != w.value.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if w.value.shape[2] != w.value.shape[3] or w.value.shape[2] % 2 == 0:
        raise ShapeError("conv2d: kernel must be square and odd")
    value = _conv2d_same(x.value, w.value)
    inputs = [x, w]
    if bias is not None:
        bias = _lift(bias, tape)
        value = value + bias.value[None, :, None, None]
        inputs.append(bias)

    def vjp(g):
        k = w.value.shape[-1]
        gw = _conv2d_weight_grad(x.value, g, k) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _conv2d_same(g, w.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return tape.record("conv2d", value, inputs, vjp)


# --- multilinear sampling --------------------------------------------------

def sample(src, points, detach_points=False):
    """Differentiable clamped multilinear sampling.

    ``src`` is a scalar volume ``(*grid)`` or vector volume ``(C, *grid)``;
    ``points`` are absolute coordinates ``(n, *out)``. Gradients flow to the
    sampled values always, and to the coordinates unless ``detach_points``.
    """
    tape = _tape_of(src, points)
    src, points = _lift(src, tape), _lift(points, tape)
    pts = points.value
    n = pts.shape[0]
    sv = src.value
    if sv.ndim == n:
        vector = False
        shape = sv.shape
    elif sv.ndim == n + 1:
        vector = True
        shape = sv.shape[1:]
    else:
        raise ShapeError(f"sample: {sv.ndim}-d source with {n}-d points")
    lo, frac, inside = interp_stencil(pts, shape)
    corners = []
    value = 0.0
    for bits in _corners(n):
        idx = tuple(i + b for i, b in zip(lo, bits))
        vals = sv[(slice(None),) + idx] if vector else sv[idx]
        w = corner_weights(frac, bits)
        corners.append((bits, idx, w, vals))
        value = value + w * vals
    value = np.asarray(value, dtype=float)
    coords_need = points.requires_grad and not detach_points
    nvox = int(np.prod(shape))

    def vjp(g):
        gsrc = gpts = None
        if src.requires_grad:
            if vector:
                flat = np.zeros((sv.shape[0], nvox))
            else:
                flat = np.zeros(nvox)
            for bits, idx, w, _ in corners:
                lin = np.ravel_multi_index(idx, shape).ravel()
                contrib = (g * w)
                if vector:
                    contrib = contrib.reshape(sv.shape[0], -1)
                    for c in range(sv.shape[0]):
                        flat[c] += np.bincount(lin, contrib[c], minlength=nvox)
                else:
                    flat += np.bincount(lin, contrib.ravel(), minlength=nvox)
            gsrc = flat.reshape(sv.shape)
        if coords_need:
            gpts = np.zeros_like(pts)
            for d in range(n):
                acc = 0.0
                for bits, idx, _, vals in corners:
                    dw = 1.0 if bits[d] else -1.0
                    for e in range(n):
                        if e != d:
                            dw = dw * (frac[e] if bits[e] else 1.0 - frac[e])
                    acc = acc + dw * vals
                if vector:
                    acc = (g * acc).sum(axis=0)
                else:
                    acc = g * acc
                gpts[d] = acc * inside[d]
        return gsrc, gpts

    return tape.record("sample", value, (src, points), vjp)


# --- gradient checking -----------------------------------------------------

def numerical_gradient(fn, inputs, i, coords, eps):
    """Central differences of ``fn`` w.r.t. ``inputs[i]`` at flat ``coords``."""
    out = np.zeros(len(coords))
    base = [np.array(x, dtype=float) for x in inputs]
    for k, c in enumerate(coords):
        plus = [x.copy() for x in base]
        minus = [x.copy() for x in base]
        plus[i].flat[c] += eps
        minus[i].flat[c] -= eps
        fp = fn(Tape(), *plus)
        fm = fn(Tape(), *minus)
        out[k] = (_value(fp) - _value(fm)) / (2.0 * eps)
    return out


def _value(x):
    return float(np.asarray(x.value if isinstance(x, Node) else x))


def grad_check(fn, inputs, epsilon=1e-6, max_coords=None, rng=None):
    """Worst relative error between reverse-mode and central-difference gradients.

    ``fn(tape, *arrays)`` must build a scalar node; the arrays are the
    (numpy) ``inputs``, which ``fn`` lifts with ``tape.var``. For each input
    the error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``
    and the worst input is returned. ``max_coords`` limits the number of
    randomly chosen coordinates probed per input.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = [np.array(x, dtype=float) for x in inputs]
    tape = Tape()
    holders = [Parameter(x) for x in inputs]
    nodes = [tape.watch(p) for p in holders]
    loss = fn(tape, *nodes)
    tape.backward(loss)
    worst = 0.0
    for i, p in enumerate(holders):
        size = p.value.size
        if max_coords is not None and size > max_coords:
            coords = rng.choice(size, size=max_coords, replace=False)
        else:
            coords = np.arange(size)

        def f_arrays(t, *arrs):
            return fn(t, *[t.const(a) for a in arrs])

        num = numerical_gradient(f_arrays, inputs, i, coords, epsilon)
        ana = p.grad.ravel()[coords]
        denom = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-8)
        worst = max(worst, float(np.abs(ana - num).max(initial=0.0) / denom))
    return worst
