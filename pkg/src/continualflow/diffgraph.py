"""Minimal reverse-mode differentiation over dense (batch, channel, height, width) arrays.

Every op records a closure that maps the output gradient to gradients of its
inputs.  :func:`backward_sweep` walks the recorded graph in reverse
topological order, visiting each node once.  No broadcasting is supported
beyond multiplying or adding a Python scalar.
"""
from __future__ import annotations

import contextlib
import functools
import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numeric array that may take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if any(n <= 0 for n in arr.shape):
            raise ConfigurationError(f"tensor axes must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward_sweep(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, q):
        return power(self, q)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, parents, backward, op):
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _flush_subnormal(g):
    # subnormal float32 gradients make later matmuls several times slower
    if g.dtype != np.float32:
        return g
    tiny = np.finfo(np.float32).tiny
    small = np.abs(g) < tiny
    if small.any() and (g[small] != 0).any():
        g = np.where(small, np.float32(0), g)
    return g


def backward_sweep(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Repeated sweeps add to existing gradients.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise UsageError("backward_sweep needs a scalar tensor")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring grad")

    # iterative post-order DFS; a node is marked when expanded, not when pushed
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = _flush_subnormal(grads.pop(id(node)))
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x):
    return not isinstance(x, Tensor) and np.ndim(x) == 0


def add(a, b):
    if _is_scalar(b):
        return _result(a.data + b, (a,), lambda g: (g,), "add_scalar")
    a, b = as_tensor(a), as_tensor(b, a.dtype)
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    if _is_scalar(b):
        return _result(a.data - b, (a,), lambda g: (g,), "sub_scalar")
    a, b = as_tensor(a), as_tensor(b, a.dtype)
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    if _is_scalar(b):
        return _result(a.data * b, (a,), lambda g: (g * b,), "mul_scalar")
    a, b = as_tensor(a), as_tensor(b, a.dtype)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b):
    if _is_scalar(b):
        return _result(a.data / b, (a,), lambda g: (g / b,), "div_scalar")
    a, b = as_tensor(a), as_tensor(b, a.dtype)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def absolute(a):
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def square(a):
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sqrt(a):
    out = np.sqrt(a.data)

    def backward(g):
        # subgradient 0 at the origin keeps norms of zero residuals finite
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0)
        return (r.astype(out.dtype, copy=False),)

    return _result(out, (a,), backward, "sqrt")


def power(a, q):
    if not _is_scalar(q):
        raise ConfigurationError("power: exponent must be a scalar")
    ad = a.data
    out = ad**q
    return _result(out, (a,), lambda g: (g * q * ad ** (q - 1),), "power")


def log(a):
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def clamp_min(a, lo):
    mask = a.data > lo
    return _result(np.maximum(a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


def leaky_relu(x, slope=0.1):
    if not 0.0 <= slope < 1.0:
        raise ConfigurationError(f"slope must be in [0, 1), got {slope}")
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return _result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def relu(x):
    return leaky_relu(x, 0.0)


# ----------------------------------------------------------------- reductions


def sum_all(a):
    shape, dt = a.shape, a.dtype
    return _result(
        np.asarray(a.data.sum(), dtype=dt),
        (a,),
        lambda g: (np.full(shape, g, dtype=dt),),
        "sum",
    )


def channel_sum(a):
    shape = a.shape
    return _result(
        a.data.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
        "channel_sum",
    )


def channel_mean(a):
    return mul(channel_sum(a), 1.0 / a.shape[1])


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        index = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            out.append(g[tuple(index)])
        return out

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def slice_channels(a, start, stop):
    shape, dt = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dt)
        full[:, start:stop] = g
        return (full,)

    return _result(a.data[:, start:stop], (a,), backward, "slice_channels")


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# ----------------------------------------------------------------- network ops


def channel_softmax(x):
    """Softmax over axis 1."""
    if x.ndim != 4 or x.shape[1] < 2:
        raise ConfigurationError("channel_softmax needs a 4-axis tensor with >= 2 channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, (x,), backward, "channel_softmax")


def _conv_geometry(h, w, kh, kw, stride, dilation, padding):
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigurationError("same padding needs odd kernel sizes")
        ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ConfigurationError(f"padding must be 'same' or 'valid', got {padding!r}")
    ho = (h + 2 * ph - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pw - dilation * (kw - 1) - 1) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ConfigurationError("kernel larger than padded input")
    return ph, pw, ho, wo


def conv2d(x, weight, bias=None, stride=1, dilation=1, padding="same"):
    """Cross-correlation of ``x`` (B, Cin, H, W) with ``weight`` (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError("conv2d expects 4-axis input and weight")
    if weight.shape[1] != x.shape[1]:
        raise ConfigurationError(
            f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ConfigurationError("conv2d: bias must have one entry per output channel")
    if int(stride) != stride or int(dilation) != dilation or stride < 1 or dilation < 1:
        raise ConfigurationError("stride and dilation must be integers >= 1")

    b, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ph, pw, ho, wo = _conv_geometry(h, w, kh, kw, stride, dilation, padding)
    if ph or pw:
        xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, :, ph : ph + h, pw : pw + w] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    sb, sc, sh, sw = xp.strides
    cols = as_strided(
        xp,
        shape=(c, kh, kw, b, ho, wo),
        strides=(sc, sh * dilation, sw * dilation, sb, sh * stride, sw * stride),
        writeable=False,
    ).reshape(c * kh * kw, b * ho * wo)
    w2 = weight.data.reshape(o, -1)
    out = (w2 @ cols).reshape(o, b, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    parents = (x, weight) if bias is None else (x, weight, bias)
    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, kh, kw, b, ho, wo)
            # accumulate in (C, B, H, W) layout so every tap adds a contiguous block
            gxp = np.zeros((c, b, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride,
                        c0 : c0 + stride * (wo - 1) + 1 : stride] += gcols[:, i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + w].transpose(1, 0, 2, 3)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, parents, backward, "conv2d")


def correlation(f1, f2, d_max):
    """Cost volume: channel (dv + d) * (2d + 1) + (du + d) holds <f1(p), f2(p + (du, dv))> / C."""
    if f1.shape != f2.shape:
        raise ConfigurationError(f"correlation: shape mismatch {f1.shape} vs {f2.shape}")
    if d_max < 0:
        raise ConfigurationError("d_max must be >= 0")
    b, c, h, w = f1.shape
    d = int(d_max)
    n = 2 * d + 1
    a = f1.data
    f2p = np.pad(f2.data, ((0, 0), (0, 0), (d, d), (d, d)))
    out = np.empty((b, n * n, h, w), dtype=a.dtype)
    inv_c = 1.0 / c
    for k in range(n * n):
        dv, du = divmod(k, n)
        out[:, k] = (a * f2p[:, :, dv : dv + h, du : du + w]).sum(axis=1) * inv_c

    def backward(g):
        g1 = np.zeros_like(a) if f1.requires_grad else None
        g2p = np.zeros_like(f2p) if f2.requires_grad else None
        for k in range(n * n):
            dv, du = divmod(k, n)
            gk = g[:, k : k + 1] * inv_c
            if g1 is not None:
                g1 += gk * f2p[:, :, dv : dv + h, du : du + w]
            if g2p is not None:
                g2p[:, :, dv : dv + h, du : du + w] += gk * a
        g2 = None if g2p is None else g2p[:, :, d : d + h, d : d + w]
        return g1, g2

    return _result(out, (f1, f2), backward, "correlation")


def grid_sample_bilinear(x, flow):
    """Sample ``x`` at ``p + flow(p)`` with bilinear weights and zero padding.

    Returns ``(sampled, validity)``; validity is 1 where the sample point lies
    inside the frame and is not part of the graph.
    """
    flow = as_tensor(flow)
    if x.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise ConfigurationError("grid_sample_bilinear expects x (B,C,H,W) and flow (B,2,H,W)")
    if flow.shape[0] != x.shape[0] or flow.shape[2:] != x.shape[2:]:
        raise ConfigurationError("flow spatial shape must equal image spatial shape")
    b, c, h, w = x.shape
    dt = x.dtype
    gy, gx = np.mgrid[0:h, 0:w]
    px = (gx[None] + flow.data[:, 0]).reshape(-1)
    py = (gy[None] + flow.data[:, 1]).reshape(-1)
    validity = ((px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)).astype(dt)

    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = (px - x0).astype(dt)
    fy = (py - y0).astype(dt)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    base = np.repeat(np.arange(b, dtype=np.int64) * (h * w), h * w)
    xf = x.data.transpose(0, 2, 3, 1).reshape(-1, c)

    corners = []  # (index, inside, value) for (y0,x0) (y0,x1) (y1,x0) (y1,x1)
    for yy in (y0, y0 + 1):
        for xx in (x0, x0 + 1):
            inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            idx = base + np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
            val = xf[idx] * inside[:, None]
            corners.append((idx, inside, val))
    wts = ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx)
    out = sum(wt[:, None] * v for wt, (_, _, v) in zip(wts, corners))
    out = np.ascontiguousarray(out.reshape(b, h, w, c).transpose(0, 3, 1, 2))

    def backward(g):
        gt = g.transpose(0, 2, 3, 1).reshape(-1, c)
        gxx = None
        if x.requires_grad:
            n = b * h * w
            chan = np.arange(c, dtype=np.int64)
            acc = np.zeros(n * c, dtype=np.float64)
            for wt, (idx, inside, _) in zip(wts, corners):
                flat = (idx[:, None] * c + chan).reshape(-1)
                acc += np.bincount(flat, weights=((wt * inside)[:, None] * gt).reshape(-1), minlength=n * c)
            gxx = acc.astype(dt).reshape(b, h, w, c).transpose(0, 3, 1, 2)
        gflow = None
        if flow.requires_grad:
            v00, v01, v10, v11 = (cv[2] for cv in corners)
            du = ((1 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)) * gt
            dv = ((1 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)) * gt
            gflow = np.stack([du.sum(1).reshape(b, h, w), dv.sum(1).reshape(b, h, w)], axis=1)
        return gxx, gflow

    res = _result(out, (x, flow), backward, "grid_sample_bilinear")
    return res, validity.reshape(b, 1, h, w)


# ------------------------------------------------------- separable linear maps


@functools.lru_cache(maxsize=None)
def _upsample_matrix(n):
    m = 2 * n
    mat = np.zeros((m, n))
    if n == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(m) * (n - 1) / (m - 1)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - lo
    mat[np.arange(m), lo] = 1 - frac
    mat[np.arange(m), lo + 1] += frac
    return mat


@functools.lru_cache(maxsize=None)
def _pool_matrix(n):
    if n % 2:
        raise ConfigurationError(f"avg_pool2x2 needs even sizes, got {n}")
    mat = np.zeros((n // 2, n))
    idx = np.arange(n // 2)
    mat[idx, 2 * idx] = 0.5
    mat[idx, 2 * idx + 1] = 0.5
    return mat


@functools.lru_cache(maxsize=None)
def _box_matrix(n):
    mat = np.zeros((n, n))
    for i in range(n):
        lo, hi = max(0, i - 1), min(n, i + 2)
        mat[i, lo:hi] = 1.0 / (hi - lo)
    return mat


def separable(x, left, right, op="separable"):
    """``left @ x @ right.T`` applied to the two spatial axes."""
    lm = left.astype(x.dtype)
    rt = right.T.astype(x.dtype)
    out = np.matmul(np.matmul(lm, x.data), rt)
    return _result(out, (x,), lambda g: (np.matmul(np.matmul(lm.T, g), rt.T),), op)


def upsample_bilinear_x2(x):
    """Double both spatial sizes; the corner samples of input and output coincide."""
    h, w = x.shape[2:]
    return separable(x, _upsample_matrix(h), _upsample_matrix(w), "upsample_x2")


def avg_pool2x2(x):
    h, w = x.shape[2:]
    return separable(x, _pool_matrix(h), _pool_matrix(w), "avg_pool2x2")


def box_filter3x3(x):
    """3x3 mean over the in-frame neighbourhood."""
    h, w = x.shape[2:]
    return separable(x, _box_matrix(h), _box_matrix(w), "box3x3")


# --------------------------------------------------------------- verification


def grad_check(fn, inputs, step=1e-5, n_directions=6, seed=0, directions="both"):
    """Worst relative error between analytic and central-difference JVPs.

    ``fn`` maps a list of tensors to a tensor (or a tuple whose first item is
    one).  The output is reduced with a fixed random projection.  Directions
    are random dense vectors, random coordinate axes, or both.  Returns
    ``inf`` when any evaluated value is non-finite.
    """
    if step <= 0:
        raise UsageError("step must be positive")
    rng = np.random.default_rng(seed)
    arrays = [np.array(np.asarray(a.data if isinstance(a, Tensor) else a), dtype=np.float64) for a in inputs]

    def evaluate(arrs, record):
        ts = [Tensor(a, requires_grad=record) for a in arrs]
        out = fn(ts)
        if isinstance(out, tuple):
            out = out[0]
        return ts, out

    ts, out = evaluate(arrays, True)
    proj = rng.standard_normal(out.shape)
    if not np.all(np.isfinite(out.data)):
        return math.inf
    backward_sweep(sum_all(mul(out, Tensor(proj))))
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, ts)]
    if not all(np.all(np.isfinite(g)) for g in analytic):
        return math.inf

    worst = 0.0
    for i, base in enumerate(arrays):
        dirs = []
        if directions in ("both", "dense"):
            dirs += [rng.standard_normal(base.shape) for _ in range(n_directions)]
        if directions in ("both", "coordinate"):
            for flat in rng.choice(base.size, size=min(n_directions, base.size), replace=False):
                e = np.zeros(base.size)
                e[flat] = 1.0
                dirs.append(e.reshape(base.shape))
        for d in dirs:
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i] = base + step * d
            minus[i] = base - step * d
            with no_grad():
                op = evaluate(plus, False)[1].data
                om = evaluate(minus, False)[1].data
            if not (np.all(np.isfinite(op)) and np.all(np.isfinite(om))):
                return math.inf
            fd = float(np.sum(proj * (op - om))) / (2 * step)
            an = float(np.sum(analytic[i] * d))
            denom = max(abs(fd), abs(an), 1e-8)
            worst = max(worst, abs(fd - an) / denom)
    return worst
