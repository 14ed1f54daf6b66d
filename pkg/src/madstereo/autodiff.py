"""Reverse-mode differentiation over dense NCHW arrays.

Every op builds a :class:`Tensor` holding its output, its parents and a
closure mapping the upstream gradient to parent gradients.  :func:`backward`
walks that graph and can be restricted two ways: to a set of target leaves
(frozen parameters are simply not targets) and to a set of scope tags, which
cuts the graph at nodes created under any other scope.  The second form is
what gives module-local back-propagation.
"""

from __future__ import annotations

import contextlib
import functools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "precision",
    "get_dtype",
    "node_scope",
    "backward",
    "conv2d",
    "leaky_relu",
    "bilinear_upsample",
    "correlation1d",
    "warp_horizontal",
    "crop",
    "concat",
    "take",
    "absolute",
    "mean",
    "channel_mean",
    "box_filter",
    "check_gradients",
]

_DTYPE = np.float32
_SCOPE: object = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new parameters and constants."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def node_scope(tag):
    """Tag every node created inside the block with ``tag``."""
    global _SCOPE
    prev, _SCOPE = _SCOPE, tag
    try:
        yield
    finally:
        _SCOPE = prev


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "tag", "op", "requires_grad", "grad")

    def __init__(self, data, parents=(), backward_fn=None, op="const", requires_grad=False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=_DTYPE)
        self.data = data
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.tag = _SCOPE
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, tag={self.tag!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else negate(other))

    def __rsub__(self, other):
        return add(negate(self), other)

    def __neg__(self):
        return negate(self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return divide(self, other)
        return multiply(self, 1.0 / other)


class Parameter(Tensor):
    """Trainable leaf with a persistent gradient accumulator."""

    __slots__ = ("name", "owner")

    def __init__(self, data, name: str = "", owner=None):
        data = np.ascontiguousarray(data, dtype=_DTYPE)
        with node_scope(owner):
            super().__init__(data, op="param", requires_grad=True)
        self.name = name
        self.owner = owner
        self.grad = np.zeros_like(data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, owner={self.owner!r})"


def _const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor, tags) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if tags is not None and node.tag is not None and node.tag not in tags:
            continue  # treated as a constant: do not look behind it
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, grad=None, targets: Iterable[Tensor] | None = None, tags=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for reachable leaves.

    Args:
        root: Output node. ``grad`` defaults to ones, which for a scalar
            loss is the usual seed.
        grad: Upstream gradient with the same shape as ``root``.
        targets: Leaves allowed to receive gradient. ``None`` means every
            reachable leaf with ``requires_grad``.
        tags: If given, nodes whose tag is neither ``None`` nor in ``tags``
            are treated as constants and never traversed.
    """
    if grad is None:
        grad = np.ones_like(root.data)
    grad = np.asarray(grad, dtype=root.data.dtype)
    if grad.shape != root.shape:
        raise ShapeError(f"upstream gradient shape {grad.shape} != output shape {root.shape}")
    target_ids = None if targets is None else {id(t) for t in targets}
    tags = None if tags is None else set(tags)

    order = _topo_order(root, tags)
    live: dict[int, bool] = {}
    for node in order:
        blocked = tags is not None and node.tag is not None and node.tag not in tags
        if not node.parents:
            ok = node.requires_grad and (target_ids is None or id(node) in target_ids)
            live[id(node)] = ok and not blocked
        elif blocked or node.backward_fn is None:
            live[id(node)] = False
        else:
            live[id(node)] = any(live.get(id(p), False) for p in node.parents)

    if not live.get(id(root), False):
        return
    grads: dict[int, np.ndarray] = {id(root): grad}
    for node in reversed(order):
        if not live[id(node)]:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        needs = tuple(live.get(id(p), False) for p in node.parents)
        for parent, need, pg in zip(node.parents, needs, node.backward_fn(g, needs)):
            if not need or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor(a.data + b.data, (a, b), bw, "add")


def negate(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g, needs: (-g,), "neg")


def multiply(a, b) -> Tensor:
    a, b = _const(a), _const(b)

    def bw(g, needs):
        ga = _unbroadcast(g * b.data, a.shape) if needs[0] else None
        gb = _unbroadcast(g * a.data, b.shape) if needs[1] else None
        return ga, gb

    return Tensor(a.data * b.data, (a, b), bw, "mul")


def divide(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bw(g, needs):
        ga = _unbroadcast(g / b.data, a.shape) if needs[0] else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None
        return ga, gb

    return Tensor(out, (a, b), bw, "div")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return Tensor(np.abs(a.data), (a,), lambda g, needs: (g * sign,), "abs")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data >= 0
    out = np.where(pos, x.data, x.data * slope)

    def bw(g, needs):
        return (np.where(pos, g, g * slope),)

    return Tensor(out, (x,), bw, "leaky_relu")


def mean(x: Tensor) -> Tensor:
    size = x.data.size
    shape = x.shape

    def bw(g, needs):
        return (np.broadcast_to(g / size, shape).astype(x.data.dtype),)

    return Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), bw, "mean")


def channel_mean(x: Tensor) -> Tensor:
    c = x.shape[1]
    shape = x.shape

    def bw(g, needs):
        return (np.broadcast_to(g / c, shape).astype(x.data.dtype),)

    return Tensor(x.data.mean(axis=1, keepdims=True), (x,), bw, "channel_mean")


# --------------------------------------------------------------------------
# structural


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat along axis {axis}: {[t.shape for t in tensors]}") from exc

    def bw(g, needs):
        index = [slice(None)] * g.ndim
        parts = []
        for lo, hi, need in zip(bounds[:-1], bounds[1:], needs):
            if not need:
                parts.append(None)
                continue
            index[axis] = slice(lo, hi)
            parts.append(g[tuple(index)])
        return parts

    return Tensor(out, tensors, bw, "concat")


def take(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def bw(g, needs):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return Tensor(x.data[index], (x,), bw, "take")


def crop(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height x width`` window."""
    n, c, h, w = x.shape
    if height > h or width > w:
        raise ShapeError(f"crop to {height}x{width} exceeds input {h}x{w}")
    if (height, width) == (h, w):
        return x

    def bw(g, needs):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, :height, :width] = g
        return (full,)

    return Tensor(x.data[:, :, :height, :width], (x,), bw, "crop")


# --------------------------------------------------------------------------
# convolution


def _conv_out(size, k, stride, dilation, padding):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with (c_out, c_in, k, k) weights."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    co, ci, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {k}x{k2}")
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels (dim 1), weights expect {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({co},)")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    ho = _conv_out(h, k, stride, dilation, padding)
    wo = _conv_out(w, k, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {h}x{w}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    cols = np.empty((n, c, k * k, ho, wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = xp[:, :, i * dilation:i * dilation + hs:stride,
                                       j * dilation:j * dilation + ws:stride]
    cols = cols.reshape(n, c * k * k, ho * wo)
    wmat = weight.data.reshape(co, c * k * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, co, ho, wo)

    def bw(g, needs):
        g2 = g.reshape(n, co, ho * wo)
        gx = gw = gb = None
        if needs[1]:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if len(needs) > 2 and needs[2]:
            gb = g2.sum(axis=(0, 2))
        if needs[0]:
            dcols = np.matmul(wmat.T, g2).reshape(n, c, k * k, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i * dilation:i * dilation + hs:stride,
                        j * dilation:j * dilation + ws:stride] += dcols[:, :, i * k + j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out, parents, bw, "conv2d")


# --------------------------------------------------------------------------
# resampling


@functools.lru_cache(maxsize=256)
def _upsample_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(int), max(n_in - 2, 0))
    frac = src - i0
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    mat[rows, i0] += 1.0 - frac
    if n_in > 1:
        mat[rows, i0 + 1] += frac
    mat.setflags(write=False)
    return mat.astype(dtype)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor, half-pixel centres, edge clamp."""
    if factor < 2:
        raise ValueError(f"upsample factor must be >= 2, got {factor}")
    n, c, h, w = x.shape
    uh = _upsample_matrix(h, factor, x.data.dtype)
    uw = _upsample_matrix(w, factor, x.data.dtype)
    out = np.matmul(uh, np.matmul(x.data, uw.T))

    def bw(g, needs):
        return (np.matmul(uh.T, np.matmul(g, uw)),)

    return Tensor(out, (x,), bw, "upsample")


def box_filter(x: Tensor, size: int = 3) -> Tensor:
    """Mean over ``size x size`` windows with replicated borders (same size out)."""
    if size % 2 != 1:
        raise ValueError("box filter size must be odd")
    r = size // 2
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    out = np.zeros_like(x.data)
    for i in range(size):
        for j in range(size):
            out += xp[:, :, i:i + h, j:j + w]
    out /= size * size

    def bw(g, needs):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        gs = g / (size * size)
        for i in range(size):
            for j in range(size):
                gp[:, :, i:i + h, j:j + w] += gs
        # fold the replicated border back onto the edge rows/columns
        rows = gp[:, :, r:r + h, :].copy()
        rows[:, :, 0, :] += gp[:, :, :r, :].sum(axis=2)
        rows[:, :, -1, :] += gp[:, :, r + h:, :].sum(axis=2)
        gx = rows[:, :, :, r:r + w].copy()
        gx[:, :, :, 0] += rows[:, :, :, :r].sum(axis=3)
        gx[:, :, :, -1] += rows[:, :, :, r + w:].sum(axis=3)
        return (gx,)

    return Tensor(out, (x,), bw, "box_filter")


def warp_horizontal(src: Tensor, disparity: Tensor) -> Tensor:
    """Sample ``src`` at ``x - disparity(x)`` along rows, clamping to the border."""
    n, c, h, w = src.shape
    if disparity.shape != (n, 1, h, w):
        raise ShapeError(f"warp disparity shape {disparity.shape} != {(n, 1, h, w)}")
    if not np.all(np.isfinite(disparity.data)):
        raise FloatingPointError("warp received a non-finite disparity")
    dtype = src.data.dtype
    xs = np.arange(w, dtype=dtype)
    raw = xs - disparity.data[:, 0]  # (n, h, w)
    pos = np.clip(raw, 0.0, w - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), max(w - 2, 0))
    i1 = np.minimum(i0 + 1, w - 1)
    frac = (pos - i0).astype(dtype)
    idx0 = np.broadcast_to(i0[:, None], (n, c, h, w))
    idx1 = np.broadcast_to(i1[:, None], (n, c, h, w))
    s0 = np.take_along_axis(src.data, idx0, axis=3)
    s1 = np.take_along_axis(src.data, idx1, axis=3)
    f = frac[:, None]
    out = s0 + f * (s1 - s0)
    inside = ((raw >= 0) & (raw <= w - 1))[:, None]

    def bw(g, needs):
        gs = gd = None
        if needs[0]:
            base = (np.arange(n * c * h, dtype=np.int64) * w).reshape(n, c, h, 1)
            size = n * c * h * w
            gs = np.bincount((base + idx0).ravel(), weights=(g * (1 - f)).ravel(), minlength=size)
            gs += np.bincount((base + idx1).ravel(), weights=(g * f).ravel(), minlength=size)
            gs = gs.reshape(src.shape).astype(dtype)
        if needs[1]:
            gd = -(g * (s1 - s0)).sum(axis=1, keepdims=True) * inside
        return gs, gd

    return Tensor(out, (src, disparity), bw, "warp")


def correlation1d(left: Tensor, right: Tensor, radius: int = 2) -> Tensor:
    """Channel-mean products of left(x) and right(x + s) for s in [-radius, radius]."""
    if left.shape != right.shape:
        raise ShapeError(f"correlation inputs differ: {left.shape} vs {right.shape}")
    if radius < 1:
        raise ValueError("correlation radius must be >= 1")
    n, c, h, w = left.shape
    a, b = left.data, right.data
    shifts = range(-radius, radius + 1)
    out = np.zeros((n, 2 * radius + 1, h, w), dtype=a.dtype)
    spans = []
    for d, s in enumerate(shifts):
        x0, x1 = max(0, -s), min(w, w - s)
        spans.append((x0, x1))
        if x1 > x0:
            out[:, d, :, x0:x1] = (a[:, :, :, x0:x1] * b[:, :, :, x0 + s:x1 + s]).mean(axis=1)

    def bw(g, needs):
        ga = np.zeros_like(a) if needs[0] else None
        gb = np.zeros_like(b) if needs[1] else None
        for d, s in enumerate(shifts):
            x0, x1 = spans[d]
            if x1 <= x0:
                continue
            gd = g[:, d:d + 1, :, x0:x1] / c
            if needs[0]:
                ga[:, :, :, x0:x1] += gd * b[:, :, :, x0 + s:x1 + s]
            if needs[1]:
                gb[:, :, :, x0 + s:x1 + s] += gd * a[:, :, :, x0:x1]
        return ga, gb

    return Tensor(out, (left, right), bw, "correlation")


# --------------------------------------------------------------------------
# gradient checking


def _leaves(root: Tensor) -> list[Tensor]:
    found = []
    for node in _topo_order(root, None):
        if not node.parents and node.requires_grad:
            found.append(node)
    return found


def check_gradients(op: Callable[[], Tensor], probes: Sequence[Tensor] = (), epsilon: float = 1e-6,
                    seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``op`` is re-evaluated for every perturbation, so it must rebuild its
    graph from the probe arrays each call.  The scalar being differentiated
    is ``sum(r * op())`` for a fixed random ``r``.  Parameters reachable from
    the output are checked along with ``probes``.  Error per element is
    ``|a - b| / max(1, |a|, |b|)``; a non-finite analytic gradient yields
    ``inf``.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    out = op()
    if out.data.dtype != np.float64:
        raise TypeError("check_gradients needs 64-bit tensors; build them under precision(np.float64)")
    rng = np.random.default_rng(seed)
    upstream = rng.standard_normal(out.shape)

    leaves = list(probes) + [p for p in _leaves(out) if all(p is not q for q in probes)]
    saved = []
    for leaf in leaves:
        leaf.requires_grad = True
        saved.append(None if leaf.grad is None else leaf.grad.copy())
        leaf.grad = np.zeros_like(leaf.data)
    backward(out, upstream, targets=leaves)
    analytic = [leaf.grad.copy() for leaf in leaves]
    for leaf, old in zip(leaves, saved):
        leaf.grad = old

    worst = 0.0
    for leaf, ga in zip(leaves, analytic):
        if not np.all(np.isfinite(ga)):
            return math.inf
        flat = leaf.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(np.sum(upstream * op().data))
            flat[i] = orig - epsilon
            fm = float(np.sum(upstream * op().data))
            flat[i] = orig
            numeric = (fp - fm) / (2 * epsilon)
            a = float(gflat[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if not math.isfinite(err):
                return math.inf
            worst = max(worst, err)
    return worst
