"""Tape-based reverse-mode autodiff on dense f64 tensors.

The differentiation rule for every primitive is written in terms of the
primitives themselves.  When a tape runs in higher-order mode the backward
pass therefore records fresh nodes onto the same tape, and the returned
gradients can be differentiated again (reverse-over-reverse).  This is what
lets the matching loss be differentiated with respect to synthetic pixels
through a gradient that was itself produced by a backward pass.

A tape is single-threaded; distinct tapes on distinct threads do not share
state.  Tensors detached from any tape are plain value holders and can move
freely between threads.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GradientError, ShapeError


class _TapeStack(threading.local):
    def __init__(self):
        self.stack = []


_STACK = _TapeStack()


def _active_tape():
    stack = _STACK.stack
    return stack[-1] if stack else None


class Tape:
    """Append-only record of executed ops.

    ``higher_order=True`` makes every backward pass re-record its own
    computation, so gradients stay differentiable.  Nodes are appended in
    execution order, which is automatically a topological order.
    """

    def __init__(self, higher_order: bool = False):
        self.higher_order = higher_order
        self.nodes: list[Node] = []
        self.watched: set[int] = set()

    def __enter__(self):
        _STACK.stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _STACK.stack.pop()
        assert popped is self, "tape contexts must nest"
        # the record is cyclic (tape -> node -> tensor -> tape); dropping it
        # here frees intermediates by refcount instead of waiting for gc,
        # which matters in long training loops
        self.nodes.clear()
        self.watched.clear()
        return False


class _NoRecord:
    """Context that suspends recording (used by first-order backward)."""

    def __enter__(self):
        _STACK.stack.append(None)
        return self

    def __exit__(self, *exc):
        _STACK.stack.pop()
        return False


no_grad = _NoRecord


class Node:
    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op, inputs, out, vjp):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Tensor:
    """Dense f64 array with optional tape membership.

    ``node_id`` is the index of the producing node on ``tape`` (None for
    leaves and constants).
    """

    __slots__ = ("data", "requires_grad", "tape", "node_id", "im2col")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape = None
        self.node_id = None
        self.im2col = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    # operator sugar
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

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    """Wrap a forward result; append a node when a tape is active and a
    gradient can flow."""
    tape = _active_tape()
    track = tape is not None and any(
        t.requires_grad or t.node_id is not None and t.tape is tape for t in inputs
    )
    out = Tensor(out_data, requires_grad=track)
    if track:
        node = Node(op, inputs, out, vjp)
        out.tape = tape
        out.node_id = len(tape.nodes)
        tape.nodes.append(node)
        for t in inputs:
            if t.requires_grad or t.node_id is not None:
                tape.watched.add(id(t))
        tape.watched.add(id(out))
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers

def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        # a read-only stride-0 view; every consumer only reads operand data,
        # so the materialized copy is never needed
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}")
    src_shape = a.shape

    def vjp(g):
        extra = len(shape) - len(src_shape)
        axes = list(range(extra))
        for i, d in enumerate(src_shape):
            if d == 1 and shape[extra + i] != 1:
                axes.append(extra + i)
        red = sum_(g, axis=tuple(axes), keepdims=False) if axes else g
        return (reshape(red, src_shape),)

    return _record("broadcast_to", out, (a,), vjp)


def _align(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        try:
            s = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"elementwise op: shapes {a.shape} and {b.shape} do not broadcast")
        a = broadcast_to(a, s)
        b = broadcast_to(b, s)
    return a, b


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a, b) -> Tensor:
    a, b = _align(a, b)

    def vjp(g):
        return (g, g)

    return _record("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _align(a, b)

    def vjp(g):
        return (g, neg(g))

    return _record("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _align(a, b)

    def vjp(g):
        return (mul(g, b), mul(g, a))

    return _record("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _align(a, b)
    out = _record("div", a.data / b.data, (a, b), None)

    def vjp(g):
        ga = div(g, b)
        gb = neg(mul(g, div(out, b)))
        return (ga, gb)

    if out.node_id is not None:
        out.tape.nodes[out.node_id].vjp = vjp
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (neg(g),)

    return _record("neg", -a.data, (a,), vjp)


def pow_(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def vjp(g):
        return (mul(g, mul(constant(p), pow_(a, p - 1.0))),)

    return _record("pow", a.data ** p, (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _record("exp", np.exp(a.data), (a,), None)

    def vjp(g):
        return (mul(g, out),)

    if out.node_id is not None:
        out.tape.nodes[out.node_id].vjp = vjp
    return out


def log(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (div(g, a),)

    return _record("log", np.log(a.data), (a,), vjp)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = _record("sqrt", np.sqrt(a.data), (a,), None)

    def vjp(g):
        return (div(mul(g, constant(0.5)), out),)

    if out.node_id is not None:
        out.tape.nodes[out.node_id].vjp = vjp
    return out


def sin(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (mul(g, cos(a)),)

    return _record("sin", np.sin(a.data), (a,), vjp)


def cos(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (neg(mul(g, sin(a))),)

    return _record("cos", np.cos(a.data), (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)

    def vjp(g):
        return (mul(g, constant(mask)),)

    return _record("relu", a.data * mask, (a,), vjp)


# ---------------------------------------------------------------------------
# shape primitives

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.shape

    def vjp(g):
        return (reshape(g, src),)

    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    return _record("reshape", out_data, (a,), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-d tensor, got {a.shape}")

    def vjp(g):
        return (transpose(g),)

    return _record("transpose", np.ascontiguousarray(a.data.T), (a,), vjp)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if isinstance(axis, int):
        axis = (axis,)
    src = a.shape
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            kept = (1,) * len(src)
        else:
            kept = tuple(1 if (i in axis or i - len(src) in axis) else d
                         for i, d in enumerate(src))
        return (broadcast_to(reshape(g, kept), src),)

    return _record("sum", out_data, (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if isinstance(axis, int):
        axis = (axis,)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in axis]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), constant(1.0 / n))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        return (matmul(g, transpose(b)), matmul(transpose(a), g))

    return _record("matmul", a.data @ b.data, (a, b), vjp)


def concat0(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    base = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != base:
            raise ShapeError(f"concat0: trailing dims differ: {p.shape[1:]} vs {base}")
    sizes = [p.shape[0] for p in parts]

    def vjp(g):
        outs, start = [], 0
        for n in sizes:
            outs.append(slice0(g, start, n))
            start += n
        return tuple(outs)

    return _record("concat0", np.concatenate([p.data for p in parts], axis=0),
                   tuple(parts), vjp)


def slice0(a, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    total = a.shape[0]
    if start < 0 or start + length > total:
        raise ShapeError(f"slice0: [{start}:{start + length}] out of range for axis size {total}")

    def vjp(g):
        return (embed0(g, start, total),)

    return _record("slice0", np.ascontiguousarray(a.data[start:start + length]), (a,), vjp)


def embed0(a, start: int, total: int) -> Tensor:
    a = as_tensor(a)
    n = a.shape[0]
    out_data = np.zeros((total,) + a.shape[1:], dtype=np.float64)
    out_data[start:start + n] = a.data

    def vjp(g):
        return (slice0(g, start, n),)

    return _record("embed0", out_data, (a,), vjp)


# ---------------------------------------------------------------------------
# spatial primitives (NCHW layout, stride-1 square-kernel convolutions)

def _patches(t: Tensor, kh: int, pad: int):
    """Materialized im2col matrix (N, Ho*Wo, C*kh*kh) of a tensor's data,
    cached on the tensor: the forward conv and the weight-gradient adjoint
    of the same input need identical patches."""
    key = (kh, pad)
    hit = t.im2col
    if hit is not None and hit[0] == key:
        return hit[1]
    x = t.data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kh), axis=(2, 3))
    n, _, ho, wo = win.shape[:4]
    entry = (win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, -1), ho, wo)
    t.im2col = (key, entry)
    return entry


def _conv_fwd_data(x: Tensor, w: np.ndarray, pad: int):
    o, kh = w.shape[0], w.shape[2]
    patches, ho, wo = _patches(x, kh, pad)
    wm = w.reshape(o, -1)
    n = x.shape[0]
    # one GEMM per sample, written straight into NCHW order
    out = np.empty((n, o, ho, wo))
    for i in range(n):
        np.matmul(wm, patches[i].T, out=out[i].reshape(o, ho * wo))
    return out


def _conv_weight_grad_data(x: Tensor, u: np.ndarray, pad: int, kh: int):
    patches, ho, wo = _patches(x, kh, pad)
    n, o = u.shape[:2]
    um = u.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
    flat = patches.reshape(n * ho * wo, -1)
    return np.matmul(um, flat).reshape(o, x.shape[1], kh, kh)


def conv2d(x, w, padding: int = 0) -> Tensor:
    """Cross-correlation, stride 1.  ``x`` is (N,C,H,W), ``w`` is (O,C,k,k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(
            f"conv2d: only square kernels supported, got {w.shape[2]}x{w.shape[3]}")
    kh = w.shape[2]
    if kh - 1 - padding < 0:
        raise ShapeError(f"conv2d: padding {padding} exceeds kernel-1 ({kh - 1})")
    out_data = _conv_fwd_data(x, w.data, padding)

    def vjp(g):
        return (conv2d_input_grad(g, w, padding, x.shape[2]),
                conv2d_weight_grad(x, g, padding, kh))

    return _record("conv2d", out_data, (x, w), vjp)


def conv2d_input_grad(u, w, padding: int, in_h: int) -> Tensor:
    """Adjoint of conv2d in its image argument (full correlation with the
    spatially flipped, channel-swapped kernel)."""
    u, w = as_tensor(u), as_tensor(w)
    kh = w.shape[2]
    wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    out_data = _conv_fwd_data(u, wt, kh - 1 - padding)
    if out_data.shape[2] != in_h:
        raise ShapeError(f"conv2d_input_grad: produced height {out_data.shape[2]}, wanted {in_h}")

    def vjp(g):
        # bilinear in (u, w): d/du is the forward conv, d/dw pairs g with u
        return (conv2d(g, w, padding), conv2d_weight_grad(g, u, padding, kh))

    return _record("conv2d_input_grad", out_data, (u, w), vjp)


def conv2d_weight_grad(x, u, padding: int, k: int) -> Tensor:
    """Adjoint of conv2d in its kernel argument."""
    x, u = as_tensor(x), as_tensor(u)
    out_data = _conv_weight_grad_data(x, u.data, padding, k)

    def vjp(g):
        return (conv2d_input_grad(u, g, padding, x.shape[2]), conv2d(x, g, padding))

    return _record("conv2d_weight_grad", out_data, (x, u), vjp)


def avgpool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling, stride k; trailing rows/cols that
    do not fill a window are dropped."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeError(f"avgpool2d: window {k} larger than input {h}x{w}")
    trimmed = x.data[:, :, :ho * k, :wo * k]
    out_data = trimmed.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

    def vjp(g):
        gx = mul(upsample_nearest(g, k), constant(1.0 / (k * k)))
        if ho * k != h or wo * k != w:
            gx = pad_crop(gx, 0, 0, h, w)
        return (gx,)

    return _record("avgpool2d", out_data, (x,), vjp)


def upsample_nearest(x, f: int) -> Tensor:
    x = as_tensor(x)
    out_data = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def vjp(g):
        return (mul(avgpool2d(g, f), constant(float(f * f))),)

    return _record("upsample_nearest", out_data, (x,), vjp)


def flip_w(x) -> Tensor:
    """Horizontal mirror (reverses the last axis)."""
    x = as_tensor(x)

    def vjp(g):
        return (flip_w(g),)

    return _record("flip_w", np.ascontiguousarray(x.data[..., ::-1]), (x,), vjp)


def shift2d(x, dy: int, dx: int) -> Tensor:
    """Translate content by (dy, dx) with zero fill."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if abs(dy) >= h or abs(dx) >= w:
        raise ShapeError(f"shift2d: shift ({dy},{dx}) exceeds image {h}x{w}")
    out_data = np.zeros_like(x.data)
    ys, yd = (0, dy) if dy >= 0 else (-dy, 0)
    xs, xd = (0, dx) if dx >= 0 else (-dx, 0)
    out_data[:, :, yd:h - ys, xd:w - xs] = x.data[:, :, ys:h - yd, xs:w - xd]

    def vjp(g):
        return (shift2d(g, -dy, -dx),)

    return _record("shift2d", out_data, (x,), vjp)


def pad_crop(x, top: int, left: int, oh: int, ow: int) -> Tensor:
    """out[y, x] = in[y+top, x+left] where in range, else 0.

    Negative offsets pad, positive offsets crop; one primitive covers both.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    out_data = np.zeros((n, c, oh, ow), dtype=np.float64)
    y0, y1 = max(0, -top), min(oh, h - top)
    x0, x1 = max(0, -left), min(ow, w - left)
    if y1 > y0 and x1 > x0:
        out_data[:, :, y0:y1, x0:x1] = x.data[:, :, y0 + top:y1 + top, x0 + left:x1 + left]

    def vjp(g):
        return (pad_crop(g, -top, -left, h, w),)

    return _record("pad_crop", out_data, (x,), vjp)


def _nearest_index(out_n: int, in_n: int) -> np.ndarray:
    idx = np.floor((np.arange(out_n) + 0.5) * in_n / out_n).astype(np.intp)
    return np.clip(idx, 0, in_n - 1)


def resize_nearest(x, oh: int, ow: int) -> Tensor:
    """Nearest-neighbour resize; a pure gather, so gradients pass through
    exactly (scatter-add on the way back)."""
    x = as_tensor(x)
    h, w = x.shape[2], x.shape[3]
    iy, ix = _nearest_index(oh, h), _nearest_index(ow, w)
    out_data = np.ascontiguousarray(x.data[:, :, iy][:, :, :, ix])

    def vjp(g):
        return (resize_nearest_adjoint(g, h, w),)

    return _record("resize_nearest", out_data, (x,), vjp)


def resize_nearest_adjoint(u, ih: int, iw: int) -> Tensor:
    u = as_tensor(u)
    oh, ow = u.shape[2], u.shape[3]
    iy, ix = _nearest_index(oh, ih), _nearest_index(ow, iw)
    n, c = u.shape[0], u.shape[1]
    flat = np.zeros((n, c, ih * iw), dtype=np.float64)
    target = (iy[:, None] * iw + ix[None, :]).ravel()
    np.add.at(flat, (slice(None), slice(None), target), u.data.reshape(n, c, -1))
    out_data = flat.reshape(n, c, ih, iw)

    def vjp(g):
        return (resize_nearest(g, oh, ow),)

    return _record("resize_nearest_adjoint", out_data, (u,), vjp)


# ---------------------------------------------------------------------------
# compositions

def frobenius_norm(x) -> Tensor:
    x = as_tensor(x)
    return sqrt(sum_(mul(x, x)))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    # stop-gradient shift: the value and gradient of log-sum-exp are
    # unchanged by subtracting any constant
    m = constant(logits.data.max(axis=1, keepdims=True))
    z = sub(logits, m)
    lse = log(sum_(exp(z), axis=1, keepdims=True))
    logp = sub(z, lse)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return neg(mul(sum_(mul(logp, constant(onehot))), constant(1.0 / n)))


def softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    m = constant(logits.data.max(axis=1, keepdims=True))
    e = exp(sub(logits, m))
    return div(e, sum_(e, axis=1, keepdims=True))


def group_norm(x, gamma, beta, num_groups: int, eps: float = 1e-5) -> Tensor:
    """Per-group standardization followed by per-channel affine."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    g = num_groups
    if c % g:
        raise ShapeError(f"group_norm: {c} channels not divisible by {g} groups")
    xg = reshape(x, (n, g, (c // g) * h * w))
    mu = mean(xg, axis=2, keepdims=True)
    xc = sub(xg, mu)
    var = mean(mul(xc, xc), axis=2, keepdims=True)
    xn = div(xc, sqrt(add(var, constant(eps))))
    y = reshape(xn, (n, c, h, w))
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    return add(mul(y, reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))


# ---------------------------------------------------------------------------
# backward and checking

def backward(loss: Tensor, wrt, create_graph=None) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    With ``create_graph`` unset the tape's own mode decides whether the
    backward computation is recorded (and therefore differentiable again).
    """
    if loss.data.size != 1:
        raise GradientError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        # a loss that never touched a tracked tensor is constant; its
        # gradients are zero as long as the wrt tensors are known to the
        # surrounding tape
        tape = _active_tape()
        if tape is None:
            raise GradientError("backward: loss is not recorded on a tape")
        for t in wrt:
            if id(t) not in tape.watched:
                raise GradientError("backward: requested tensor is not on the tape")
        return [constant(np.zeros_like(t.data)) for t in wrt]
    for t in wrt:
        if id(t) not in tape.watched:
            raise GradientError("backward: requested tensor is not on the tape")
    cg = tape.higher_order if create_graph is None else create_graph

    # restrict the sweep to ancestors of the loss
    limit = loss.node_id
    needed = np.zeros(limit + 1, dtype=bool)
    needed[limit] = True
    for i in range(limit, -1, -1):
        if not needed[i]:
            continue
        for t in tape.nodes[i].inputs:
            if t.tape is tape and t.node_id is not None:
                needed[t.node_id] = True

    grads: dict[int, Tensor] = {id(loss): constant(np.ones((), dtype=np.float64))}
    ctx = _NoRecord() if not cg else _Reuse(tape)
    with ctx:
        for i in range(limit, -1, -1):
            if not needed[i]:
                continue
            node = tape.nodes[i]
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            for t, g in zip(node.inputs, node.vjp(g_out)):
                if g is None:
                    continue
                if not (t.requires_grad or t.node_id is not None):
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = g if prev is None else add(prev, g)
    out = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            g = constant(np.zeros_like(t.data))
        out.append(g)
    return out


class _Reuse:
    """Re-activate a tape (innermost) for the duration of a backward pass."""

    def __init__(self, tape):
        self.tape = tape

    def __enter__(self):
        _STACK.stack.append(self.tape)
        return self.tape

    def __exit__(self, *exc):
        _STACK.stack.pop()
        return False


def grad_check(f, args, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a list of Tensors to a scalar Tensor and must be evaluable at
    the perturbed points.
    """
    args = [np.asarray(a, dtype=np.float64) for a in args]
    with Tape():
        ts = [Tensor(a.copy(), requires_grad=True) for a in args]
        out = f(*ts)
        analytic = [g.data.copy() for g in backward(out, ts)]

    def value(vs):
        return float(f(*[Tensor(v) for v in vs]).data)

    worst = 0.0
    for i, a in enumerate(args):
        flat = a.copy()
        view = flat.reshape(-1)
        an = analytic[i].reshape(-1)
        for j in range(view.size):
            orig = view[j]
            view[j] = orig + h
            plus = value(args[:i] + [flat] + args[i + 1:])
            view[j] = orig - h
            minus = value(args[:i] + [flat] + args[i + 1:])
            view[j] = orig
            fd = (plus - minus) / (2.0 * h)
            err = abs(an[j] - fd) / max(1.0, abs(an[j]))
            worst = max(worst, err)
    return worst
