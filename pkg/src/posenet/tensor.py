"""Dense float64 tensors with reverse-mode automatic differentiation.

Gradients are recorded on an explicit tape (:class:`Graph`): while a graph
is active (``with Graph():``) every differentiable operation appends one
node, and :func:`backward` sweeps the tape in reverse insertion order.
Insertion order is also the gradient accumulation order, so two identical
runs produce bit-identical gradients.

Graphs double as execution traces: every operation logs a tagged event
(with its enclosing scopes), which structural tests use to assert, e.g.,
how often the timing signal was applied or which padding mode a
convolution ran with.
"""

from contextlib import contextmanager
import threading
import weakref

import numpy as np

from posenet import kernels


class ShapeError(ValueError):
    pass


class Tensor:
    """A dense array of 64-bit reals, optionally tracking a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_graph")

    def __init__(self, data, requires_grad=False):
        data = np.asarray(data, dtype=np.float64)
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._graph = None

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
        return self.data.item()

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -np.asarray(other, dtype=np.float64))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def assert_finite(t, name="tensor"):
    """Debug check: raise if any element is NaN or infinite."""
    data = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name} contains non-finite values")


# ---------------------------------------------------------------------------
# Graph (tape + execution trace)
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("tag", "inputs", "output", "bwd")

    def __init__(self, tag, inputs, output, bwd):
        self.tag = tag
        self.inputs = inputs
        self.output = output
        self.bwd = bwd


class Event:
    __slots__ = ("tag", "scopes", "meta")

    def __init__(self, tag, scopes, meta):
        self.tag = tag
        self.scopes = scopes
        self.meta = meta

    def __repr__(self):
        return f"Event({self.tag!r}, scopes={self.scopes}, meta={self.meta})"


_LOCAL = threading.local()


def _stack():
    if not hasattr(_LOCAL, "graphs"):
        _LOCAL.graphs = []
    return _LOCAL.graphs


def current_graph():
    stack = _stack()
    return stack[-1] if stack else None


class Graph:
    """Ordered tape of executed operations, one forward/backward pass each.

    Single-writer: a graph belongs to the thread that opened it. Distinct
    graphs may run on distinct threads concurrently.
    """

    def __init__(self):
        self.nodes = []
        self.events = []
        self._scopes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self, "graphs must be exited in LIFO order"
        return False

    @contextmanager
    def scope(self, name):
        self._scopes.append(name)
        try:
            yield self
        finally:
            self._scopes.pop()

    def event(self, tag, **meta):
        self.events.append(Event(tag, tuple(self._scopes), meta))

    def trace(self, tag=None, scope=None):
        """Events filtered by tag and/or enclosing scope name."""
        out = []
        for ev in self.events:
            if tag is not None and ev.tag != tag:
                continue
            if scope is not None and scope not in ev.scopes:
                continue
            out.append(ev)
        return out

    def count(self, tag, scope=None):
        return len(self.trace(tag=tag, scope=scope))

    def backward(self, loss):
        """Reverse sweep from a scalar loss, accumulating ``.grad`` on every
        requires_grad tensor reachable from it."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        flowing = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g_out = flowing.pop(id(node.output), None)
            if g_out is None:
                continue
            out = node.output
            out.grad = g_out if out.grad is None else out.grad + g_out
            for t, g_in in zip(node.inputs, node.bwd(g_out)):
                if g_in is None or not t.requires_grad:
                    continue
                key = id(t)
                acc = flowing.get(key)
                flowing[key] = g_in if acc is None else acc + g_in
                leaves[key] = t
        for key, g in flowing.items():
            t = leaves.get(key)
            if t is None:
                continue
            t.grad = g if t.grad is None else t.grad + g


@contextmanager
def scope(name):
    """Scope events under ``name`` on the active graph (no-op without one)."""
    g = current_graph()
    if g is None:
        yield
    else:
        with g.scope(name):
            yield


def event(tag, **meta):
    """Log a marker event on the active graph, if any."""
    g = current_graph()
    if g is not None:
        g.event(tag, **meta)


def backward(loss):
    graph = loss._graph() if loss._graph is not None else None
    if graph is None:
        raise RuntimeError(
            "loss was not recorded on a live graph; run the forward pass "
            "inside 'with Graph():'"
        )
    graph.backward(loss)


def _make(tag, inputs, data, bwd, **meta):
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    g = current_graph()
    if g is not None:
        g.event(tag, **meta)
        if req:
            g.nodes.append(_Node(tag, inputs, out, bwd))
            # weakref: tensors must not keep their graph alive (reference
            # cycles would force gc pauses in the training loop)
            out._graph = weakref.ref(g)
    return out


def _reduce_to(grad, shape):
    """Sum a gradient over axes that were broadcast in the forward pass."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise / layout operations
# ---------------------------------------------------------------------------


def add(a, b):
    if isinstance(b, Tensor):

        def bwd(g):
            return (
                _reduce_to(g, a.shape) if a.requires_grad else None,
                _reduce_to(g, b.shape) if b.requires_grad else None,
            )

        return _make("add", (a, b), a.data + b.data, bwd)

    const = np.asarray(b, dtype=np.float64)

    def bwd(g):
        return (_reduce_to(g, a.shape),)

    return _make("add", (a,), a.data + const, bwd)


def mul(a, b):
    """Elementwise product; ``b`` may be a tensor, array or scalar constant."""
    if isinstance(b, Tensor):

        def bwd(g):
            return (
                _reduce_to(g * b.data, a.shape) if a.requires_grad else None,
                _reduce_to(g * a.data, b.shape) if b.requires_grad else None,
            )

        return _make("mul", (a, b), a.data * b.data, bwd)

    const = np.asarray(b, dtype=np.float64)

    def bwd(g):
        return (_reduce_to(g * const, a.shape),)

    return _make("mul", (a,), a.data * const, bwd)


def scale(x, s):
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _make("scale", (x,), x.data * s, bwd)


def relu(x):
    def bwd(g):
        return (g * (x.data > 0),)

    return _make("relu", (x,), np.maximum(x.data, 0.0), bwd)


def transpose_last_two(x):
    if x.ndim < 2:
        raise ShapeError(f"transpose_last_two needs ndim >= 2, got {x.shape}")

    def bwd(g):
        return (np.ascontiguousarray(np.swapaxes(g, -1, -2)),)

    data = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))
    return _make("transpose_last_two", (x,), data, bwd)


def permute(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make("permute", (x,), np.ascontiguousarray(x.data.transpose(axes)), bwd)


def reshape(x, shape):
    shape = tuple(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _make("reshape", (x,), x.data.reshape(shape), bwd)


def split_channels(x, parts):
    """Split the channel (last) axis into ``parts`` equal contiguous segments."""
    d = x.shape[-1]
    if d % parts != 0:
        raise ShapeError(f"channel extent {d} not divisible into {parts} parts")
    seg = d // parts
    out = []
    for i in range(parts):
        lo = i * seg

        def bwd(g, lo=lo):
            full = np.zeros(x.shape, dtype=np.float64)
            full[..., lo : lo + seg] = g
            return (full,)

        piece = np.ascontiguousarray(x.data[..., lo : lo + seg])
        out.append(_make("split_channels", (x,), piece, bwd, part=i))
    return out


def concat_channels(xs):
    """Concatenate along the channel (last) axis."""
    xs = tuple(xs)
    widths = [t.shape[-1] for t in xs]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def bwd(g):
        return tuple(
            np.ascontiguousarray(g[..., offsets[i] : offsets[i + 1]])
            if t.requires_grad
            else None
            for i, t in enumerate(xs)
        )

    data = np.concatenate([t.data for t in xs], axis=-1)
    return _make("concat_channels", xs, data, bwd)


def embedding_lookup(ids, table):
    """Gather rows of ``table`` ([V, d]) by integer id."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"ids must be integers, got dtype {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)][0]
        raise IndexError(f"id {bad} out of vocabulary range [0, {vocab})")
    flat_ids = np.ascontiguousarray(ids.reshape(-1).astype(np.int64))

    def bwd(g):
        dtable = np.zeros(table.shape, dtype=np.float64)
        kernels.scatter_add_rows(
            dtable, flat_ids, np.ascontiguousarray(g.reshape(-1, table.shape[1]))
        )
        return (dtable,)

    return _make("embedding_lookup", (table,), table.data[ids], bwd)


def sum_all(x):
    """Sum of all elements, as a scalar tensor."""

    def bwd(g):
        return (np.full(x.shape, g.item()),)

    return _make("sum_all", (x,), np.asarray(x.data.sum()), bwd)


# ---------------------------------------------------------------------------
# Matrix product
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # shared right operand: collapse the batch into one large GEMM
        a2 = a.data.reshape(-1, a.shape[-1])

        def bwd(g):
            g2 = g.reshape(-1, b.shape[-1])
            ga = gb = None
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a2.T @ g2
            return (ga, gb)

        data = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        return _make("matmul", (a, b), data, bwd)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _reduce_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return (ga, gb)

    return _make("matmul", (a, b), np.matmul(a.data, b.data), bwd)


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------


def _broadcast_mask(mask, shape):
    mask = np.asarray(mask, dtype=bool)
    try:
        return np.broadcast_to(mask, shape)
    except ValueError:
        raise ShapeError(
            f"mask shape {mask.shape} does not broadcast to logits shape {shape}"
        ) from None


def softmax(logits, mask=None):
    """Row-wise softmax over the last axis, numerically stabilized.

    Masked-out entries get probability exactly 0; a fully masked row is an
    error (it would mean an empty attention context).
    """
    shape = logits.shape
    n = shape[-1]
    flat = logits.data.reshape(-1, n)
    if mask is not None:
        m = _broadcast_mask(mask, shape).reshape(-1, n)
        if not m.any(axis=1).all():
            raise ValueError("softmax: fully masked row (no allowed entries)")
        m = np.ascontiguousarray(m, dtype=np.uint8)
    else:
        m = None
    w_flat = kernels.masked_softmax(np.ascontiguousarray(flat), m)

    def bwd(g):
        dx = kernels.softmax_backward(
            w_flat, np.ascontiguousarray(g.reshape(-1, n))
        )
        return (dx.reshape(shape),)

    return _make("softmax", (logits,), w_flat.reshape(shape), bwd, masked=mask is not None)


def log_softmax(logits):
    """log(softmax(x)) over the last axis, computed stably."""
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bwd(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", (logits,), out, bwd)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

PADDING_MODES = ("symmetric", "causal")


def _pad_left(k, dilation, padding_mode):
    if padding_mode == "causal":
        return (k - 1) * dilation
    if padding_mode == "symmetric":
        return ((k - 1) // 2) * dilation
    raise ValueError(f"unknown padding_mode {padding_mode!r}")


def _conv_spans(k, n, dilation, pad_left):
    """Valid (tap j, output range, input offset) triples for length-n input."""
    spans = []
    for j in range(k):
        off = j * dilation - pad_left
        t0 = max(0, -off)
        t1 = min(n, n - off)
        if t0 < t1:
            spans.append((j, t0, t1, off))
    return spans


def conv1d(x, kernel, dilation=1, padding_mode="symmetric"):
    """Dense 1-d convolution, same-length output.

    x: [b, n, d_in], kernel: [k, d_in, d_out]. Symmetric padding zero-pads
    floor((k-1)/2)*dilation on the left and the rest on the right; causal
    padding puts all (k-1)*dilation zeros on the left, so output t sees
    only inputs <= t.
    """
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d needs x[b,n,d_in], kernel[k,d_in,d_out]; "
                         f"got {x.shape} and {kernel.shape}")
    if kernel.shape[1] != x.shape[2]:
        raise ShapeError(f"conv1d channel mismatch: x {x.shape} vs kernel {kernel.shape}")
    if dilation < 1 or kernel.shape[0] < 1:
        raise ValueError("conv1d needs k >= 1 and dilation >= 1")
    b, n, _ = x.shape
    k, _, d_out = kernel.shape
    pl = _pad_left(k, dilation, padding_mode)
    spans = _conv_spans(k, n, dilation, pl)

    y = np.zeros((b, n, d_out), dtype=np.float64)
    for j, t0, t1, off in spans:
        y[:, t0:t1] += x.data[:, t0 + off : t1 + off] @ kernel.data[j]

    def bwd(g):
        gx = gk = None
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=np.float64)
            for j, t0, t1, off in spans:
                gx[:, t0 + off : t1 + off] += g[:, t0:t1] @ kernel.data[j].T
        if kernel.requires_grad:
            gk = np.zeros(kernel.shape, dtype=np.float64)
            for j, t0, t1, off in spans:
                gk[j] = np.tensordot(
                    x.data[:, t0 + off : t1 + off], g[:, t0:t1], axes=([0, 1], [0, 1])
                )
        return (gx, gk)

    return _make(
        "conv1d", (x, kernel), y, bwd,
        kind="dense", dilation=dilation, padding_mode=padding_mode,
    )


def depthwise_conv1d(x, taps, dilation=1, padding_mode="symmetric"):
    """Per-channel 1-d convolution: channel c is filtered by taps[:, c]."""
    if x.ndim != 3 or taps.ndim != 2:
        raise ShapeError(f"depthwise_conv1d needs x[b,n,d], taps[k,d]; "
                         f"got {x.shape} and {taps.shape}")
    if taps.shape[1] != x.shape[2]:
        raise ShapeError(f"depthwise channel mismatch: x {x.shape} vs taps {taps.shape}")
    if dilation < 1 or taps.shape[0] < 1:
        raise ValueError("depthwise_conv1d needs k >= 1 and dilation >= 1")
    pl = _pad_left(taps.shape[0], dilation, padding_mode)
    y = kernels.dw_conv1d_forward(x.data, taps.data, dilation, pl)

    def bwd(g):
        gx, gt = kernels.dw_conv1d_backward(
            x.data, taps.data, np.ascontiguousarray(g), dilation, pl
        )
        return (gx if x.requires_grad else None, gt if taps.requires_grad else None)

    return _make(
        "conv1d", (x, taps), y, bwd,
        kind="depthwise", dilation=dilation, padding_mode=padding_mode,
    )


def depthwise_sep_conv(x, depth_kernel, point_kernel, dilation=1,
                       padding_mode="symmetric"):
    """Depthwise spatial filtering followed by a pointwise channel mix.

    Equivalent to a dense conv1d whose kernel has zero cross-channel spatial
    taps, followed by a width-1 channel mix with point_kernel [d, d_out].
    """
    if point_kernel.shape[0] != x.shape[-1]:
        raise ShapeError(
            f"pointwise mix expects {x.shape[-1]} input channels, "
            f"kernel is {point_kernel.shape}"
        )
    spatial = depthwise_conv1d(x, depth_kernel, dilation, padding_mode)
    return matmul(spatial, point_kernel)


# ---------------------------------------------------------------------------
# Layer normalization
# ---------------------------------------------------------------------------


def layer_norm(x, gain, bias, eps=1e-6):
    """Per-vector normalization over the last axis (population variance),
    then scale by gain and shift by bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},); "
            f"got {gain.shape} and {bias.shape}"
        )
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layer_norm_forward(flat, gain.data, bias.data, eps)

    def bwd(g):
        dx, dgain, dbias = kernels.layer_norm_backward(
            xhat, rstd, gain.data, np.ascontiguousarray(g.reshape(-1, d))
        )
        return (
            dx.reshape(x.shape) if x.requires_grad else None,
            dgain if gain.requires_grad else None,
            dbias if bias.requires_grad else None,
        )

    return _make("layer_norm", (x, gain, bias), y.reshape(x.shape), bwd)
