"""Minimal reverse-mode differentiable-array core.

Tensors are float64 numpy arrays with row-major storage. A Tape records
operations define-by-run style: each op appends one node whose parents all
precede it, so a single reverse sweep over the node list visits every node
exactly once. There is no broadcasting beyond the explicit bias-add; every
op checks shapes so gradient code stays auditable.

Custom primitives (fused LSTM scans, CTC) register themselves through
:func:`record`, supplying a vector-Jacobian closure.
"""

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


# When enabled, every op asserts its output is finite. Off by default:
# the checks roughly double the cost of small ops.
_debug_checks = False


def set_debug_checks(enabled):
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """Shape-carrying float64 array, optionally attached to the active tape.

    ``node`` and ``tape`` identify the tensor's position on the tape it last
    participated in; they are reassigned lazily whenever the tensor is used
    under a different tape (tapes are rebuilt each forward pass).
    """

    __slots__ = ("data", "node", "tape", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # note: would promote 0-d to 1-d
        self.data = arr
        self.node = None
        self.tape = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def copy(self, requires_grad=None):
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("parents", "vjp", "leaf")

    def __init__(self, parents, vjp, leaf=None):
        self.parents = parents
        self.vjp = vjp
        self.leaf = leaf  # leaf Tensor, for gradient extraction


_active_tape = None


class Tape:
    """Ordered record of one forward pass, used as a context manager.

    Single-threaded: at most one tape is active at a time, and a fresh tape
    is built for every forward pass.
    """

    def __init__(self):
        self.nodes = []
        self.gradients = {}

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def _leaf_id(self, tensor):
        if tensor.tape is self and tensor.node is not None:
            return tensor.node
        nid = len(self.nodes)
        self.nodes.append(_Node((), None, leaf=tensor))
        tensor.tape = self
        tensor.node = nid
        return nid

    def _op_id(self, parent_ids, vjp):
        nid = len(self.nodes)
        self.nodes.append(_Node(tuple(parent_ids), vjp))
        return nid


def active_tape():
    return _active_tape


def record(data, inputs, vjp):
    """Create the result tensor of a primitive op.

    ``vjp(grad_out)`` must return one gradient array per input (None allowed
    for inputs whose gradient is not needed). The op is recorded only when a
    tape is active and some input participates in differentiation; otherwise
    this is a plain value computation.
    """
    out = Tensor(data)
    if _debug_checks and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values produced by forward op")
    tape = _active_tape
    if tape is None or not any(x.requires_grad for x in inputs):
        return out
    parent_ids = [tape._leaf_id(x) for x in inputs]
    out.node = tape._op_id(parent_ids, vjp)
    out.tape = tape
    out.requires_grad = True
    return out


def backward(loss, tape=None):
    """Reverse sweep from a scalar loss.

    Returns a dict mapping each requires_grad leaf Tensor to its gradient
    Tensor. Also fills ``tape.gradients`` (node id -> gradient Tensor) for
    those leaves.
    """
    if tape is None:
        tape = loss.tape
    if tape is None or loss.tape is not tape or loss.node is None:
        raise ValueError("loss tensor is not on the given tape")
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads = [None] * len(tape.nodes)
    grads[loss.node] = np.array(1.0)
    result = {}
    tape.gradients = {}
    for nid in range(loss.node, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.vjp is None:
            leaf = node.leaf
            if leaf is not None and leaf.requires_grad:
                gt = Tensor(g)
                result[leaf] = gt
                tape.gradients[nid] = gt
            continue
        parent_grads = node.vjp(g)
        for pid, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if grads[pid] is None:
                grads[pid] = np.array(pg, dtype=np.float64, copy=True)
            else:
                grads[pid] = grads[pid] + pg
        grads[nid] = None  # free as we go
    return result


def constant(data):
    return Tensor(data)


def zeros(shape):
    return Tensor(np.zeros(shape))


def ones(shape):
    return Tensor(np.ones(shape))


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def _require(cond, msg):
    if not cond:
        raise ShapeError(msg)


def add(a, b):
    _require(a.shape == b.shape, f"add: shapes {a.shape} and {b.shape} differ")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _require(a.shape == b.shape, f"sub: shapes {a.shape} and {b.shape} differ")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _require(a.shape == b.shape, f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x, s):
    s = float(s)
    return record(x.data * s, (x,), lambda g: (g * s,))


def add_bias(x, b):
    """Row-wise bias add, the one permitted broadcast: [T,D] + [D]."""
    _require(x.data.ndim == 2 and b.data.ndim == 1 and x.shape[1] == b.shape[0],
             f"add_bias: shapes {x.shape} and {b.shape} incompatible")
    return record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def matmul(a, b):
    _require(a.data.ndim == 2 and b.data.ndim == 2,
             f"matmul: operands must be 2-D, got {a.shape} and {b.shape}")
    _require(a.shape[1] == b.shape[0],
             f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def relu(x):
    mask = x.data > 0.0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))
    return record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x):
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sum_all(x):
    shape = x.data.shape
    return record(np.asarray(x.data.sum()), (x,),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    old = x.data.shape
    _require(int(np.prod(shape, dtype=np.int64)) == x.data.size,
             f"reshape: cannot view {old} as {shape}")
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def softmax(x):
    """Numerically stable softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return record(y, (x,), vjp)


def log_softmax(x):
    """Numerically stable log-softmax over the last axis (max-subtraction)."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return record(y, (x,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row normalization to zero mean / unit variance, then affine."""
    _require(x.data.ndim == 2, f"layer_norm: input must be 2-D, got {x.shape}")
    d = x.shape[1]
    _require(gain.shape == (d,) and bias.shape == (d,),
             f"layer_norm: gain/bias must be [{d}], got {gain.shape}/{bias.shape}")
    _require(eps > 0.0, "layer_norm: eps must be positive")
    mean = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    y = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return record(y, (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# structural ops


def concat_time(streams):
    """Stack [T_i, D] streams along the time axis into [sum(T_i), D]."""
    streams = list(streams)
    _require(len(streams) >= 1, "concat_time: need at least one stream")
    d = streams[0].shape[1] if streams[0].data.ndim == 2 else None
    for s in streams:
        _require(s.data.ndim == 2 and s.shape[1] == d,
                 f"concat_time: feature dims differ ({[t.shape for t in streams]})")
    lengths = [s.shape[0] for s in streams]
    out = np.concatenate([s.data for s in streams], axis=0)

    def vjp(g):
        pieces = []
        start = 0
        for n in lengths:
            pieces.append(g[start:start + n])
            start += n
        return tuple(pieces)

    return record(out, tuple(streams), vjp)


def concat_cols(streams):
    """Stack [T, D_i] tensors along the feature axis into [T, sum(D_i)]."""
    streams = list(streams)
    _require(len(streams) >= 1, "concat_cols: need at least one tensor")
    t = streams[0].shape[0]
    for s in streams:
        _require(s.data.ndim == 2 and s.shape[0] == t,
                 f"concat_cols: row counts differ ({[x.shape for x in streams]})")
    widths = [s.shape[1] for s in streams]
    out = np.concatenate([s.data for s in streams], axis=1)

    def vjp(g):
        pieces = []
        start = 0
        for w in widths:
            pieces.append(g[:, start:start + w])
            start += w
        return tuple(pieces)

    return record(out, tuple(streams), vjp)


def slice_rows(x, start, stop):
    _require(x.data.ndim == 2, f"slice_rows: input must be 2-D, got {x.shape}")
    _require(0 <= start < stop <= x.shape[0],
             f"slice_rows: range [{start}:{stop}] invalid for {x.shape}")
    shape = x.data.shape

    def vjp(g):
        dx = np.zeros(shape)
        dx[start:stop] = g
        return (dx,)

    return record(x.data[start:stop].copy(), (x,), vjp)


def slice_cols(x, start, stop):
    _require(x.data.ndim in (1, 2), f"slice_cols: input must be 1-D or 2-D, got {x.shape}")
    axis = x.data.ndim - 1
    n = x.shape[axis]
    _require(0 <= start < stop <= n,
             f"slice_cols: range [{start}:{stop}] invalid for {x.shape}")
    shape = x.data.shape

    def vjp(g):
        dx = np.zeros(shape)
        if axis == 0:
            dx[start:stop] = g
        else:
            dx[:, start:stop] = g
        return (dx,)

    data = x.data[start:stop] if axis == 0 else x.data[:, start:stop]
    return record(data.copy(), (x,), vjp)


def gather_rows(x, indices):
    """Select rows of a [N, D] tensor; backward scatter-adds into sources."""
    _require(x.data.ndim == 2, f"gather_rows: input must be 2-D, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    _require(idx.ndim == 1, "gather_rows: indices must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape}")
    shape = x.data.shape

    def vjp(g):
        dx = np.zeros(shape)
        np.add.at(dx, idx, g)
        return (dx,)

    return record(x.data[idx].copy(), (x,), vjp)


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(f, x, eps=1e-5):
    """Worst relative error between backward and central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic. The
    relative-error denominator is floored at 1e-8 so near-zero gradients do
    not blow up the ratio.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
        grads = backward(out, tape)
    analytic = grads[probe].data if probe in grads else np.zeros_like(probe.data)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += eps
        f_plus = f(Tensor(bumped.reshape(x.data.shape))).item()
        bumped[i] -= 2.0 * eps
        f_minus = f(Tensor(bumped.reshape(x.data.shape))).item()
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
