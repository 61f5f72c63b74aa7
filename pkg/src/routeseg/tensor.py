"""Tape-based reverse-mode autodiff over numpy arrays.

Tensors are thin immutable wrappers around float32/float64 ndarrays.
A Tensor is either a constant (no tape) or bound to a Tape node. Ops are
pure functions: they compute the forward value eagerly and, when any
input is tape-bound, append one node holding a backward closure. Nodes
are appended in execution order, so node ids are already topologically
sorted and ``backward`` is a single reverse sweep with gradient
accumulation at fan-out points.

Layout convention throughout the package: channel-last, row-major,
images as [N, H, W, C].
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Optional[Callable]):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of one forward pass.

    Single-writer: a tape must only be grown from the thread that owns
    it. The training loop builds a fresh tape per step and discards it
    after ``backward``.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _append(self, op: str, parents: tuple, backward: Optional[Callable]) -> int:
        self._nodes.append(_Node(op, parents, backward))
        return len(self._nodes) - 1

    def watch(self, t: "Tensor") -> "Tensor":
        """Register a leaf. Returns a new Tensor sharing the same buffer."""
        if t.tape is not None:
            raise ValueError("tensor is already bound to a tape")
        return Tensor(t.data, tape=self, node=self._append("leaf", (), None))


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional[Tape] = None, node: Optional[int] = None):
        arr = np.asarray(data)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        if self.tape is not None:
            raise ValueError("cannot cast a tape-bound tensor")
        return Tensor(self.data.astype(dtype))

    def __repr__(self):
        tag = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    # arithmetic sugar; the module-level functions carry the real logic
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(values, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype))


def _as_tensor(x, like: Tensor) -> Tensor:
    """Wrap python scalars as constants of the companion tensor's dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _merge_tape(*ts: Tensor) -> Optional[Tape]:
    tape = None
    for t in ts:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands bound to different tapes")
    return tape


def _check_dtype(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.dtype.name} vs {b.dtype.name}")


def _nonempty(t: Tensor, op: str):
    if t.size == 0:
        raise ValueError(f"{op}: zero-size input of shape {t.shape}")


def _make(out_data, tape: Optional[Tape], op: str, parents: Sequence[Tensor],
          backward: Optional[Callable]) -> Tensor:
    if tape is None:
        return Tensor(out_data)
    ids = tuple(p.node for p in parents)
    return Tensor(out_data, tape=tape, node=tape._append(op, ids, backward))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape the operand actually had."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Grads:
    """Gradient lookup for tape leaves. Unused leaves read as zeros."""

    def __init__(self, tape: Tape, table: dict):
        self._tape = tape
        self._table = table

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape or t.node is None:
            raise KeyError("tensor is not a leaf of this tape")
        g = self._table.get(t.node)
        if g is None:
            return np.zeros_like(t.data)
        return g


def backward(loss: Tensor) -> Grads:
    """Reverse sweep from a scalar loss.

    Visits each node at most once, in reverse creation order, which is a
    valid reverse-topological order because ops append nodes after their
    inputs exist.
    """
    if loss.tape is None or loss.node is None:
        raise ValueError("loss is not bound to a tape")
    if loss.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    nodes = loss.tape._nodes
    table: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=loss.dtype)}
    for nid in range(loss.node, -1, -1):
        g = table.get(nid)
        if g is None:
            continue
        node = nodes[nid]
        if node.backward is None:
            continue
        parent_grads = node.backward(g)
        for pid, pg in zip(node.parents, parent_grads):
            # pid None marks a constant operand; nothing downstream reads it
            if pid is None or pg is None:
                continue
            acc = table.get(pid)
            table[pid] = pg if acc is None else acc + pg
    return Grads(loss.tape, table)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_dtype(a, b, "add")
    tape = _merge_tape(a, b)
    out = a.data + b.data
    ash, bsh = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _make(out, tape, "add", (a, b), back)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_dtype(a, b, "sub")
    tape = _merge_tape(a, b)
    out = a.data - b.data
    ash, bsh = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _make(out, tape, "sub", (a, b), back)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_dtype(a, b, "mul")
    tape = _merge_tape(a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def back(g):
        return _unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)

    return _make(out, tape, "mul", (a, b), back)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_dtype(a, b, "div")
    tape = _merge_tape(a, b)
    out = a.data / b.data
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def back(g):
        ga = _unbroadcast(g / bd, ash)
        gb = _unbroadcast(-g * ad / (bd * bd), bsh)
        return ga, gb

    return _make(out, tape, "div", (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, a.tape, "neg", (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, a.tape, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), a.tape, "log", (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, a.tape, "sqrt", (a,), lambda g: (g / (2.0 * out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp. Pass-through gradient strictly inside [lo, hi], zero outside."""
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = ((ad > lo) & (ad < hi)).astype(ad.dtype)

    def back(g):
        return (g * inside,)

    return _make(out, a.tape, "clip", (a,), back)


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = (ad > 0).astype(ad.dtype)
    return _make(ad * mask, a.tape, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    # split by sign to avoid exp overflow
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    out[~pos] = ez / (1.0 + ez)

    def back(g):
        return (g * out * (1.0 - out),)

    return _make(out, a.tape, "sigmoid", (a,), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-form gelu: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * np.power(x, 3))
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
        return (g * d,)

    return _make(out, a.tape, "gelu", (a,), back)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    ash = a.shape
    out = a.data.reshape(shape)
    return _make(out, a.tape, "reshape", (a,), lambda g: (g.reshape(ash),))


def transpose(a: Tensor, perm) -> Tensor:
    perm = tuple(perm)
    inv = tuple(np.argsort(perm))
    out = np.transpose(a.data, perm)
    return _make(out, a.tape, "transpose", (a,), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    for p in parts[1:]:
        _check_dtype(parts[0], p, "concat")
    tape = _merge_tape(*parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tape, "concat", parts, back)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ash = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, ash).astype(g.dtype, copy=True),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, ash).astype(g.dtype, copy=True),)

    return _make(out, a.tape, "sum", (a,), back)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ash = a.shape
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for i in ax:
            count *= ash[i]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            gg = np.broadcast_to(g, ash)
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            gg = g if keepdims else np.expand_dims(g, ax)
            gg = np.broadcast_to(gg, ash)
        return ((gg / count).astype(g.dtype),)

    return _make(out, a.tape, "mean", (a,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading dims."""
    _check_dtype(a, b, "matmul")
    _nonempty(a, "matmul")
    _nonempty(b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: bad ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    tape = _merge_tape(a, b)
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ash), _unbroadcast(gb, bsh)

    return _make(out, tape, "matmul", (a, b), back)


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Token-wise affine on the channel axis: x @ w (+ b)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def softmax_lastdim(a: Tensor, scale: float = 1.0) -> Tensor:
    """softmax(scale * a) along the last axis, max-shifted for stability."""
    if scale <= 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    _nonempty(a, "softmax")
    z = a.data * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (scale * s * (g - inner),)

    return _make(s, a.tape, "softmax", (a,), back)


# ---------------------------------------------------------------------------
# structured ops


def gather_regions(src: Tensor, index: np.ndarray) -> Tensor:
    """Select whole regions by integer index.

    src   [N, R, T, C]
    index [N, R, k] of region ids in [0, R)
    out   [N, R, k, T, C]

    The index is data, not a differentiable input; the backward pass
    scatter-adds into the source positions.
    """
    if src.ndim != 4:
        raise ValueError(f"gather_regions: want [N,R,T,C], got {src.shape}")
    n, r, _, _ = src.shape
    if index.shape[0] != n or index.shape[1] != r or index.ndim != 3:
        raise ValueError(
            f"gather_regions: index {index.shape} does not match source {src.shape}")
    if index.min() < 0 or index.max() >= r:
        raise ValueError("gather_regions: region id out of range")
    rows = np.arange(n)[:, None, None]
    out = src.data[rows, index]
    sd = src.data

    def back(g):
        acc = np.zeros_like(sd)
        np.add.at(acc, (rows, index), g)
        return (acc,)

    return _make(out, src.tape, "gather_regions", (src,), back)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2d convolution, channel-last.

    x [N, H, W, Cin], w [kh, kw, Cin/groups, Cout], optional b [Cout].
    Output extent floor((H + 2*padding - kh)/stride) + 1. Channels are
    grouped contiguously, group-major on both Cin and Cout.
    """
    _nonempty(x, "conv2d")
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: want x[N,H,W,C] and w[kh,kw,c,o], got {x.shape}, {w.shape}")
    n, h, ww_, cin = x.shape
    kh, kw, cpg, cout = w.shape
    if cin != cpg * groups:
        raise ValueError(f"conv2d: {cin} input channels, weight expects {cpg}*{groups}")
    if cout % groups:
        raise ValueError(f"conv2d: {cout} output channels not divisible by {groups} groups")
    if h + 2 * padding < kh or ww_ + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h}x{ww_}+{padding}")
    _check_dtype(x, w, "conv2d")
    tape = _merge_tape(x, w, b) if b is not None else _merge_tape(x, w)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [N, Ho, Wo, Cin, kh, kw]
    ho, wo = win.shape[1], win.shape[2]
    opg = cout // groups

    if groups == 1:
        out = np.einsum("nhwcij,ijco->nhwo", win, w.data, optimize=True)
    else:
        wing = win.reshape(n, ho, wo, groups, cpg, kh, kw)
        wg = w.data.reshape(kh, kw, cpg, groups, opg)
        out = np.einsum("nhwgcij,ijcgo->nhwgo", wing, wg, optimize=True)
        out = out.reshape(n, ho, wo, cout)
    if b is not None:
        _check_dtype(x, b, "conv2d")
        out = out + b.data

    xd, wd = x.data, w.data
    pad_h, pad_w = h + 2 * padding, ww_ + 2 * padding

    def back(g):
        if groups == 1:
            gw = np.einsum("nhwcij,nhwo->ijco", win, g, optimize=True)
            dpatch = np.einsum("nhwo,ijco->nhwcij", g, wd, optimize=True)
        else:
            gg = g.reshape(n, ho, wo, groups, opg)
            wing2 = win.reshape(n, ho, wo, groups, cpg, kh, kw)
            wg2 = wd.reshape(kh, kw, cpg, groups, opg)
            gw = np.einsum("nhwgcij,nhwgo->ijcgo", wing2, gg, optimize=True)
            gw = gw.reshape(kh, kw, cpg, cout)
            dpatch = np.einsum("nhwgo,ijcgo->nhwgcij", gg, wg2, optimize=True)
            dpatch = dpatch.reshape(n, ho, wo, cin, kh, kw)
        dxp = np.zeros((n, pad_h, pad_w, cin), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + ho * stride:stride, j:j + wo * stride:stride, :] += \
                    dpatch[:, :, :, :, i, j]
        dx = dxp[:, padding:pad_h - padding, padding:pad_w - padding, :] if padding else dxp
        gb = g.sum(axis=(0, 1, 2)) if b is not None else None
        return (dx, gw, gb) if b is not None else (dx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, tape, "conv2d", parents, back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last (channel) axis, then affine."""
    _nonempty(x, "layer_norm")
    _check_dtype(x, gamma, "layer_norm")
    tape = _merge_tape(x, gamma, beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def back(g):
        sum_axes = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=sum_axes)
        ggamma = (g * xhat).sum(axis=sum_axes)
        gx_hat = g * gd
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gx_hat - m1 - xhat * m2)
        return gx.astype(g.dtype), ggamma, gbeta

    return _make(out, tape, "layer_norm", (x, gamma, beta), back)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over [N, H, W] of a channel-last map.

    ``running_mean``/``running_var`` are plain buffers, updated in place
    when training (new = (1 - momentum) * old + momentum * batch stat).
    """
    _nonempty(x, "batch_norm")
    if x.ndim != 4:
        raise ValueError(f"batch_norm: want [N,H,W,C], got {x.shape}")
    tape = _merge_tape(x, gamma, beta)
    xd = x.data
    axes = (0, 1, 2)
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = xd.shape[0] * xd.shape[1] * xd.shape[2]
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        # unbiased variance for the running buffer, biased for normalization
        running_var *= (1.0 - momentum)
        running_var += momentum * (var * m / max(m - 1, 1))
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    if training:
        def back(g):
            gbeta = g.sum(axis=axes)
            ggamma = (g * xhat).sum(axis=axes)
            gx_hat = g * gd
            m1 = gx_hat.mean(axis=axes, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=axes, keepdims=True)
            gx = inv * (gx_hat - m1 - xhat * m2)
            return gx.astype(g.dtype), ggamma, gbeta
    else:
        def back(g):
            gbeta = g.sum(axis=axes)
            ggamma = (g * xhat).sum(axis=axes)
            gx = (g * gd * inv).astype(g.dtype)
            return gx, ggamma, gbeta

    return _make(out, tape, "batch_norm", (x, gamma, beta), back)
