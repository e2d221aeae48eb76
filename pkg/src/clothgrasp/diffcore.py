"""Minimal reverse-mode autodiff over float64 numpy arrays.

Tensors form an implicit computation tape: each non-leaf node keeps its
parents, a backward closure (local derivative rule) and a forward closure
(for bit-exact replay).  Everything runs in double precision; a tape is
confined to one thread during forward/backward.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

# Test hook: op names whose backward rule is currently sign-flipped.
_GRAD_SIGN_FLIPS: set[str] = set()


@contextlib.contextmanager
def flip_gradient_sign(op_name: str):
    """Test hook: negate one operator's backward rule inside the context.

    Used by the gradient-check CLI to prove the finite-difference suite
    actually detects a wrong derivative.
    """
    _GRAD_SIGN_FLIPS.add(op_name)
    try:
        yield
    finally:
        _GRAD_SIGN_FLIPS.discard(op_name)


def _sign(op_name):
    return -1.0 if op_name in _GRAD_SIGN_FLIPS else 1.0


class Tensor:
    """A float64 array node on the computation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_forward", "name")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._forward = None
        self.name = name

    @staticmethod
    def param(data, name="") -> "Tensor":
        return Tensor(data, requires_grad=True, name=name)

    @staticmethod
    def const(data) -> "Tensor":
        return Tensor(data, requires_grad=False)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'}, name={self.name!r})"


def _node(data, parents, backward, forward, name=""):
    t = Tensor(data)
    t.requires_grad = any(p.requires_grad for p in parents)
    t._parents = tuple(parents)
    t._backward = backward
    t._forward = forward
    t.name = name
    return t


def _acc(slot, contrib):
    return contrib if slot is None else slot + contrib


def _topo(root: Tensor) -> list[Tensor]:
    # Iterative post-order; graphs routinely exceed the recursion limit.
    order, visited, stack = [], set(), [(root, False)]
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
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every reachable grad-leaf."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def replay(root: Tensor) -> float:
    """Re-execute the tape below root; return max |recomputed - recorded|.

    A correct tape replays bit-identically, so the return value is 0.0.
    """
    order, visited, stack = [], set(), [(root, False)]
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
            stack.append((p, False))
    worst = 0.0
    for node in order:
        if node._forward is not None:
            fresh = node._forward()
            diff = np.max(np.abs(fresh - node.data)) if fresh.size else 0.0
            worst = max(worst, float(diff))
    return worst


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and broadcasting arithmetic
# ---------------------------------------------------------------------------

def _broadcast_kind(a_shape, b_shape):
    # Allowed patterns: identical; (C,...)+(C,); (C,H,W)+(1,H,W).
    if a_shape == b_shape:
        return "same"
    if len(b_shape) == 1 and len(a_shape) > 1 and b_shape[0] == a_shape[0]:
        return "axis0_vec"
    if len(b_shape) == len(a_shape) and b_shape[0] == 1 and b_shape[1:] == a_shape[1:]:
        return "axis0_one"
    raise ValueError(f"unsupported broadcast {a_shape} vs {b_shape}")


def _expand(b_data, kind, a_ndim):
    if kind == "same" or kind == "axis0_one":
        return b_data if kind == "same" else b_data
    # axis0_vec: append singleton axes
    return b_data.reshape(b_data.shape + (1,) * (a_ndim - 1))


def _reduce_to(g, kind, b_shape):
    if kind == "same":
        return g
    if kind == "axis0_vec":
        return g.reshape(b_shape[0], -1).sum(axis=1)
    return g.sum(axis=0, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    f = lambda: a.data + _expand(b.data, kind, a.ndim)

    def bw(g):
        g = g * _sign("add")
        if a.requires_grad:
            a.grad = _acc(a.grad, g)
        if b.requires_grad:
            b.grad = _acc(b.grad, _reduce_to(g, kind, b.shape))

    return _node(f(), (a, b), bw, f, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    f = lambda: a.data - _expand(b.data, kind, a.ndim)

    def bw(g):
        g = g * _sign("sub")
        if a.requires_grad:
            a.grad = _acc(a.grad, g)
        if b.requires_grad:
            b.grad = _acc(b.grad, -_reduce_to(g, kind, b.shape))

    return _node(f(), (a, b), bw, f, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    f = lambda: a.data * _expand(b.data, kind, a.ndim)

    def bw(g):
        g = g * _sign("mul")
        if a.requires_grad:
            a.grad = _acc(a.grad, g * _expand(b.data, kind, a.ndim))
        if b.requires_grad:
            b.grad = _acc(b.grad, _reduce_to(g * a.data, kind, b.shape))

    return _node(f(), (a, b), bw, f, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    f = lambda: x.data * c

    def bw(g):
        if x.requires_grad:
            x.grad = _acc(x.grad, _sign("scale") * g * c)

    return _node(f(), (x,), bw, f, "scale")


def div_const(x: Tensor, c: float) -> Tensor:
    # Division (not multiply-by-reciprocal) so that x/x is exactly 1.
    c = float(c)
    f = lambda: x.data / c

    def bw(g):
        if x.requires_grad:
            x.grad = _acc(x.grad, _sign("div_const") * g / c)

    return _node(f(), (x,), bw, f, "div_const")


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def add_const(x: Tensor, c: float) -> Tensor:
    c = float(c)
    f = lambda: x.data + c

    def bw(g):
        if x.requires_grad:
            x.grad = _acc(x.grad, _sign("add_const") * g)

    return _node(f(), (x,), bw, f, "add_const")


def _unary(name, fwd, deriv):
    def op(x: Tensor) -> Tensor:
        f = lambda: fwd(x.data)
        out_data = f()

        def bw(g):
            if x.requires_grad:
                x.grad = _acc(x.grad, _sign(name) * g * deriv(x.data, out_data))

        return _node(out_data, (x,), bw, f, name)

    op.__name__ = name
    return op


relu = _unary("relu", lambda d: np.maximum(d, 0.0), lambda d, o: (d > 0).astype(np.float64))
sigmoid = _unary("sigmoid", lambda d: 1.0 / (1.0 + np.exp(-d)), lambda d, o: o * (1.0 - o))
tanh = _unary("tanh", np.tanh, lambda d, o: 1.0 - o * o)
exp = _unary("exp", np.exp, lambda d, o: o)
sin = _unary("sin", np.sin, lambda d, o: np.cos(d))
cos = _unary("cos", np.cos, lambda d, o: -np.sin(d))
reciprocal = _unary("reciprocal", lambda d: 1.0 / d, lambda d, o: -o * o)

# log2(relu(x)+1): total, nonnegative, zero on the nonpositive half-line.
log2shift = _unary(
    "log2shift",
    lambda d: np.log2(np.maximum(d, 0.0) + 1.0),
    lambda d, o: np.where(d > 0, 1.0 / ((d + 1.0) * math.log(2.0)), 0.0),
)


def clamp01(x: Tensor) -> Tensor:
    f = lambda: np.clip(x.data, 0.0, 1.0)

    def bw(g):
        if x.requires_grad:
            inside = (x.data > 0.0) & (x.data < 1.0)
            x.grad = _acc(x.grad, _sign("clamp01") * g * inside)

    return _node(f(), (x,), bw, f, "clamp01")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    f = lambda: x.data.reshape(shape)

    def bw(g):
        if x.requires_grad:
            x.grad = _acc(x.grad, _sign("reshape") * g.reshape(x.shape))

    return _node(f(), (x,), bw, f, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    f = lambda: np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        g = g * _sign("concat")
        ofs = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(ofs, ofs + n)
                t.grad = _acc(t.grad, g[tuple(idx)])
            ofs += n

    return _node(f(), tensors, bw, f, "concat")


def stack(scalars: Sequence[Tensor]) -> Tensor:
    """Pack size-1 tensors into a 1-D vector."""
    scalars = list(scalars)
    for s in scalars:
        if s.size != 1:
            raise ValueError("stack expects size-1 tensors")
    f = lambda: np.array([float(s.data) for s in scalars])

    def bw(g):
        g = g * _sign("stack")
        for i, s in enumerate(scalars):
            if s.requires_grad:
                s.grad = _acc(s.grad, np.full_like(s.data, g[i]))

    return _node(f(), scalars, bw, f, "stack")


def element(x: Tensor, i: int) -> Tensor:
    """Extract element i of a 1-D tensor as a scalar node."""
    f = lambda: x.data[i].copy().reshape(())

    def bw(g):
        if x.requires_grad:
            contrib = np.zeros_like(x.data)
            contrib[i] = g * _sign("element")
            x.grad = _acc(x.grad, contrib)

    return _node(f(), (x,), bw, f, "element")


def channel_slice(x: Tensor, c: int) -> Tensor:
    """Select channel c of a C×H×W map as an H×W tensor."""
    f = lambda: x.data[c].copy()

    def bw(g):
        if x.requires_grad:
            contrib = np.zeros_like(x.data)
            contrib[c] = g * _sign("channel_slice")
            x.grad = _acc(x.grad, contrib)

    return _node(f(), (x,), bw, f, "channel_slice")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def channel_sum(x: Tensor) -> Tensor:
    """C×H×W -> 1×H×W sum across channels at each location."""
    if x.ndim != 3:
        raise ValueError(f"channel_sum expects C×H×W, got {x.shape}")
    f = lambda: np.add.reduce(x.data, axis=0, keepdims=True)

    def bw(g):
        if x.requires_grad:
            x.grad = _acc(x.grad, _sign("channel_sum") * np.broadcast_to(g, x.shape).copy())

    return _node(f(), (x,), bw, f, "channel_sum")


def channel_mean(x: Tensor) -> Tensor:
    """C×H×W -> 1×H×W mean across channels at each location."""
    if x.ndim != 3:
        raise ValueError(f"channel_mean expects C×H×W, got {x.shape}")
    c = x.shape[0]
    f = lambda: np.add.reduce(x.data, axis=0, keepdims=True) / c

    def bw(g):
        if x.requires_grad:
            x.grad = _acc(x.grad, _sign("channel_mean") * np.broadcast_to(g / c, x.shape).copy())

    return _node(f(), (x,), bw, f, "channel_mean")


def gap(x: Tensor) -> Tensor:
    """Global average pooling: C×H×W -> per-channel spatial mean (C,)."""
    if x.ndim != 3:
        raise ValueError(f"gap expects C×H×W, got {x.shape}")
    n = x.shape[1] * x.shape[2]
    f = lambda: x.data.reshape(x.shape[0], -1).mean(axis=1)

    def bw(g):
        if x.requires_grad:
            contrib = np.broadcast_to((g / n)[:, None, None], x.shape).copy()
            x.grad = _acc(x.grad, _sign("gap") * contrib)

    return _node(f(), (x,), bw, f, "gap")


def sum_all(x: Tensor) -> Tensor:
    f = lambda: np.asarray(x.data.sum())

    def bw(g):
        if x.requires_grad:
            x.grad = _acc(x.grad, _sign("sum_all") * np.full(x.shape, float(g)))

    return _node(f(), (x,), bw, f, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = max(x.size, 1)
    f = lambda: np.asarray(x.data.mean())

    def bw(g):
        if x.requires_grad:
            x.grad = _acc(x.grad, _sign("mean_all") * np.full(x.shape, float(g) / n))

    return _node(f(), (x,), bw, f, "mean_all")


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def avgpool2(x: Tensor) -> Tensor:
    """2x2 average pooling; spatial extents must be even."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2 needs even extents, got {h}x{w}")
    f = lambda: x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def bw(g):
        if x.requires_grad:
            up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
            x.grad = _acc(x.grad, _sign("avgpool2") * up)

    return _node(f(), (x,), bw, f, "avgpool2")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    c, h, w = x.shape
    f = lambda: np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bw(g):
        if x.requires_grad:
            contrib = g.reshape(c, h, factor, w, factor).sum(axis=(2, 4))
            x.grad = _acc(x.grad, _sign("upsample_nearest") * contrib)

    return _node(f(), (x,), bw, f, "upsample_nearest")


_BILINEAR_MATS: dict[tuple[int, int], Array] = {}


def _bilinear_matrix(n, factor):
    key = (n, factor)
    m = _BILINEAR_MATS.get(key)
    if m is None:
        m = np.zeros((n * factor, n))
        for a in range(n * factor):
            s = (a + 0.5) / factor - 0.5
            s = min(max(s, 0.0), n - 1.0)
            i0 = int(math.floor(s))
            i1 = min(i0 + 1, n - 1)
            w = s - i0
            m[a, i0] += 1.0 - w
            m[a, i1] += w
        _BILINEAR_MATS[key] = m
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    c, h, w = x.shape
    mh = _bilinear_matrix(h, factor)
    mw = _bilinear_matrix(w, factor)

    def f():
        t = np.tensordot(x.data, mw, axes=([2], [1]))          # (C,H,Wf)
        return np.tensordot(mh, t, axes=([1], [1])).transpose(1, 0, 2)

    def bw(g):
        if x.requires_grad:
            t = np.tensordot(g, mw, axes=([2], [0]))           # (C,Hf,W)
            contrib = np.tensordot(mh, t, axes=([0], [1])).transpose(1, 0, 2)
            x.grad = _acc(x.grad, _sign("upsample_bilinear") * contrib)

    return _node(f(), (x,), bw, f, "upsample_bilinear")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv2d_forward(x, w):
    co, ci, k, _ = w.shape
    h, wid = x.shape[1], x.shape[2]
    pt = (k - 1) // 2
    xp = np.zeros((ci, h + k - 1, wid + k - 1))
    xp[:, pt:pt + h, pt:pt + wid] = x
    out = np.zeros((co, h, wid))
    # Accumulation order (di, dj, c) is fixed: the test oracle replays the
    # same order with scalar loops, so outputs agree bit for bit.
    for di in range(k):
        for dj in range(k):
            for c in range(ci):
                out += w[:, c, di, dj, None, None] * xp[c, di:di + h, dj:dj + wid]
    return out


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Same-padded 2-D convolution: C_in×H×W with C_out×C_in×k×k -> C_out×H×W.

    Zero padding; for even k the extra pad row/column goes on the
    bottom/right.  k must be in 1..6.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"conv2d expects C×H×W input and O×C×k×k kernel, got {x.shape} and {w.shape}")
    co, ci, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"conv2d kernel must be square, got {kh}x{kw}")
    if not 1 <= kh <= 6:
        raise ValueError(f"conv2d kernel size must be in 1..6, got {kh}")
    if ci != x.shape[0]:
        raise ValueError(f"kernel expects {ci} input channels, input has {x.shape[0]}")
    k = kh
    h, wid = x.shape[1], x.shape[2]
    pt = (k - 1) // 2
    f = lambda: _conv2d_forward(x.data, w.data)

    def bw(g):
        g = g * _sign("conv2d")
        xp = np.zeros((ci, h + k - 1, wid + k - 1))
        xp[:, pt:pt + h, pt:pt + wid] = x.data
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            for di in range(k):
                for dj in range(k):
                    dw[:, :, di, dj] = np.tensordot(g, xp[:, di:di + h, dj:dj + wid], axes=([1, 2], [1, 2]))
            w.grad = _acc(w.grad, dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    dxp[:, di:di + h, dj:dj + wid] += np.tensordot(w.data[:, :, di, dj], g, axes=(0, 0))
            x.grad = _acc(x.grad, dxp[:, pt:pt + h, pt:pt + wid])

    return _node(f(), (x, w), bw, f, "conv2d")


def _embed_kernels(kernels):
    # Each k×k kernel sits inside a 6×6 frame so one windowed contraction
    # evaluates all six same-padded convolutions at once.
    bank = np.zeros((6, 6, 6))
    for i, arr in enumerate(kernels):
        k = i + 1
        off = 2 - (k - 1) // 2
        bank[i, off:off + k, off:off + k] = arr
    return bank


def _scale_bank_forward(x, kernels):
    h, w = x.shape
    xp = np.zeros((h + 5, w + 5))
    xp[2:2 + h, 2:2 + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (6, 6))
    bank = _embed_kernels(kernels)
    out = np.tensordot(win, bank, axes=([2, 3], [1, 2]))       # (H,W,6)
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def scale_bank(x: Tensor, kernels: Sequence[Tensor]) -> Tensor:
    """Apply six same-padded single-channel convolutions (k = 1..6) at once.

    x is H×W, kernels[i] is (i+1)×(i+1); result is 6×H×W with slice k-1
    equal to conv2d of x with the size-k kernel.
    """
    kernels = list(kernels)
    if len(kernels) != 6:
        raise ValueError(f"scale_bank expects 6 kernels, got {len(kernels)}")
    for i, t in enumerate(kernels):
        if t.shape != (i + 1, i + 1):
            raise ValueError(f"kernel {i} must be {i+1}x{i+1}, got {t.shape}")
    h, w = x.shape
    f = lambda: _scale_bank_forward(x.data, [t.data for t in kernels])

    def bw(g):
        g = g * _sign("scale_bank")
        xp = np.zeros((h + 5, w + 5))
        xp[2:2 + h, 2:2 + w] = x.data
        if any(t.requires_grad for t in kernels):
            win = np.lib.stride_tricks.sliding_window_view(xp, (6, 6))
            dbank = np.tensordot(g, win, axes=([1, 2], [0, 1]))      # (6,6,6)
            for i, t in enumerate(kernels):
                if t.requires_grad:
                    k = i + 1
                    off = 2 - (k - 1) // 2
                    t.grad = _acc(t.grad, dbank[i, off:off + k, off:off + k])
        if x.requires_grad:
            bank = _embed_kernels([t.data for t in kernels])
            gb = np.tensordot(bank, g, axes=(0, 0))                  # (6,6,H,W)
            dxp = np.zeros_like(xp)
            for a in range(6):
                for b in range(6):
                    dxp[a:a + h, b:b + w] += gb[a, b]
            x.grad = _acc(x.grad, dxp[2:2 + h, 2:2 + w])

    return _node(f(), tuple([x] + kernels), bw, f, "scale_bank")


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map w @ x (+ b).  x may be (N,) or (N,M); w is (O,N)."""
    if w.ndim != 2:
        raise ValueError(f"dense weight must be 2-D, got {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ValueError(f"dense weight expects {w.shape[1]} inputs, got {x.shape[0]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"dense bias must be ({w.shape[0]},), got {b.shape}")

    parents = (x, w) if b is None else (x, w, b)

    def f():
        y = w.data @ x.data
        if b is not None:
            y = y + (b.data if x.data.ndim == 1 else b.data[:, None])
        return y

    def bw(g):
        g = g * _sign("dense")
        if x.requires_grad:
            x.grad = _acc(x.grad, w.data.T @ g)
        if w.requires_grad:
            w.grad = _acc(w.grad, np.outer(g, x.data) if g.ndim == 1 else g @ x.data.T)
        if b is not None and b.requires_grad:
            b.grad = _acc(b.grad, g if g.ndim == 1 else g.sum(axis=1))

    return _node(f(), parents, bw, f, "dense")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: Array, ignore_index: int | None = None) -> Tensor:
    """Mean per-pixel cross-entropy of K×H×W logits against H×W int labels."""
    k = logits.shape[0]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[1:]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    checked = labels[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}, got range [{checked.min()}, {checked.max()}]")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid pixels for cross-entropy")
    safe = np.where(valid, labels, 0)

    def f():
        z = logits.data - logits.data.max(axis=0, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
        picked = np.take_along_axis(logp, safe[None], axis=0)[0]
        return np.asarray(-(picked * valid).sum() / n_valid)

    def bw(g):
        g = float(g) * _sign("softmax_cross_entropy")
        if logits.requires_grad:
            z = logits.data - logits.data.max(axis=0, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=0, keepdims=True)
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, safe[None], 1.0, axis=0)
            d = (p - onehot) * valid[None] * (g / n_valid)
            logits.grad = _acc(logits.grad, d)

    return _node(f(), (logits,), bw, f, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# bilinear warp (differentiable in both the image and the 2x3 matrix)
# ---------------------------------------------------------------------------

def _warp_terms(img, mat):
    c, h, w = img.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    sx = mat[0, 0] * xs + mat[0, 1] * ys + mat[0, 2]
    sy = mat[1, 0] * xs + mat[1, 1] * ys + mat[1, 2]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    wx = sx - x0
    wy = sy - y0

    def corner(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1).astype(np.intp)
        xc = np.clip(xi, 0, w - 1).astype(np.intp)
        return img[:, yc, xc] * inside, inside, yc, xc

    v00 = corner(y0, x0)
    v01 = corner(y0, x0 + 1)
    v10 = corner(y0 + 1, x0)
    v11 = corner(y0 + 1, x0 + 1)
    return xs, ys, wx, wy, v00, v01, v10, v11


def _warp_forward(img, mat):
    _, _, wx, wy, v00, v01, v10, v11 = _warp_terms(img, mat)
    return ((1 - wy) * ((1 - wx) * v00[0] + wx * v01[0])
            + wy * ((1 - wx) * v10[0] + wx * v11[0]))


def warp_array(img: Array, mat: Array) -> Array:
    """Plain-numpy twin of warp_bilinear's forward pass (bit-identical)."""
    return _warp_forward(np.asarray(img, dtype=np.float64), np.asarray(mat, dtype=np.float64))


def warp_bilinear(img: Tensor, mat: Tensor) -> Tensor:
    """Inverse-warp a C×H×W image: out(p) = img(mat @ [px, py, 1]), bilinear.

    Out-of-frame samples read as zero.  Differentiable w.r.t. both the
    image values and the six matrix entries.
    """
    if mat.shape != (2, 3):
        raise ValueError(f"warp matrix must be 2x3, got {mat.shape}")
    c, h, w = img.shape
    f = lambda: _warp_forward(img.data, mat.data)

    def bw(g):
        g = g * _sign("warp_bilinear")
        xs, ys, wx, wy, v00, v01, v10, v11 = _warp_terms(img.data, mat.data)
        w00 = (1 - wy) * (1 - wx)
        w01 = (1 - wy) * wx
        w10 = wy * (1 - wx)
        w11 = wy * wx
        if img.requires_grad:
            dimg = np.zeros_like(img.data)
            for (val, inside, yc, xc), wt in ((v00, w00), (v01, w01), (v10, w10), (v11, w11)):
                contrib = g * (wt * inside)
                np.add.at(dimg, (slice(None), yc.ravel(), xc.ravel()),
                          contrib.reshape(c, -1))
            img.grad = _acc(img.grad, dimg)
        if mat.requires_grad:
            dout_dsx = (1 - wy) * (v01[0] - v00[0]) + wy * (v11[0] - v10[0])
            dout_dsy = (1 - wx) * (v10[0] - v00[0]) + wx * (v11[0] - v01[0])
            gsx = (g * dout_dsx).sum(axis=0)
            gsy = (g * dout_dsy).sum(axis=0)
            dmat = np.array([
                [(gsx * xs).sum(), (gsx * ys).sum(), gsx.sum()],
                [(gsy * xs).sum(), (gsy * ys).sum(), gsy.sum()],
            ])
            mat.grad = _acc(mat.grad, dmat)

    return _node(f(), (img, mat), bw, f, "warp_bilinear")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(params, grads, velocities, lr, momentum, direction="minimize"):
    """One SGD-with-momentum step: v <- m*v + g, p <- p -/+ lr*v.

    Pure: returns (new_params, new_velocities) without touching the inputs.
    direction "maximize" ascends instead of descending.
    """
    if direction not in ("minimize", "maximize"):
        raise ValueError(f"unknown direction {direction!r}")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient; update refused")
    sgn = -1.0 if direction == "minimize" else 1.0
    new_v = [momentum * v + g for v, g in zip(velocities, grads)]
    new_p = [p + sgn * lr * v for p, v in zip(params, new_v)]
    return new_p, new_v


class SGDMomentum:
    """Stateful wrapper around sgd_step for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self, direction="minimize"):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new_p, new_v = sgd_step([p.data for p in self.params], grads, self.velocities,
                                self.lr, self.momentum, direction)
        for p, d in zip(self.params, new_p):
            p.data = d
        self.velocities = new_v

    def zero_grad(self):
        zero_grad(self.params)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

class GradCheckResult:
    def __init__(self, max_rel_err, ok, detail=""):
        self.max_rel_err = max_rel_err
        self.ok = ok
        self.detail = detail

    def __repr__(self):
        return f"GradCheckResult(max_rel_err={self.max_rel_err:.3e}, ok={self.ok})"


def grad_check(build: Callable[[], Tensor], tensors: Sequence[Tensor], *,
               step: float = 1e-5, rtol: float = 1e-4,
               max_coords: int = 4, rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare analytic gradients of build() against central differences.

    build must construct the scalar loss from the current .data of the
    given tensors.  A random subset of coordinates per tensor is probed;
    relative error uses max(1, |analytic|, |numeric|) as denominator.
    """
    rng = rng or np.random.default_rng(0)
    tensors = list(tensors)
    zero_grad(tensors)
    loss = build()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    detail = ""
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        idxs = range(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + step
            lo_hi = float(build().data)
            flat[i] = keep - step
            lo_lo = float(build().data)
            flat[i] = keep
            fd = (lo_hi - lo_lo) / (2.0 * step)
            an = a.reshape(-1)[i]
            rel = abs(an - fd) / max(1.0, abs(an), abs(fd))
            if rel > worst:
                worst = rel
                detail = f"tensor {t.name or '?'} coord {i}: analytic={an:.6e} fd={fd:.6e}"
    return GradCheckResult(worst, worst < rtol, detail)
