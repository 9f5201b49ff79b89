"""Minimal float32 tensors plus a reverse-mode differentiation tape.

Only the operations the trainable parts of the pipeline actually need are
implemented: 3x3 convolution, a handful of pointwise functions, 2x
resampling, channel concat/slice, reductions, and Adam. Multi-dimensional
values are stored float32; scalar reduction outputs are kept float64 so
finite-difference checks are not drowned by cancellation noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent, naming the offending dim."""


class NumericError(ValueError):
    """Raised when a non-finite value is fed to an update step."""


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float32))


def stable_sigmoid(x):
    """Numerically stable logistic function, computed in float64."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def stable_softplus(x):
    """log(1 + e^x) without overflow, computed in float64."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(x)))


class TapeNode:
    """One recorded operation: forward value plus the rule to push adjoints back.

    ``backward`` maps the node's output adjoint to a list of
    ``(parent_node_id, parent_adjoint)`` contributions. Nodes are appended in
    execution order, so reverse id order is a reverse topological order.
    """

    __slots__ = ("op", "value", "parents", "backward", "requires_grad")

    def __init__(self, op, value, parents, backward, requires_grad):
        self.op = op
        self.value = value
        self.parents = parents
        self.backward = backward
        self.requires_grad = requires_grad


class Tape:
    """Append-only record of operations; replays adjoints in reverse order."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.grads: dict[int, np.ndarray] = {}

    def _push(self, op, value, parents=(), backward=None) -> "DiffValue":
        req = any(self.nodes[p].requires_grad for p in parents)
        node = TapeNode(op, value, tuple(parents), backward if req else None, req)
        self.nodes.append(node)
        return DiffValue(self, len(self.nodes) - 1)

    def param(self, value) -> "DiffValue":
        """Leaf with requires_grad=True (network weights, importance maps)."""
        node = TapeNode("param", as_f32(value), (), None, True)
        self.nodes.append(node)
        return DiffValue(self, len(self.nodes) - 1)

    def const(self, value) -> "DiffValue":
        """Leaf that never receives gradients (inputs, targets, patterns)."""
        node = TapeNode("const", as_f32(value), (), None, False)
        self.nodes.append(node)
        return DiffValue(self, len(self.nodes) - 1)

    def backward(self, out: "DiffValue", seed=None):
        """Propagate adjoints from ``out`` back to every grad-requiring leaf.

        Each node is visited exactly once, in reverse creation order.
        """
        if out.tape is not self:
            raise ValueError("output DiffValue belongs to a different tape")
        self.grads = {}
        if seed is None:
            seed = np.ones_like(self.nodes[out.node_id].value)
        self.grads[out.node_id] = np.asarray(seed, dtype=self.nodes[out.node_id].value.dtype)
        for nid in range(out.node_id, -1, -1):
            node = self.nodes[nid]
            g = self.grads.get(nid)
            if g is None or node.backward is None:
                continue
            for pid, pg in node.backward(g):
                parent = self.nodes[pid]
                if not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.value.dtype)
                if pid in self.grads:
                    self.grads[pid] = self.grads[pid] + pg
                else:
                    self.grads[pid] = pg
        return self.grads


@dataclass
class DiffValue:
    """Handle to a tape node: forward value now, adjoint after backward()."""

    tape: Tape
    node_id: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.node_id].value

    @property
    def shape(self):
        return self.tape.nodes[self.node_id].value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.node_id].requires_grad

    @property
    def grad(self):
        return self.tape.grads.get(self.node_id)

    def __add__(self, other):
        if isinstance(other, DiffValue):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, DiffValue):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, DiffValue):
            return add(self, mul_scalar(other, -1.0))
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), float(other))


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} vs {b.shape} differ")


# ---------------------------------------------------------------------------
# pointwise ops


def add(a: DiffValue, b: DiffValue) -> DiffValue:
    _check_same_shape("add", a.value, b.value)
    out = a.value + b.value

    def bwd(g):
        return [(a.node_id, g), (b.node_id, g)]

    return a.tape._push("add", out, (a.node_id, b.node_id), bwd)


def mul(a: DiffValue, b: DiffValue) -> DiffValue:
    _check_same_shape("mul", a.value, b.value)
    av, bv = a.value, b.value
    out = av * bv

    def bwd(g):
        return [(a.node_id, g * bv), (b.node_id, g * av)]

    return a.tape._push("mul", out, (a.node_id, b.node_id), bwd)


def div(a: DiffValue, b: DiffValue) -> DiffValue:
    _check_same_shape("div", a.value, b.value)
    av, bv = a.value, b.value
    out = av / bv

    def bwd(g):
        return [(a.node_id, g / bv), (b.node_id, -g * av / (bv * bv))]

    return a.tape._push("div", out, (a.node_id, b.node_id), bwd)


def add_scalar(a: DiffValue, c: float) -> DiffValue:
    out = a.value + np.asarray(c, dtype=a.value.dtype)

    def bwd(g):
        return [(a.node_id, g)]

    return a.tape._push("add_scalar", out, (a.node_id,), bwd)


def mul_scalar(a: DiffValue, c: float) -> DiffValue:
    c = float(c)
    out = a.value * np.asarray(c, dtype=a.value.dtype)

    def bwd(g):
        return [(a.node_id, g * c)]

    return a.tape._push("mul_scalar", out, (a.node_id,), bwd)


def add_const(a: DiffValue, c) -> DiffValue:
    """a + c for a fixed array c of identical shape (no gradient into c)."""
    c = np.asarray(c, dtype=np.float32)
    _check_same_shape("add_const", a.value, c)
    out = a.value + c

    def bwd(g):
        return [(a.node_id, g)]

    return a.tape._push("add_const", out, (a.node_id,), bwd)


def mul_const(a: DiffValue, c) -> DiffValue:
    """a * c for a fixed array c, same shape or broadcast of (H,W) over (C,H,W)."""
    c = np.asarray(c, dtype=np.float32)
    av = a.value
    if c.shape != av.shape and not _channel_broadcast_ok(av.shape, c.shape):
        raise ShapeError(f"mul_const: cannot broadcast {av.shape} with {c.shape}")
    out = av * c

    def bwd(g):
        return [(a.node_id, _reduce_to_shape(g * c, av.shape))]

    return a.tape._push("mul_const", out, (a.node_id,), bwd)


def _channel_broadcast_ok(shape_a, shape_c):
    # allow (H,W) or (1,H,W) against (C,H,W) in either role
    sa, sc = tuple(shape_a), tuple(shape_c)
    if len(sa) == 2 and len(sc) == 3 and sc[1:] == sa:
        return True
    if len(sc) == 2 and len(sa) == 3 and sa[1:] == sc:
        return True
    if len(sa) == 3 and len(sc) == 3 and sa[1:] == sc[1:] and (sa[0] == 1 or sc[0] == 1):
        return True
    return False


def _reduce_to_shape(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    if len(shape) == 2 and g.ndim == 3:
        return g.sum(axis=0)
    if len(shape) == 3 and shape[0] == 1 and g.ndim == 3:
        return g.sum(axis=0, keepdims=True)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


def relu(a: DiffValue) -> DiffValue:
    av = a.value
    out = np.maximum(av, 0)
    gate = (av > 0).astype(av.dtype)

    def bwd(g):
        return [(a.node_id, g * gate)]

    return a.tape._push("relu", out, (a.node_id,), bwd)


def sigmoid(a: DiffValue) -> DiffValue:
    s = stable_sigmoid(a.value)
    out = s.astype(a.value.dtype)
    deriv = (s * (1.0 - s)).astype(a.value.dtype)

    def bwd(g):
        return [(a.node_id, g * deriv)]

    return a.tape._push("sigmoid", out, (a.node_id,), bwd)


def softplus(a: DiffValue) -> DiffValue:
    out = stable_softplus(a.value).astype(a.value.dtype)
    deriv = stable_sigmoid(a.value).astype(a.value.dtype)

    def bwd(g):
        return [(a.node_id, g * deriv)]

    return a.tape._push("softplus", out, (a.node_id,), bwd)


def clamp(a: DiffValue, lo: float, hi: float) -> DiffValue:
    """Clip to [lo, hi]; gradient passes only strictly inside the interval."""
    av = a.value
    out = np.clip(av, lo, hi)
    gate = ((av > lo) & (av < hi)).astype(av.dtype)

    def bwd(g):
        return [(a.node_id, g * gate)]

    return a.tape._push("clamp", out, (a.node_id,), bwd)


def clamp01(a: DiffValue) -> DiffValue:
    return clamp(a, 0.0, 1.0)


def absolute(a: DiffValue) -> DiffValue:
    av = a.value
    out = np.abs(av)
    sgn = np.sign(av)

    def bwd(g):
        return [(a.node_id, g * sgn)]

    return a.tape._push("abs", out, (a.node_id,), bwd)


def log(a: DiffValue) -> DiffValue:
    av = a.value
    out = np.log(av)

    def bwd(g):
        return [(a.node_id, g / av)]

    return a.tape._push("log", out, (a.node_id,), bwd)


ELEMENTWISE_KINDS = ("relu", "sigmoid", "softplus", "add", "mul", "clamp01")


def elementwise(a: DiffValue, kind: str, other: DiffValue | None = None) -> DiffValue:
    """Dispatch by kind name; binary kinds require ``other`` of equal shape."""
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "softplus":
        return softplus(a)
    if kind == "clamp01":
        return clamp01(a)
    if kind == "add":
        return add(a, other)
    if kind == "mul":
        return mul(a, other)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: DiffValue, shape) -> DiffValue:
    old = a.value.shape
    out = a.value.reshape(shape)

    def bwd(g):
        return [(a.node_id, g.reshape(old))]

    return a.tape._push("reshape", out, (a.node_id,), bwd)


def concat_channels(parts: list[DiffValue]) -> DiffValue:
    """Stack (C_i,H,W) values along the channel axis."""
    if not parts:
        raise ValueError("concat_channels: empty input list")
    hw = parts[0].value.shape[1:]
    for p in parts:
        if p.value.ndim != 3 or p.value.shape[1:] != hw:
            raise ShapeError(f"concat_channels: spatial dims {p.value.shape} vs {hw}")
    out = np.concatenate([p.value for p in parts], axis=0)
    sizes = [p.value.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return [
            (p.node_id, g[offsets[i] : offsets[i + 1]]) for i, p in enumerate(parts)
        ]

    return parts[0].tape._push(
        "concat", out, tuple(p.node_id for p in parts), bwd
    )


def slice_channels(a: DiffValue, c0: int, c1: int) -> DiffValue:
    av = a.value
    out = av[c0:c1].copy()

    def bwd(g):
        full = np.zeros_like(av)
        full[c0:c1] = g
        return [(a.node_id, full)]

    return a.tape._push("slice", out, (a.node_id,), bwd)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation; scalar results stay float64)


def sum_all(a: DiffValue) -> DiffValue:
    av = a.value
    out = np.asarray(av.sum(dtype=np.float64))

    def bwd(g):
        return [(a.node_id, np.full_like(av, np.float32(g)))]

    return a.tape._push("sum", out, (a.node_id,), bwd)


def mean_all(a: DiffValue) -> DiffValue:
    av = a.value
    n = av.size
    out = np.asarray(av.sum(dtype=np.float64) / n)

    def bwd(g):
        return [(a.node_id, np.full_like(av, np.float32(g / n)))]

    return a.tape._push("mean", out, (a.node_id,), bwd)


# ---------------------------------------------------------------------------
# convolution


def conv3x3(x: DiffValue, w: DiffValue, b: DiffValue) -> DiffValue:
    """Zero-padded stride-1 3x3 cross-correlation plus bias.

    x: (C_in,H,W), w: (C_out,C_in,3,3), b: (C_out,) -> (C_out,H,W)
    """
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 3:
        raise ShapeError(f"conv3x3: input must be (C,H,W), got {xv.shape}")
    if wv.ndim != 4 or wv.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3: weights must be (C_out,C_in,3,3), got {wv.shape}")
    cin, h, wdt = xv.shape
    cout = wv.shape[0]
    if wv.shape[1] != cin:
        raise ShapeError(
            f"conv3x3: input channels {cin} != weight C_in {wv.shape[1]}"
        )
    if bv.shape != (cout,):
        raise ShapeError(f"conv3x3: bias shape {bv.shape} != ({cout},)")
    if h < 1 or wdt < 1:
        raise ShapeError(f"conv3x3: degenerate spatial size {h}x{wdt}")

    xp = np.zeros((cin, h + 2, wdt + 2), dtype=np.float32)
    xp[:, 1 : h + 1, 1 : wdt + 1] = xv
    cols = np.empty((cin, 9, h, wdt), dtype=np.float32)
    for k in range(9):
        di, dj = divmod(k, 3)
        cols[:, k] = xp[:, di : di + h, dj : dj + wdt]
    cols2 = cols.reshape(cin * 9, h * wdt)
    wmat = wv.reshape(cout, cin * 9)
    out = (wmat @ cols2 + bv[:, None]).reshape(cout, h, wdt)

    def bwd(g):
        gm = g.reshape(cout, h * wdt)
        gb = gm.sum(axis=1, dtype=np.float64).astype(np.float32)
        gw = (gm @ cols2.T).reshape(wv.shape)
        gcols = (wmat.T @ gm).reshape(cin, 9, h, wdt)
        gxp = np.zeros_like(xp)
        for k in range(9):
            di, dj = divmod(k, 3)
            gxp[:, di : di + h, dj : dj + wdt] += gcols[:, k]
        gx = gxp[:, 1 : h + 1, 1 : wdt + 1]
        return [(x.node_id, gx), (w.node_id, gw), (b.node_id, gb)]

    return x.tape._push("conv3x3", out, (x.node_id, w.node_id, b.node_id), bwd)


def correlate_fixed(x: DiffValue, kernel: np.ndarray) -> DiffValue:
    """Depthwise 'valid' correlation with a fixed 2D kernel (no kernel grad)."""
    kv = np.asarray(kernel, dtype=np.float32)
    kh, kw = kv.shape
    xv = x.value
    c, h, w = xv.shape
    if h < kh or w < kw:
        raise ShapeError(f"correlate_fixed: image {h}x{w} smaller than kernel {kh}x{kw}")
    win = np.lib.stride_tricks.sliding_window_view(xv, (kh, kw), axis=(1, 2))
    out = np.einsum("chwij,ij->chw", win, kv).astype(np.float32)

    def bwd(g):
        gp = np.zeros((c, h + kh - 1, w + kw - 1), dtype=np.float32)
        gp[:, kh - 1 : kh - 1 + g.shape[1], kw - 1 : kw - 1 + g.shape[2]] = g
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(1, 2))
        gx = np.einsum("chwij,ij->chw", gwin, kv[::-1, ::-1]).astype(np.float32)
        return [(x.node_id, gx)]

    return x.tape._push("correlate", out, (x.node_id,), bwd)


# ---------------------------------------------------------------------------
# 2x resampling

RESAMPLE_KINDS = ("bilinear-up", "avg-pool-down", "max-pool-down")


def _up_axis_indices(n):
    """Source indices/weights for 2x bilinear upsampling of one axis.

    Output sample o sits at source coordinate (o+0.5)/2 - 0.5 (each coarse
    pixel covers a 2x2 fine cell; fine samples at quarter points).
    """
    o = np.arange(2 * n)
    src = (o + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = (src - i0).astype(np.float32)
    i1 = np.clip(i0 + 1, 0, n - 1)
    i0 = np.clip(i0, 0, n - 1)
    return i0, i1, t


def resample2x(x: DiffValue, kind: str) -> DiffValue:
    """Double or halve the spatial size of a (C,H,W) value."""
    if kind not in RESAMPLE_KINDS:
        raise ValueError(f"unknown resample kind {kind!r}")
    xv = x.value
    if xv.ndim != 3:
        raise ShapeError(f"resample2x: input must be (C,H,W), got {xv.shape}")
    if kind == "bilinear-up":
        return _bilinear_up(x)
    return _pool_down(x, kind)


def _bilinear_up(x: DiffValue) -> DiffValue:
    xv = x.value
    c, h, w = xv.shape
    y0, y1, ty = _up_axis_indices(h)
    x0, x1, tx = _up_axis_indices(w)
    rows = xv[:, y0, :] * (1.0 - ty)[None, :, None] + xv[:, y1, :] * ty[None, :, None]
    out = rows[:, :, x0] * (1.0 - tx)[None, None, :] + rows[:, :, x1] * tx[None, None, :]
    out = out.astype(np.float32)

    def bwd(g):
        grows = np.zeros((c, 2 * h, w), dtype=np.float32)
        np.add.at(grows, (slice(None), slice(None), x0), g * (1.0 - tx)[None, None, :])
        np.add.at(grows, (slice(None), slice(None), x1), g * tx[None, None, :])
        gx = np.zeros_like(xv)
        np.add.at(gx, (slice(None), y0, slice(None)), grows * (1.0 - ty)[None, :, None])
        np.add.at(gx, (slice(None), y1, slice(None)), grows * ty[None, :, None])
        return [(x.node_id, gx)]

    return x.tape._push("bilinear-up", out, (x.node_id,), bwd)


def _pool_down(x: DiffValue, kind: str) -> DiffValue:
    xv = x.value
    c, h, w = xv.shape
    ph, pw = h % 2, w % 2
    xp = xv
    if ph or pw:
        # replicate the last row/column so odd sizes pool cleanly
        xp = np.pad(xv, ((0, 0), (0, ph), (0, pw)), mode="edge")
    h2, w2 = xp.shape[1] // 2, xp.shape[2] // 2
    blocks = xp.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)

    if kind == "avg-pool-down":
        out = blocks.mean(axis=3).astype(np.float32)

        def bwd(g):
            gb = np.repeat(g[..., None] * 0.25, 4, axis=3)
            return [(x.node_id, _fold_pool_grad(gb, c, h, w, h2, w2, ph, pw))]

    else:  # max-pool-down; ties route to the lowest flat index
        arg = blocks.argmax(axis=3)
        out = np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0].astype(np.float32)

        def bwd(g):
            gb = np.zeros((c, h2, w2, 4), dtype=np.float32)
            np.put_along_axis(gb, arg[..., None], g[..., None], axis=3)
            return [(x.node_id, _fold_pool_grad(gb, c, h, w, h2, w2, ph, pw))]

    return x.tape._push(kind, out, (x.node_id,), bwd)


def _fold_pool_grad(gb, c, h, w, h2, w2, ph, pw):
    """Undo the block reshape; fold replicated-pad gradients onto the edge."""
    gp = gb.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2)
    if ph:
        gp[:, h - 1, :] += gp[:, h, :]
    if pw:
        gp[:, :, w - 1] += gp[:, :, w]
    return gp[:, :h, :w]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment buffers, one pair per parameter."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params) -> AdamState:
    st = AdamState()
    for p in params:
        arr = p.value if isinstance(p, DiffValue) else p
        st.m.append(np.zeros_like(arr))
        st.v.append(np.zeros_like(arr))
    return st


def adam_step(params, grads, state: AdamState, lr: float) -> AdamState:
    """In-place Adam update with bias correction; zero grads leave params fixed."""
    arrays = [p.value if isinstance(p, DiffValue) else p for p in params]
    if len(arrays) != len(grads):
        raise ShapeError(f"adam_step: {len(arrays)} params vs {len(grads)} grads")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(arrays, grads)):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float32)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for parameter {i}")
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: parameter {i} shape {p.shape} vs grad {g.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(np.float32)
    return state


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform in +-sqrt(1/fan_in), float32."""
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)
