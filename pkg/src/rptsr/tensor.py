"""Minimal reverse-mode tensor engine backed by numpy.

Every differentiable op records a :class:`Node` on the graph when any input
requires a gradient. Backward rules live in :data:`BACKWARD` keyed by op name,
so a rule can be swapped out (the gradient checker's sensitivity test relies on
that). Ops accept optional leading batch axes wherever that is natural.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # sugar for the handful of ops used inline
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Node:
    __slots__ = ("op", "inputs", "out", "saved", "seq")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, saved: dict, seq: int):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.saved = saved
        self.seq = seq


_seq = itertools.count()
_grad_enabled = True
_check_finite = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], **saved) -> Tensor:
    if _check_finite and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, out, saved, next(_seq))
    return out


# ---------------------------------------------------------------------------
# multiply counter

class MacCounter:
    """Accumulates multiply-accumulate counts per tag while active."""

    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)

    def add(self, tag: str, n: int) -> None:
        self.counts[tag] += int(n)

    def total(self, exclude: Iterable[str] = ()) -> int:
        skip = set(exclude)
        return sum(v for k, v in self.counts.items() if k not in skip)

    def __getitem__(self, tag: str) -> int:
        return self.counts.get(tag, 0)


_counters: list[MacCounter] = []


@contextlib.contextmanager
def count_macs():
    c = MacCounter()
    _counters.append(c)
    try:
        yield c
    finally:
        _counters.remove(c)


def _count(tag: str, n: int) -> None:
    for c in _counters:
        c.add(tag, n)


# ---------------------------------------------------------------------------
# tape and backward

class Tape:
    """Recorded nodes reachable from an output, in recording order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [out]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or id(n) in seen:
                continue
            seen.add(id(n))
            nodes.append(n)
            stack.extend(n.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every reachable leaf that requires grad.

    Gradients accumulate into existing ``.grad`` buffers; call ``zero_grad`` on
    parameters between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.node is None and loss.requires_grad:
        _accumulate_leaf(loss, grads[id(loss)])
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = BACKWARD[node.op](node, g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                _accumulate_leaf(t, gi)
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ValueError(f"gradient shape {g.shape} does not match {t.shape}")
    if _check_finite and not np.isfinite(g).all():
        raise NonFiniteError(f"non-finite gradient for {t.name or 'leaf'}")
    t.grad = g.copy() if t.grad is None else t.grad + g


BACKWARD: dict[str, Callable[[Node, np.ndarray], Sequence[np.ndarray | None]]] = {}


def _rule(name: str):
    def deco(fn):
        BACKWARD[name] = fn
        return fn
    return deco


# ---------------------------------------------------------------------------
# elementwise and reductions

def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b))


@_rule("add")
def _add_bwd(node, g):
    return g, g


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b))


@_rule("sub")
def _sub_bwd(node, g):
    return g, -g


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b))


@_rule("mul")
def _mul_bwd(node, g):
    a, b = node.inputs
    return g * b.data, g * a.data


def scale(x: Tensor, c: float) -> Tensor:
    return _make("scale", x.data * c, (x,), c=c)


@_rule("scale")
def _scale_bwd(node, g):
    return (g * node.saved["c"],)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., C] + b[C]."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    return _make("add_bias", x.data + b.data, (x, b))


@_rule("add_bias")
def _add_bias_bwd(node, g):
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


def expand_batch(x: Tensor, n: int) -> Tensor:
    """Repeat ``x`` along a new leading axis of length ``n``."""
    return _make("expand_batch", np.broadcast_to(x.data, (n,) + x.shape).copy(), (x,))


@_rule("expand_batch")
def _expand_batch_bwd(node, g):
    return (g.sum(axis=0),)


def abs_(x: Tensor) -> Tensor:
    return _make("abs", np.abs(x.data), (x,))


@_rule("abs")
def _abs_bwd(node, g):
    return (g * np.sign(node.inputs[0].data),)


def sum_(x: Tensor) -> Tensor:
    return _make("sum", np.array(x.data.sum()), (x,))


@_rule("sum")
def _sum_bwd(node, g):
    return (np.full(node.inputs[0].shape, g.item()),)


def mean(x: Tensor) -> Tensor:
    return _make("mean", np.array(x.data.mean()), (x,))


@_rule("mean")
def _mean_bwd(node, g):
    x = node.inputs[0]
    return (np.full(x.shape, g.item() / x.size),)


# ---------------------------------------------------------------------------
# shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make("reshape", x.data.reshape(shape), (x,))


@_rule("reshape")
def _reshape_bwd(node, g):
    return (g.reshape(node.inputs[0].shape),)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    return _make("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), axes=axes)


@_rule("transpose")
def _transpose_bwd(node, g):
    return (g.transpose(np.argsort(node.saved["axes"])),)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(ts)
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ValueError(f"concat: incompatible shapes {[u.shape for u in ts]}")
    sizes = [t.shape[ax] for t in ts]
    return _make("concat", np.concatenate([t.data for t in ts], axis=ax), ts, axis=ax, sizes=sizes)


@_rule("concat")
def _concat_bwd(node, g):
    ax, sizes = node.saved["axis"], node.saved["sizes"]
    return np.split(g, np.cumsum(sizes)[:-1], axis=ax)


def concat_lastdim(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat_lastdim: leading extents differ {a.shape} vs {b.shape}")
    return concat((a, b), axis=-1)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    return _make("slice", x.data[tuple(idx)].copy(), (x,), index=tuple(idx))


@_rule("slice")
def _slice_bwd(node, g):
    out = np.zeros(node.inputs[0].shape)
    out[node.saved["index"]] = g
    return (out,)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover extent {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, axis, start, start + s))
        start += s
    return out


def split_lastdim(x: Tensor, ca: int) -> tuple[Tensor, Tensor]:
    a, b = split(x, [ca, x.shape[-1] - ca], axis=-1)
    return a, b


def gather_hw(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Index the last two axes with integer maps: out[..., i, j] = x[..., rows[i], cols[j]]."""
    return _make("gather_hw", x.data[..., rows[:, None], cols[None, :]], (x,), rows=rows, cols=cols)


@_rule("gather_hw")
def _gather_hw_bwd(node, g):
    x = node.inputs[0]
    rows, cols = node.saved["rows"], node.saved["cols"]
    tmp = np.zeros(x.shape[:-2] + (x.shape[-2], g.shape[-1]))
    np.add.at(tmp, (..., rows, slice(None)), g)
    out = np.zeros(x.shape)
    np.add.at(out, (..., cols), tmp)
    return (out,)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor, tag: str = "matmul") -> Tensor:
    """a[..., m, k] @ b[..., k, n]; ``b`` may be a shared 2-D matrix."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch extents differ {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ValueError("matmul: batched right operand needs batched left operand")
    out = np.matmul(a.data, b.data)
    if _counters:
        _count(tag, out.size * a.shape[-1])
    return _make("matmul", out, (a, b))


@_rule("matmul")
def _matmul_bwd(node, g):
    a, b = node.inputs
    da = db = None
    if a.requires_grad:
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
    if b.requires_grad:
        if b.ndim == 2:
            k, n = b.shape
            db = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            db = np.matmul(np.swapaxes(a.data, -1, -2), g)
    return da, db


# ---------------------------------------------------------------------------
# convolution and pooling

def _as4d(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ValueError(f"expected C×H×W or B×C×H×W, got {x.shape}")


_CONV_CHUNK_BYTES = 1 << 27


def _im2col(xp: np.ndarray, r0: int, r1: int, k: int, groups: int) -> np.ndarray:
    n, cin = xp.shape[:2]
    wd = xp.shape[3] - (k - 1)
    cols = sliding_window_view(xp[:, :, r0:r1 + k - 1], (k, k), axis=(2, 3))  # n,cin,rows,w,kh,kw
    return cols.transpose(0, 1, 4, 5, 2, 3).reshape(n, groups, cin // groups * k * k, (r1 - r0) * wd)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, groups: int = 1,
           pad_mode: str = "zero") -> Tensor:
    """Stride-1 'same' convolution with 1×1 or 3×3 kernels."""
    xd, squeeze = _as4d(x)
    n, cin, h, wd = xd.shape
    cout, cin_g, kh, kw = w.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"conv2d: unsupported kernel {kh}×{kw}")
    if cin % groups or cout % groups or cin // groups != cin_g:
        raise ValueError(f"conv2d: channels {cin}->{cout} incompatible with groups={groups}, weight {w.shape}")
    if pad_mode not in ("zero", "circular"):
        raise ValueError(f"conv2d: unknown pad_mode {pad_mode!r}")
    p = kh // 2
    if p:
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)), mode="constant" if pad_mode == "zero" else "wrap")
    else:
        xp = xd
    wg = w.data.reshape(groups, cout // groups, cin_g * kh * kw)
    needs_grad = _grad_enabled and any(t.requires_grad for t in (x, w, b) if t is not None)
    band = max(1, _CONV_CHUNK_BYTES // (8 * n * cin * kh * kw * wd))
    if needs_grad or band >= h:
        cols = _im2col(xp, 0, h, kh, groups)
        out = np.matmul(wg, cols).reshape(n, cout, h, wd)
    else:
        # inference on large maps: bound the im2col buffer by working in row bands
        cols = None
        out = np.empty((n, cout, h, wd))
        for r0 in range(0, h, band):
            r1 = min(h, r0 + band)
            out[:, :, r0:r1] = np.matmul(wg, _im2col(xp, r0, r1, kh, groups)).reshape(n, cout, r1 - r0, wd)
    if b is not None:
        out = out + b.data[:, None, None]
    if _counters:
        _count("conv", n * cout * h * wd * cin_g * kh * kw)
    if squeeze:
        out = out[0]
    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, inputs, cols=cols, groups=groups, pad_mode=pad_mode, squeeze=squeeze)


@_rule("conv2d")
def _conv2d_bwd(node, g):
    x, w = node.inputs[:2]
    s = node.saved
    cols, groups = s["cols"], s["groups"]
    g4 = g[None] if s["squeeze"] else g
    n, cout, h, wd = g4.shape
    cin_g, kh, kw = w.shape[1:]
    gg = g4.reshape(n, groups, cout // groups, h * wd)
    dw = np.matmul(gg, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
    dx = None
    if x.requires_grad:
        wg = w.data.reshape(groups, cout // groups, cin_g * kh * kw)
        dcols = np.matmul(np.swapaxes(wg, -1, -2), gg).reshape(n, groups * cin_g, kh, kw, h, wd)
        p = kh // 2
        dxp = np.zeros((n, groups * cin_g, h + 2 * p, wd + 2 * p))
        for dy in range(kh):
            for dxo in range(kw):
                dxp[:, :, dy:dy + h, dxo:dxo + wd] += dcols[:, :, dy, dxo]
        dx = _unpad(dxp, p, s["pad_mode"])
        if s["squeeze"]:
            dx = dx[0]
    out = [dx, dw]
    if len(node.inputs) == 3:
        out.append(g4.sum(axis=(0, 2, 3)))
    return out


def _unpad(dxp: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return dxp
    if mode == "zero":
        return dxp[:, :, p:-p, p:-p].copy()
    h = dxp.shape[2] - 2 * p
    r = dxp[:, :, p:p + h].copy()
    r[:, :, :p] += dxp[:, :, p + h:]
    r[:, :, h - p:] += dxp[:, :, :p]
    wd = r.shape[3] - 2 * p
    c = r[:, :, :, p:p + wd].copy()
    c[:, :, :, :p] += r[:, :, :, p + wd:]
    c[:, :, :, wd - p:] += r[:, :, :, :p]
    return c


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride = kernel if stride is None else stride
    if stride != kernel:
        raise ValueError("avg_pool2d: only kernel == stride is supported")
    h, wd = x.shape[-2:]
    if h % kernel or wd % kernel:
        raise ValueError(f"avg_pool2d: extents {h}×{wd} not divisible by {kernel}")
    lead = x.shape[:-2]
    v = x.data.reshape(lead + (h // kernel, kernel, wd // kernel, kernel))
    out = v.mean(axis=(-3, -1))
    return _make("avg_pool2d", out, (x,), kernel=kernel)


@_rule("avg_pool2d")
def _avg_pool2d_bwd(node, g):
    k = node.saved["kernel"]
    out = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k)
    return (out,)


# ---------------------------------------------------------------------------
# normalization and activations

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if c == 0:
        raise ValueError("layer_norm: empty channel axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    return _make("layer_norm", out, (x, gamma, beta), xhat=xhat, inv=inv)


@_rule("layer_norm")
def _layer_norm_bwd(node, g):
    x, gamma, _ = node.inputs
    xhat, inv = node.saved["xhat"], node.saved["inv"]
    c = x.shape[-1]
    dgamma = (g * xhat).reshape(-1, c).sum(axis=0)
    dbeta = g.reshape(-1, c).sum(axis=0)
    dxhat = g * gamma.data
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make("softmax", y, (x,), y=y)


@_rule("softmax")
def _softmax_bwd(node, g):
    y = node.saved["y"]
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    return _make("gelu", x.data * cdf, (x,), cdf=cdf)


@_rule("gelu")
def _gelu_bwd(node, g):
    x = node.inputs[0].data
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (g * (node.saved["cdf"] + x * pdf),)


# ---------------------------------------------------------------------------
# sub-pixel rearrangement

def _shuffle(d: np.ndarray, r: int) -> np.ndarray:
    *lead, c, h, w = d.shape
    v = d.reshape(*lead, c // (r * r), r, r, h, w)
    n = len(lead)
    v = v.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return v.reshape(*lead, c // (r * r), h * r, w * r)


def _unshuffle(d: np.ndarray, r: int) -> np.ndarray:
    *lead, c, h, w = d.shape
    v = d.reshape(*lead, c, h // r, r, w // r, r)
    n = len(lead)
    v = v.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return v.reshape(*lead, c * r * r, h // r, w // r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    c = x.shape[-3]
    if c % (r * r):
        raise ValueError(f"pixel_shuffle: {c} channels not divisible by r²={r * r}")
    return _make("pixel_shuffle", _shuffle(x.data, r), (x,), r=r)


@_rule("pixel_shuffle")
def _pixel_shuffle_bwd(node, g):
    return (_unshuffle(g, node.saved["r"]),)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    h, w = x.shape[-2:]
    if h % r or w % r:
        raise ValueError(f"pixel_unshuffle: extents {h}×{w} not divisible by {r}")
    return _make("pixel_unshuffle", _unshuffle(x.data, r), (x,), r=r)


@_rule("pixel_unshuffle")
def _pixel_unshuffle_bwd(node, g):
    return (_shuffle(g, node.saved["r"]),)
