"""Regional prior attention layer and block.

A layer summarizes each window into ``k`` local tokens, fuses them with a
learnable per-layer bank of position-anchored prior tokens, lets the fused
dynamic tokens attend to each other globally, then prepends each window's
dynamic tokens to its pixel tokens for window attention. The ``baseline``
variant drops the prior bank and ``static`` drops the local tokens.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .layers import Conv2d, Module, TransformerBlock
from .tensor import Tensor
from .windowing import WindowGrid, window_merge, window_partition

VARIANTS = ("baseline", "static", "rpt")

# score buffers above this many bytes are evaluated window-chunk by window-chunk
# when no graph is being recorded
_CHUNK_BYTES = 1 << 27


class PriorNotInitialized(RuntimeError):
    pass


def tokens_per_side(k: int, w: int) -> int:
    """Side of the sub-grid of local tokens inside one window (``k`` must be a square)."""
    s = math.isqrt(k)
    if k < 1 or s * s != k or w % s:
        raise ValueError(f"k={k} unsupported for window {w}: need integer sqrt(k) dividing w")
    return s


def grid_to_tokens(x: Tensor, s: int) -> Tensor:
    """(..., C, rows*s, cols*s) -> (..., rows*cols*s*s, C), window-major token order."""
    g = window_partition(x, s)
    *lead, nw, t, c = g.tokens.shape
    return T.reshape(g.tokens, (*lead, nw * t, c))


class LocalTokenizer(Module):
    def __init__(self, dim: int, dim_out: int, rng: np.random.Generator, pad_mode: str = "zero"):
        self.proj = Conv2d(dim, dim_out, 1, rng, pad_mode=pad_mode)
        self.dwconv = Conv2d(dim_out, dim_out, 3, rng, groups=dim_out, pad_mode=pad_mode)


def local_tokens(f: Tensor, tok: LocalTokenizer, w: int, k: int) -> Tensor:
    s = tokens_per_side(k, w)
    h, wd = f.shape[-2:]
    if h % w or wd % w:
        raise ValueError(f"extents {h}×{wd} not divisible by window {w}")
    x = T.avg_pool2d(tok.dwconv(tok.proj(f)), w // s)
    return grid_to_tokens(x, s)


class RegionalPriorBank(Module):
    """Learnable prior tokens for one layer; allocated on first-batch initialization."""

    def __init__(self, width: int, k: int):
        self.width = width
        self.k = k
        self.prior: Tensor | None = None
        self.initialized = False
        self.train_extents: tuple[int, int] | None = None

    def load(self, prior: np.ndarray, rows: int, cols: int) -> None:
        if prior.shape != (self.k * rows * cols, self.width):
            raise ValueError(f"prior shape {prior.shape} does not fit {rows}×{cols} grid of width {self.width}")
        self.prior = Tensor(np.array(prior, dtype=T.DTYPE), requires_grad=True, name="prior")
        self.train_extents = (rows, cols)
        self.initialized = True


def prior_init_from(bank: RegionalPriorBank, local: np.ndarray | Tensor, rows: int, cols: int) -> None:
    """Copy the batch-mean of ``local`` into ``bank``; no-op once initialized."""
    if bank.initialized:
        return
    data = local.data if isinstance(local, Tensor) else np.asarray(local)
    if data.ndim == 3:
        data = data.mean(axis=0)
    if bank.train_extents is not None and bank.train_extents != (rows, cols):
        raise ValueError(f"local grid {rows}×{cols} does not match bank extents {bank.train_extents}")
    bank.load(data, rows, cols)


def fuse(local: Tensor, prior: Tensor) -> Tensor:
    if local.shape[:-1] != prior.shape[:-1]:
        raise ValueError(f"token rows differ: local {local.shape} vs prior {prior.shape}")
    return T.concat_lastdim(local, prior)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred, edge-clamped linear interpolation as an (n_out, n_in) matrix."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def _token_image_index(rows: int, cols: int, s: int) -> np.ndarray:
    r, c, sy, sx = np.meshgrid(np.arange(rows), np.arange(cols), np.arange(s), np.arange(s), indexing="ij")
    return ((r * s + sy) * (cols * s) + (c * s + sx)).reshape(-1)


def resample_prior(bank: RegionalPriorBank, rows: int, cols: int) -> Tensor:
    if not bank.initialized:
        raise PriorNotInitialized("regional prior bank used before first-batch initialization")
    rows0, cols0 = bank.train_extents
    if (rows, cols) == (rows0, cols0):
        return bank.prior
    s = math.isqrt(bank.k)
    img = np.kron(bilinear_matrix(rows0 * s, rows * s), bilinear_matrix(cols0 * s, cols * s))
    m = img[np.ix_(_token_image_index(rows, cols, s), _token_image_index(rows0, cols0, s))]
    return T.matmul(T.tensor(m), bank.prior, tag="interp")


def dyn_token_self_attention(d: Tensor, block: TransformerBlock) -> tuple[Tensor, np.ndarray]:
    return block(d)


def window_attention_with_dyn(g: WindowGrid, dstar: Tensor | None, block: TransformerBlock,
                              keep_attn: bool = False) -> tuple[WindowGrid, np.ndarray | None]:
    """Window MSA over ``[dynamic tokens ‖ window tokens]``; the dynamic rows are dropped."""
    x = g.tokens
    *lead, nw, t, c = x.shape
    k = 0
    if dstar is not None:
        nc = dstar.shape[-2]
        if nc % nw or nc == 0:
            raise ValueError(f"{nc} dynamic tokens cannot be split over {nw} windows")
        k = nc // nw
        z = T.concat((T.reshape(dstar, (*lead, nw, k, c)), x), axis=-2)
    else:
        z = x
    n = k + t
    heads = block.attn.heads
    batch = int(np.prod(lead, dtype=np.int64)) if lead else 1
    per_window = heads * n * n * 8
    if T.is_grad_enabled() or batch * nw * per_window <= _CHUNK_BYTES:
        o, attn = block(z)
    else:
        step = max(1, _CHUNK_BYTES // (batch * per_window))
        outs, maps = [], []
        for start in range(0, nw, step):
            oc, ac = block(T.slice_axis(z, -3, start, min(nw, start + step)))
            outs.append(oc)
            if keep_attn:
                maps.append(ac)
        o = T.concat(outs, axis=-3)
        attn = np.concatenate(maps, axis=-4) if keep_attn else None
    if k:
        o = T.slice_axis(o, -2, k, n)
    return WindowGrid(o, g.w, g.rows, g.cols), (attn if keep_attn else None)


def dynamic_attention_mass(attn: np.ndarray, k: int, rows: int, cols: int) -> np.ndarray:
    """Mean (over heads and window-token queries) attention mass on the k dynamic keys."""
    mass = attn[..., k:, :k].sum(axis=-1).mean(axis=(-1, -2))
    return mass.reshape(mass.shape[:-1] + (rows, cols))


class RpaLayer(Module):
    def __init__(self, dim: int, heads: int, w: int, k: int, variant: str,
                 rng: np.random.Generator, mlp_ratio: int = 4, pad_mode: str = "zero"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if dim % heads:
            raise ValueError(f"channels {dim} not divisible by heads {heads}")
        if k:
            tokens_per_side(k, w)
        self.dim, self.heads, self.w, self.k, self.variant = dim, heads, w, k, variant
        self.tokenizer: LocalTokenizer | None = None
        self.bank: RegionalPriorBank | None = None
        self.dyn: TransformerBlock | None = None
        if k:
            if variant == "rpt":
                if dim % 2:
                    raise ValueError("rpt variant needs an even channel count")
                self.tokenizer = LocalTokenizer(dim, dim // 2, rng, pad_mode)
                self.bank = RegionalPriorBank(dim // 2, k)
            elif variant == "baseline":
                self.tokenizer = LocalTokenizer(dim, dim, rng, pad_mode)
            else:
                self.bank = RegionalPriorBank(dim, k)
            self.dyn = TransformerBlock(dim, heads, rng, mlp_ratio)
        self.win = TransformerBlock(dim, heads, rng, mlp_ratio)
        self.probe = False
        self.last_attention: np.ndarray | None = None
        self.last_local: np.ndarray | None = None

    def dynamic_tokens(self, f: Tensor, rows: int, cols: int, init_priors: bool = False) -> Tensor:
        batch = f.shape[:-3]
        if self.variant == "baseline":
            return local_tokens(f, self.tokenizer, self.w, self.k)
        if self.variant == "rpt":
            loc = local_tokens(f, self.tokenizer, self.w, self.k)
            self.last_local = loc.data
            if init_priors:
                prior_init_from(self.bank, loc.data, rows, cols)
            return fuse(loc, self._prior(rows, cols, batch))
        if init_priors and not self.bank.initialized:
            # no tokenizer in the static variant: seed the bank with window-mean features
            s = tokens_per_side(self.k, self.w)
            with T.no_grad():
                pooled = grid_to_tokens(T.avg_pool2d(f, self.w // s), s)
            self.last_local = pooled.data
            prior_init_from(self.bank, pooled.data, rows, cols)
        return self._prior(rows, cols, batch)

    def _prior(self, rows: int, cols: int, batch: tuple[int, ...]) -> Tensor:
        r = resample_prior(self.bank, rows, cols)
        return T.expand_batch(r, batch[0]) if batch else r

    def __call__(self, f: Tensor, init_priors: bool = False) -> Tensor:
        return rpa_layer(f, self, init_priors)


def rpa_layer(f: Tensor, layer: RpaLayer, init_priors: bool = False) -> Tensor:
    c, h, wd = f.shape[-3:]
    g = window_partition(f, layer.w)
    dstar = None
    if layer.k:
        d = layer.dynamic_tokens(f, g.rows, g.cols, init_priors)
        dstar, _ = dyn_token_self_attention(d, layer.dyn)
    out, attn = window_attention_with_dyn(g, dstar, layer.win, keep_attn=layer.probe)
    if layer.probe:
        layer.last_attention = attn
    return window_merge(out, c, h, wd)


class RpaBlock(Module):
    """Layers at one window size wrapped by an outer residual."""

    def __init__(self, layers: list[RpaLayer]):
        if len({l.dim for l in layers}) > 1:
            raise ValueError("all layers in a block must share the channel count")
        self.layers = layers

    def __call__(self, f: Tensor, init_priors: bool = False) -> Tensor:
        return rpa_block(f, self.layers, init_priors)


def rpa_block(f: Tensor, layers: list[RpaLayer], init_priors: bool = False) -> Tensor:
    x = f
    for layer in layers:
        x = layer(x, init_priors)
    return T.add(f, x)
