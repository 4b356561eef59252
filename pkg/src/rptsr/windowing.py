"""Non-overlapping w×w window partition/merge and reflect padding.

Windows are ordered row-major (``j = row * cols + col``) and tokens inside a
window are row-major as well (``t = y * w + x``). That ordering is what ties
local tokens, prior tokens and windows together downstream.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class PadRecord:
    pad_h: int
    pad_w: int
    height: int
    width: int


@dataclass
class WindowGrid:
    tokens: Tensor  # (..., N_w, w*w, C)
    w: int
    rows: int
    cols: int

    @property
    def num_windows(self) -> int:
        return self.rows * self.cols


def pad_to_multiple(f: Tensor, w: int) -> tuple[Tensor, PadRecord]:
    if w < 1:
        raise ValueError(f"window edge must be >= 1, got {w}")
    h, wd = f.shape[-2:]
    ph, pw = -h % w, -wd % w
    rec = PadRecord(ph, pw, h, wd)
    if ph == 0 and pw == 0:
        return f, rec
    rows = np.pad(np.arange(h), (0, ph), mode="reflect")
    cols = np.pad(np.arange(wd), (0, pw), mode="reflect")
    return T.gather_hw(f, rows, cols), rec


def crop(f: Tensor, rec: PadRecord) -> Tensor:
    if rec.pad_h == 0 and rec.pad_w == 0:
        return f
    out = T.slice_axis(f, -2, 0, rec.height)
    return T.slice_axis(out, -1, 0, rec.width)


def window_partition(f: Tensor, w: int) -> WindowGrid:
    *lead, c, h, wd = f.shape
    if h % w or wd % w:
        raise ValueError(f"extents {h}×{wd} not divisible by window {w}; pad first")
    rows, cols = h // w, wd // w
    n = len(lead)
    x = T.reshape(f, (*lead, c, rows, w, cols, w))
    x = T.transpose(x, (*range(n), n + 1, n + 3, n + 2, n + 4, n))
    x = T.reshape(x, (*lead, rows * cols, w * w, c))
    return WindowGrid(x, w, rows, cols)


def window_merge(g: WindowGrid, c: int, h: int, w: int) -> Tensor:
    *lead, nw, t, cc = g.tokens.shape
    if cc != c or h != g.rows * g.w or w != g.cols * g.w or nw != g.num_windows or t != g.w * g.w:
        raise ValueError(f"window grid {g.tokens.shape} (w={g.w}) inconsistent with {c}×{h}×{w}")
    n = len(lead)
    x = T.reshape(g.tokens, (*lead, g.rows, g.cols, g.w, g.w, c))
    x = T.transpose(x, (*range(n), n + 4, n, n + 2, n + 1, n + 3))
    return T.reshape(x, (*lead, c, h, w))
