"""Stem -> RPA body -> pixel-shuffle head, configured declaratively."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Conv2d, Module
from .rpa import VARIANTS, RegionalPriorBank, RpaBlock, RpaLayer, dynamic_attention_mass, tokens_per_side
from .tensor import Tensor
from .windowing import crop, pad_to_multiple


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    blocks: int = 2
    layers_per_block: int = 2
    heads: int = 2
    window_schedule: tuple[int, ...] = (4, 4)
    k: int = 1
    scale: int = 2
    variant: str = "rpt"
    image_channels: int = 3
    pad_mode: str = "zero"
    mlp_ratio: int = 4

    def validate(self) -> "ModelConfig":
        if len(self.window_schedule) != self.blocks:
            raise ValueError(f"window schedule {self.window_schedule} needs one entry per block ({self.blocks})")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "rpt" and self.channels % 2:
            raise ValueError("rpt variant needs an even channel count")
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.k < 0 or self.blocks < 1 or self.layers_per_block < 1:
            raise ValueError("k must be >= 0 and blocks/layers_per_block >= 1")
        if self.pad_mode not in ("zero", "circular"):
            raise ValueError(f"pad_mode must be zero or circular, got {self.pad_mode!r}")
        if self.k:
            for w in self.window_schedule:
                tokens_per_side(self.k, w)
        return self

    @property
    def pad_multiple(self) -> int:
        return math.lcm(*self.window_schedule)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["window_schedule"] = list(self.window_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["window_schedule"] = tuple(d["window_schedule"])
        return cls(**d).validate()


PRESETS = {
    "classical": ModelConfig(channels=240, blocks=4, layers_per_block=4, heads=6,
                             window_schedule=(8, 16, 16, 32), k=1, scale=4),
    "light": ModelConfig(channels=80, blocks=4, layers_per_block=4, heads=4,
                         window_schedule=(8, 8, 16, 16), k=1, scale=4),
    "tiny": ModelConfig(channels=16, blocks=2, layers_per_block=2, heads=2,
                        window_schedule=(4, 4), k=1, scale=2),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if "window_schedule" in overrides:
        overrides["window_schedule"] = tuple(overrides["window_schedule"])
    return dataclasses.replace(base, **overrides).validate()


class RptSrModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        c, pm = cfg.channels, cfg.pad_mode
        self.cfg = cfg
        self.stem = Conv2d(cfg.image_channels, c, 3, rng, pad_mode=pm)
        self.blocks = [
            RpaBlock([RpaLayer(c, cfg.heads, w, cfg.k, cfg.variant, rng, cfg.mlp_ratio, pm)
                      for _ in range(cfg.layers_per_block)])
            for w in cfg.window_schedule
        ]
        self.aggregate = Conv2d(c, c, 3, rng, pad_mode=pm)
        self.upsample = Conv2d(c, c * cfg.scale ** 2, 3, rng, pad_mode=pm)
        self.final = Conv2d(c, cfg.image_channels, 3, rng, pad_mode=pm)

    def layers(self) -> list[RpaLayer]:
        return [l for b in self.blocks for l in b.layers]

    def prior_banks(self) -> list[RegionalPriorBank]:
        return [l.bank for l in self.layers() if l.bank is not None]

    def priors_initialized(self) -> bool:
        return all(b.initialized for b in self.prior_banks())

    def body(self, f0: Tensor, init_priors: bool = False) -> Tensor:
        f, rec = pad_to_multiple(f0, self.cfg.pad_multiple)
        for block in self.blocks:
            f = block(f, init_priors)
        return crop(f, rec)

    def head(self, f0: Tensor, feats: Tensor) -> Tensor:
        f = T.add(self.aggregate(feats), f0)
        return self.final(T.pixel_shuffle(self.upsample(f), self.cfg.scale))

    def __call__(self, x: Tensor, init_priors: bool = False) -> Tensor:
        return forward(self, x, init_priors)


def build(cfg: ModelConfig, seed: int = 0) -> RptSrModel:
    return RptSrModel(cfg, np.random.default_rng(seed))


def forward(m: RptSrModel, x: Tensor, init_priors: bool = False) -> Tensor:
    """Super-resolve ``x`` of shape (3, H, W) or (B, 3, H, W).

    With ``init_priors`` every still-uninitialized prior bank copies the local
    tokens it sees in this pass (batch mean) before using them.
    """
    h, w = x.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError(f"non-positive extents {h}×{w}")
    f0 = m.stem(x)
    return m.head(f0, m.body(f0, init_priors))


def set_pad_mode(m: Module, mode: str) -> None:
    for mod in m.modules():
        if isinstance(mod, Conv2d):
            mod.pad_mode = mode


# ---------------------------------------------------------------------------
# cost accounting

def count_macs_analytic(cfg: ModelConfig, h: int, w: int) -> dict[str, int]:
    """Multiply-accumulates of one forward pass on a single (3, h, w) input, by category."""
    cfg.validate()
    c, r, k, ratio = cfg.channels, cfg.scale, cfg.k, cfg.mlp_ratio
    img = cfg.image_channels
    p = cfg.pad_multiple
    hp, wp = -(-h // p) * p, -(-w // p) * p
    out = {"conv": 0, "proj": 0, "attn_core": 0, "mlp": 0}
    out["conv"] += 9 * img * c * h * w          # stem
    out["conv"] += 9 * c * c * h * w            # aggregation
    out["conv"] += 9 * c * c * r * r * h * w    # upsampler
    out["conv"] += 9 * c * img * (r * h) * (r * w)
    c_loc = {"rpt": c // 2, "baseline": c, "static": 0}[cfg.variant]
    for win in cfg.window_schedule:
        nw = (hp // win) * (wp // win)
        n = k + win * win
        nc = k * nw
        per_layer = {"conv": 0, "proj": 0, "attn_core": 0, "mlp": 0}
        if k:
            per_layer["conv"] += (c * c_loc + 9 * c_loc) * hp * wp
            per_layer["proj"] += nc * 4 * c * c
            per_layer["attn_core"] += 2 * nc * nc * c
            per_layer["mlp"] += nc * 2 * ratio * c * c
        per_layer["proj"] += nw * n * 4 * c * c
        per_layer["attn_core"] += nw * 2 * n * n * c
        per_layer["mlp"] += nw * n * 2 * ratio * c * c
        for key, val in per_layer.items():
            out[key] += cfg.layers_per_block * val
    out["total"] = sum(out.values())
    return out


def count_flops(cfg: ModelConfig, h: int, w: int) -> int:
    """Analytic FLOPs (2 × MAC) of one forward pass."""
    return 2 * count_macs_analytic(cfg, h, w)["total"]


def window_attention_core_flops(k: int, w: int, c: int) -> int:
    """FLOPs of score computation plus value aggregation for one window of k + w² tokens."""
    n = k + w * w
    return 2 * 2 * n * n * c


def instrumented_flops(m: RptSrModel, x: Tensor) -> dict[str, int]:
    """Run a forward pass with the multiply counter on; FLOPs per category (interpolation excluded)."""
    with T.no_grad(), T.count_macs() as counter:
        forward(m, x)
    out = {key: 2 * counter[key] for key in ("conv", "proj", "attn_core", "mlp")}
    out["total"] = 2 * counter.total(exclude=("interp",))
    return out


# ---------------------------------------------------------------------------
# introspection

def attention_probe(m: RptSrModel, x: Tensor, block_idx: int = -1, layer_idx: int = -1) -> np.ndarray:
    """Per-window attention mass that window tokens put on the dynamic tokens, shape (rows, cols).

    Values lie in [0, 1]. A batched input gives a leading batch axis.
    """
    if m.cfg.k == 0:
        raise ValueError("attention probe needs dynamic tokens; k=0 configuration has none")
    try:
        layer = m.blocks[block_idx].layers[layer_idx]
    except IndexError:
        raise IndexError(f"probe index block={block_idx}, layer={layer_idx} out of range") from None
    layer.probe = True
    try:
        with T.no_grad():
            forward(m, x)
        attn = layer.last_attention
    finally:
        layer.probe = False
        layer.last_attention = None
    p = m.cfg.pad_multiple
    h, w = x.shape[-2:]
    rows, cols = -(-h // p) * p // layer.w, -(-w // p) * p // layer.w
    return dynamic_attention_mass(attn, layer.k, rows, cols)
