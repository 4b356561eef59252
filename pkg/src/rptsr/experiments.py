"""Desk-scale ablation: baseline / static / rpt on the synthetic fixed-layout scenes."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import LayoutSpec, PairedDataset, synth_dataset
from .model import build, preset
from .rpa import VARIANTS
from .training import TrainConfig, evaluate_l1, train


@dataclass
class AblationResult:
    val_l1: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, variant: str) -> float:
        return float(np.mean(self.val_l1[variant]))


def synth_split(frames: int = 64, val_frames: int = 16, size: int = 32, scale: int = 2,
                layout_seed: int = 0) -> tuple[PairedDataset, PairedDataset]:
    spec = LayoutSpec(seed=layout_seed)
    train_ds = PairedDataset(synth_dataset(frames, size, size, spec, first_seed=0), scale)
    val_ds = PairedDataset(synth_dataset(val_frames, size, size, spec, first_seed=100_000), scale)
    return train_ds, val_ds


def run_ablation(seeds=(0, 1, 2), iterations: int = 2000, frames: int = 64, val_frames: int = 16,
                 size: int = 32, batch: int = 4, variants=VARIANTS, progress=None) -> AblationResult:
    start = time.perf_counter()
    train_ds, val_ds = synth_split(frames, val_frames, size)
    res = AblationResult({v: [] for v in variants})
    for seed in seeds:
        for variant in variants:
            model = build(preset("tiny", variant=variant), seed)
            train(model, train_ds, TrainConfig(iterations=iterations, batch_size=batch, seed=seed))
            l1 = evaluate_l1(model, val_ds)
            res.val_l1[variant].append(l1)
            if progress:
                progress(seed, variant, l1)
    res.seconds = time.perf_counter() - start
    return res
