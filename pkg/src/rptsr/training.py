"""Loss, Adam with per-group rate multipliers, MultiStep schedule, training loop, checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import rten
from . import tensor as T
from .data import BatchSampler, PairedDataset
from .model import ModelConfig, RptSrModel, build
from .tensor import Tensor

log = logging.getLogger(__name__)

PRIOR_LR_MULT = 50.0


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    return T.mean(T.abs_(T.sub(pred, target)))


def psnr(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"psnr: shape mismatch {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant rate, multiplied by ``gamma`` at each milestone (given as run fractions)."""

    total: int = 100_000
    base_lr: float = 5e-4
    milestones: tuple[float, ...] = (0.50, 0.80, 0.90, 0.925)
    gamma: float = 0.5

    @property
    def milestone_iters(self) -> list[int]:
        return [int(round(f * self.total)) for f in self.milestones]

    def lr_at(self, t: int) -> float:
        drops = sum(1 for m in self.milestone_iters if m <= t)
        return self.base_lr * self.gamma ** drops


def lr_at(s: Schedule, t: int) -> float:
    return s.lr_at(t)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class ParamGroup:
    params: list[tuple[str, Tensor]]
    lr_mult: float = 1.0


class MissingGradient(RuntimeError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def param_groups(model: RptSrModel, prior_mult: float = PRIOR_LR_MULT) -> list[ParamGroup]:
    base, prior = [], []
    for name, p in model.named_parameters():
        (prior if name.endswith("bank.prior") else base).append((name, p))
    groups = [ParamGroup(base, 1.0)]
    if prior:
        groups.append(ParamGroup(prior, prior_mult))
    return groups


def adam_step(groups: list[ParamGroup], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam with effective rate ``lr * group.lr_mult``; updates in place."""
    for g in groups:
        for name, p in g.params:
            if p.grad is None:
                raise MissingGradient(f"no gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for g in groups:
        step = lr * g.lr_mult
        for name, p in g.params:
            grad = p.grad
            m = state.m.get(name)
            v = state.v.get(name)
            m = (1 - b1) * grad if m is None else b1 * m + (1 - b1) * grad
            v = (1 - b2) * grad * grad if v is None else b2 * v + (1 - b2) * grad * grad
            state.m[name], state.v[name] = m, v
            p.data = p.data - step * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# training loop

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 200
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 0
    prior_lr_mult: float = PRIOR_LR_MULT


@dataclass
class TrainState:
    model: RptSrModel
    adam: AdamState
    groups: list[ParamGroup] | None
    iteration: int
    seed: int
    history: list[tuple[int, float, float, float]] = field(default_factory=list)


def train(model: RptSrModel, dataset: PairedDataset, run: TrainConfig, schedule: Schedule | None = None,
          on_log: Callable[[int, float, float, float], None] | None = None,
          on_checkpoint: Callable[[TrainState], None] | None = None) -> TrainState:
    """Fit ``model`` with L1 loss; uninitialized prior banks are filled from the first batch."""
    schedule = schedule or Schedule(total=run.iterations)
    rng = np.random.default_rng([run.seed, 17])
    sampler = BatchSampler(dataset, run.batch_size, rng)
    state = TrainState(model, AdamState(), None, 0, run.seed)
    for it in range(run.iterations):
        lr = schedule.lr_at(it)
        lr_img, hr_img = sampler.next()
        model.zero_grad()
        try:
            pred = model(T.tensor(lr_img), init_priors=not model.priors_initialized())
            loss = l1_loss(pred, T.tensor(hr_img))
            T.backward(loss)
        except T.NonFiniteError as exc:
            raise TrainingDiverged(f"iteration {it + 1}: {exc}") from exc
        if state.groups is None:
            # built after the first forward so freshly initialized prior banks are included
            state.groups = param_groups(model, run.prior_lr_mult)
        adam_step(state.groups, state.adam, lr)
        state.iteration = it + 1
        row = (it + 1, lr, float(loss.data), psnr(pred.data, hr_img))
        state.history.append(row)
        if on_log:
            on_log(*row)
        if on_checkpoint and run.checkpoint_every and state.iteration % run.checkpoint_every == 0:
            on_checkpoint(state)
    return state


def evaluate_l1(model: RptSrModel, dataset: PairedDataset) -> float:
    """Mean L1 over full frames of ``dataset``."""
    with T.no_grad():
        vals = [float(l1_loss(model(T.tensor(p.lr)), T.tensor(p.hr)).data)
                for p in (dataset.get(i) for i in range(len(dataset)))]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"RPTSR1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    priors: dict[str, dict]
    adam: AdamState | None
    iteration: int
    seed: int


def _layer_names(model: RptSrModel) -> list[tuple[str, object]]:
    return [(f"blocks.{b}.layers.{i}", l) for b, blk in enumerate(model.blocks) for i, l in enumerate(blk.layers)]


def save_checkpoint(path: str | Path, model: RptSrModel, adam: AdamState | None = None,
                    iteration: int = 0, seed: int = 0) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, adam, iteration, seed))


def checkpoint_bytes(model: RptSrModel, adam: AdamState | None = None, iteration: int = 0, seed: int = 0) -> bytes:
    params = dict(model.named_parameters())
    priors = {}
    for name, layer in _layer_names(model):
        if layer.bank is not None:
            priors[name] = {"initialized": layer.bank.initialized,
                            "train_extents": list(layer.bank.train_extents) if layer.bank.train_extents else None}
    records = [(f"param/{n}", p.data) for n, p in params.items()]
    header = {
        "config": model.cfg.to_dict(),
        "iteration": iteration,
        "seed": seed,
        "priors": priors,
        "adam": None,
    }
    if adam is not None:
        header["adam"] = {"beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t}
        records += [(f"adam_m/{n}", adam.m[n]) for n in params if n in adam.m]
        records += [(f"adam_v/{n}", adam.v[n]) for n in params if n in adam.v]
    header["tensors"] = [n for n, _ in records]
    head = json.dumps(header, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<I", len(head)), head]
    out += [rten.dumps(np.ascontiguousarray(a)) for _, a in records]
    return b"".join(out)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"not an {MAGIC.decode()} checkpoint (magic {buf[:len(MAGIC)]!r})")
    pos = len(MAGIC)
    if len(buf) < pos + 4:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + n:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(buf[pos:pos + n])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    pos += n
    arrays = {}
    for name in header["tensors"]:
        try:
            arrays[name], pos = rten.read_from(buf, pos)
        except rten.RtenError as exc:
            raise CheckpointError(f"tensor {name}: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes in checkpoint")
    adam = None
    if header["adam"] is not None:
        a = header["adam"]
        adam = AdamState(a["beta1"], a["beta2"], a["eps"], a["t"],
                         {k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
                         {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")})
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        params={k[6:]: v for k, v in arrays.items() if k.startswith("param/")},
        priors=header["priors"],
        adam=adam,
        iteration=header["iteration"],
        seed=header["seed"],
    )


def load_into(model: RptSrModel, ckpt: Checkpoint) -> RptSrModel:
    if model.cfg != ckpt.config:
        raise CheckpointError(f"checkpoint config {ckpt.config} does not match model config {model.cfg}")
    for name, layer in _layer_names(model):
        flag = ckpt.priors.get(name)
        if layer.bank is None or not flag or not flag["initialized"]:
            continue
        rows, cols = flag["train_extents"]
        layer.bank.load(ckpt.params[f"{name}.bank.prior"], rows, cols)
    params = dict(model.named_parameters())
    if set(params) != set(ckpt.params):
        missing = sorted(set(params) ^ set(ckpt.params))
        raise CheckpointError(f"parameter sets differ: {missing[:5]}")
    for name, p in params.items():
        if p.shape != ckpt.params[name].shape:
            raise CheckpointError(f"{name}: shape {ckpt.params[name].shape} vs model {p.shape}")
        p.data = np.array(ckpt.params[name], dtype=T.DTYPE)
    return model


def restore_model(ckpt: Checkpoint) -> RptSrModel:
    return load_into(build(ckpt.config, ckpt.seed), ckpt)
