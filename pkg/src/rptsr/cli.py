"""Command-line entry point: ``rptsr {train,infer,eval,bench,attnmap,gradcheck}``.

Configuration is a flat text file of ``key = value`` lines (``#`` starts a comment),
optionally followed by ``key=value`` overrides on the command line. Relative paths in a
config file resolve against the file's directory; overrides resolve against the cwd.

Exit codes: 0 success, 1 verification failure or divergence, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import statistics
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import ImageFormatError, PairedDataset, load_dataset_dir, read_image, synth_dataset, to_rgb, write_image
from .gradcheck import run_gradcheck
from .layers import TransformerBlock
from .model import (
    ModelConfig, attention_probe, build, count_macs_analytic, forward, instrumented_flops, preset,
    window_attention_core_flops,
)
from .rpa import PriorNotInitialized, window_attention_with_dyn
from .training import (
    CheckpointError, Schedule, TrainConfig, TrainingDiverged, load_checkpoint, psnr, restore_model,
    save_checkpoint, train,
)
from .windowing import window_partition

log = logging.getLogger("rptsr")

COMMANDS = ("train", "infer", "eval", "bench", "attnmap", "gradcheck")
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "train"
    # model: a preset plus optional field overrides
    preset: str = "tiny"
    channels: int | None = None
    blocks: int | None = None
    layers_per_block: int | None = None
    heads: int | None = None
    windows: tuple[int, ...] | None = None
    k: int | None = None
    scale: int | None = None
    variant: str | None = None
    pad_mode: str | None = None
    mlp_ratio: int | None = None
    # data
    data: str = "synth"
    frames: int = 64
    size: int = 32
    patch: int = 0
    # optimization
    seed: int = 0
    iters: int = 200
    batch: int = 4
    lr: float = 5e-4
    prior_mult: float = 50.0
    ckpt_every: int = 0
    # inputs and outputs
    checkpoint: str | None = None
    checkpoints: tuple[str, ...] = ()
    input: str | None = None
    pred: str | None = None
    gt: str | None = None
    out: str = "out"
    # probe, bench, gradcheck
    block: int = -1
    layer: int = -1
    runs: int = 10
    height: int = 32
    width: int = 32
    sweep: bool = False
    op: str | None = None
    seeds: int = 20

    def model_config(self) -> ModelConfig:
        keys = ("channels", "blocks", "layers_per_block", "heads", "k", "scale", "variant", "pad_mode", "mlp_ratio")
        over = {key: getattr(self, key) for key in keys if getattr(self, key) is not None}
        if self.windows is not None:
            over["window_schedule"] = self.windows
        return preset(self.preset, **over).validate()

    @property
    def out_dir(self) -> Path:
        p = Path(self.out)
        p.mkdir(parents=True, exist_ok=True)
        return p


def _bool(s: str) -> bool:
    if s.lower() in ("true", "false"):
        return s.lower() == "true"
    raise ValueError(f"expected true/false, got {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


_PARSERS = {
    "preset": str, "channels": int, "blocks": int, "layers_per_block": int, "heads": int, "windows": _ints,
    "k": int, "scale": int, "variant": str, "pad_mode": str, "mlp_ratio": int,
    "data": str, "frames": int, "size": int, "patch": int,
    "seed": int, "iters": int, "batch": int, "lr": float, "prior_mult": float, "ckpt_every": int,
    "checkpoint": str, "checkpoints": _strs, "input": str, "pred": str, "gt": str, "out": str,
    "block": int, "layer": int, "runs": int, "height": int, "width": int, "sweep": _bool,
    "op": str, "seeds": int,
}
_PATH_KEYS = {"data", "checkpoint", "checkpoints", "input", "pred", "gt", "out"}
assert set(_PARSERS) == {f.name for f in dataclasses.fields(RunConfig)} - {"command"}


def _resolve(key: str, value, base: Path | None):
    if base is None or key not in _PATH_KEYS or (key == "data" and value == "synth"):
        return value
    if isinstance(value, tuple):
        return tuple(str(base / v) for v in value)
    return str(base / value)


def parse_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, value = (s.strip() for s in text.split("=", 1))
    if key not in _PARSERS:
        raise ConfigError(f"unknown config key {key!r}")
    return key, value


def apply(cfg: RunConfig, key: str, raw: str, base: Path | None = None) -> None:
    try:
        value = _PARSERS[key](raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None
    setattr(cfg, key, _resolve(key, value, base))


def read_config_file(path: str | Path, cfg: RunConfig) -> None:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, raw = parse_assignment(line)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{n}: {exc}") from None
        apply(cfg, key, raw, path.parent)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "command" or v is None or v == ():
            continue
        if f.name in _PATH_KEYS and v != "synth":
            # absolute, so the dump stays valid wherever it is read from
            v = tuple(str(Path(x).resolve()) for x in v) if isinstance(v, tuple) else str(Path(v).resolve())
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# helpers

def _dataset(cfg: RunConfig, scale: int, first_seed: int = 0) -> PairedDataset:
    if cfg.data == "synth":
        return PairedDataset(synth_dataset(cfg.frames, cfg.size, cfg.size, first_seed=first_seed), scale,
                             cfg.patch or None)
    return load_dataset_dir(cfg.data, scale, cfg.patch or None)


def _require(cfg: RunConfig, key: str):
    value = getattr(cfg, key)
    if not value:
        raise ConfigError(f"{cfg.command} needs {key}=...")
    return value


def _load_model(path: str):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return restore_model(load_checkpoint(p))


def _fmt(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# commands

def cmd_train(cfg: RunConfig) -> int:
    mcfg = cfg.model_config()
    ds = _dataset(cfg, mcfg.scale)
    out = cfg.out_dir
    (out / "config.txt").write_text(dump_config(cfg))
    model = build(mcfg, cfg.seed)
    run = TrainConfig(iterations=cfg.iters, batch_size=cfg.batch, seed=cfg.seed,
                      checkpoint_every=cfg.ckpt_every, prior_lr_mult=cfg.prior_mult)
    schedule = Schedule(total=cfg.iters, base_lr=cfg.lr)
    with open(out / "train_log.csv", "w") as fh:
        fh.write("iter,lr,loss,psnr\n")

        def on_log(it, lr, loss, p):
            fh.write(f"{it},{_fmt(lr)},{_fmt(loss)},{_fmt(p)}\n")
            if it % 50 == 0 or it == cfg.iters:
                log.info("iter %d  lr %.3g  loss %.5f  psnr %.2f", it, lr, loss, p)

        def on_ckpt(state):
            save_checkpoint(out / f"ckpt_{state.iteration:06d}.ckpt", model, state.adam, state.iteration, cfg.seed)

        state = train(model, ds, run, schedule, on_log, on_ckpt)
    save_checkpoint(out / "final.ckpt", model, state.adam, state.iteration, cfg.seed)
    print(f"trained {state.iteration} iterations; final loss {state.history[-1][2]:.6f}; "
          f"checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def super_resolve(model, img: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return forward(model, T.tensor(to_rgb(img))).data


def cmd_infer(cfg: RunConfig) -> int:
    model = _load_model(_require(cfg, "checkpoint"))
    src = Path(_require(cfg, "input"))
    img = read_image(src)
    sr = super_resolve(model, img)
    if img.shape[0] == 1:
        sr = sr.mean(axis=0, keepdims=True)
    dst = cfg.out_dir / f"{src.stem}_x{model.cfg.scale}{'.pgm' if sr.shape[0] == 1 else '.ppm'}"
    write_image(dst, sr)
    print(f"{src} {img.shape[2]}x{img.shape[1]} -> {dst} {sr.shape[2]}x{sr.shape[1]}")
    return EXIT_OK


def _pairs_from_dirs(pred: Path, gt: Path) -> list[tuple[str, np.ndarray, np.ndarray]]:
    for d in (pred, gt):
        if not d.is_dir():
            raise FileNotFoundError(f"dataset not found: {d}")
    names = lambda d: sorted(p.name for p in d.iterdir() if p.suffix in (".pgm", ".ppm"))
    a, b = names(pred), names(gt)
    if a != b:
        raise ConfigError(f"unpaired files: {sorted(set(a) ^ set(b))[:5]}")
    if not a:
        raise FileNotFoundError(f"dataset not found: no images in {gt}")
    return [(n, read_image(pred / n), read_image(gt / n)) for n in a]


def cmd_eval(cfg: RunConfig) -> int:
    if cfg.pred or cfg.gt:
        rows = _pairs_from_dirs(Path(_require(cfg, "pred")), Path(_require(cfg, "gt")))
    else:
        model = _load_model(_require(cfg, "checkpoint"))
        ds = _dataset(cfg, model.cfg.scale, first_seed=100_000 if cfg.data == "synth" else 0)
        rows = [(f"{i:04d}", super_resolve(model, ds.lr[i]), ds.hr[i]) for i in range(len(ds))]
    lines = ["name,psnr,l1"]
    ps, ls = [], []
    for name, p, g in rows:
        if p.shape != g.shape:
            raise ConfigError(f"{name}: prediction {p.shape} vs ground truth {g.shape}")
        ps.append(psnr(p, g))
        ls.append(float(np.mean(np.abs(p - g))))
        lines.append(f"{name},{_fmt(ps[-1])},{_fmt(ls[-1])}")
    lines.append(f"mean,{_fmt(np.mean(ps))},{_fmt(np.mean(ls))}")
    text = "\n".join(lines) + "\n"
    (cfg.out_dir / "eval.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def attention_core_sweep(channels: int, ks=(0, 1, 2, 4), windows=(8,), seed: int = 0) -> list[dict]:
    """Measure attention-core FLOPs of one window for each (w, k) and compare with the closed form."""
    rng = np.random.default_rng(seed)
    rows = []
    for w in windows:
        block = TransformerBlock(channels, 1, rng)
        grid = window_partition(T.tensor(rng.standard_normal((channels, w, w))), w)
        measured = {}
        for k in ks:
            dstar = T.tensor(rng.standard_normal((k, channels))) if k else None
            with T.no_grad(), T.count_macs() as counter:
                window_attention_with_dyn(grid, dstar, block)
            measured[k] = 2 * counter["attn_core"]
        for k in ks:
            inc = measured[k] - measured[0] if 0 in measured else None
            expected = 4 * channels * (2 * k * w * w + k * k)
            rows.append({"w": w, "k": k, "flops": measured[k], "analytic": window_attention_core_flops(k, w, channels),
                         "increment": inc, "expected_increment": expected,
                         "deviation": None if inc is None else inc - expected})
    return rows


def cmd_bench(cfg: RunConfig) -> int:
    mcfg = cfg.model_config()
    h, w = cfg.height, cfg.width
    model = build(mcfg, cfg.seed)
    x = T.tensor(np.random.default_rng(cfg.seed).uniform(0, 1, (mcfg.image_channels, h, w)))
    with T.no_grad():
        forward(model, x, init_priors=True)
    analytic = {k: 2 * v for k, v in count_macs_analytic(mcfg, h, w).items()}
    measured = instrumented_flops(model, x)
    times = []
    with T.no_grad():
        forward(model, x)  # warm-up
        for _ in range(max(cfg.runs, 1)):
            t0 = time.perf_counter()
            forward(model, x)
            times.append(time.perf_counter() - t0)
    ok = analytic["total"] == measured["total"]
    lines = ["metric,value"]
    for key in ("conv", "proj", "attn_core", "mlp", "total"):
        lines.append(f"analytic_flops_{key},{analytic[key]}")
        lines.append(f"instrumented_flops_{key},{measured[key]}")
    lines += [f"flops_match,{str(ok).lower()}", f"runs,{len(times)}",
              f"seconds_mean,{statistics.fmean(times):.6f}",
              f"seconds_stdev,{statistics.stdev(times) if len(times) > 1 else 0.0:.6f}"]
    print(f"preset={cfg.preset} variant={mcfg.variant} k={mcfg.k} input={h}x{w}")
    print("\n".join(lines))
    (cfg.out_dir / "bench.csv").write_text("\n".join(lines) + "\n")
    if cfg.sweep:
        sweep = attention_core_sweep(mcfg.channels, windows=tuple(sorted(set(mcfg.window_schedule) | {8})), seed=cfg.seed)
        head = "w,k,flops,analytic,increment,expected_increment,deviation"
        body = [",".join(str(r[c]) for c in head.split(",")) for r in sweep]
        print(head)
        print("\n".join(body))
        (cfg.out_dir / "bench_sweep.csv").write_text("\n".join([head] + body) + "\n")
        ok = ok and all(r["deviation"] == 0 and r["flops"] == r["analytic"] for r in sweep)
    if not ok:
        print("FAIL: instrumented count disagrees with the analytic count", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def normalize_map(amap: np.ndarray) -> np.ndarray:
    lo, hi = float(amap.min()), float(amap.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full(amap.shape, 0.5)
    return (amap - lo) / (hi - lo)


def upsample_map(amap: np.ndarray, cell: int, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour: each window cell covers ``cell``×``cell`` pixels; crop to the input."""
    return np.repeat(np.repeat(amap, cell, axis=0), cell, axis=1)[:h, :w]


def attention_image(model, img: np.ndarray, block: int, layer: int) -> np.ndarray:
    amap = attention_probe(model, T.tensor(to_rgb(img)), block, layer)
    cell = model.blocks[block].layers[layer].w
    return normalize_map(upsample_map(amap, cell, img.shape[1], img.shape[2]))


def cmd_attnmap(cfg: RunConfig) -> int:
    img = read_image(_require(cfg, "input"))
    paths = list(cfg.checkpoints) or [_require(cfg, "checkpoint")]
    if len(paths) not in (1, 3):
        raise ConfigError(f"attnmap takes one checkpoint or three, got {len(paths)}")
    out = cfg.out_dir
    maps = []
    for i, p in enumerate(paths):
        model = _load_model(p)
        m = attention_image(model, img, cfg.block, cfg.layer)
        name = "attnmap.pgm" if len(paths) == 1 else f"attnmap_{i}_{model.cfg.variant}.pgm"
        write_image(out / name, m[None])
        maps.append(m)
        print(f"{p} -> {out / name}")
    if len(maps) == 3:
        gap = np.ones((img.shape[1], 2))
        montage = np.concatenate([maps[0], gap, maps[1], gap, maps[2]], axis=1)
        write_image(out / "montage.pgm", montage[None])
        print(f"montage -> {out / 'montage.pgm'}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    try:
        results = run_gradcheck(cfg.op, cfg.seeds)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    for r in results:
        print(f"{r.name:22s} {r.kind:9s} worst={r.worst:.3e} tol={r.tol:.0e} seeds={r.seeds} "
              f"{r.seconds:6.2f}s {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(results)} checks passed")
    return EXIT_OK


_COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench,
             "attnmap": cmd_attnmap, "gradcheck": cmd_gradcheck}


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rptsr", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if name == "gradcheck":
            p.add_argument("--op", help="run only this check (or checks prefixed op_)")
        p.add_argument("overrides", nargs="*", metavar="key=value")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command)
    if args.config:
        read_config_file(args.config, cfg)
    for item in args.overrides:
        apply(cfg, *parse_assignment(item))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "op", None):
        cfg.op = args.op
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        return _COMMANDS[cfg.command](cfg)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ConfigError, FileNotFoundError, ImageFormatError, CheckpointError, PriorNotInitialized,
            ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
