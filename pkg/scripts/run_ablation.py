"""Baseline / static / rpt ablation on the synthetic fixed-layout scenes.

    python3 scripts/run_ablation.py --iters 2000 --seeds 0 1 2 --out runs/ablation.csv
"""
import argparse
import csv
from pathlib import Path

from rptsr.experiments import run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--frames", type=int, default=64)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--out", default="runs/ablation.csv")
    args = ap.parse_args()

    res = run_ablation(seeds=tuple(args.seeds), iterations=args.iters, frames=args.frames, size=args.size,
                       batch=args.batch, progress=lambda s, v, l1: print(f"seed {s} {v:8s} val L1 {l1:.6f}", flush=True))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", *[f"seed{s}" for s in args.seeds], "mean"])
        for v, vals in res.val_l1.items():
            w.writerow([v, *vals, res.mean(v)])
    best = min(res.val_l1, key=res.mean)
    print(" ".join(f"{v}={res.mean(v):.6f}" for v in res.val_l1), f"best={best}", f"{res.seconds:.0f}s")


if __name__ == "__main__":
    main()
