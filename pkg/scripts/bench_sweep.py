"""FLOP and wall-clock sweep over presets, k and input size.

    python3 scripts/bench_sweep.py --presets tiny light --sizes 32 64 --ks 0 1 2 4
"""
import argparse
import time

import numpy as np

from rptsr import tensor as T
from rptsr.cli import attention_core_sweep
from rptsr.model import build, count_flops, forward, instrumented_flops, preset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--presets", nargs="+", default=["tiny", "light"])
    ap.add_argument("--sizes", type=int, nargs="+", default=[32, 64])
    ap.add_argument("--ks", type=int, nargs="+", default=[0, 1, 2, 4])
    ap.add_argument("--runs", type=int, default=3)
    args = ap.parse_args()

    print("preset,k,size,analytic_gflops,instrumented_gflops,match,seconds")
    for name in args.presets:
        for k in args.ks:
            try:
                cfg = preset(name, k=k)
            except ValueError as exc:  # k without an integer token grid per window
                print(f"# skip {name} k={k}: {exc}")
                continue
            m = build(cfg, 0)
            for size in args.sizes:
                x = T.tensor(np.random.default_rng(0).uniform(0, 1, (3, size, size)))
                with T.no_grad():
                    forward(m, x, init_priors=True)
                    t0 = time.perf_counter()
                    for _ in range(args.runs):
                        forward(m, x)
                    sec = (time.perf_counter() - t0) / args.runs
                analytic = count_flops(cfg, size, size)
                measured = instrumented_flops(m, x)["total"]
                print(f"{name},{k},{size},{analytic / 1e9:.4f},{measured / 1e9:.4f},{analytic == measured},{sec:.3f}")

    print("\nper-window attention core at C=240")
    print("w,k,flops,increment,4C(2kw^2+k^2)")
    for r in attention_core_sweep(240, ks=tuple(sorted(set(args.ks) | {0})), windows=(8, 16)):
        print(f"{r['w']},{r['k']},{r['flops']},{r['increment']},{r['expected_increment']}")


if __name__ == "__main__":
    main()
