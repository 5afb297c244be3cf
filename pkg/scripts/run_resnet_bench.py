#!/usr/bin/env python3
"""Run the full ResNet-50 layer sweep through the bench CLI.

Thin wrapper around `bench conv` with the whole table selected; forwards the
usual knobs and defaults to a quick verified run.
"""

import argparse

from brkernels.bench import BenchConfig, run_suite


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--minibatch", type=int, default=28)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--iters", type=int, default=10)
    parser.add_argument("--no-verify", action="store_true")
    parser.add_argument("--peak-gflops", type=float, default=None)
    parser.add_argument("--csv", type=str, default="resnet50_fwd.csv")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    cfg = BenchConfig(
        workload="conv",
        layers="1-20",
        minibatch=args.minibatch,
        workers=args.workers,
        iters=args.iters,
        verify=not args.no_verify,
        peak_gflops=args.peak_gflops,
        csv=args.csv,
        seed=args.seed,
    )
    raise SystemExit(run_suite(cfg))


if __name__ == "__main__":
    main()
