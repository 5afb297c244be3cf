#!/usr/bin/env python3
"""Measure what the fused reduction chain buys over split GEMM calls.

Times one convolution layer twice: via the batch-reduce path (one call per
output tile covering all (r, s, c) blocks) and via a variant issuing one GEMM
per block with the output tile reloaded every time. Informational only.
"""

import argparse
import time

import numpy as np

from brkernels.bench import conv2d_forward_per_block, resnet50_table
from brkernels.cnn import conv2d_forward
from brkernels.tensor import FP32, block_conv_tensors, unblock_conv_output


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--layer", type=int, default=4, help="table layer id")
    parser.add_argument("--minibatch", type=int, default=4)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    spec = {r.layer_id: r for r in resnet50_table(args.minibatch)}[args.layer].spec
    rng = np.random.default_rng(args.seed)
    i_dense = rng.uniform(-1, 1, (spec.n, spec.c, spec.h, spec.w)).astype(FP32)
    w_dense = rng.uniform(-1, 1, (spec.k, spec.c, spec.r, spec.s)).astype(FP32)
    inp, wgt = block_conv_tensors(i_dense, w_dense, spec.b_c, spec.b_k)

    fused_out = unblock_conv_output(conv2d_forward(spec, inp, wgt)).astype(np.float64)
    split_out = unblock_conv_output(conv2d_forward_per_block(spec, inp, wgt)).astype(np.float64)
    # The per-block variant rounds through f32 between calls, so compare
    # relative to the output scale rather than elementwise.
    err = float(np.abs(fused_out - split_out).max()) / max(1.0, float(np.abs(fused_out).max()))

    fused = best_of(lambda: conv2d_forward(spec, inp, wgt), args.repeats)
    split = best_of(lambda: conv2d_forward_per_block(spec, inp, wgt), args.repeats)
    print(f"layer {args.layer} at N={spec.n}: "
          f"batch-reduce {fused:.4f}s, per-block {split:.4f}s, "
          f"speedup {split / fused:.2f}x, outputs agree to {err:.1e} of scale")


if __name__ == "__main__":
    main()
