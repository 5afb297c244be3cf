"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. Headline throughput numbers from large-server measurements are not
reproducible at desk scale, so these are property-based substitutes; the
performance comparison below is informational only and never fails.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from brkernels.bench import CSV_HEADER, conv2d_forward_per_block, resnet50_table
from brkernels.brgemm import BrgemmSpec, brgemm, brgemm_reference, plan_tiles
from brkernels.cnn import (
    ConvSpec,
    ParallelStrategy,
    StrategyKind,
    conv2d_forward,
    conv2d_forward_reference,
)
from brkernels.fc import Activation, FcParams, fc_forward, fc_forward_reference
from brkernels.lstm import (
    LstmCellWeights,
    LstmParams,
    lstm_forward,
    lstm_forward_reference,
)
from brkernels.tensor import (
    FP32,
    block_conv_tensors,
    block_fc_activation,
    max_rel_error,
    unblock_conv_output,
    unblock_fc_activation,
)

TOL = 1e-5


def report(name: str, detail: str = "") -> None:
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {name}: PASS{suffix}")


def test_criterion_brgemm_oracle_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(2024_08)
    trials = 1000
    worst = 0.0
    integer_trials = 0
    for trial in range(trials):
        m = int(rng.integers(1, 129))
        n = int(rng.integers(1, 129))
        k = int(rng.integers(1, 513))
        batch = int(rng.integers(0, min(8, 4096 // k) + 1))
        beta = float(rng.integers(0, 2))
        integer = trial % 5 == 0
        if integer:
            draw = lambda shape: rng.integers(-2, 3, size=shape).astype(FP32)
        else:
            draw = lambda shape: rng.uniform(-1, 1, size=shape).astype(FP32)
        a = [draw((k, m)) for _ in range(batch)]
        b = [draw((n, k)) for _ in range(batch)]
        c0 = draw((n, m))
        spec = BrgemmSpec(m=m, n=n, k=k, batch=batch, alpha=1.0, beta=beta)
        plan = plan_tiles(m, n)
        got = brgemm(a, b, c0.copy(), spec, plan)
        ref = brgemm_reference(a, b, c0.copy(), spec)
        if integer:
            integer_trials += 1
            assert np.array_equal(got, ref), f"integer trial {trial} not bit-exact"
        else:
            err = max_rel_error(got, ref)
            worst = max(worst, err)
            assert err <= TOL, f"trial {trial}: rel err {err:.3e}"
    elapsed = time.perf_counter() - start
    assert trials >= 1000 and integer_trials >= 100
    assert elapsed <= 60.0, f"suite took {elapsed:.1f}s"
    report("brgemm-oracle-suite",
           f"{trials} specs, {integer_trials} integer-exact, worst rel err "
           f"{worst:.2e}, {elapsed:.1f}s")


def test_criterion_conv_oracle_suite():
    start = time.perf_counter()
    worst = 0.0
    for rec in resnet50_table(minibatch=2):
        spec = rec.spec
        rng = np.random.default_rng([11, rec.layer_id])
        i_dense = rng.uniform(-1, 1, (spec.n, spec.c, spec.h, spec.w)).astype(FP32)
        w_dense = rng.uniform(-1, 1, (spec.k, spec.c, spec.r, spec.s)).astype(FP32)
        inp, wgt = block_conv_tensors(i_dense, w_dense, spec.b_c, spec.b_k)
        got = unblock_conv_output(conv2d_forward(spec, inp, wgt))
        ref = conv2d_forward_reference(spec, i_dense, w_dense)
        err = max_rel_error(got, ref)
        worst = max(worst, err)
        assert err <= TOL, f"layer {rec.layer_id}: rel err {err:.3e}"
    rng = np.random.default_rng(2024_11)
    saw_stride2 = 0
    saw_rs = set()
    for trial in range(200):
        rs = int(rng.choice([1, 3, 7]))
        stride = int(rng.choice([1, 2]))
        h = int(rng.integers(max(2, rs - 2), 17))
        w = int(rng.integers(max(2, rs - 2), 17))
        c = int(rng.integers(1, 65))
        k = int(rng.integers(1, 65))
        n = int(rng.integers(1, 3))
        saw_stride2 += stride == 2
        saw_rs.add(rs)
        spec = ConvSpec(n=n, c=c, k=k, h=h, w=w, r=rs, s=rs, stride=stride)
        i_dense = rng.uniform(-1, 1, (n, c, h, w)).astype(FP32)
        w_dense = rng.uniform(-1, 1, (k, c, rs, rs)).astype(FP32)
        inp, wgt = block_conv_tensors(i_dense, w_dense, spec.b_c, spec.b_k)
        got = unblock_conv_output(conv2d_forward(spec, inp, wgt))
        err = max_rel_error(got, conv2d_forward_reference(spec, i_dense, w_dense))
        worst = max(worst, err)
        assert err <= TOL, f"random spec {trial}: rel err {err:.3e}"
    elapsed = time.perf_counter() - start
    assert saw_stride2 > 0 and saw_rs == {1, 3, 7}
    assert elapsed <= 300.0, f"suite took {elapsed:.1f}s"
    report("conv-oracle-suite",
           f"20 table layers at N=2 + 200 random specs, worst rel err "
           f"{worst:.2e}, {elapsed:.1f}s")


def test_criterion_lstm_oracle_suite():
    worst = 0.0
    for ck in (64, 128, 256):
        rng = np.random.default_rng([22, ck])
        weights = LstmCellWeights.random(rng, ck, ck)
        x = rng.uniform(-1, 1, (8, 8, ck)).astype(FP32)
        params = LstmParams.from_dense(weights, 8, 8)
        seq = lstm_forward(params, x)
        ref = lstm_forward_reference(weights, x)
        err = max(max_rel_error(seq.h, ref.h), max_rel_error(seq.s, ref.s))
        worst = max(worst, err)
        assert err <= TOL, f"C=K={ck}: rel err {err:.3e}"
    zero = LstmCellWeights.zeros(64, 64)
    params = LstmParams.from_dense(zero, 8, 8)
    x = np.random.default_rng(23).uniform(-1, 1, (8, 8, 64)).astype(FP32)
    seq = lstm_forward(params, x)
    assert np.array_equal(seq.h, np.zeros_like(seq.h))
    assert np.array_equal(seq.s, np.zeros_like(seq.s))
    report("lstm-oracle-suite",
           f"C=K in {{64,128,256}} at T=8 N=8, worst rel err {worst:.2e}; "
           "zero-weight fixed point exact")


def test_criterion_fc_oracle_suite():
    worst = 0.0
    for ck in (256, 512, 1024):
        rng = np.random.default_rng([33, ck])
        w_dense = rng.uniform(-1, 1, (ck, ck)).astype(FP32)
        x_dense = rng.uniform(-1, 1, (64, ck)).astype(FP32)
        for activation in Activation:
            params = FcParams.from_dense(w_dense, 64, activation=activation)
            xb = block_fc_activation(x_dense, params.b_n, params.b_c)
            got = unblock_fc_activation(fc_forward(params, xb))
            ref = fc_forward_reference(w_dense, x_dense.T, activation)
            err = max_rel_error(got, np.ascontiguousarray(ref.T))
            worst = max(worst, err)
            assert err <= TOL, f"C=K={ck} {activation.value}: rel err {err:.3e}"
    # Fusion equivalence: fused activation == identity pass + separate pass.
    rng = np.random.default_rng(34)
    w_dense = rng.uniform(-1, 1, (256, 256)).astype(FP32)
    x_dense = rng.uniform(-1, 1, (64, 256)).astype(FP32)
    xb = block_fc_activation(x_dense, 64, 64)
    fused = fc_forward(FcParams.from_dense(w_dense, 64, activation=Activation.SIGMOID), xb)
    plain = fc_forward(FcParams.from_dense(w_dense, 64, activation=Activation.IDENTITY), xb)
    Activation.SIGMOID.apply(plain.data)
    assert np.array_equal(fused.data, plain.data)
    report("fc-oracle-suite",
           f"C=K in {{256,512,1024}} at N=64, all activations, worst rel err "
           f"{worst:.2e}; fusion bit-exact")


def test_criterion_determinism_suite():
    counts = sorted({1, 2, 4, os.cpu_count() or 1})
    rng = np.random.default_rng(44)

    spec = ConvSpec(n=4, c=32, k=32, h=10, w=10, r=3, s=3, b_c=16, b_k=16)
    i_dense = rng.uniform(-1, 1, (4, 32, 10, 10)).astype(FP32)
    w_dense = rng.uniform(-1, 1, (32, 32, 3, 3)).astype(FP32)
    inp, wgt = block_conv_tensors(i_dense, w_dense, spec.b_c, spec.b_k)
    conv_base = None
    for kind in StrategyKind:
        for workers in counts:
            out = conv2d_forward(spec, inp, wgt, ParallelStrategy(kind, workers)).data
            if conv_base is None:
                conv_base = out
            assert np.array_equal(conv_base, out), f"conv {kind} x{workers}"

    weights = LstmCellWeights.random(rng, 64, 64)
    x = rng.uniform(-1, 1, (4, 8, 64)).astype(FP32)
    params = LstmParams.from_dense(weights, 4, 8, b_n=2)
    lstm_base = lstm_forward(params, x, workers=1)
    for workers in counts[1:]:
        seq = lstm_forward(params, x, workers=workers)
        assert np.array_equal(seq.h, lstm_base.h) and np.array_equal(seq.s, lstm_base.s)

    w_dense = rng.uniform(-1, 1, (64, 64)).astype(FP32)
    x_dense = rng.uniform(-1, 1, (16, 64)).astype(FP32)
    fc_params = FcParams.from_dense(w_dense, 16, b_n=4)
    xb = block_fc_activation(x_dense, fc_params.b_n, fc_params.b_c)
    fc_base = fc_forward(fc_params, xb, workers=1).data
    for workers in counts[1:]:
        assert np.array_equal(fc_forward(fc_params, xb, workers=workers).data, fc_base)

    m, n, k, batch = 96, 24, 48, 4
    a = [rng.uniform(-1, 1, (k, m)).astype(FP32) for _ in range(batch)]
    b = [rng.uniform(-1, 1, (n, k)).astype(FP32) for _ in range(batch)]
    bspec = BrgemmSpec(m=m, n=n, k=k, batch=batch, beta=0.0)
    first = brgemm(a, b, np.zeros((n, m), FP32), bspec)
    second = brgemm(a, b, np.zeros((n, m), FP32), bspec)
    assert np.array_equal(first, second)

    report("determinism-suite", f"worker counts {counts}, all primitives bit-identical")


def _planner_oracle(m, n, vlen, budget):
    if m < vlen:
        mbs = np.array([m], dtype=np.int64)
    else:
        mbs = np.arange(1, m // vlen + 1, dtype=np.int64) * vlen
    nbs = np.arange(1, n + 1, dtype=np.int64)
    mb = mbs[:, None]
    nb = nbs[None, :]
    acc = nb * -(-mb // vlen)
    feasible = acc + nb + 1 <= budget
    if not feasible.any():
        return None
    divides = (m % mb == 0).astype(np.int64) * np.ones_like(nb)
    score = acc * 10**9 + divides * 10**8 + mb * 10**3 + nb
    score = np.where(feasible, score, -1)
    idx = np.unravel_index(np.argmax(score), score.shape)
    return int(mb[idx[0], 0]), int(nbs[idx[1]]), int(acc[idx])


def test_criterion_tile_planner_suite():
    start = time.perf_counter()
    checked = 0
    for vlen in (4, 8, 16):
        for budget in (16, 32):
            for m in range(1, 129):
                for n in range(1, 33):
                    plan = plan_tiles(m, n, vlen=vlen, budget=budget)
                    expect = _planner_oracle(m, n, vlen, budget)
                    assert expect is not None
                    assert (plan.m_b, plan.n_b, plan.accumulators) == expect, (
                        f"m={m} n={n} vlen={vlen} budget={budget}: "
                        f"{(plan.m_b, plan.n_b, plan.accumulators)} != {expect}"
                    )
                    checked += 1
    wide = plan_tiles(64, 6, vlen=16, budget=32)
    assert (wide.m_b, wide.n_b, wide.accumulators) == (64, 6, 24)
    elapsed = time.perf_counter() - start
    report("tile-planner-suite",
           f"{checked} cases match exhaustive enumeration; 64x6 tile carries "
           f"24 accumulators, {elapsed:.1f}s")


def test_performance_smoke_reduction_benefit():
    # Soft, informational only: never fails. Table layer 4 at N=4, fused
    # batch-reduce path vs one GEMM per (r, s, c) block with accumulator reload.
    spec = resnet50_table(minibatch=4)[3].spec
    rng = np.random.default_rng(55)
    i_dense = rng.uniform(-1, 1, (spec.n, spec.c, spec.h, spec.w)).astype(FP32)
    w_dense = rng.uniform(-1, 1, (spec.k, spec.c, spec.r, spec.s)).astype(FP32)
    inp, wgt = block_conv_tensors(i_dense, w_dense, spec.b_c, spec.b_k)

    def best_of(fn, repeats=3):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    fused = best_of(lambda: conv2d_forward(spec, inp, wgt))
    split = best_of(lambda: conv2d_forward_per_block(spec, inp, wgt))
    ratio = split / fused
    status = "meets" if ratio >= 1.2 else "below"
    print(
        f"ACCEPTANCE performance-smoke: INFO only - fused {fused:.3f}s, "
        f"per-block {split:.3f}s, speedup {ratio:.2f}x ({status} the 1.2x target)"
    )


def test_criterion_bench_cli_end_to_end(tmp_path):
    csv_path = tmp_path / "conv.csv"
    start = time.perf_counter()
    proc = subprocess.run(
        [
            sys.executable, "-m", "brkernels.bench", "conv",
            "--layers", "1-20", "--minibatch", "2", "--verify", "--iters", "3",
            "--csv", str(csv_path),
        ],
        capture_output=True,
        text=True,
        timeout=600,
    )
    elapsed = time.perf_counter() - start
    assert proc.returncode == 0, proc.stderr[-2000:]
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == CSV_HEADER
    rows = lines[1:]
    assert len(rows) == 20
    for row in rows:
        fields = row.split(",")
        assert len(fields) == 9
        assert fields[0] == "conv"
        assert 1 <= int(fields[1]) <= 20
        assert fields[2] == "2"
        assert int(fields[4]) > 0
        assert float(fields[5]) > 0 and float(fields[6]) > 0 and float(fields[7]) > 0
        assert fields[8] == "true"
    assert elapsed <= 600.0
    report("bench-cli-end-to-end", f"20 verified CSV rows in {elapsed:.1f}s")
