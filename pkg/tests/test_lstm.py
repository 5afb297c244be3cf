import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brkernels.lstm import (
    GATE_NAMES,
    LstmCellWeights,
    LstmParams,
    lstm_forward,
    lstm_forward_reference,
    sigmoid_block,
    tanh_block,
)
from brkernels.partition import partition_work_2d, split_evenly
from brkernels.tensor import FP32, FetchCounter, LayoutError, max_rel_error


def make_instance(seed, t_steps, n, c, k, **blocking):
    rng = np.random.default_rng(seed)
    weights = LstmCellWeights.random(rng, c, k)
    x = rng.uniform(-1, 1, (t_steps, n, c)).astype(FP32)
    params = LstmParams.from_dense(weights, t_steps, n, **blocking)
    return weights, params, x


class TestActivations:
    def test_fixed_points(self):
        buf = np.zeros(4, FP32)
        assert np.all(sigmoid_block(buf.copy()) == np.float32(0.5))
        assert np.all(tanh_block(buf.copy()) == np.float32(0.0))

    def test_sigmoid_symmetry(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-6, 6, 256).astype(FP32)
        left = sigmoid_block(-x.copy())
        right = 1.0 - sigmoid_block(x.copy())
        assert np.max(np.abs(left - right)) <= 1e-6

    def test_saturation_no_nan(self):
        x = np.array([-50.0, 50.0, -80.0, 80.0], FP32)
        s = sigmoid_block(x.copy())
        t = tanh_block(x.copy())
        assert np.all(np.isfinite(s)) and np.all(np.isfinite(t))
        assert s[0] == pytest.approx(0.0, abs=1e-6)
        assert s[1] == pytest.approx(1.0, abs=1e-6)
        assert t[0] == pytest.approx(-1.0, abs=1e-6)
        assert t[1] == pytest.approx(1.0, abs=1e-6)

    def test_monotone(self):
        x = np.linspace(-4, 4, 64).astype(FP32)
        assert np.all(np.diff(sigmoid_block(x.copy())) >= 0)
        assert np.all(np.diff(tanh_block(x.copy())) >= 0)


class TestPartition:
    def test_one_item_each(self):
        ranges = partition_work_2d(2, 4, 8)
        assert [len(r) for r in ranges] == [1] * 8
        assert [r.start for r in ranges] == list(range(8))

    def test_balanced_split(self):
        ranges = split_evenly(10, 4)
        assert [len(r) for r in ranges] == [3, 3, 2, 2]
        assert ranges[0].start == 0 and ranges[-1].stop == 10

    def test_idle_workers(self):
        ranges = partition_work_2d(1, 2, 4)
        assert [len(r) for r in ranges] == [1, 1, 0, 0]

    def test_exact_cover_no_overlap(self):
        ranges = partition_work_2d(3, 5, 4)
        seen = [i for r in ranges for i in r]
        assert seen == list(range(15))


class TestZeroWeights:
    def test_fixed_point_is_exact_zero(self):
        # i=f=o=sigmoid(0)=0.5, c=tanh(0)=0 so s_t = 0.5*s_{t-1} and h_t = 0.
        t_steps, n, c, k = 4, 4, 8, 8
        weights = LstmCellWeights.zeros(c, k)
        params = LstmParams.from_dense(weights, t_steps, n, b_k=4, b_c=4, b_n=2)
        x = np.random.default_rng(1).uniform(-1, 1, (t_steps, n, c)).astype(FP32)
        seq = lstm_forward(params, x)
        assert np.array_equal(seq.h, np.zeros_like(seq.h))
        assert np.array_equal(seq.s, np.zeros_like(seq.s))
        ref = lstm_forward_reference(weights, x)
        assert np.array_equal(ref.h, np.zeros_like(ref.h))
        assert np.array_equal(ref.s, np.zeros_like(ref.s))


class TestSingleStep:
    def test_gates_match_dense_gemm_oracle(self):
        # T=1 with zero recurrent weights: gates are plain sigma/tanh(W x + b).
        rng = np.random.default_rng(2)
        c, k, n = 8, 8, 4
        weights = LstmCellWeights.random(rng, c, k)
        for g in GATE_NAMES:
            getattr(weights, f"r_{g}")[:] = 0.0
        x = rng.uniform(-1, 1, (1, n, c)).astype(FP32)
        params = LstmParams.from_dense(weights, 1, n, b_k=4, b_c=4, b_n=2)
        seq = lstm_forward(params, x, keep_gates=True)
        x64 = x[0].astype(np.float64)
        for g in GATE_NAMES:
            pre = x64 @ getattr(weights, f"w_{g}").astype(np.float64).T
            pre = pre + getattr(weights, f"bias_{g}").astype(np.float64)
            expect = np.tanh(pre) if g == "c" else 1.0 / (1.0 + np.exp(-pre))
            assert max_rel_error(seq.gates[g][0], expect.astype(FP32)) <= 1e-5


class TestScalarRecurrence:
    def test_hand_evaluation(self):
        # K=C=1, all weights 1, no bias, x=[1, 1]: evaluate the equations by hand.
        weights = LstmCellWeights.zeros(1, 1)
        for g in GATE_NAMES:
            getattr(weights, f"w_{g}")[:] = 1.0
            getattr(weights, f"r_{g}")[:] = 1.0
        x = np.ones((2, 1, 1), FP32)

        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        s0 = sig(1.0) * math.tanh(1.0)
        h0 = sig(1.0) * math.tanh(s0)
        pre1 = 1.0 + h0
        s1 = sig(pre1) * s0 + sig(pre1) * math.tanh(pre1)
        h1 = sig(pre1) * math.tanh(s1)

        ref = lstm_forward_reference(weights, x)
        assert ref.h[0, 0, 0] == pytest.approx(h0, rel=1e-6)
        assert ref.s[0, 0, 0] == pytest.approx(s0, rel=1e-6)
        assert ref.h[1, 0, 0] == pytest.approx(h1, rel=1e-6)
        assert ref.s[1, 0, 0] == pytest.approx(s1, rel=1e-6)

        params = LstmParams.from_dense(weights, 2, 1, b_k=1, b_c=1, b_n=1)
        seq = lstm_forward(params, x)
        assert seq.h[1, 0, 0] == pytest.approx(h1, rel=1e-5)


class TestForwardVsReference:
    def test_small_random_instance(self):
        weights, params, x = make_instance(3, 3, 4, 8, 8, b_n=2, b_k=4, b_c=4)
        seq = lstm_forward(params, x)
        ref = lstm_forward_reference(weights, x)
        assert max_rel_error(seq.h, ref.h) <= 1e-5
        assert max_rel_error(seq.s, ref.s) <= 1e-5

    def test_nonzero_initial_state(self):
        rng = np.random.default_rng(4)
        weights, params, x = make_instance(4, 2, 4, 8, 8, b_n=2, b_k=4, b_c=4)
        h0 = rng.uniform(-1, 1, (4, 8)).astype(FP32)
        s0 = rng.uniform(-1, 1, (4, 8)).astype(FP32)
        seq = lstm_forward(params, x, h_init=h0, s_init=s0)
        ref = lstm_forward_reference(weights, x, h_init=h0, s_init=s0)
        assert max_rel_error(seq.h, ref.h) <= 1e-5
        assert max_rel_error(seq.s, ref.s) <= 1e-5

    def test_extra_reduce_blocking_unchanged(self):
        weights, params, x = make_instance(5, 2, 4, 16, 16, b_n=2, b_k=4, b_c=4)
        seq = lstm_forward(params, x, reduce_block=2)
        ref = lstm_forward_reference(weights, x)
        assert max_rel_error(seq.h, ref.h) <= 1e-5
        assert max_rel_error(seq.s, ref.s) <= 1e-5

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=10, deadline=None)
    def test_random_instances_property(self, seed):
        rng = np.random.default_rng(seed)
        t_steps = int(rng.integers(1, 5))
        n = int(rng.integers(1, 4)) * 2
        ck = int(rng.integers(1, 5)) * 4
        weights, params, x = make_instance(seed, t_steps, n, ck, ck, b_n=2, b_k=4, b_c=4)
        seq = lstm_forward(params, x)
        ref = lstm_forward_reference(weights, x)
        assert max_rel_error(seq.h, ref.h) <= 1e-5
        assert max_rel_error(seq.s, ref.s) <= 1e-5


class TestStructuralProperties:
    def test_worker_count_determinism(self):
        weights, params, x = make_instance(6, 4, 8, 16, 16, b_n=2, b_k=8, b_c=8)
        base = lstm_forward(params, x, workers=1)
        for workers in (2, 3, 4, 8):
            seq = lstm_forward(params, x, workers=workers)
            assert np.array_equal(seq.h, base.h)
            assert np.array_equal(seq.s, base.s)

    def test_causality_truncation(self):
        weights, params, x = make_instance(7, 6, 4, 8, 8, b_n=2, b_k=4, b_c=4)
        full = lstm_forward(params, x)
        for t in (1, 3, 5):
            short_params = LstmParams.from_dense(weights, t, 4, b_k=4, b_c=4, b_n=2)
            part = lstm_forward(short_params, x[:t].copy())
            assert np.array_equal(part.h, full.h[:t])
            assert np.array_equal(part.s, full.s[:t])

    def test_gate_bounds(self):
        weights, params, x = make_instance(8, 4, 4, 8, 8, b_n=2, b_k=4, b_c=4)
        seq = lstm_forward(params, x, keep_gates=True)
        for g in ("i", "f", "o"):
            assert np.all(seq.gates[g] >= 0.0) and np.all(seq.gates[g] <= 1.0)
        assert np.all(seq.gates["c"] >= -1.0) and np.all(seq.gates["c"] <= 1.0)
        assert np.all(np.abs(np.tanh(seq.s)) <= 1.0)

    def test_weight_fetch_once_per_worker_per_step(self):
        # 2 workers over a 2 x 4 grid: each worker owns one ib_k row and must
        # fetch its weight blocks once per step, reusing them across 4 ib_n.
        t_steps, n, c, k = 3, 8, 8, 8
        weights, params, x = make_instance(9, t_steps, n, c, k, b_n=2, b_k=4, b_c=4)
        counter = FetchCounter()
        lstm_forward(params, x, workers=2, fetch_counter=counter)
        assert counter.counts and max(counter.counts.values()) == 1
        per_step_worker = {}
        for (t, widx, name, ib_k, ib_c) in counter.counts:
            per_step_worker.setdefault((t, widx, name, ib_k, ib_c), 0)
        w_keys = [key for key in counter.counts if key[2] == "w_i"]
        # C_b=2 blocks per (t, worker, ib_k); 3 steps x 2 workers x 1 ib_k each
        assert len(w_keys) == t_steps * 2 * 2

    def test_keep_gates_off_by_default(self):
        weights, params, x = make_instance(10, 1, 2, 4, 4, b_n=2, b_k=4, b_c=4)
        assert lstm_forward(params, x).gates is None


class TestValidation:
    def test_bad_x_shape(self):
        weights, params, _ = make_instance(11, 2, 2, 4, 4, b_n=2, b_k=4, b_c=4)
        with pytest.raises(LayoutError, match="x has shape"):
            lstm_forward(params, np.zeros((2, 2, 8), FP32))

    def test_bad_blocking(self):
        weights = LstmCellWeights.zeros(4, 4)
        with pytest.raises(LayoutError, match="divide"):
            LstmParams.from_dense(weights, 1, 3, b_k=4, b_c=4, b_n=2)
