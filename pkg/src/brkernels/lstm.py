"""Fused data-flow LSTM forward cell on blocked weight layouts.

Work items are b_n x b_k output blocks of the gate tensors. Each item is
bias-initialized, accumulated with one batch-reduce GEMM over the C_b input
blocks and one over the K_b recurrent blocks, activated while hot, and
finished with the elementwise state updates. Workers synchronize between
time-steps because h_t feeds the next step. Every output block has a fixed
accumulation order, so results are bit-identical for any worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .brgemm import BrgemmSpec, brgemm_accumulate, plan_tiles
from .partition import partition_work_2d, run_on_workers
from .tensor import (
    FP32,
    BlockedTensor,
    FetchCounter,
    LayoutError,
    block_weight_2d,
    clamp_block,
)

GATE_NAMES = ("i", "c", "f", "o")


def sigmoid_block(buf: np.ndarray) -> np.ndarray:
    """In-place logistic sigmoid 1 / (1 + exp(-x)).

    exp is only ever evaluated on non-positive arguments, so both tails stay
    overflow-free and accurate down to the smallest representable outputs.
    """
    e = np.exp(-np.abs(buf))
    buf[...] = np.where(buf >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return buf


def tanh_block(buf: np.ndarray) -> np.ndarray:
    """In-place hyperbolic tangent."""
    np.tanh(buf, out=buf)
    return buf


_GATE_ACT = {"i": sigmoid_block, "c": tanh_block, "f": sigmoid_block, "o": sigmoid_block}


def _default_minibatch_block(extent: int, cap: int = 64) -> int:
    """Largest divisor of the extent that is <= cap."""
    b = min(extent, cap)
    while extent % b:
        b -= 1
    return b


@dataclass
class LstmCellWeights:
    """Dense application-level LSTM weights: four (K, C) input weight matrices,
    four (K, K) recurrent matrices and four (K,) biases."""

    w_i: np.ndarray
    w_c: np.ndarray
    w_f: np.ndarray
    w_o: np.ndarray
    r_i: np.ndarray
    r_c: np.ndarray
    r_f: np.ndarray
    r_o: np.ndarray
    bias_i: np.ndarray
    bias_c: np.ndarray
    bias_f: np.ndarray
    bias_o: np.ndarray

    @property
    def hidden(self) -> int:
        return self.w_i.shape[0]

    @property
    def state(self) -> int:
        return self.w_i.shape[1]

    def validate(self) -> None:
        k, c = self.w_i.shape
        for g in GATE_NAMES:
            if getattr(self, f"w_{g}").shape != (k, c):
                raise LayoutError(f"w_{g} shape mismatch")
            if getattr(self, f"r_{g}").shape != (k, k):
                raise LayoutError(f"r_{g} shape mismatch")
            if getattr(self, f"bias_{g}").shape != (k,):
                raise LayoutError(f"bias_{g} shape mismatch")

    @classmethod
    def random(cls, rng: np.random.Generator, c: int, k: int, scale: float | None = None):
        """Random weights scaled so pre-activations stay O(1)."""
        if scale is None:
            scale = 1.0 / np.sqrt(c + k)
        def m(rows, cols):
            return (rng.uniform(-1.0, 1.0, size=(rows, cols)) * scale).astype(FP32)
        def v(rows):
            return (rng.uniform(-1.0, 1.0, size=rows) * scale).astype(FP32)
        return cls(
            w_i=m(k, c), w_c=m(k, c), w_f=m(k, c), w_o=m(k, c),
            r_i=m(k, k), r_c=m(k, k), r_f=m(k, k), r_o=m(k, k),
            bias_i=v(k), bias_c=v(k), bias_f=v(k), bias_o=v(k),
        )

    @classmethod
    def zeros(cls, c: int, k: int):
        return cls(
            **{f"w_{g}": np.zeros((k, c), FP32) for g in GATE_NAMES},
            **{f"r_{g}": np.zeros((k, k), FP32) for g in GATE_NAMES},
            **{f"bias_{g}": np.zeros(k, FP32) for g in GATE_NAMES},
        )


@dataclass
class LstmParams:
    """Blocked problem descriptor for one LSTM cell.

    Weight tensors live in the [K_b][C_b][b_c][b_k] layout (recurrent weights
    in [K_b][K_b][b_k][b_k]); biases stay dense. The blocked reformat happens
    once in :meth:`from_dense` and is amortized over the time-steps.
    """

    w_i: BlockedTensor
    w_c: BlockedTensor
    w_f: BlockedTensor
    w_o: BlockedTensor
    r_i: BlockedTensor
    r_c: BlockedTensor
    r_f: BlockedTensor
    r_o: BlockedTensor
    bias_i: np.ndarray
    bias_c: np.ndarray
    bias_f: np.ndarray
    bias_o: np.ndarray
    t_steps: int
    n: int
    c: int
    k: int
    b_k: int
    b_c: int
    b_n: int

    @classmethod
    def from_dense(
        cls,
        weights: LstmCellWeights,
        t_steps: int,
        n: int,
        b_k: int | None = None,
        b_c: int | None = None,
        b_n: int | None = None,
    ) -> "LstmParams":
        weights.validate()
        k, c = weights.w_i.shape
        b_k = clamp_block(k, 64 if b_k is None else b_k)
        b_c = clamp_block(c, 64 if b_c is None else b_c)
        b_n = _default_minibatch_block(n) if b_n is None else b_n
        fields = {}
        for g in GATE_NAMES:
            fields[f"w_{g}"] = block_weight_2d(getattr(weights, f"w_{g}"), b_c, b_k)
            fields[f"r_{g}"] = block_weight_2d(getattr(weights, f"r_{g}"), b_k, b_k)
            fields[f"bias_{g}"] = getattr(weights, f"bias_{g}")
        params = cls(
            **fields, t_steps=t_steps, n=n, c=c, k=k, b_k=b_k, b_c=b_c, b_n=b_n
        )
        params.validate()
        return params

    def validate(self) -> None:
        for name, extent, block in (("K", self.k, self.b_k), ("C", self.c, self.b_c), ("N", self.n, self.b_n)):
            if block < 1 or extent % block:
                raise LayoutError(f"block {block} does not divide {name}={extent}")
        for g in GATE_NAMES:
            w: BlockedTensor = getattr(self, f"w_{g}")
            r: BlockedTensor = getattr(self, f"r_{g}")
            if w.logical_shape() != {"k": self.k, "c": self.c}:
                raise LayoutError(f"w_{g} blocked layout does not match dims")
            if r.logical_shape() != {"k": self.k, "c": self.k}:
                raise LayoutError(f"r_{g} blocked layout does not match dims")
            if getattr(self, f"bias_{g}").shape != (self.k,):
                raise LayoutError(f"bias_{g} has wrong shape")

    @property
    def k_blocks(self) -> int:
        return self.k // self.b_k

    @property
    def c_blocks(self) -> int:
        return self.c // self.b_c

    @property
    def n_blocks(self) -> int:
        return self.n // self.b_n


@dataclass
class LstmStateSequence:
    """Forward outputs: hidden sequence h[T][N][K], cell state s[T][N][K], and
    optionally the per-step gate tensors when they were requested."""

    h: np.ndarray
    s: np.ndarray
    gates: dict[str, np.ndarray] | None = None


def _reduce_chunks(total: int, chunk: int | None) -> list[tuple[int, int]]:
    if not chunk or chunk >= total:
        return [(0, total)]
    return [(start, min(chunk, total - start)) for start in range(0, total, chunk)]


def lstm_forward(
    params: LstmParams,
    x: np.ndarray,
    h_init: np.ndarray | None = None,
    s_init: np.ndarray | None = None,
    workers: int = 1,
    keep_gates: bool = False,
    reduce_block: int | None = None,
    tile_force: tuple[int, int] | None = None,
    fetch_counter: FetchCounter | None = None,
) -> LstmStateSequence:
    """Fused LSTM forward pass over blocked weights.

    ``reduce_block`` optionally splits the C_b / K_b reduce loops into chunks
    of that many blocks (extra cache blocking for large state sizes; off by
    default). ``fetch_counter``, when given, records one event per weight
    block fetch keyed by (step, worker, tensor, ib_k, ib_c).
    """
    t_steps, n, c, k = params.t_steps, params.n, params.c, params.k
    if x.shape != (t_steps, n, c):
        raise LayoutError(f"x has shape {x.shape}, expected {(t_steps, n, c)}")
    h_init = np.zeros((n, k), FP32) if h_init is None else h_init
    s_init = np.zeros((n, k), FP32) if s_init is None else s_init
    if h_init.shape != (n, k) or s_init.shape != (n, k):
        raise LayoutError("h_init / s_init must have shape (N, K)")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")

    b_k, b_c, b_n = params.b_k, params.b_c, params.b_n
    k_blocks, c_blocks, n_blocks = params.k_blocks, params.c_blocks, params.n_blocks
    plan = plan_tiles(b_k, b_n, force=tile_force)
    w_chunks = _reduce_chunks(c_blocks, reduce_block)
    r_chunks = _reduce_chunks(k_blocks, reduce_block)

    h = np.empty((t_steps, n, k), FP32)
    s = np.empty((t_steps, n, k), FP32)
    gates = (
        {g: np.empty((t_steps, n, k), FP32) for g in GATE_NAMES} if keep_gates else None
    )
    ranges = partition_work_2d(k_blocks, n_blocks, workers)
    w_tensors = {g: getattr(params, f"w_{g}") for g in GATE_NAMES}
    r_tensors = {g: getattr(params, f"r_{g}") for g in GATE_NAMES}
    biases = {g: getattr(params, f"bias_{g}") for g in GATE_NAMES}

    def step(t: int, h_prev: np.ndarray, s_prev: np.ndarray):
        x_t = x[t]

        def run_range(widx: int, rng: range):
            cur_ibk = -1
            w_views: dict[str, list[np.ndarray]] = {}
            r_views: dict[str, list[np.ndarray]] = {}
            for flat in rng:
                ib_k, ib_n = divmod(flat, n_blocks)
                if ib_k != cur_ibk:
                    # One weight fetch per worker per time-step; the blocks are
                    # then reused across the worker's whole ib_n range.
                    cur_ibk = ib_k
                    for g in GATE_NAMES:
                        w_views[g] = [w_tensors[g].data[ib_k, cb] for cb in range(c_blocks)]
                        r_views[g] = [r_tensors[g].data[ib_k, cb] for cb in range(k_blocks)]
                        if fetch_counter is not None:
                            for cb in range(c_blocks):
                                fetch_counter.record((t, widx, f"w_{g}", ib_k, cb))
                            for cb in range(k_blocks):
                                fetch_counter.record((t, widx, f"r_{g}", ib_k, cb))
                k0 = ib_k * b_k
                n0 = ib_n * b_n
                x_views = [x_t[n0 : n0 + b_n, cb * b_c : (cb + 1) * b_c] for cb in range(c_blocks)]
                h_views = [h_prev[n0 : n0 + b_n, cb * b_k : (cb + 1) * b_k] for cb in range(k_blocks)]
                # The gate block stays in the float64 accumulator from bias
                # init through both reductions and the activation; only the
                # h/s stores round to the float32 sequence handed to step t+1.
                bufs = {}
                for g in GATE_NAMES:
                    buf = np.empty((b_n, b_k), np.float64)
                    buf[:] = biases[g][k0 : k0 + b_k]
                    for c0, cnt in w_chunks:
                        brgemm_accumulate(
                            w_views[g][c0 : c0 + cnt],
                            x_views[c0 : c0 + cnt],
                            buf,
                            BrgemmSpec(m=b_k, n=b_n, k=b_c, batch=cnt),
                            plan,
                        )
                    for c0, cnt in r_chunks:
                        brgemm_accumulate(
                            r_views[g][c0 : c0 + cnt],
                            h_views[c0 : c0 + cnt],
                            buf,
                            BrgemmSpec(m=b_k, n=b_n, k=b_k, batch=cnt),
                            plan,
                        )
                    _GATE_ACT[g](buf)
                    bufs[g] = buf
                s_blk = bufs["f"] * s_prev[n0 : n0 + b_n, k0 : k0 + b_k] + bufs["i"] * bufs["c"]
                h_blk = bufs["o"] * np.tanh(s_blk)
                s[t, n0 : n0 + b_n, k0 : k0 + b_k] = s_blk
                h[t, n0 : n0 + b_n, k0 : k0 + b_k] = h_blk
                if gates is not None:
                    for g in GATE_NAMES:
                        gates[g][t, n0 : n0 + b_n, k0 : k0 + b_k] = bufs[g]

        run_on_workers(run_range, ranges)

    for t in range(t_steps):
        h_prev = h[t - 1] if t > 0 else h_init
        s_prev = s[t - 1] if t > 0 else s_init
        # run_on_workers joins all futures: the mandatory barrier between steps.
        step(t, h_prev, s_prev)

    return LstmStateSequence(h=h, s=s, gates=gates)


def lstm_forward_reference(
    weights: LstmCellWeights,
    x: np.ndarray,
    h_init: np.ndarray | None = None,
    s_init: np.ndarray | None = None,
    keep_gates: bool = False,
) -> LstmStateSequence:
    """Coarse whole-matrix oracle: two large GEMMs per gate per step in float64.

    Literal evaluation of the gate equations with no blocking; the comparison
    target for :func:`lstm_forward`. Each step consumes the float32 h/s values
    stored for the previous step, exactly like the blocked path, so the two
    implementations only differ in within-step accumulation order.
    """
    weights.validate()
    k, c = weights.w_i.shape
    t_steps, n = x.shape[0], x.shape[1]
    if x.shape != (t_steps, n, c):
        raise LayoutError(f"x has shape {x.shape}, expected (T, N, {c})")
    x64 = x.astype(np.float64)
    h_prev = (np.zeros((n, k)) if h_init is None else h_init.astype(np.float64))
    s_prev = (np.zeros((n, k)) if s_init is None else s_init.astype(np.float64))
    w64 = {g: getattr(weights, f"w_{g}").astype(np.float64) for g in GATE_NAMES}
    r64 = {g: getattr(weights, f"r_{g}").astype(np.float64) for g in GATE_NAMES}
    b64 = {g: getattr(weights, f"bias_{g}").astype(np.float64) for g in GATE_NAMES}

    h = np.empty((t_steps, n, k), FP32)
    s = np.empty((t_steps, n, k), FP32)
    gates = (
        {g: np.empty((t_steps, n, k), FP32) for g in GATE_NAMES} if keep_gates else None
    )
    for t in range(t_steps):
        pre = {
            g: x64[t] @ w64[g].T + h_prev @ r64[g].T + b64[g] for g in GATE_NAMES
        }
        i_t = 1.0 / (1.0 + np.exp(-pre["i"]))
        c_t = np.tanh(pre["c"])
        f_t = 1.0 / (1.0 + np.exp(-pre["f"]))
        o_t = 1.0 / (1.0 + np.exp(-pre["o"]))
        s_t = f_t * s_prev + i_t * c_t
        h_t = o_t * np.tanh(s_t)
        h[t] = h_t
        s[t] = s_t
        if gates is not None:
            for g, val in (("i", i_t), ("c", c_t), ("f", f_t), ("o", o_t)):
                gates[g][t] = val
        h_prev = h[t].astype(np.float64)
        s_prev = s[t].astype(np.float64)
    return LstmStateSequence(h=h, s=s, gates=gates)
