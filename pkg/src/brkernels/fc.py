"""Fully-connected forward layer on fully blocked layouts with fused activation.

Each (ib_n, ib_k) output block is produced by a single batch-reduce GEMM over
the C_b weight/input block pairs, followed by the activation applied on the
block while it is still hot. There is no bias term. Output blocks are
disjoint per work item, so any worker count gives bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .brgemm import BrgemmSpec, brgemm, plan_tiles
from .lstm import _default_minibatch_block, _reduce_chunks, sigmoid_block
from .partition import partition_work_2d, run_on_workers
from .tensor import (
    FP32,
    BlockedTensor,
    FetchCounter,
    LayoutError,
    block_weight_2d,
    clamp_block,
)


class Activation(Enum):
    IDENTITY = "identity"
    RELU = "relu"
    SIGMOID = "sigmoid"

    def apply(self, buf: np.ndarray) -> np.ndarray:
        """In-place activation on a hot output block."""
        if self is Activation.RELU:
            np.maximum(buf, 0.0, out=buf)
        elif self is Activation.SIGMOID:
            sigmoid_block(buf)
        return buf


@dataclass
class FcParams:
    """Problem descriptor: blocked (K, C) weights, dims, blocking, activation."""

    w: BlockedTensor
    n: int
    c: int
    k: int
    b_n: int
    b_c: int
    b_k: int
    activation: Activation = Activation.IDENTITY

    @classmethod
    def from_dense(
        cls,
        w_dense: np.ndarray,
        n: int,
        b_n: int | None = None,
        b_c: int | None = None,
        b_k: int | None = None,
        activation: Activation = Activation.IDENTITY,
    ) -> "FcParams":
        k, c = w_dense.shape
        b_k = clamp_block(k, 64 if b_k is None else b_k)
        b_c = clamp_block(c, 64 if b_c is None else b_c)
        b_n = _default_minibatch_block(n) if b_n is None else b_n
        params = cls(
            w=block_weight_2d(w_dense, b_c, b_k),
            n=n, c=c, k=k, b_n=b_n, b_c=b_c, b_k=b_k, activation=activation,
        )
        params.validate()
        return params

    def validate(self) -> None:
        for name, extent, block in (
            ("N", self.n, self.b_n), ("C", self.c, self.b_c), ("K", self.k, self.b_k)
        ):
            if block < 1 or extent % block:
                raise LayoutError(f"block {block} does not divide {name}={extent}")
        if self.w.logical_shape() != {"k": self.k, "c": self.c}:
            raise LayoutError("blocked weights do not match (K, C) dims")

    @property
    def k_blocks(self) -> int:
        return self.k // self.b_k

    @property
    def c_blocks(self) -> int:
        return self.c // self.b_c

    @property
    def n_blocks(self) -> int:
        return self.n // self.b_n


def fc_forward(
    params: FcParams,
    x: BlockedTensor,
    workers: int = 1,
    reduce_block: int | None = None,
    tile_force: tuple[int, int] | None = None,
    fetch_counter: FetchCounter | None = None,
) -> BlockedTensor:
    """Forward pass Y = g(W @ X) over X[N_b][C_b][b_n][b_c] blocked input.

    Returns Y in the [N_b][K_b][b_n][b_k] layout. Per worker the weight blocks
    of one ib_k row are fetched once and reused across the worker's whole ib_n
    range (``fetch_counter`` records (worker, tensor, ib_k, ib_c) events).
    ``reduce_block`` optionally chunks the C_b reduction for oversized weights.
    """
    params.validate()
    if x.logical_shape() != {"n": params.n, "c": params.c}:
        raise LayoutError(
            f"input layout {x.logical_shape()} does not match N={params.n}, C={params.c}"
        )
    if x.inner_shape != (params.b_n, params.b_c):
        raise LayoutError(
            f"input blocking {x.inner_shape} does not match ({params.b_n}, {params.b_c})"
        )
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    b_n, b_c, b_k = params.b_n, params.b_c, params.b_k
    k_blocks, c_blocks, n_blocks = params.k_blocks, params.c_blocks, params.n_blocks
    plan = plan_tiles(b_k, b_n, force=tile_force)
    chunks = _reduce_chunks(c_blocks, reduce_block)
    y = BlockedTensor(
        np.empty((n_blocks, k_blocks, b_n, b_k), FP32),
        n_outer=2,
        logical_dims={"n": (0, 2), "k": (1, 3)},
    )
    ranges = partition_work_2d(k_blocks, n_blocks, workers)

    def run_range(widx: int, rng: range):
        cur_ibk = -1
        w_views: list[np.ndarray] = []
        for flat in rng:
            ib_k, ib_n = divmod(flat, n_blocks)
            if ib_k != cur_ibk:
                cur_ibk = ib_k
                w_views = [params.w.data[ib_k, cb] for cb in range(c_blocks)]
                if fetch_counter is not None:
                    for cb in range(c_blocks):
                        fetch_counter.record((widx, "w", ib_k, cb))
            x_views = [x.data[ib_n, cb] for cb in range(c_blocks)]
            out = y.data[ib_n, ib_k]
            for ci, (c0, cnt) in enumerate(chunks):
                brgemm(
                    w_views[c0 : c0 + cnt],
                    x_views[c0 : c0 + cnt],
                    out,
                    BrgemmSpec(
                        m=b_k, n=b_n, k=b_c, batch=cnt,
                        beta=0.0 if ci == 0 else 1.0,
                    ),
                    plan,
                )
            params.activation.apply(out)

    run_on_workers(run_range, ranges)
    return y


def fc_forward_reference(
    w_dense: np.ndarray, x_dense: np.ndarray, activation: Activation = Activation.IDENTITY
) -> np.ndarray:
    """Dense oracle: Y = g(W @ X) with W (K, C), X (C, N), float64 accumulation."""
    if w_dense.ndim != 2 or x_dense.ndim != 2 or w_dense.shape[1] != x_dense.shape[0]:
        raise LayoutError(
            f"shape mismatch: W {w_dense.shape} X {x_dense.shape}"
        )
    z = w_dense.astype(np.float64) @ x_dense.astype(np.float64)
    if activation is Activation.RELU:
        z = np.maximum(z, 0.0)
    elif activation is Activation.SIGMOID:
        z = 1.0 / (1.0 + np.exp(-z))
    return z.astype(FP32)
