"""Direct convolution forward pass via batch-reduce GEMM on blocked layouts.

For every (image, output-channel block, output row, pixel tile) task, the
weight and input sub-blocks of all (r, s, c) triples are gathered into one
batch-reduce call, so each output tile is accumulated entirely in the tile
accumulator instead of being reloaded per filter tap. The parallelization
strategy only changes task assignment, never the per-task math, so outputs
are bit-identical across strategies and worker counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .brgemm import BrgemmSpec, brgemm, brgemm_accumulate, plan_tiles
from .partition import run_on_workers, split_evenly
from .tensor import (
    FP32,
    BlockedTensor,
    LayoutError,
    clamp_block,
    make_conv_output,
    pad_spatial,
)

# Weight bytes one batch-reduce call may touch (keeps the slice L2-resident);
# bounds the default C_b chunking of the reduction.
WEIGHT_SLICE_BUDGET = 512 * 1024

# Whole-weight-tensor size above which work is split along the output feature
# map dimension so each worker touches only part of the weights.
STRATEGY_WEIGHT_BUDGET = 1024 * 1024

DEFAULT_CHANNEL_BLOCK = 64


class StrategyKind(Enum):
    MINIBATCH_FIRST = "minibatch"
    TASK_GRID = "task-grid"
    FEATURE_MAP_FIRST = "feature-map"


@dataclass(frozen=True)
class ParallelStrategy:
    kind: StrategyKind
    workers: int = 1


@dataclass
class ConvSpec:
    """Convolution problem descriptor plus blocking choices.

    Unset paddings default to same-padding ((r-1)/2) for odd filters; unset
    channel blocks default to min(64, extent), clamped to the extent when it
    is smaller (first layer has C=3). ``b_q`` (pixel tile) defaults to the
    tile planner's choice at forward time; ``cb_chunk`` (how many C_b blocks
    feed one batch-reduce call) defaults to the largest divisor of C_b whose
    weight slice fits WEIGHT_SLICE_BUDGET.
    """

    n: int
    c: int
    k: int
    h: int
    w: int
    r: int
    s: int
    stride: int = 1
    pad_h: int | None = None
    pad_w: int | None = None
    b_c: int | None = None
    b_k: int | None = None
    b_q: int | None = None
    cb_chunk: int | None = None

    def __post_init__(self):
        if self.pad_h is None:
            if self.r % 2 == 0:
                raise LayoutError(f"even filter height r={self.r} needs an explicit pad_h")
            self.pad_h = (self.r - 1) // 2
        if self.pad_w is None:
            if self.s % 2 == 0:
                raise LayoutError(f"even filter width s={self.s} needs an explicit pad_w")
            self.pad_w = (self.s - 1) // 2
        self.b_c = clamp_block(self.c, DEFAULT_CHANNEL_BLOCK if self.b_c is None else self.b_c)
        self.b_k = clamp_block(self.k, DEFAULT_CHANNEL_BLOCK if self.b_k is None else self.b_k)
        self.validate()

    def validate(self) -> None:
        for name in ("n", "c", "k", "h", "w", "r", "s"):
            if getattr(self, name) < 1:
                raise LayoutError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.stride < 1:
            raise LayoutError(f"stride must be >= 1, got {self.stride}")
        if self.pad_h < 0 or self.pad_w < 0:
            raise LayoutError("padding must be >= 0")
        if self.c % self.b_c:
            raise LayoutError(f"b_c={self.b_c} does not divide C={self.c}")
        if self.k % self.b_k:
            raise LayoutError(f"b_k={self.b_k} does not divide K={self.k}")
        if self.h + 2 * self.pad_h < self.r or self.w + 2 * self.pad_w < self.s:
            raise LayoutError("filter larger than padded input")
        if self.out_h < 1 or self.out_w < 1:
            raise LayoutError("output spatial extents must be >= 1")
        if self.b_q is not None and self.b_q < 1:
            raise LayoutError(f"b_q must be >= 1, got {self.b_q}")
        if self.cb_chunk is not None and (
            self.cb_chunk < 1 or self.c_blocks % self.cb_chunk
        ):
            raise LayoutError(
                f"cb_chunk={self.cb_chunk} must divide C_b={self.c_blocks}"
            )

    @property
    def out_h(self) -> int:
        return (self.h + 2 * self.pad_h - self.r) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.w + 2 * self.pad_w - self.s) // self.stride + 1

    @property
    def c_blocks(self) -> int:
        return self.c // self.b_c

    @property
    def k_blocks(self) -> int:
        return self.k // self.b_k

    @property
    def weight_bytes(self) -> int:
        return self.k * self.c * self.r * self.s * 4


@dataclass(frozen=True)
class PixelCollapse:
    """Whether the P and Q loops collapse into one flat pixel dimension."""

    applied: bool
    extent: int


def collapse_pixels(spec: ConvSpec) -> PixelCollapse:
    """1x1 unit-stride unpadded convolutions walk pixels sequentially, so the
    spatial dims collapse into one extent of P*Q (larger pixel tiles become
    possible). Anything else is a flagged no-op."""
    applicable = (
        spec.r == 1 and spec.s == 1 and spec.stride == 1
        and spec.pad_h == 0 and spec.pad_w == 0
    )
    extent = spec.out_h * spec.out_w if applicable else spec.out_w
    return PixelCollapse(applied=applicable, extent=extent)


def choose_strategy(
    spec: ConvSpec, workers: int, cache_budget: int = STRATEGY_WEIGHT_BUDGET
) -> ParallelStrategy:
    """Pick a task-assignment strategy for the given worker count.

    Minibatch-first when images alone give every worker work; otherwise
    feature-map-first for large weight tensors (each worker then touches only
    a slice of the weights), else the full task grid. Pure function; the
    caller may override freely since strategies never change results.
    """
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    if spec.n >= workers:
        kind = StrategyKind.MINIBATCH_FIRST
    elif spec.weight_bytes > cache_budget:
        kind = StrategyKind.FEATURE_MAP_FIRST
    else:
        kind = StrategyKind.TASK_GRID
    return ParallelStrategy(kind=kind, workers=workers)


def _default_cb_chunk(spec: ConvSpec) -> int:
    per_block = spec.r * spec.s * spec.b_c * spec.b_k * 4
    best = 1
    for d in range(1, spec.c_blocks + 1):
        if spec.c_blocks % d == 0 and d * per_block <= WEIGHT_SLICE_BUDGET:
            best = d
    return best


def _check_layouts(spec: ConvSpec, inp: BlockedTensor, wgt: BlockedTensor) -> None:
    want_in = {"n": spec.n, "c": spec.c, "h": spec.h, "w": spec.w}
    if inp.logical_shape() != want_in or inp.inner_shape != (spec.b_c,):
        raise LayoutError(
            f"input layout {inp.logical_shape()}/{inp.inner_shape} does not match spec"
        )
    want_w = {"k": spec.k, "c": spec.c, "r": spec.r, "s": spec.s}
    if wgt.logical_shape() != want_w or wgt.inner_shape != (spec.b_c, spec.b_k):
        raise LayoutError(
            f"weight layout {wgt.logical_shape()}/{wgt.inner_shape} does not match spec"
        )


def conv2d_forward(
    spec: ConvSpec,
    inp: BlockedTensor,
    wgt: BlockedTensor,
    strategy: ParallelStrategy | None = None,
    collapse: bool | None = None,
    tile_force: tuple[int, int] | None = None,
) -> BlockedTensor:
    """Direct convolution over I[N][C_b][H][W][b_c] and W[K_b][C_b][R][S][b_c][b_k].

    Returns O[N][K_b][P][Q][b_k]. Padding is applied internally by copy. Per
    task one batch-reduce call of length R*S*cb_chunk reduces all filter taps
    and channel blocks of one chunk into the output tile; input rows enter
    with their native row stride of stride*b_c. ``collapse`` overrides the
    automatic pixel-collapsing decision (ignored when not applicable).
    """
    spec.validate()
    _check_layouts(spec, inp, wgt)
    if strategy is None:
        strategy = choose_strategy(spec, 1)
    workers = max(1, strategy.workers)
    col = collapse_pixels(spec)
    use_collapse = col.applied if collapse is None else bool(collapse and col.applied)

    p, q = spec.out_h, spec.out_w
    b_c, b_k, stride = spec.b_c, spec.b_k, spec.stride
    c_blocks, k_blocks = spec.c_blocks, spec.k_blocks
    extent = p * q if use_collapse else q
    plan = plan_tiles(b_k, spec.b_q if spec.b_q else extent, force=tile_force)
    b_q = min(spec.b_q or plan.n_b, extent)
    chunk = spec.cb_chunk or _default_cb_chunk(spec)
    chunk_starts = list(range(0, c_blocks, chunk))

    if spec.pad_h or spec.pad_w:
        ipad = pad_spatial(inp, spec.pad_h, spec.pad_w)
    else:
        ipad = inp
    out = make_conv_output(spec.n, spec.k, p, q, b_k)

    # Weight pointer lists depend only on (k_b, chunk); build them once.
    a_lists = [
        [
            [
                wgt.data[kb, c0 + cc, r, s]
                for r in range(spec.r)
                for s in range(spec.s)
                for cc in range(chunk)
            ]
            for c0 in chunk_starts
        ]
        for kb in range(k_blocks)
    ]

    if use_collapse:
        tiles = [(e0, min(b_q, extent - e0)) for e0 in range(0, extent, b_q)]
        in_flat = ipad.data.reshape(spec.n, c_blocks, spec.h * spec.w, b_c)
        out_flat = out.data.reshape(spec.n, k_blocks, extent, b_k)
    else:
        tiles = [
            (oj, oi, min(b_q, q - oi))
            for oj in range(p)
            for oi in range(0, q, b_q)
        ]
    n_tiles = len(tiles)
    per_image = k_blocks * n_tiles
    total = spec.n * per_image

    batch = spec.r * spec.s * chunk
    multi_chunk = len(chunk_starts) > 1
    specs = {
        width: BrgemmSpec(
            m=b_k, n=width, k=b_c, batch=batch, beta=0.0,
            lda=b_k, ldb=b_c if use_collapse else stride * b_c,
            ldc=None if multi_chunk else b_k,
        )
        for width in {b_q, tiles[-1][-1]}
    }

    feature_major = strategy.kind is StrategyKind.FEATURE_MAP_FIRST

    def decode(flat: int) -> tuple[int, int, int]:
        if feature_major:
            kb, rest = divmod(flat, spec.n * n_tiles)
            img, tile = divmod(rest, n_tiles)
        else:
            img, rest = divmod(flat, per_image)
            kb, tile = divmod(rest, n_tiles)
        return img, kb, tile

    def run_task(img: int, kb: int, tile: int) -> None:
        if use_collapse:
            e0, width = tiles[tile]
            out_view = out_flat[img, kb, e0 : e0 + width]

            def chunk_views(c0):
                return [in_flat[img, c0 + cc, e0 : e0 + width] for cc in range(chunk)]
        else:
            oj, oi, width = tiles[tile]
            ij = stride * oj
            ii = stride * oi
            span = stride * (width - 1) + 1
            out_view = out.data[img, kb, oj, oi : oi + width]

            def chunk_views(c0):
                return [
                    ipad.data[img, c0 + cc, ij + r, ii + s : ii + s + span : stride]
                    for r in range(spec.r)
                    for s in range(spec.s)
                    for cc in range(chunk)
                ]

        if not multi_chunk:
            brgemm(a_lists[kb][0], chunk_views(0), out_view, specs[width], plan)
        else:
            # The tile accumulator survives across reduce chunks; the output
            # is stored once, so chunking never breaks the accumulation chain.
            acc = np.zeros((width, b_k), dtype=np.float64)
            for ci, c0 in enumerate(chunk_starts):
                brgemm_accumulate(a_lists[kb][ci], chunk_views(c0), acc, specs[width], plan)
            out_view[...] = acc

    def run_range(widx: int, rng: range):
        for flat in rng:
            run_task(*decode(flat))

    if strategy.kind is StrategyKind.MINIBATCH_FIRST:
        img_ranges = split_evenly(spec.n, workers)
        ranges = [
            range(ir.start * per_image, ir.stop * per_image) for ir in img_ranges
        ]
    else:
        ranges = split_evenly(total, workers)
    run_on_workers(run_range, ranges)
    return out


def conv2d_forward_reference(
    spec: ConvSpec, i_nchw: np.ndarray, w_kcrs: np.ndarray
) -> np.ndarray:
    """Direct-loop oracle over unblocked NCHW / KCRS tensors.

    Accumulates in float64 with the (r, s) loops explicit and the remaining
    loops as dense contractions; no blocking, tiling or batching structure.
    """
    if i_nchw.shape != (spec.n, spec.c, spec.h, spec.w):
        raise LayoutError(f"input shape {i_nchw.shape} does not match spec")
    if w_kcrs.shape != (spec.k, spec.c, spec.r, spec.s):
        raise LayoutError(f"weight shape {w_kcrs.shape} does not match spec")
    p, q, stride = spec.out_h, spec.out_w, spec.stride
    i64 = np.pad(
        i_nchw.astype(np.float64),
        ((0, 0), (0, 0), (spec.pad_h, spec.pad_h), (spec.pad_w, spec.pad_w)),
    )
    w64 = w_kcrs.astype(np.float64)
    out = np.zeros((spec.n, spec.k, p, q))
    h_span = stride * (p - 1) + 1
    w_span = stride * (q - 1) + 1
    for r in range(spec.r):
        for s in range(spec.s):
            window = i64[:, :, r : r + h_span : stride, s : s + w_span : stride]
            contrib = np.tensordot(window, w64[:, :, r, s], axes=([1], [1]))
            out += np.moveaxis(contrib, 3, 1)
    return out.astype(FP32)
