"""The batch-reduce GEMM building block and its register-tile planner.

The kernel computes ``C = beta * C + alpha * sum_i A_i @ B_i`` for a batch of
operand pairs reduced into one output block. One storage contract is used
everywhere in this package (each operand is a numpy view; its strides carry
the leading dimensions):

* ``a_blocks[i]``: shape ``(k, m)``; row ``r`` holds column ``r`` of the
  mathematical ``A_i``, so A columns are unit-stride ("column-accessible" A,
  the layout weight blocks are stored in). Row-to-row stride is ``lda >= m``.
* ``b_blocks[i]``: shape ``(n, k)``; row ``j`` holds column ``j`` of the
  mathematical ``B_i``, unit-stride along k. The row stride ``ldb`` may
  exceed ``k`` (convolution passes input pixel rows with stride
  ``stride * b_c``).
* ``c``: shape ``(n, m)``, unit-stride along m, row stride ``ldc >= m``.

The tiled path walks ``m_b x n_b`` output tiles; each tile is loaded once,
accumulated across the whole batch and the full k extent, and stored once,
i.e. the accumulation chain per tile is never broken across the batch.
Tile accumulators are held in float64 while all tensor storage stays float32:
the scalar reference oracle accumulates in float64, and its 1e-5 comparison
tolerance only covers summation-order differences, not single-precision
accumulation drift over reductions of thousands of terms.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

VLEN = 16
FMA_LATENCY = 5
REGISTER_BUDGET = 32
TILE_OVERRIDE_ENV = "BRGEMM_TILE_OVERRIDE"


class BrgemmError(ValueError):
    """Operand lists, extents or tile plans that violate the call contract."""


@dataclass(frozen=True)
class BrgemmSpec:
    """Shape and scaling ledger of one batch-reduce GEMM call."""

    m: int
    n: int
    k: int
    batch: int
    alpha: float = 1.0
    beta: float = 1.0
    lda: int | None = None
    ldb: int | None = None
    ldc: int | None = None

    def __post_init__(self):
        for name in ("m", "n", "k", "batch"):
            if getattr(self, name) < 0:
                raise BrgemmError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.lda is not None and self.lda < self.m:
            raise BrgemmError(f"lda={self.lda} < m={self.m}")
        if self.ldb is not None and self.ldb < self.k:
            raise BrgemmError(f"ldb={self.ldb} < k={self.k}")
        if self.ldc is not None and self.ldc < self.m:
            raise BrgemmError(f"ldc={self.ldc} < m={self.m}")


@dataclass(frozen=True)
class TilePlan:
    """Register-tile geometry for the microkernel.

    ``m_b`` runs along the unit-stride (vectorized) axis, ``n_b`` along the
    broadcast axis. The modeled register use is ``accumulators`` plus ``n_b``
    broadcast registers plus one A-column load register.
    """

    m_b: int
    n_b: int
    vlen: int = VLEN
    fma_latency: int = FMA_LATENCY
    degraded: bool = False

    @property
    def accumulators(self) -> int:
        return self.n_b * math.ceil(self.m_b / self.vlen)

    @property
    def register_use(self) -> int:
        return self.accumulators + self.n_b + 1


def plan_tiles(
    m: int,
    n: int,
    vlen: int = VLEN,
    fma_latency: int = FMA_LATENCY,
    budget: int = REGISTER_BUDGET,
    force: tuple[int, int] | None = None,
) -> TilePlan:
    """Pick the (m_b, n_b) register tile for an m x n output block.

    Maximizes the accumulator count within the register budget; ties prefer
    m_b dividing m, then larger m_b, then larger n_b. If no feasible plan
    reaches ``fma_latency`` accumulators the best plan is returned flagged
    degraded. ``force`` bypasses the search but is still validated.
    """
    if m < 1 or n < 1:
        raise BrgemmError(f"extents must be >= 1, got m={m}, n={n}")
    if vlen < 1 or fma_latency < 1:
        raise BrgemmError("vlen and fma_latency must be >= 1")
    if budget < 3:
        raise BrgemmError(f"register budget must be >= 3, got {budget}")

    def build(m_b: int, n_b: int) -> TilePlan:
        plan = TilePlan(m_b, n_b, vlen=vlen, fma_latency=fma_latency)
        return replace(plan, degraded=plan.accumulators < fma_latency)

    if force is not None:
        m_b, n_b = force
        if m_b < 1 or n_b < 1:
            raise BrgemmError(f"forced tile must be positive, got {force}")
        if m_b % vlen and m_b >= vlen:
            raise BrgemmError(f"forced m_b={m_b} is not a multiple of vlen={vlen}")
        plan = build(m_b, n_b)
        if plan.register_use > budget:
            raise BrgemmError(
                f"forced tile {force} needs {plan.register_use} registers, budget {budget}"
            )
        return plan

    if m < vlen:
        m_candidates = [m]
    else:
        m_candidates = [v * vlen for v in range(1, m // vlen + 1)]

    best = None
    best_key = None
    for m_b in m_candidates:
        regs_per_acc = math.ceil(m_b / vlen)
        n_b = min(n, (budget - 1) // (regs_per_acc + 1))
        if n_b < 1:
            continue
        acc = n_b * regs_per_acc
        key = (acc, m % m_b == 0, m_b, n_b)
        if best_key is None or key > best_key:
            best_key = key
            best = (m_b, n_b)
    if best is None:
        # Fall back to the smallest tile; feasible for any budget >= 3.
        best = (min(m, vlen), 1)
    return build(*best)


def tile_override_from_env(env=None) -> tuple[int, int] | None:
    """Parse the BRGEMM_TILE_OVERRIDE="m_b,n_b" environment variable."""
    env = os.environ if env is None else env
    raw = env.get(TILE_OVERRIDE_ENV)
    if not raw:
        return None
    parts = raw.split(",")
    try:
        m_b, n_b = (int(p) for p in parts)
    except (TypeError, ValueError):
        raise BrgemmError(
            f"{TILE_OVERRIDE_ENV} must be 'm_b,n_b' integers, got {raw!r}"
        ) from None
    return m_b, n_b


def _check_blocks(a_blocks, b_blocks, c, spec: BrgemmSpec) -> None:
    if len(a_blocks) != spec.batch or len(b_blocks) != spec.batch:
        raise BrgemmError(
            f"operand list lengths ({len(a_blocks)}, {len(b_blocks)}) "
            f"do not match batch={spec.batch}"
        )
    if c.shape != (spec.n, spec.m):
        raise BrgemmError(f"c has shape {c.shape}, expected {(spec.n, spec.m)}")
    for i, (a, b) in enumerate(zip(a_blocks, b_blocks)):
        if a.shape != (spec.k, spec.m):
            raise BrgemmError(
                f"a_blocks[{i}] has shape {a.shape}, expected {(spec.k, spec.m)}"
            )
        if b.shape != (spec.n, spec.k):
            raise BrgemmError(
                f"b_blocks[{i}] has shape {b.shape}, expected {(spec.n, spec.k)}"
            )
    if spec.lda is not None:
        for a in a_blocks:
            if spec.k > 1 and a.strides[0] != spec.lda * a.itemsize:
                raise BrgemmError(f"a block row stride != lda={spec.lda}")
    if spec.ldb is not None:
        for b in b_blocks:
            if spec.n > 1 and b.strides[0] != spec.ldb * b.itemsize:
                raise BrgemmError(f"b block row stride != ldb={spec.ldb}")
    if spec.ldc is not None and spec.n > 1 and c.strides[0] != spec.ldc * c.itemsize:
        raise BrgemmError(f"c row stride != ldc={spec.ldc}")


def _validate_plan(spec: BrgemmSpec, plan: TilePlan) -> None:
    if plan.m_b < 1 or plan.n_b < 1:
        raise BrgemmError(f"invalid tile plan ({plan.m_b}, {plan.n_b})")
    if plan.m_b % plan.vlen and plan.m_b >= plan.vlen:
        raise BrgemmError(
            f"invalid tile plan: m_b={plan.m_b} not a multiple of vlen={plan.vlen}"
        )


def brgemm_reference(a_blocks, b_blocks, c, spec: BrgemmSpec) -> np.ndarray:
    """Scalar-order reference: whole-block float64 accumulation, then one f32 round.

    This is the oracle the tiled path is checked against; it carries no tile
    structure at all.
    """
    _check_blocks(a_blocks, b_blocks, c, spec)
    total = np.zeros(c.shape, dtype=np.float64)
    if spec.alpha != 0.0:
        for a, b in zip(a_blocks, b_blocks):
            total += np.matmul(b, a, dtype=np.float64)
        total *= spec.alpha
    if spec.beta != 0.0:
        total += spec.beta * c.astype(np.float64)
    c[...] = total
    return c


def _accumulate_tiles(a_blocks, b_blocks, acc: np.ndarray, m_b: int, n_b: int) -> None:
    """Fold sum_i A_i @ B_i into the float64 accumulator, tile by tile."""
    n, m = acc.shape
    for j0 in range(0, n, n_b):
        j1 = min(j0 + n_b, n)
        for i0 in range(0, m, m_b):
            i1 = min(i0 + m_b, m)
            tile = acc[j0:j1, i0:i1]
            for a, b in zip(a_blocks, b_blocks):
                tile += np.matmul(b[j0:j1], a[:, i0:i1], dtype=np.float64)


def brgemm_accumulate(a_blocks, b_blocks, acc: np.ndarray, spec: BrgemmSpec,
                      plan: TilePlan | None = None) -> np.ndarray:
    """Accumulation core of the tiled kernel: acc += sum_i A_i @ B_i.

    ``acc`` is a float64 (n, m) buffer owned by the caller. The primitives use
    this to keep one output tile's accumulation chain unbroken across several
    pointer-list chunks (cache blocking of the reduce loops) before a single
    float32 store; alpha and beta are the caller's business here.
    """
    if plan is None:
        plan = plan_tiles(max(spec.m, 1), max(spec.n, 1))
    _validate_plan(spec, plan)
    _check_blocks(a_blocks, b_blocks, acc, spec)
    if acc.dtype != np.float64:
        raise BrgemmError(f"accumulator must be float64, got {acc.dtype}")
    if spec.m and spec.n and spec.batch:
        _accumulate_tiles(a_blocks, b_blocks, acc, plan.m_b, plan.n_b)
    return acc


def brgemm(a_blocks, b_blocks, c, spec: BrgemmSpec, plan: TilePlan | None = None) -> np.ndarray:
    """Tiled batch-reduce GEMM over address-designated operand blocks.

    Walks m_b x n_b output tiles (full tiles plus narrower edge tiles); per
    tile the accumulator is initialized once, every (A_i, B_i) pair is folded
    in, and the tile is stored once.
    """
    if plan is None:
        plan = plan_tiles(max(spec.m, 1), max(spec.n, 1))
    _validate_plan(spec, plan)
    _check_blocks(a_blocks, b_blocks, c, spec)
    n, m = spec.n, spec.m
    if m == 0 or n == 0:
        return c
    if spec.batch == 0 or spec.alpha == 0.0:
        if spec.beta == 0.0:
            c[...] = 0.0
        elif spec.beta != 1.0:
            c[...] = spec.beta * c.astype(np.float64)
        return c
    m_b, n_b = plan.m_b, plan.n_b
    for j0 in range(0, n, n_b):
        j1 = min(j0 + n_b, n)
        for i0 in range(0, m, m_b):
            i1 = min(i0 + m_b, m)
            acc = np.zeros((j1 - j0, i1 - i0), dtype=np.float64)
            for a, b in zip(a_blocks, b_blocks):
                acc += np.matmul(b[j0:j1], a[:, i0:i1], dtype=np.float64)
            if spec.alpha != 1.0:
                acc *= spec.alpha
            if spec.beta != 0.0:
                acc += spec.beta * c[j0:j1, i0:i1].astype(np.float64)
            c[j0:j1, i0:i1] = acc
    return c


def brgemm_strided(
    a_base: np.ndarray,
    b_base: np.ndarray,
    stride_a: int,
    stride_b: int,
    c: np.ndarray,
    spec: BrgemmSpec,
    plan: TilePlan | None = None,
) -> np.ndarray:
    """Batch-reduce GEMM whose blocks sit at fixed element strides in flat buffers.

    ``a_blocks[i]`` starts at element ``i * stride_a`` of ``a_base`` (ditto B);
    bit-identical to :func:`brgemm` on the equivalent address lists.
    """
    if stride_a < 0 or stride_b < 0:
        raise BrgemmError("strides must be >= 0")
    a_flat = np.ravel(a_base)
    b_flat = np.ravel(b_base)
    a_span = spec.k * spec.m
    b_span = spec.n * spec.k
    if spec.batch > 0:
        need_a = (spec.batch - 1) * stride_a + a_span
        need_b = (spec.batch - 1) * stride_b + b_span
        if need_a > a_flat.size:
            raise BrgemmError(
                f"stride_a={stride_a} with batch={spec.batch} overruns A "
                f"({need_a} > {a_flat.size})"
            )
        if need_b > b_flat.size:
            raise BrgemmError(
                f"stride_b={stride_b} with batch={spec.batch} overruns B "
                f"({need_b} > {b_flat.size})"
            )
    a_blocks = [
        a_flat[i * stride_a : i * stride_a + a_span].reshape(spec.k, spec.m)
        for i in range(spec.batch)
    ]
    b_blocks = [
        b_flat[i * stride_b : i * stride_b + b_span].reshape(spec.n, spec.k)
        for i in range(spec.batch)
    ]
    return brgemm(a_blocks, b_blocks, c, spec, plan)


def batched_gemm(a_blocks, b_blocks, c_blocks, spec: BrgemmSpec, plan: TilePlan | None = None):
    """Baseline batched GEMM: independent C_i = beta*C_i + alpha*A_i@B_i per pair.

    No reduction across the batch; kept as the comparison baseline the
    benchmark CLI can run against the batch-reduce kernel.
    """
    if len(c_blocks) != spec.batch:
        raise BrgemmError(
            f"c_blocks has length {len(c_blocks)}, expected batch={spec.batch}"
        )
    single = replace(spec, batch=1)
    for a, b, ci in zip(a_blocks, b_blocks, c_blocks):
        brgemm([a], [b], ci, single, plan)
    return c_blocks
