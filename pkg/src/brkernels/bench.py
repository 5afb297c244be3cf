"""Benchmark and verification CLI for the batch-reduce GEMM kernels.

Subcommands ``conv | lstm | fc | brgemm`` time the forward primitives on
seeded random problems, optionally verify each run against the module's
oracle first, and emit one stable-schema CSV row per workload. FLOP rates
count GEMM work only; weighted efficiency over the ResNet-50 layer table is
reported when a machine peak is supplied.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .brgemm import (
    BrgemmSpec,
    batched_gemm,
    brgemm,
    brgemm_reference,
    plan_tiles,
    tile_override_from_env,
)
from .cnn import (
    ConvSpec,
    _check_layouts,
    choose_strategy,
    conv2d_forward,
    conv2d_forward_reference,
)
from .fc import Activation, FcParams, fc_forward, fc_forward_reference
from .lstm import LstmCellWeights, LstmParams, lstm_forward, lstm_forward_reference
from .tensor import (
    FP32,
    block_conv_tensors,
    block_fc_activation,
    dump_tensor,
    make_conv_output,
    max_rel_error,
    pad_spatial,
    unblock_conv_output,
    unblock_fc_activation,
)

CSV_HEADER = "workload,id,N,workers,flops,seconds_mean,seconds_min,gflops,verified"
VERIFY_TOL = 1e-5
DEFAULT_ITERS = 400


# Occurrence counts are derived from the standard ResNet-50 bottleneck graph
# (53 convolutions in total); scripts/regen_resnet_counts.py re-derives them.
_RESNET50_ROWS = (
    # (id,   C,    K,   H,   W, R, S, stride, count)
    (1, 3, 64, 224, 224, 7, 7, 2, 1),
    (2, 64, 256, 56, 56, 1, 1, 1, 4),
    (3, 64, 64, 56, 56, 1, 1, 1, 1),
    (4, 64, 64, 56, 56, 3, 3, 1, 3),
    (5, 256, 64, 56, 56, 1, 1, 1, 2),
    (6, 256, 512, 56, 56, 1, 1, 2, 1),
    (7, 256, 128, 56, 56, 1, 1, 2, 1),
    (8, 128, 128, 28, 28, 3, 3, 1, 4),
    (9, 128, 512, 28, 28, 1, 1, 1, 4),
    (10, 512, 128, 28, 28, 1, 1, 1, 3),
    (11, 512, 1024, 28, 28, 1, 1, 2, 1),
    (12, 512, 256, 28, 28, 1, 1, 2, 1),
    (13, 256, 256, 14, 14, 3, 3, 1, 6),
    (14, 256, 1024, 14, 14, 1, 1, 1, 6),
    (15, 1024, 256, 14, 14, 1, 1, 1, 5),
    (16, 1024, 2048, 14, 14, 1, 1, 2, 1),
    (17, 1024, 512, 14, 14, 1, 1, 2, 1),
    (18, 512, 512, 7, 7, 3, 3, 1, 3),
    (19, 512, 2048, 7, 7, 1, 1, 1, 3),
    (20, 2048, 512, 7, 7, 1, 1, 1, 2),
)


@dataclass(frozen=True)
class LayerRecord:
    """One ResNet-50 layer row: conv problem plus its occurrence count."""

    layer_id: int
    spec: ConvSpec
    count: int


def resnet50_table(minibatch: int = 1) -> list[LayerRecord]:
    """All 20 distinct ResNet-50 convolution layers at the given mini-batch."""
    records = []
    for lid, c, k, h, w, r, s, stride, count in _RESNET50_ROWS:
        spec = ConvSpec(n=minibatch, c=c, k=k, h=h, w=w, r=r, s=s, stride=stride)
        records.append(LayerRecord(layer_id=lid, spec=spec, count=count))
    return records


def flops_conv(spec: ConvSpec, n: int) -> int:
    """Multiply-add count 2*N*K*C*R*S*P*Q of one forward convolution."""
    return 2 * n * spec.k * spec.c * spec.r * spec.s * spec.out_h * spec.out_w


def flops_lstm_fwd(t_steps: int, n: int, c: int, k: int) -> int:
    """GEMM flops of the LSTM forward pass: 2*T*N*(4*K*C + 4*K*K).

    Elementwise work is excluded to keep accounting GEMM-only.
    """
    return 2 * t_steps * n * (4 * k * c + 4 * k * k)


def flops_fc(n: int, c: int, k: int) -> int:
    return 2 * n * c * k


def flops_brgemm(spec: BrgemmSpec) -> int:
    return 2 * spec.m * spec.n * spec.k * spec.batch


@dataclass
class BenchResult:
    """Timing record of one workload: counted flops and measured seconds."""

    flops: int
    seconds_mean: float
    seconds_min: float
    iterations: int
    workers: int
    verified: bool | None = None

    def __post_init__(self):
        if self.seconds_mean <= 0 or self.seconds_min <= 0:
            raise ValueError("measured time must be > 0")

    @property
    def rate(self) -> float:
        """FLOP/s based on the mean time."""
        return self.flops / self.seconds_mean


def weighted_efficiency(results: list[tuple[BenchResult, int]], peak_flops: float) -> float:
    """(sum n_i*F_i) / (sum n_i*t_i) / peak over a topology's layer multiset."""
    if not results:
        raise ValueError("weighted_efficiency needs at least one result")
    if peak_flops <= 0:
        raise ValueError(f"peak must be > 0, got {peak_flops}")
    num = sum(n_i * res.flops for res, n_i in results)
    den = sum(n_i * res.seconds_mean for res, n_i in results)
    if den <= 0:
        raise ValueError("aggregate time must be > 0")
    return num / den / peak_flops


def conv2d_forward_per_block(spec: ConvSpec, inp, wgt):
    """Reduction-split baseline: one GEMM call per (r, s, c) block.

    Each call reloads and re-stores its output tile (beta=1 accumulate through
    memory) instead of keeping the chain in the tile accumulator. Exists only
    so the benchmark can measure what the fused reduction buys; numerically it
    matches :func:`conv2d_forward` within the oracle tolerance.
    """
    spec.validate()
    _check_layouts(spec, inp, wgt)
    p, q = spec.out_h, spec.out_w
    b_c, b_k, stride = spec.b_c, spec.b_k, spec.stride
    plan = plan_tiles(b_k, min(q, spec.b_q) if spec.b_q else q)
    b_q = min(spec.b_q or plan.n_b, q)
    ipad = pad_spatial(inp, spec.pad_h, spec.pad_w) if spec.pad_h or spec.pad_w else inp
    out = make_conv_output(spec.n, spec.k, p, q, b_k)
    specs = {
        (width, first): BrgemmSpec(
            m=b_k, n=width, k=b_c, batch=1, beta=0.0 if first else 1.0
        )
        for width in {b_q, q % b_q or b_q}
        for first in (True, False)
    }
    for img in range(spec.n):
        for kb in range(spec.k_blocks):
            for oj in range(p):
                ij = stride * oj
                for oi in range(0, q, b_q):
                    width = min(b_q, q - oi)
                    ii = stride * oi
                    span = stride * (width - 1) + 1
                    out_view = out.data[img, kb, oj, oi : oi + width]
                    first = True
                    for cb in range(spec.c_blocks):
                        for r in range(spec.r):
                            for s in range(spec.s):
                                a = wgt.data[kb, cb, r, s]
                                b = ipad.data[img, cb, ij + r, ii + s : ii + s + span : stride]
                                brgemm([a], [b], out_view, specs[(width, first)], plan)
                                first = False
    return out


@dataclass
class BenchConfig:
    """Parsed CLI options; defaults mirror the argparse defaults."""

    workload: str
    layers: str = "1-20"
    minibatch: int = 28
    workers: int = 1
    iters: int = DEFAULT_ITERS
    verify: bool = False
    peak_gflops: float | None = None
    csv: str | None = None
    dump: str | None = None
    include_reformat: bool = False
    seed: int = 0
    c: int = 256
    k: int = 256
    t_steps: int = 50
    activation: str = "relu"
    m: int = 64
    n: int = 6
    k_dim: int = 64
    batch: int = 16
    baseline: bool = False


def parse_layers(text: str, low: int = 1, high: int = 20) -> list[int]:
    """Parse a layer selection like '1-20', '13' or '1,4,8-10'."""
    ids: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            ids.update(range(int(a), int(b) + 1))
        elif part:
            ids.add(int(part))
    bad = [i for i in ids if not low <= i <= high]
    if bad or not ids:
        raise ValueError(f"layer ids must be in {low}..{high}, got {sorted(ids)}")
    return sorted(ids)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _time_fn(fn, iters: int) -> tuple[float, float]:
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.fmean(times), min(times)


def _csv_row(workload, layer_id, n, workers, flops, result: BenchResult | None, verified) -> str:
    if result is not None:
        mean = f"{result.seconds_mean:.9e}"
        tmin = f"{result.seconds_min:.9e}"
        gflops = f"{result.flops / result.seconds_mean / 1e9:.3f}"
    else:
        mean = tmin = gflops = "nan"
    if verified is None:
        vtext = ""
    else:
        vtext = "true" if verified else "false"
    return f"{workload},{layer_id},{n},{workers},{flops},{mean},{tmin},{gflops},{vtext}"


def _maybe_dump(cfg: BenchConfig, name: str, tensor) -> None:
    if cfg.dump:
        directory = Path(cfg.dump)
        directory.mkdir(parents=True, exist_ok=True)
        dump_tensor(tensor, directory / f"{name}.bin")


def _run_conv(cfg: BenchConfig, rows: list[str]) -> int:
    failures = 0
    force = tile_override_from_env()
    records = {rec.layer_id: rec for rec in resnet50_table(cfg.minibatch)}
    timed: list[tuple[BenchResult, int]] = []
    for lid in parse_layers(cfg.layers):
        rec = records[lid]
        spec = rec.spec
        rng = np.random.default_rng([cfg.seed, lid])
        i_dense = rng.uniform(-1, 1, (spec.n, spec.c, spec.h, spec.w)).astype(FP32)
        w_dense = rng.uniform(-1, 1, (spec.k, spec.c, spec.r, spec.s)).astype(FP32)
        strategy = choose_strategy(spec, cfg.workers)
        inp, wgt = block_conv_tensors(i_dense, w_dense, spec.b_c, spec.b_k)
        flops = flops_conv(spec, spec.n)
        verified = None
        if cfg.verify or cfg.dump:
            out = conv2d_forward(spec, inp, wgt, strategy, tile_force=force)
            if cfg.verify:
                ref = conv2d_forward_reference(spec, i_dense, w_dense)
                err = max_rel_error(unblock_conv_output(out), ref)
                verified = err <= VERIFY_TOL
                failures += 0 if verified else 1
                _log(f"conv id={lid:<2d} verify={'ok' if verified else 'FAIL'} max_rel_err={err:.2e}")
            _maybe_dump(cfg, f"conv_{lid:02d}_input", i_dense)
            _maybe_dump(cfg, f"conv_{lid:02d}_weights", w_dense)
            _maybe_dump(cfg, f"conv_{lid:02d}_output", unblock_conv_output(out))
        result = None
        if cfg.iters > 0:
            if cfg.include_reformat:
                def step():
                    blocked_i, blocked_w = block_conv_tensors(
                        i_dense, w_dense, spec.b_c, spec.b_k
                    )
                    conv2d_forward(spec, blocked_i, blocked_w, strategy, tile_force=force)
            else:
                def step():
                    conv2d_forward(spec, inp, wgt, strategy, tile_force=force)
            mean, tmin = _time_fn(step, cfg.iters)
            result = BenchResult(
                flops=flops, seconds_mean=mean, seconds_min=tmin,
                iterations=cfg.iters, workers=cfg.workers, verified=verified,
            )
            timed.append((result, rec.count))
            _log(
                f"conv id={lid:<2d} N={spec.n} mean={mean:.6f}s min={tmin:.6f}s "
                f"{flops / mean / 1e9:.1f} GFLOP/s"
            )
        rows.append(_csv_row("conv", lid, spec.n, cfg.workers, flops, result, verified))
    if timed and cfg.peak_gflops:
        eff = weighted_efficiency(timed, cfg.peak_gflops * 1e9)
        _log(f"weighted efficiency over selected layers: {100.0 * eff:.1f}% of peak")
    return failures


def _run_lstm(cfg: BenchConfig, rows: list[str]) -> int:
    failures = 0
    force = tile_override_from_env()
    rng = np.random.default_rng([cfg.seed, 101])
    t_steps, n, c, k = cfg.t_steps, cfg.minibatch, cfg.c, cfg.k
    weights = LstmCellWeights.random(rng, c, k)
    x = rng.uniform(-1, 1, (t_steps, n, c)).astype(FP32)
    params = LstmParams.from_dense(weights, t_steps, n)
    flops = flops_lstm_fwd(t_steps, n, c, k)
    verified = None
    if cfg.verify or cfg.dump:
        seq = lstm_forward(params, x, workers=cfg.workers, tile_force=force)
        if cfg.verify:
            ref = lstm_forward_reference(weights, x)
            err = max(max_rel_error(seq.h, ref.h), max_rel_error(seq.s, ref.s))
            verified = err <= VERIFY_TOL
            failures += 0 if verified else 1
            _log(f"lstm verify={'ok' if verified else 'FAIL'} max_rel_err={err:.2e}")
        _maybe_dump(cfg, "lstm_input", x)
        _maybe_dump(cfg, "lstm_hidden", seq.h)
        _maybe_dump(cfg, "lstm_state", seq.s)
    result = None
    if cfg.iters > 0:
        if cfg.include_reformat:
            def step():
                p = LstmParams.from_dense(weights, t_steps, n)
                lstm_forward(p, x, workers=cfg.workers, tile_force=force)
        else:
            def step():
                lstm_forward(params, x, workers=cfg.workers, tile_force=force)
        mean, tmin = _time_fn(step, cfg.iters)
        result = BenchResult(
            flops=flops, seconds_mean=mean, seconds_min=tmin,
            iterations=cfg.iters, workers=cfg.workers, verified=verified,
        )
        _log(
            f"lstm T={t_steps} N={n} C={c} K={k} mean={mean:.6f}s "
            f"{flops / mean / 1e9:.1f} GFLOP/s"
        )
    rows.append(_csv_row("lstm", 0, n, cfg.workers, flops, result, verified))
    return failures


def _run_fc(cfg: BenchConfig, rows: list[str]) -> int:
    failures = 0
    force = tile_override_from_env()
    rng = np.random.default_rng([cfg.seed, 202])
    n, c, k = cfg.minibatch, cfg.c, cfg.k
    activation = Activation(cfg.activation)
    w_dense = rng.uniform(-1, 1, (k, c)).astype(FP32)
    x_dense = rng.uniform(-1, 1, (n, c)).astype(FP32)
    params = FcParams.from_dense(w_dense, n, activation=activation)
    x_blocked = block_fc_activation(x_dense, params.b_n, params.b_c)
    flops = flops_fc(n, c, k)
    verified = None
    if cfg.verify or cfg.dump:
        y = fc_forward(params, x_blocked, workers=cfg.workers, tile_force=force)
        if cfg.verify:
            ref = fc_forward_reference(w_dense, x_dense.T, activation)
            err = max_rel_error(unblock_fc_activation(y), np.ascontiguousarray(ref.T))
            verified = err <= VERIFY_TOL
            failures += 0 if verified else 1
            _log(f"fc verify={'ok' if verified else 'FAIL'} max_rel_err={err:.2e}")
        _maybe_dump(cfg, "fc_input", x_dense)
        _maybe_dump(cfg, "fc_weights", w_dense)
        _maybe_dump(cfg, "fc_output", unblock_fc_activation(y))
    result = None
    if cfg.iters > 0:
        if cfg.include_reformat:
            def step():
                p = FcParams.from_dense(w_dense, n, activation=activation)
                xb = block_fc_activation(x_dense, p.b_n, p.b_c)
                fc_forward(p, xb, workers=cfg.workers, tile_force=force)
        else:
            def step():
                fc_forward(params, x_blocked, workers=cfg.workers, tile_force=force)
        mean, tmin = _time_fn(step, cfg.iters)
        result = BenchResult(
            flops=flops, seconds_mean=mean, seconds_min=tmin,
            iterations=cfg.iters, workers=cfg.workers, verified=verified,
        )
        _log(f"fc N={n} C={c} K={k} mean={mean:.6f}s {flops / mean / 1e9:.1f} GFLOP/s")
    rows.append(_csv_row("fc", 0, n, cfg.workers, flops, result, verified))
    return failures


def _run_brgemm(cfg: BenchConfig, rows: list[str]) -> int:
    failures = 0
    force = tile_override_from_env()
    rng = np.random.default_rng([cfg.seed, 303])
    m, n, k, batch = cfg.m, cfg.n, cfg.k_dim, cfg.batch
    spec = BrgemmSpec(m=m, n=n, k=k, batch=batch, beta=0.0)
    plan = plan_tiles(m, n, force=force)
    a_blocks = [rng.uniform(-1, 1, (k, m)).astype(FP32) for _ in range(batch)]
    b_blocks = [rng.uniform(-1, 1, (n, k)).astype(FP32) for _ in range(batch)]
    c = np.zeros((n, m), FP32)
    flops = flops_brgemm(spec)
    verified = None
    if cfg.verify:
        got = brgemm(a_blocks, b_blocks, np.zeros((n, m), FP32), spec, plan)
        ref = brgemm_reference(a_blocks, b_blocks, np.zeros((n, m), FP32), spec)
        err = max_rel_error(got, ref)
        verified = err <= VERIFY_TOL
        failures += 0 if verified else 1
        _log(f"brgemm verify={'ok' if verified else 'FAIL'} max_rel_err={err:.2e}")
    result = None
    if cfg.iters > 0:
        mean, tmin = _time_fn(lambda: brgemm(a_blocks, b_blocks, c, spec, plan), cfg.iters)
        result = BenchResult(
            flops=flops, seconds_mean=mean, seconds_min=tmin,
            iterations=cfg.iters, workers=cfg.workers, verified=verified,
        )
        _log(
            f"brgemm m={m} n={n} k={k} batch={batch} mean={mean:.6f}s "
            f"{flops / mean / 1e9:.1f} GFLOP/s"
        )
    rows.append(_csv_row("brgemm", 0, n, cfg.workers, flops, result, verified))
    if cfg.baseline:
        c_blocks = [np.zeros((n, m), FP32) for _ in range(batch)]
        base_verified = None
        if cfg.verify:
            batched_gemm(a_blocks, b_blocks, c_blocks, spec, plan)
            base_verified = all(
                max_rel_error(
                    ci, brgemm_reference([a], [b], np.zeros((n, m), FP32),
                                         BrgemmSpec(m=m, n=n, k=k, batch=1, beta=0.0))
                ) <= VERIFY_TOL
                for a, b, ci in zip(a_blocks, b_blocks, c_blocks)
            )
            failures += 0 if base_verified else 1
        base_result = None
        if cfg.iters > 0:
            mean, tmin = _time_fn(
                lambda: batched_gemm(a_blocks, b_blocks, c_blocks, spec, plan), cfg.iters
            )
            base_result = BenchResult(
                flops=flops, seconds_mean=mean, seconds_min=tmin,
                iterations=cfg.iters, workers=cfg.workers, verified=base_verified,
            )
        rows.append(
            _csv_row("batched_gemm", 0, n, cfg.workers, flops, base_result, base_verified)
        )
    return failures


_RUNNERS = {
    "conv": _run_conv,
    "lstm": _run_lstm,
    "fc": _run_fc,
    "brgemm": _run_brgemm,
}


def run_suite(cfg: BenchConfig) -> int:
    """Run one workload suite; returns a nonzero exit code if any verify failed."""
    if cfg.workload not in _RUNNERS:
        raise ValueError(f"unknown workload {cfg.workload!r}")
    if cfg.iters < 0:
        raise ValueError("iterations must be >= 0")
    rows: list[str] = []
    failures = _RUNNERS[cfg.workload](cfg, rows)
    text = "\n".join([CSV_HEADER, *rows]) + "\n"
    if cfg.csv:
        Path(cfg.csv).write_text(text)
        _log(f"wrote {len(rows)} CSV rows to {cfg.csv}")
    else:
        sys.stdout.write(text)
    return 1 if failures else 0


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--minibatch", type=int, help="mini-batch size N")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--iters", type=int, default=DEFAULT_ITERS,
                        help="timed iterations per workload (0 = verify only)")
    common.add_argument("--verify", action="store_true",
                        help="check against the module oracle before timing")
    common.add_argument("--peak-gflops", type=float, default=None,
                        help="machine peak in GFLOP/s for efficiency reporting")
    common.add_argument("--csv", type=str, default=None, help="CSV output path")
    common.add_argument("--dump", type=str, default=None,
                        help="directory for binary tensor dumps")
    common.add_argument("--include-reformat", action="store_true",
                        help="include blocked-layout reformatting in timed region")
    common.add_argument("--seed", type=int, default=0)

    parser = argparse.ArgumentParser(
        prog="bench", description="Batch-reduce GEMM kernel benchmarks"
    )
    sub = parser.add_subparsers(dest="workload", required=True)

    p_conv = sub.add_parser("conv", parents=[common], help="ResNet-50 layer table")
    p_conv.add_argument("--layers", type=str, default="1-20")
    p_conv.set_defaults(minibatch_default=28)

    p_lstm = sub.add_parser("lstm", parents=[common], help="LSTM forward cell")
    p_lstm.add_argument("--C", dest="c", type=int, default=256)
    p_lstm.add_argument("--K", dest="k", type=int, default=256)
    p_lstm.add_argument("--T", dest="t_steps", type=int, default=50)
    p_lstm.set_defaults(minibatch_default=168)

    p_fc = sub.add_parser("fc", parents=[common], help="fully connected forward layer")
    p_fc.add_argument("--C", dest="c", type=int, default=512)
    p_fc.add_argument("--K", dest="k", type=int, default=512)
    p_fc.add_argument("--activation", type=str, default="relu",
                      choices=[a.value for a in Activation])
    p_fc.set_defaults(minibatch_default=1344)

    p_br = sub.add_parser("brgemm", parents=[common], help="raw batch-reduce GEMM")
    p_br.add_argument("--m", type=int, default=64)
    p_br.add_argument("--n", type=int, default=6)
    p_br.add_argument("--k", dest="k_dim", type=int, default=64)
    p_br.add_argument("--batch", type=int, default=16)
    p_br.add_argument("--baseline", action="store_true",
                      help="also run the batched-GEMM (no reduction) baseline")
    p_br.set_defaults(minibatch_default=1)
    return parser


def main(argv=None) -> None:
    args = _build_parser().parse_args(argv)
    kwargs = dict(vars(args))
    minibatch_default = kwargs.pop("minibatch_default", 1)
    if kwargs.get("minibatch") is None:
        kwargs["minibatch"] = minibatch_default
    cfg = BenchConfig(**kwargs)
    try:
        code = run_suite(cfg)
    except ValueError as exc:
        _log(f"error: {exc}")
        code = 2
    sys.exit(code)


if __name__ == "__main__":
    main()
