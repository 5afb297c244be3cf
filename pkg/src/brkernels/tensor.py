"""Dense and blocked FP32 tensors plus the layout transforms shared by all kernels.

Conventions
-----------
A *dense* tensor is a C-contiguous ``float32`` numpy array; its row-major
shape is the logical shape. A :class:`BlockedTensor` stores the same values
with some logical dimensions split into a (block index, in-block offset)
pair. ``logical_dims`` records, for every named logical dimension, the
physical axis (or ``(outer, inner)`` axis pair) it maps to, so every
transform is an invertible relabeling of the same value multiset.

All transforms copy into a fresh contiguous buffer; none aliases its input.
Tensor values are treated as immutable once shared between workers; only the
designated output block of a kernel call is ever written.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

FP32 = np.float32

# Relative-error floor: |a-b| / max(|b|, REL_ERR_EPS).
REL_ERR_EPS = 1e-6

DimMap = dict[str, Union[int, tuple[int, int]]]


class LayoutError(ValueError):
    """A blocking factor does not divide its dimension, or layouts disagree."""


def as_dense(a) -> np.ndarray:
    """Coerce to a C-contiguous float32 array (the dense tensor convention)."""
    arr = np.ascontiguousarray(np.asarray(a, dtype=FP32))
    if arr.ndim and min(arr.shape) < 1:
        raise LayoutError(f"dense tensor extents must be >= 1, got {arr.shape}")
    return arr


@dataclass
class BlockedTensor:
    """FP32 tensor with an explicit blocked physical layout.

    ``data.shape`` is ``outer_shape + inner_shape``; the first ``n_outer``
    axes are the outer (block-count) axes. ``logical_dims`` maps each logical
    dimension name either to one physical axis (unblocked dimension) or to an
    ``(outer_axis, inner_axis)`` pair whose extents multiply to the logical
    extent.
    """

    data: np.ndarray
    n_outer: int
    logical_dims: DimMap = field(default_factory=dict)

    def __post_init__(self):
        if self.data.dtype != FP32:
            raise LayoutError(f"blocked tensor must be float32, got {self.data.dtype}")
        used = []
        for name, m in self.logical_dims.items():
            axes = (m,) if isinstance(m, int) else m
            for ax in axes:
                if not 0 <= ax < self.data.ndim:
                    raise LayoutError(f"dimension {name!r} maps to bad axis {ax}")
            if not isinstance(m, int):
                outer, inner = m
                if not (outer < self.n_outer <= inner):
                    raise LayoutError(
                        f"dimension {name!r} must pair an outer axis with an inner axis"
                    )
            used.extend(axes)
        if sorted(used) != list(range(self.data.ndim)):
            raise LayoutError("logical_dims must cover every physical axis exactly once")

    @property
    def outer_shape(self) -> tuple[int, ...]:
        return self.data.shape[: self.n_outer]

    @property
    def inner_shape(self) -> tuple[int, ...]:
        return self.data.shape[self.n_outer :]

    def logical_extent(self, name: str) -> int:
        m = self.logical_dims[name]
        if isinstance(m, int):
            return self.data.shape[m]
        return self.data.shape[m[0]] * self.data.shape[m[1]]

    def logical_shape(self) -> dict[str, int]:
        return {name: self.logical_extent(name) for name in self.logical_dims}

    def physical_coords(self, **logical: int) -> tuple[int, ...]:
        """Physical index tuple of one logical element (used by index oracles)."""
        coords = [0] * self.data.ndim
        for name, idx in logical.items():
            m = self.logical_dims[name]
            if isinstance(m, int):
                coords[m] = idx
            else:
                outer, inner = m
                block = self.data.shape[inner]
                coords[outer] = idx // block
                coords[inner] = idx % block
        return tuple(coords)

    def flat_index(self, **logical: int) -> int:
        return int(np.ravel_multi_index(self.physical_coords(**logical), self.data.shape))

    def to_dense(self, order: list[str] | None = None) -> np.ndarray:
        """Invert the blocking: dense array with logical dims in ``order``."""
        order = list(order) if order is not None else list(self.logical_dims)
        axes: list[int] = []
        shape: list[int] = []
        for name in order:
            m = self.logical_dims[name]
            if isinstance(m, int):
                axes.append(m)
            else:
                axes.extend(m)
            shape.append(self.logical_extent(name))
        return np.ascontiguousarray(self.data.transpose(axes).reshape(shape))


def _check_divides(factor: int, extent: int, dim: str) -> None:
    if factor < 1:
        raise LayoutError(f"block factor for {dim} must be >= 1, got {factor}")
    if extent % factor:
        raise LayoutError(
            f"block factor {factor} does not divide {dim}={extent}"
        )


def clamp_block(extent: int, factor: int) -> int:
    """Shrink a block factor to the extent itself when the extent is smaller."""
    return extent if extent < factor else factor


def block_weight_2d(w: np.ndarray, b_c: int, b_k: int) -> BlockedTensor:
    """Block a (K, C) weight matrix into [K_b][C_b][b_c][b_k].

    Element (k, c) lands at physical (k // b_k, c // b_c, c % b_c, k % b_k),
    i.e. the b_k direction is innermost so GEMM microkernel accesses are
    unit-stride.
    """
    if w.ndim != 2:
        raise LayoutError(f"expected a 2-D weight matrix, got shape {w.shape}")
    k, c = w.shape
    _check_divides(b_k, k, "K")
    _check_divides(b_c, c, "C")
    data = np.ascontiguousarray(
        w.reshape(k // b_k, b_k, c // b_c, b_c).transpose(0, 2, 3, 1)
    )
    return BlockedTensor(data, n_outer=2, logical_dims={"k": (0, 3), "c": (1, 2)})


def unblock_weight_2d(bt: BlockedTensor) -> np.ndarray:
    return bt.to_dense(["k", "c"])


def block_conv_input(i_nchw: np.ndarray, b_c: int) -> BlockedTensor:
    """NCHW activations to the blocked I[N][C_b][H][W][b_c] layout."""
    if i_nchw.ndim != 4:
        raise LayoutError(f"expected NCHW input, got shape {i_nchw.shape}")
    n, c, h, w = i_nchw.shape
    b_c = clamp_block(c, b_c)
    _check_divides(b_c, c, "C")
    data = np.ascontiguousarray(
        i_nchw.reshape(n, c // b_c, b_c, h, w).transpose(0, 1, 3, 4, 2)
    )
    return BlockedTensor(
        data, n_outer=4, logical_dims={"n": 0, "c": (1, 4), "h": 2, "w": 3}
    )


def unblock_conv_input(bt: BlockedTensor) -> np.ndarray:
    return bt.to_dense(["n", "c", "h", "w"])


def block_conv_weight(w_kcrs: np.ndarray, b_c: int, b_k: int) -> BlockedTensor:
    """KCRS weights to the blocked W[K_b][C_b][R][S][b_c][b_k] layout."""
    if w_kcrs.ndim != 4:
        raise LayoutError(f"expected KCRS weights, got shape {w_kcrs.shape}")
    k, c, r, s = w_kcrs.shape
    b_c = clamp_block(c, b_c)
    b_k = clamp_block(k, b_k)
    _check_divides(b_k, k, "K")
    _check_divides(b_c, c, "C")
    data = np.ascontiguousarray(
        w_kcrs.reshape(k // b_k, b_k, c // b_c, b_c, r, s).transpose(0, 2, 4, 5, 3, 1)
    )
    return BlockedTensor(
        data,
        n_outer=4,
        logical_dims={"k": (0, 5), "c": (1, 4), "r": 2, "s": 3},
    )


def unblock_conv_weight(bt: BlockedTensor) -> np.ndarray:
    return bt.to_dense(["k", "c", "r", "s"])


def block_conv_tensors(
    i_nchw: np.ndarray, w_kcrs: np.ndarray, b_c: int = 64, b_k: int = 64
) -> tuple[BlockedTensor, BlockedTensor]:
    """Block activations and weights for the direct-convolution layouts.

    Block factors larger than the channel extents are clamped to the extent
    (first layer has C=3); any other non-divisible factor is an error.
    """
    if i_nchw.ndim != 4 or w_kcrs.ndim != 4:
        raise LayoutError("block_conv_tensors expects NCHW input and KCRS weights")
    if i_nchw.shape[1] != w_kcrs.shape[1]:
        raise LayoutError(
            f"channel mismatch: input C={i_nchw.shape[1]}, weights C={w_kcrs.shape[1]}"
        )
    return block_conv_input(i_nchw, b_c), block_conv_weight(w_kcrs, b_c, b_k)


def make_conv_output(n: int, k: int, p: int, q: int, b_k: int) -> BlockedTensor:
    """Uninitialized O[N][K_b][P][Q][b_k] output tensor."""
    _check_divides(b_k, k, "K")
    data = np.empty((n, k // b_k, p, q, b_k), dtype=FP32)
    return BlockedTensor(
        data, n_outer=4, logical_dims={"n": 0, "k": (1, 4), "p": 2, "q": 3}
    )


def unblock_conv_output(bt: BlockedTensor) -> np.ndarray:
    return bt.to_dense(["n", "k", "p", "q"])


def block_fc_activation(x: np.ndarray, b_n: int, b_c: int) -> BlockedTensor:
    """(N, C) activations to the fully blocked X[N_b][C_b][b_n][b_c] layout."""
    if x.ndim != 2:
        raise LayoutError(f"expected a 2-D activation matrix, got shape {x.shape}")
    n, c = x.shape
    _check_divides(b_n, n, "N")
    _check_divides(b_c, c, "C")
    data = np.ascontiguousarray(
        x.reshape(n // b_n, b_n, c // b_c, b_c).transpose(0, 2, 1, 3)
    )
    return BlockedTensor(data, n_outer=2, logical_dims={"n": (0, 2), "c": (1, 3)})


def unblock_fc_activation(bt: BlockedTensor) -> np.ndarray:
    names = list(bt.logical_dims)
    return bt.to_dense(names)


def pad_spatial(bt: BlockedTensor, pad_h: int, pad_w: int) -> BlockedTensor:
    """Zero-pad the spatial halo of a blocked activation tensor by copy.

    The interior equals the input; the halo is exactly 0.0. The kernels index
    the padded buffer directly instead of bounds-checking.
    """
    if pad_h < 0 or pad_w < 0:
        raise LayoutError(f"padding must be >= 0, got ({pad_h}, {pad_w})")
    h_ax = bt.logical_dims["h"]
    w_ax = bt.logical_dims["w"]
    if not isinstance(h_ax, int) or not isinstance(w_ax, int):
        raise LayoutError("pad_spatial expects unblocked spatial dimensions")
    shape = list(bt.data.shape)
    shape[h_ax] += 2 * pad_h
    shape[w_ax] += 2 * pad_w
    out = np.zeros(shape, dtype=FP32)
    sel: list[slice] = [slice(None)] * bt.data.ndim
    sel[h_ax] = slice(pad_h, pad_h + bt.data.shape[h_ax])
    sel[w_ax] = slice(pad_w, pad_w + bt.data.shape[w_ax])
    out[tuple(sel)] = bt.data
    return BlockedTensor(out, n_outer=bt.n_outer, logical_dims=dict(bt.logical_dims))


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max over elements of |a-b| / max(|b|, 1e-6); 0.0 for identical tensors."""
    if a.shape != b.shape:
        raise LayoutError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    return float(np.max(np.abs(a64 - b64) / np.maximum(np.abs(b64), REL_ERR_EPS)))


def dump_tensor(t: Union[np.ndarray, BlockedTensor], path) -> None:
    """Write the binary dump format: u32 LE dim count, u32 LE extents, f32 LE data.

    A BlockedTensor is dumped in its physical layout.
    """
    arr = t.data if isinstance(t, BlockedTensor) else t
    arr = np.ascontiguousarray(arr, dtype=FP32)
    path = Path(path)
    with path.open("wb") as fh:
        np.asarray([arr.ndim], dtype="<u4").tofile(fh)
        np.asarray(arr.shape, dtype="<u4").tofile(fh)
        arr.astype("<f4").tofile(fh)


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    with path.open("rb") as fh:
        ndim = int(np.fromfile(fh, dtype="<u4", count=1)[0])
        shape = np.fromfile(fh, dtype="<u4", count=ndim).astype(int)
        data = np.fromfile(fh, dtype="<f4", count=int(np.prod(shape)))
    return data.astype(FP32).reshape(shape)


class FetchCounter:
    """Counts block fetches; used to assert the weight-reuse loop structure."""

    def __init__(self):
        self.counts: Counter = Counter()

    def record(self, key) -> None:
        self.counts[key] += 1
