"""Deep-learning forward kernels built on a single batch-reduce GEMM block."""

from .brgemm import (
    BrgemmError,
    BrgemmSpec,
    TilePlan,
    batched_gemm,
    brgemm,
    brgemm_reference,
    brgemm_strided,
    plan_tiles,
    tile_override_from_env,
)
from .cnn import (
    ConvSpec,
    ParallelStrategy,
    PixelCollapse,
    StrategyKind,
    choose_strategy,
    collapse_pixels,
    conv2d_forward,
    conv2d_forward_reference,
)
from .fc import Activation, FcParams, fc_forward, fc_forward_reference
from .lstm import (
    LstmCellWeights,
    LstmParams,
    LstmStateSequence,
    lstm_forward,
    lstm_forward_reference,
    sigmoid_block,
    tanh_block,
)
from .partition import partition_work_2d, split_evenly
from .tensor import (
    BlockedTensor,
    FetchCounter,
    LayoutError,
    as_dense,
    block_conv_tensors,
    block_fc_activation,
    block_weight_2d,
    dump_tensor,
    load_tensor,
    max_rel_error,
    pad_spatial,
    unblock_conv_input,
    unblock_conv_output,
    unblock_conv_weight,
    unblock_fc_activation,
    unblock_weight_2d,
)

__all__ = [name for name in dir() if not name.startswith("_")]
