"""Minimal numpy-backed neural network engine with reverse-mode autodiff."""

from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (
    BatchNorm1d,
    Conv2d,
    EncoderLayer,
    FeedForward,
    GlobalAttentionPool,
    Linear,
    Module,
    ModuleList,
    MultiHeadSelfAttention,
    he_uniform,
)
from .optim import Adam, adam_step
from .tensor import (
    DEFAULT_DTYPE,
    MASK_SCORE,
    KinkMarginTrace,
    Tape,
    Tensor,
    as_tensor,
    clip,
    concat,
    exp,
    gather_rows,
    log,
    matmul,
    reshape,
    sqrt,
    stop_gradient,
    tensor_mean,
    tensor_sum,
    transpose,
)

__all__ = [
    "Adam",
    "BatchNorm1d",
    "Conv2d",
    "DEFAULT_DTYPE",
    "EncoderLayer",
    "FeedForward",
    "GlobalAttentionPool",
    "KinkMarginTrace",
    "Linear",
    "MASK_SCORE",
    "Module",
    "ModuleList",
    "MultiHeadSelfAttention",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "clip",
    "concat",
    "exp",
    "functional",
    "gather_rows",
    "he_uniform",
    "load_checkpoint",
    "log",
    "matmul",
    "reshape",
    "save_checkpoint",
    "sqrt",
    "stop_gradient",
    "tensor_mean",
    "tensor_sum",
    "transpose",
]
