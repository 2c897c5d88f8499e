from .tensor import (
    GradStore,
    GradTape,
    MissingGradientError,
    NonFiniteError,
    ShapeError,
    Tensor2,
    add,
    backward,
    concat_cols,
    concat_rows,
    matmul,
    mul,
    relu,
    sigmoid,
    slice_rows,
    softmax,
    softmax_cross_entropy,
    sub,
    tanh,
)
from .optim import AdamState, adam_step, clip_global_norm, global_norm
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "GradStore", "GradTape", "MissingGradientError", "NonFiniteError", "ShapeError",
    "Tensor2", "add", "backward", "concat_cols", "concat_rows", "matmul", "mul",
    "relu", "sigmoid", "slice_rows", "softmax", "softmax_cross_entropy", "sub", "tanh",
    "AdamState", "adam_step", "clip_global_norm", "global_norm",
    "CheckpointError", "load_checkpoint", "save_checkpoint",
]
