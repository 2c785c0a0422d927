"""Dense-array math with reverse-mode autodiff and Adam-family training utilities."""
from .gradcheck import numerical_grads, relative_error
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import (
    ParamStore,
    Schedule,
    adam_step,
    clip_global_norm,
    global_norm,
    init_uniform,
    lr_at_step,
)
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    affine,
    backward,
    float64_mode,
    log,
    matmul,
    mul,
    no_grad,
    nonlinearity,
    reduce_mean,
    relu,
    sigmoid,
    silu,
    softmax,
    squared_error,
    tanh,
)

__all__ = [
    "CheckpointError", "NonFiniteError", "ParamStore", "Schedule", "Tensor",
    "adam_step", "add", "affine", "backward", "clip_global_norm", "float64_mode",
    "global_norm", "init_uniform", "load_checkpoint", "log", "lr_at_step", "matmul",
    "mul", "no_grad", "numerical_grads", "relative_error", "nonlinearity", "reduce_mean", "relu", "save_checkpoint",
    "sigmoid", "silu", "softmax", "squared_error", "tanh",
]
