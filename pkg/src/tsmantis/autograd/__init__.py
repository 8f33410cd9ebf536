from .tensor import (DimensionError, GradTape, Tensor, add, as_tensor, concat, conv1d,
                     cross_entropy, default_dtype, div, dropout, gelu, get_default_dtype,
                     is_grad_enabled, l2_norm, layer_norm, log_softmax, matmul, mean, mul,
                     no_grad, reshape, slice_, softmax, sqrt, sub, sum_, tanh, transpose)
from .module import LayerNorm, Linear, Module
from .optim import AdamW, LrSchedule, OptimizerState, adamw_step, lr_at
from .gradcheck import check_gradients, numerical_grad, relative_error

__all__ = [
    "AdamW", "DimensionError", "GradTape", "LayerNorm", "Linear", "LrSchedule", "Module",
    "OptimizerState", "Tensor", "adamw_step", "add", "as_tensor", "check_gradients", "concat",
    "conv1d", "cross_entropy", "default_dtype", "div", "dropout", "gelu", "get_default_dtype",
    "is_grad_enabled", "l2_norm", "layer_norm", "log_softmax", "lr_at", "matmul", "mean", "mul",
    "no_grad", "numerical_grad", "relative_error", "reshape", "slice_", "softmax", "sqrt", "sub",
    "sum_", "tanh", "transpose",
]
