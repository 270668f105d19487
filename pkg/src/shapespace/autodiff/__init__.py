from .tensor import (
    ARCCOS_CLAMP, NonFiniteError, Parameter, Tape, Tensor, abs_, add, arccos,
    as_tensor, clip, concat, div, exp, log, logsumexp, matmul, max_, mean, mul,
    neg, pow_const, relu, reshape, softplus, sqrt, stop_gradient, sub, sum_,
    swapaxes, take, tanh,
)
from .optim import AdamState, PlateauScheduler, adam_step, plateau_step
from .gradcheck import finite_difference_check, finite_difference_check_params
from .checkpoint import load_checkpoint, save_checkpoint
from . import nn

__all__ = [
    "ARCCOS_CLAMP", "NonFiniteError", "Parameter", "Tape", "Tensor",
    "abs_", "add", "arccos", "as_tensor", "clip", "concat", "div", "exp",
    "log", "logsumexp", "matmul", "max_", "mean", "mul", "neg", "pow_const",
    "relu", "reshape", "softplus", "sqrt", "stop_gradient", "sub", "sum_",
    "swapaxes", "take", "tanh",
    "AdamState", "PlateauScheduler", "adam_step", "plateau_step",
    "finite_difference_check", "finite_difference_check_params",
    "load_checkpoint", "save_checkpoint", "nn",
]
