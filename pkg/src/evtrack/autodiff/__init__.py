"""Reverse-mode autodiff over dense float64 arrays."""
from .gradcheck import grad_check, grad_check_params, numeric_gradient, relative_error
from .layers import BatchNormState, avg_pool2d, batch_norm, conv2d, dropout, im2col, linear
from .recurrent import RecurrentState, gru_cell, lstm_cell, run_recurrent
from .store import ParameterStore, TrainState, glorot_uniform
from .tensor import (
    Tensor,
    activation,
    add,
    backward,
    concat,
    getitem,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    stack,
    sub,
    tanh,
    topological_order,
    tsum,
)

__all__ = [
    "BatchNormState",
    "ParameterStore",
    "RecurrentState",
    "Tensor",
    "TrainState",
    "activation",
    "add",
    "avg_pool2d",
    "backward",
    "batch_norm",
    "concat",
    "conv2d",
    "dropout",
    "getitem",
    "glorot_uniform",
    "grad_check",
    "grad_check_params",
    "gru_cell",
    "im2col",
    "linear",
    "lstm_cell",
    "mul",
    "no_grad",
    "numeric_gradient",
    "relative_error",
    "relu",
    "reshape",
    "run_recurrent",
    "sigmoid",
    "stack",
    "sub",
    "tanh",
    "topological_order",
    "tsum",
]
