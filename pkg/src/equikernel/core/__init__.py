"""Minimal dense-tensor numerics with a gradient tape."""
from .gradcheck import check_module, grad_check, relative_errors
from .module import Module
from .ops import (ConvSpec, NormState, bilinear_resize, conv2d, linear, log_softmax, normalize, open_range,
                  pointwise, pool, relu, sigmoid, softmax, softsign)
from .tensor import (GradTape, NonFiniteError, Parameter, ShapeError, Tensor, active_tape, add, amax, astensor,
                     clamp_min, concat, div, exp, getitem, log, matmul, maximum, mean, mul, no_tape, power,
                     reshape, set_debug, split, sqrt, stack, sub, transpose, tsum, where)

__all__ = [
    "Tensor", "Parameter", "GradTape", "ShapeError", "NonFiniteError", "Module", "ConvSpec", "NormState",
    "active_tape", "no_tape", "set_debug", "astensor", "add", "sub", "mul", "div", "power", "exp", "log", "sqrt",
    "clamp_min", "maximum", "where", "tsum", "mean", "amax", "reshape", "transpose", "getitem", "concat",
    "stack", "split", "matmul", "conv2d", "bilinear_resize", "pool", "normalize", "pointwise", "open_range",
    "relu", "sigmoid", "softsign", "linear", "softmax", "log_softmax", "grad_check", "check_module",
    "relative_errors",
]
