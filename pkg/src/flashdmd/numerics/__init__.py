from .optim import AdamState, adam_step
from .rng import Rng, sample_gaussian
from .autodiff import (
    GradientTape,
    NonFiniteError,
    TapeError,
    Tensor,
    active_tape,
    add,
    bias_add,
    constant,
    detach,
    exp,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    parameter,
    relu,
    silu,
    softplus,
    square,
    sub,
    sum,
    tanh,
    tensor,
)

__all__ = [
    "AdamState", "adam_step", "Rng", "sample_gaussian", "GradientTape", "NonFiniteError",
    "TapeError", "Tensor", "active_tape", "add", "bias_add", "constant", "detach", "exp",
    "log", "matmul", "mean", "mul", "no_grad", "parameter", "relu", "silu", "softplus", "square",
    "sub", "sum", "tanh", "tensor",
]
