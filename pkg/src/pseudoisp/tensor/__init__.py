from .autograd import (
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    concat,
    conv2d,
    crop,
    depth_to_space,
    get_conv_backend,
    mean,
    mse_loss,
    mul,
    no_grad,
    relu,
    scale,
    set_conv_backend,
    softplus,
    space_to_depth,
    sqrt,
    square,
    sub,
    sum_,
)
from . import checkpoint
from .nn import ConvStack, kaiming_uniform
from .optim import Adam, AdamState, adam_step

__all__ = [
    "checkpoint",
    "Adam",
    "AdamState",
    "ConvStack",
    "Tensor",
    "abs_",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "conv2d",
    "crop",
    "depth_to_space",
    "get_conv_backend",
    "kaiming_uniform",
    "mean",
    "mse_loss",
    "mul",
    "no_grad",
    "relu",
    "scale",
    "set_conv_backend",
    "softplus",
    "space_to_depth",
    "sqrt",
    "square",
    "sub",
    "sum_",
]
