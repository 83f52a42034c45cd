from .gradcheck import GradCheckReport, finite_difference_check
from .ops import (activation, affine, conv1d_single_channel, gru_cell, maxpool_over_time,
                  normalize_to_unit_sphere, softmax)
from .params import ParamStore, adam_step, glorot_uniform
from .tensor import Tensor, no_grad

__all__ = [
    "GradCheckReport",
    "ParamStore",
    "Tensor",
    "activation",
    "adam_step",
    "affine",
    "conv1d_single_channel",
    "finite_difference_check",
    "glorot_uniform",
    "gru_cell",
    "maxpool_over_time",
    "no_grad",
    "normalize_to_unit_sphere",
    "softmax",
]
