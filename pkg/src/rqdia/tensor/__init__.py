from . import core as ops
from .core import Tape, TapeError, Tensor, backward, forward_op
from .nn import Conv2d, LayerNorm, Linear, Module, NoisyLinear, noisy_linear_forward
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam", "AdamState", "Conv2d", "LayerNorm", "Linear", "Module", "NoisyLinear",
    "Tape", "TapeError", "Tensor", "adam_step", "backward", "forward_op",
    "noisy_linear_forward", "ops",
]
