from . import ops
from .gradcheck import grad_check
from .nn import MLP, Linear, Module, glorot_uniform
from .ops import DegenerateNeighborhoodError, masked_softmax, matmul, segment_softmax, segment_sum
from .tensor import NonFiniteError, ShapeError, Tape, TapeError, Tensor, constant

__all__ = [
    "ops",
    "grad_check",
    "MLP",
    "Linear",
    "Module",
    "glorot_uniform",
    "DegenerateNeighborhoodError",
    "masked_softmax",
    "matmul",
    "segment_softmax",
    "segment_sum",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "constant",
]
