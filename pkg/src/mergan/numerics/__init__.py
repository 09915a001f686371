"""Computation graph, autodiff, deterministic RNG, and gradient checking."""

from .engine import (
    ADJOINTS,
    Graph,
    Tensor,
    add,
    backward,
    batch_moments,
    concat,
    detach,
    divide,
    l2norm_rows,
    leaky_relu,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    slice_,
    softmax,
    softmax_cross_entropy,
    sqrt,
    square,
    sub,
    tanh,
)
from .gradcheck import FiniteDiffReport, finite_diff_check
from .rng import Rng

__all__ = [
    "ADJOINTS",
    "FiniteDiffReport",
    "Graph",
    "Rng",
    "Tensor",
    "add",
    "backward",
    "batch_moments",
    "concat",
    "detach",
    "divide",
    "finite_diff_check",
    "l2norm_rows",
    "leaky_relu",
    "matmul",
    "mul",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "scale",
    "slice_",
    "softmax",
    "softmax_cross_entropy",
    "sqrt",
    "square",
    "sub",
    "tanh",
]
