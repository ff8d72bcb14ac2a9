"""Dense float64 linear algebra, random streams and reverse-mode autodiff."""

from .autodiff import (
    Matrix,
    Node,
    add,
    as_value,
    backward,
    concat_cols,
    concat_rows,
    constant,
    detach,
    differentiable,
    dropout,
    exp,
    gather_rows,
    hadamard,
    l2_normalize_rows,
    log,
    matmul,
    matrix,
    no_grad,
    parameter,
    reduce_mean,
    reduce_sum,
    relu,
    row_log_softmax,
    row_softmax,
    scale,
    sigmoid,
    slice_rows,
    sub,
    transpose,
)
from .linalg import cholesky, spd_solve
from .optim import SGD, Adam
from .rng import RngState, sample_gaussian, sample_permutation, sample_uniform

__all__ = [
    "Adam", "Matrix", "Node", "RngState", "SGD", "add", "as_value", "backward", "cholesky", "concat_cols",
    "concat_rows", "constant", "detach", "differentiable", "dropout", "exp", "gather_rows", "hadamard",
    "l2_normalize_rows", "log", "matmul", "matrix", "no_grad", "parameter", "reduce_mean", "reduce_sum",
    "relu", "row_log_softmax", "row_softmax", "sample_gaussian", "sample_permutation", "sample_uniform",
    "scale", "sigmoid", "slice_rows", "spd_solve", "sub", "transpose",
]
