"""Reverse-mode automatic differentiation over dense matrices."""

from covfilt.autodiff.linalg import (
    SYMMETRY_TOL,
    cholesky,
    factor_spd,
    logdet_spd,
    solve_factored,
    solve_spd,
    symmetrized,
)
from covfilt.autodiff.tape import (
    Array,
    Node,
    Tape,
    add,
    as_matrix,
    backward,
    const_,
    detach,
    exp,
    hadamard,
    ln,
    matmul,
    param,
    scale,
    scatter,
    sub,
    sum_,
    take,
    tanh,
    transpose,
)

__all__ = [
    "SYMMETRY_TOL",
    "Array",
    "Node",
    "Tape",
    "add",
    "as_matrix",
    "backward",
    "cholesky",
    "const_",
    "detach",
    "exp",
    "factor_spd",
    "hadamard",
    "ln",
    "logdet_spd",
    "matmul",
    "param",
    "scale",
    "scatter",
    "solve_factored",
    "solve_spd",
    "sub",
    "sum_",
    "symmetrized",
    "take",
    "tanh",
    "transpose",
]
