"""Tensor arithmetic, reverse-mode differentiation, and small-matrix LU."""

from .gradcheck import FD_STEP, check_param_grads, finite_diff_grad, finite_diff_jacobian, grad_rel_error
from .linalg import LuFactors, lu_factor
from .tensor import (
    GradTape,
    pow_scalar,
    Tensor,
    absolute,
    active_tape,
    add,
    backward,
    clamp,
    concat,
    conv2d,
    cos,
    div,
    exp,
    getitem,
    index_rows,
    is_checked,
    log,
    logabsdet,
    matmul,
    mul,
    neg,
    relu,
    reshape,
    set_checked,
    set_relu_observer,
    sin,
    solve_rows,
    sqrt,
    sub,
    tensor,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "FD_STEP",
    "GradTape",
    "LuFactors",
    "Tensor",
    "absolute",
    "active_tape",
    "add",
    "backward",
    "check_param_grads",
    "clamp",
    "concat",
    "conv2d",
    "cos",
    "div",
    "exp",
    "finite_diff_grad",
    "finite_diff_jacobian",
    "getitem",
    "grad_rel_error",
    "index_rows",
    "is_checked",
    "log",
    "logabsdet",
    "lu_factor",
    "matmul",
    "mul",
    "neg",
    "pow_scalar",
    "relu",
    "reshape",
    "set_checked",
    "set_relu_observer",
    "sin",
    "solve_rows",
    "sqrt",
    "sub",
    "tensor",
    "tmean",
    "transpose",
    "tsum",
]
