from .engine import (
    CholeskyError,
    Node,
    NumericsError,
    Param,
    Tape,
    add,
    backward,
    cholesky,
    clamp,
    concat,
    conv2d,
    cos,
    div,
    exp,
    getitem,
    log,
    logsumexp,
    matmul,
    max_,
    mean,
    mul,
    neg,
    pad,
    relu,
    reshape,
    sin,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    take,
    transpose,
    triangular_solve,
)
from .gradcheck import GradCheckReport, grad_check
from .io import load_tensor, read_tensor, save_tensor, write_tensor

__all__ = [
    "CholeskyError",
    "GradCheckReport",
    "Node",
    "NumericsError",
    "Param",
    "Tape",
    "add",
    "backward",
    "cholesky",
    "clamp",
    "concat",
    "conv2d",
    "cos",
    "div",
    "exp",
    "getitem",
    "grad_check",
    "load_tensor",
    "log",
    "logsumexp",
    "matmul",
    "max_",
    "mean",
    "mul",
    "neg",
    "pad",
    "read_tensor",
    "relu",
    "reshape",
    "save_tensor",
    "sin",
    "sqrt",
    "square",
    "stack",
    "sub",
    "sum_",
    "take",
    "transpose",
    "triangular_solve",
    "write_tensor",
]
