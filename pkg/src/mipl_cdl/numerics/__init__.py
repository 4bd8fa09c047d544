from mipl_cdl.numerics.gradcheck import gradient_check, numerical_gradient
from mipl_cdl.numerics.optim import cosine_anneal, sgd_step
from mipl_cdl.numerics.tensor import (
    LOG_FLOOR,
    Parameter,
    Tensor,
    add,
    argmax,
    div,
    exp,
    index_select,
    linear,
    log,
    matmul,
    max_value,
    mul,
    no_grad,
    pick,
    power,
    relu,
    reshape,
    segment_softmax,
    segment_sum,
    sigmoid,
    softmax,
    sqrt,
    sub,
    take_rows,
    tanh,
    tensor,
    tmean,
    tsum,
    weighted_sum,
)

__all__ = [
    "LOG_FLOOR", "Parameter", "Tensor", "add", "argmax", "cosine_anneal", "div", "exp",
    "gradient_check", "index_select", "linear", "log", "matmul", "max_value", "mul",
    "no_grad", "numerical_gradient", "pick", "power", "relu", "reshape", "segment_softmax",
    "segment_sum", "sgd_step", "sigmoid", "softmax", "sqrt", "sub", "take_rows", "tanh",
    "tensor", "tmean", "tsum", "weighted_sum",
]
