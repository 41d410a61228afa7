from .gradcheck import finite_diff_check
from .io import dump_tensors, load_manifest, load_tensors
from .linalg import jacobi_singular_values, numerical_rank, numerical_ranks
from .rng import RandomStream
from .tensor import (
    DTYPES,
    ContractError,
    DegenerateRowError,
    DimensionError,
    NonFiniteError,
    Tensor,
    count_matmul_flops,
    embedding,
    exp,
    gelu,
    layer_norm,
    log,
    log_sigmoid,
    log_softmax,
    matmul,
    mean,
    no_grad,
    parameters_zero_grad,
    row_softmax,
    scatter_rows,
    set_finite_checks,
    sigmoid,
    stack,
    stop_gradient,
    straight_through,
    take_rows,
    tanh,
    tensor,
)
