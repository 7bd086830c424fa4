from .autodiff import GradTape, Node, finite_difference_check, reverse_gradients
from .linalg import (
    argmax_lowest,
    gelu,
    log_softmax,
    matmul,
    rms_norm,
    row_softmax_masked,
    seqsum,
    singular_values,
    truncated_svd,
)
from .prng import Prng, sample_without_replacement

__all__ = [
    "GradTape",
    "Node",
    "Prng",
    "argmax_lowest",
    "finite_difference_check",
    "gelu",
    "log_softmax",
    "matmul",
    "reverse_gradients",
    "rms_norm",
    "row_softmax_masked",
    "sample_without_replacement",
    "seqsum",
    "singular_values",
    "truncated_svd",
]
