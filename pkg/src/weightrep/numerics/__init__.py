from .linalg import ConvergenceError, singular_values
from .ops import (conv2d, conv_output_size, cross_entropy, global_avg_pool, kl_divergence, l2_norm,
                  log_softmax, sample_norms, softmax)
from .optim import SGD, Adam, OptimizerState, zero_grad
from .tensor import (GraphError, NonFiniteError, Tensor, as_tensor, backward, concat, default_dtype,
                     precision, take_rows, topological_order)

__all__ = [
    "Adam", "ConvergenceError", "GraphError", "NonFiniteError", "OptimizerState", "SGD", "Tensor",
    "as_tensor", "backward", "concat", "conv2d", "conv_output_size", "cross_entropy",
    "default_dtype", "global_avg_pool", "kl_divergence", "l2_norm", "log_softmax", "precision",
    "sample_norms", "singular_values", "softmax", "take_rows", "topological_order", "zero_grad",
]
