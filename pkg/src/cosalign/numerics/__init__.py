from .gradcheck import GradCheckReport, grad_check, relative_error
from .ops import (
    ShapeError,
    add,
    add_n,
    argmax_labels,
    bilinear_resize,
    clamped_log,
    conv2d,
    leaky_relu,
    nearest_resize,
    one_minus,
    relu,
    scale,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    sum_all,
)
from .tensor import Tensor, default_dtype, precision
from .tensorio import FormatError, decode_tensor, encode_tensor, load_tensor, save_tensor

__all__ = [
    "FormatError",
    "GradCheckReport",
    "ShapeError",
    "Tensor",
    "add",
    "add_n",
    "argmax_labels",
    "bilinear_resize",
    "clamped_log",
    "conv2d",
    "decode_tensor",
    "default_dtype",
    "encode_tensor",
    "grad_check",
    "leaky_relu",
    "load_tensor",
    "nearest_resize",
    "one_minus",
    "precision",
    "relative_error",
    "relu",
    "save_tensor",
    "scale",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "sum_all",
]
