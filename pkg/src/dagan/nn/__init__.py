"""Numpy autodiff engine, layers and optimiser used by every network in the package."""
from . import functional
from .functional import (
    BatchRenormState,
    batch_renorm,
    conv2d,
    dropout,
    layer_norm,
    leaky_relu,
)
from .gradcheck import GradCheckError, GradCheckReport, grad_check
from .layers import (
    BatchRenorm,
    Conv2d,
    Dropout,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    renorm_limits,
    set_renorm_limits,
)
from .optim import Adam, AdamState, NonFiniteGradientError, adam_step
from .tensor import (
    DimensionError,
    Tensor,
    as_tensor,
    backward,
    concat,
    get_default_dtype,
    grad,
    no_grad,
    precision,
    set_default_dtype,
    set_grad_enabled,
)

__all__ = [
    "Adam", "AdamState", "BatchRenorm", "BatchRenormState", "Conv2d", "DimensionError", "Dropout",
    "GradCheckError", "GradCheckReport", "LayerNorm", "Linear", "Module", "NonFiniteGradientError",
    "Parameter", "Tensor", "adam_step", "as_tensor", "backward", "batch_renorm", "concat", "conv2d",
    "dropout", "functional", "get_default_dtype", "grad", "grad_check", "layer_norm", "leaky_relu",
    "no_grad", "precision", "renorm_limits", "set_default_dtype", "set_grad_enabled",
    "set_renorm_limits",
]
