from .gradcheck import GradCheckReport, gradient_check, relative_error
from .ops import (
    AllMasked,
    ShapeMismatch,
    TransformerBlockConfig,
    cross_attention_block,
    linear,
    mean_pool,
    self_attention_block,
    softmax_cross_entropy,
)
from .optim import adamw_step
from .params import ParameterStore, ParamSpec

__all__ = [
    "AllMasked", "GradCheckReport", "ParamSpec", "ParameterStore", "ShapeMismatch", "TransformerBlockConfig",
    "adamw_step", "cross_attention_block", "gradient_check", "linear", "mean_pool", "relative_error",
    "self_attention_block", "softmax_cross_entropy",
]
