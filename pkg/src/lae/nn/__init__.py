from . import tensor
from .checkpoint import Checkpoint
from .layers import (
    ConfigError,
    EncoderLayer,
    LayerNorm,
    LayerStack,
    LengthError,
    Linear,
    Module,
    MultiHeadAttention,
    Subsampler,
    key_padding_bias,
    subsampled_length,
)
from .optim import Adam, LrSchedule, clip_by_global_norm
from .tensor import Parameter, Tensor, no_grad, precision

__all__ = ["tensor", "Checkpoint", "ConfigError", "EncoderLayer", "LayerNorm", "LayerStack", "LengthError",
           "Linear", "Module", "MultiHeadAttention", "Subsampler", "key_padding_bias", "subsampled_length",
           "Adam", "LrSchedule", "clip_by_global_norm", "Parameter", "Tensor", "no_grad", "precision"]
