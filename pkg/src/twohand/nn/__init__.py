from .layers import EncoderLayer, LayerNorm, Linear, Module, SelfAttention, TransformerEncoder, self_attention
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, backward, grads, zero_grad
from .weights import WeightsError, load_weights, save_weights

__all__ = [
    "AdamState", "EncoderLayer", "LayerNorm", "Linear", "Module", "SelfAttention", "Tape", "Tensor",
    "TransformerEncoder", "WeightsError", "adam_step", "backward", "grads", "load_weights",
    "save_weights", "self_attention", "zero_grad",
]
