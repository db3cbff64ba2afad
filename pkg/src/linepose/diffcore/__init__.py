from . import tensor as ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn import MLP, LayerNorm, Linear, Module, MultiHeadAttention
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "CheckpointError",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "MultiHeadAttention",
    "Tensor",
    "adam_step",
    "backward",
    "is_grad_enabled",
    "load_checkpoint",
    "no_grad",
    "ops",
    "save_checkpoint",
]
