"""Minimal float64 tensor library with reverse-mode autodiff and transformer blocks."""

from . import tensor as F
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .layers import MLP, Attention, Block, LayerNorm, Linear, Module, sinusoidal, trunc_normal
from .optim import AdamWState, adamw_step, clip_grad_norm, collect_grads
from .tensor import Tensor, no_grad

__all__ = [
    "F", "Tensor", "no_grad", "Module", "Linear", "LayerNorm", "MLP", "Attention", "Block",
    "sinusoidal", "trunc_normal", "AdamWState", "adamw_step", "collect_grads", "clip_grad_norm",
    "Checkpoint", "save_checkpoint", "load_checkpoint",
]
