"""Minimal tensor algebra with reverse-mode autodiff, layers and Adam."""

from .gradcheck import grad_check, grad_check_params
from .layers import MLP, Linear, Module, MultiheadAttention, Parameter, layer_norm, mlp_block, multihead_attention, silu
from .optim import OptimizerState, adam_step, clip_grad_norm
from .tensor import Tensor, concat, matmul, mse, no_grad, shadow64, softmax

__all__ = [
    "MLP", "Linear", "Module", "MultiheadAttention", "OptimizerState", "Parameter", "Tensor",
    "adam_step", "clip_grad_norm", "concat", "grad_check", "grad_check_params", "layer_norm",
    "matmul", "mlp_block", "mse", "multihead_attention", "no_grad", "shadow64", "silu", "softmax",
]
