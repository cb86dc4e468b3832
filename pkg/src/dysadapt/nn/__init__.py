"""Numeric core: autodiff tensor, differentiable ops, parameter store."""

from dysadapt.nn.ops import (
    add,
    concat_features,
    conv1d,
    conv_layout,
    conv_subsample,
    cross_entropy,
    layer_norm,
    linear,
    log_softmax,
    multi_head_attention,
    relu,
    stats_pool,
    tsum,
)
from dysadapt.nn.params import ParamStore, uniform_init
from dysadapt.nn.tensor import Tensor, as_tensor, grad_enabled, no_grad

__all__ = [
    "ParamStore",
    "Tensor",
    "add",
    "as_tensor",
    "concat_features",
    "conv1d",
    "conv_layout",
    "conv_subsample",
    "cross_entropy",
    "grad_enabled",
    "layer_norm",
    "linear",
    "log_softmax",
    "multi_head_attention",
    "no_grad",
    "relu",
    "stats_pool",
    "tsum",
    "uniform_init",
]
