"""Minimal dense-tensor engine with reverse-mode autodiff."""
from . import kernels
from .gradcheck import gradcheck, numerical_grad, relative_error
from .module import Module
from .tensor import (
    GraphError,
    NonFiniteError,
    Tensor,
    add,
    add_const,
    attention,
    backward,
    bce_with_logits,
    broadcast_to,
    concat,
    cosine_similarity,
    cross_entropy,
    dropout,
    embedding,
    exp,
    gelu,
    getitem,
    layer_norm,
    linear,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean_pool,
    mse,
    mul,
    mul_const,
    neg,
    no_grad,
    reshape,
    set_finite_check,
    sigmoid,
    soft_cross_entropy,
    softmax,
    stack,
    sub,
    swapaxes,
    take,
    tanh,
    tape,
    tensor,
    tmean,
    transpose,
    tsum,
)

BACKEND = kernels.BACKEND
