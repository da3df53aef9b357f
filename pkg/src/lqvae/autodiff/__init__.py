"""Minimal reverse-mode autodiff engine with double-backprop support."""

import numpy as np

from .tensor import (
    AutodiffError,
    Tensor,
    absolute,
    add,
    clip,
    concat,
    div,
    exp,
    fold,
    getitem,
    grad,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    scatter,
    sigmoid,
    softmax,
    sqrt,
    stop_gradient,
    swap_last2,
    tanh,
    transpose,
    tsum,
    unfold,
)
from .layers import (
    Conv2d,
    ConvTranspose2d,
    Dense,
    Dropout,
    Flatten,
    Layer,
    LeakyReLU,
    ReLU,
    Reshape,
    Sequential,
    Sigmoid,
    Softmax,
    Tanh,
    forward,
    same_pads,
)
from .optim import Adam, AdamState, adam_step

# ops whose vjp detaches from the tape; gradients through them cannot be
# differentiated a second time
_NOT_TWICE_DIFFERENTIABLE = {"quantize_ste", "hard_quantize", "stop_gradient"}


def _check_second_order(output, wrt):
    from .tensor import _toposort

    bad = sorted(
        {n._op for n in _toposort(output) if n._op in _NOT_TWICE_DIFFERENTIABLE}
    )
    if bad:
        raise AutodiffError(
            f"subgraph contains ops without second-order support: {', '.join(bad)}"
        )


def input_gradient_vector(encoder, x, direction):
    """Gradient of <direction, encoder-mean(x)> w.r.t. x, as a tape node.

    The result stays differentiable, so a norm of it can be driven to a
    target value by further differentiation w.r.t. the encoder weights.
    """
    if not isinstance(x, Tensor) or not x.requires_grad:
        x = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
    u = direction if isinstance(direction, Tensor) else Tensor(direction)
    mu = encoder(x)
    _check_second_order(mu, x)
    y = tsum(mul(mu, u))
    return grad(y, x, create_graph=True)
