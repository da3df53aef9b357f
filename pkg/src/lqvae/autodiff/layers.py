"""Neural-network layers built on the tape: dense, conv, conv-transpose,
activations, dropout. Convolutions use im2col (unfold/matmul/fold), so
every layer here is twice differentiable except Dropout's mask sampling,
which is constant w.r.t. the inputs.
"""

import numpy as np

from .tensor import (
    AutodiffError,
    Tensor,
    fold,
    leaky_relu,
    matmul,
    relu,
    reshape,
    sigmoid,
    softmax,
    swap_last2,
    tanh,
    unfold,
)


def same_pads(h, w, kh, kw, stride):
    """Asymmetric 'same' padding: output size = ceil(input / stride)."""
    oh, ow = -(-h // stride), -(-w // stride)
    th = max((oh - 1) * stride + kh - h, 0)
    tw = max((ow - 1) * stride + kw - w, 0)
    return (th // 2, th - th // 2, tw // 2, tw - tw // 2)


class Layer:
    def params(self):
        return []

    def __call__(self, x, train=False, rng=None):
        raise NotImplementedError

    def out_shape(self, in_shape):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, in_dim, out_dim, rng=None, name="dense"):
        if in_dim <= 0 or out_dim <= 0:
            raise ValueError(f"{name}: dimensions must be positive")
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / in_dim)
        self.w = Tensor(rng.normal(0.0, scale, (in_dim, out_dim)), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)
        self.name = name

    def params(self):
        return [self.w, self.b]

    def __call__(self, x, train=False, rng=None):
        if x.shape[-1] != self.w.shape[0]:
            raise AutodiffError(
                f"layer '{self.name}': expected input dim {self.w.shape[0]}, "
                f"got {x.shape[-1]}"
            )
        return matmul(x, self.w) + self.b

    def out_shape(self, in_shape):
        return (*in_shape[:-1], self.w.shape[1])


class Conv2d(Layer):
    """Same-padded 2-D convolution over (N, C, H, W) batches."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, rng=None, name="conv2d"):
        if in_ch <= 0 or out_ch <= 0 or kernel <= 0 or stride <= 0:
            raise ValueError(f"{name}: dimensions must be positive")
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        scale = np.sqrt(2.0 / fan_in)
        self.w = Tensor(rng.normal(0.0, scale, (out_ch, fan_in)), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride = kernel, stride
        self.name = name

    def params(self):
        return [self.w, self.b]

    def __call__(self, x, train=False, rng=None):
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise AutodiffError(
                f"layer '{self.name}': expected {self.in_ch} channels, got {c}"
            )
        k, s = self.kernel, self.stride
        pads = same_pads(h, w, k, k, s)
        oh, ow = -(-h // s), -(-w // s)
        cols = unfold(x, k, k, s, pads)
        out = matmul(self.w, cols)
        out = reshape(out, (n, self.out_ch, oh, ow))
        return out + reshape(self.b, (1, self.out_ch, 1, 1))

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        return (n, self.out_ch, -(-h // self.stride), -(-w // self.stride))


class ConvTranspose2d(Layer):
    """Adjoint of a same-padded convolution: spatial size scales by stride."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, rng=None, name="convT2d"):
        if in_ch <= 0 or out_ch <= 0 or kernel <= 0 or stride <= 0:
            raise ValueError(f"{name}: dimensions must be positive")
        rng = rng or np.random.default_rng(0)
        fan_k = out_ch * kernel * kernel
        scale = np.sqrt(2.0 / (in_ch * kernel * kernel))
        self.w = Tensor(rng.normal(0.0, scale, (in_ch, fan_k)), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride = kernel, stride
        self.name = name

    def params(self):
        return [self.w, self.b]

    def __call__(self, x, train=False, rng=None):
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise AutodiffError(
                f"layer '{self.name}': expected {self.in_ch} channels, got {c}"
            )
        k, s = self.kernel, self.stride
        oh, ow = h * s, w * s
        pads = same_pads(oh, ow, k, k, s)
        flat = reshape(x, (n, c, h * w))
        cols = matmul(swap_last2(self.w), flat)
        out = fold(cols, (oh, ow), self.out_ch, k, k, s, pads)
        return out + reshape(self.b, (1, self.out_ch, 1, 1))

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        return (n, self.out_ch, h * self.stride, w * self.stride)


class LeakyReLU(Layer):
    def __init__(self, alpha=0.2):
        self.alpha = alpha

    def __call__(self, x, train=False, rng=None):
        return leaky_relu(x, self.alpha)

    def out_shape(self, in_shape):
        return in_shape


class ReLU(Layer):
    def __call__(self, x, train=False, rng=None):
        return relu(x)

    def out_shape(self, in_shape):
        return in_shape


class Sigmoid(Layer):
    def __call__(self, x, train=False, rng=None):
        return sigmoid(x)

    def out_shape(self, in_shape):
        return in_shape


class Tanh(Layer):
    def __call__(self, x, train=False, rng=None):
        return tanh(x)

    def out_shape(self, in_shape):
        return in_shape


class Softmax(Layer):
    def __call__(self, x, train=False, rng=None):
        return softmax(x, axis=-1)

    def out_shape(self, in_shape):
        return in_shape


class Dropout(Layer):
    """Inverted dropout; identity in eval mode."""

    def __init__(self, p):
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must be in [0, 1)")
        self.p = p

    def __call__(self, x, train=False, rng=None):
        if not train or self.p == 0.0:
            return x
        if rng is None:
            raise AutodiffError("dropout in train mode requires an rng")
        mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * Tensor(mask)

    def out_shape(self, in_shape):
        return in_shape


class Flatten(Layer):
    def __call__(self, x, train=False, rng=None):
        return reshape(x, (x.shape[0], -1))

    def out_shape(self, in_shape):
        return (in_shape[0], int(np.prod(in_shape[1:])))


class Reshape(Layer):
    """Reshape trailing dims, keeping the batch dim."""

    def __init__(self, shape):
        self.shape = tuple(shape)

    def __call__(self, x, train=False, rng=None):
        return reshape(x, (x.shape[0], *self.shape))

    def out_shape(self, in_shape):
        return (in_shape[0], *self.shape)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def __call__(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer(x, train=train, rng=rng)
        return x

    def out_shape(self, in_shape):
        for layer in self.layers:
            in_shape = layer.out_shape(in_shape)
        return in_shape


def forward(graph, x, train=False, rng=None):
    """Run a layer or layer sequence on a tensor."""
    return graph(x, train=train, rng=rng)
