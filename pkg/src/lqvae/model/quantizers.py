"""Binary latent quantizers.

The hard quantizer maps each latent dimension to +1 when its magnitude
is at or below the threshold and -1 otherwise; it blocks all gradient
flow.  The soft quantizer (eta^2 - z^2) / (c + |eta^2 - z^2|) is a
smooth surrogate whose sign agrees with the hard one away from the
threshold and which sharpens as c decreases.
"""

import numpy as np

from ..autodiff import tensor as T
from ..autodiff.tensor import Tensor, absolute, div


def hard_quantize(z, eta):
    """Elementwise {-1,+1} code; |z| == eta maps to +1 (inclusive).

    Accepts an array or a Tensor; a Tensor input yields a detached
    Tensor (the quantizer is deliberately opaque to gradients).
    """
    if eta <= 0:
        raise ValueError("quantization threshold eta must be positive")
    if isinstance(z, Tensor):
        out = Tensor(np.where(np.abs(z.data) <= eta, 1.0, -1.0))
        out._op = "hard_quantize"
        return out
    return np.where(np.abs(np.asarray(z, dtype=np.float64)) <= eta, 1.0, -1.0)


def soft_quantize(z, eta, c):
    """Smooth surrogate of the hard quantizer, range (-1, 1]."""
    if eta <= 0:
        raise ValueError("quantization threshold eta must be positive")
    if c < 0:
        raise ValueError("softness constant c must be non-negative")
    if isinstance(z, Tensor):
        t = eta * eta - z * z
        return div(t, absolute(t) + c)
    z = np.asarray(z, dtype=np.float64)
    t = eta * eta - z * z
    denom = c + np.abs(t)
    if np.any(denom == 0.0):
        raise ZeroDivisionError(
            "soft_quantize with c = 0 is undefined at |z| = eta"
        )
    return t / denom


def soft_quantize_ste(z, eta, c):
    """Hard quantization forward, soft-quantizer derivative backward.

    This is the surrogate-gradient route an adaptive attacker uses to
    differentiate through the hard quantizer; it is first-order only.
    """
    if not isinstance(z, Tensor):
        raise TypeError("soft_quantize_ste expects a Tensor")
    if c <= 0:
        raise ValueError("surrogate gradient needs c > 0")
    t = eta * eta - z.data * z.data
    # d/dz [t/(c+|t|)] = -2 z c / (c + |t|)^2
    slope = Tensor(-2.0 * z.data * c / (c + np.abs(t)) ** 2)
    hard = np.where(np.abs(z.data) <= eta, 1.0, -1.0)
    return T._make(hard, (z,), lambda g: (T.mul(g, slope),), "quantize_ste")
