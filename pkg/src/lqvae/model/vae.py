"""The quantized, Lipschitz-constrained variational autoencoder.

One encoder with mean and log-sigma heads, two structurally identical
decoders: the hard-path decoder (used at inference, trained through the
gradient-blocking quantizer) and its soft-path copy (used only to carry
reconstruction gradients back into the encoder during training).
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import (
    Conv2d,
    ConvTranspose2d,
    Dense,
    Flatten,
    LeakyReLU,
    Reshape,
    Sequential,
    Sigmoid,
    Tensor,
    clip,
    exp,
    grad,
    log,
    mul,
    no_grad,
    power,
    reshape,
    sqrt,
    tsum,
)
from ..autodiff.optim import Adam
from ..autodiff.tensor import AutodiffError
from .quantizers import hard_quantize, soft_quantize

LOG_SIGMA_MIN = np.log(1e-6)
LOG_SIGMA_MAX = np.log(1e3)


@dataclass
class LatentCode:
    mu: object
    sigma: object
    sample: object = None


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 10
    kl_weight: float = 1.0
    penalty_weight: float = 1.0
    input_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.input_noise < 0:
            raise ValueError("input_noise must be non-negative")


class LqVaeModel:
    """Encoder + dual decoders + quantizer thresholds."""

    def __init__(self, trunk, head_mu, head_log_sigma, decoder1, input_shape,
                 latent_dim=64, eta=0.67449, lipschitz_k=0.1, soft_c=1.0,
                 config=None):
        if eta <= 0 or lipschitz_k <= 0:
            raise ValueError("eta and lipschitz_k must be positive")
        self.trunk = trunk
        self.head_mu = head_mu
        self.head_log_sigma = head_log_sigma
        self.decoder1 = decoder1               # hard path, inference
        self.decoder2 = copy.deepcopy(decoder1)  # soft path, training only
        self.input_shape = tuple(input_shape)
        self.latent_dim = latent_dim
        self.eta = eta
        self.lipschitz_k = lipschitz_k
        self.soft_c = soft_c
        self.config = dict(config or {})

    # parameter groups -------------------------------------------------
    def encoder_params(self):
        return self.trunk.params() + self.head_mu.params() + self.head_log_sigma.params()

    def decoder1_params(self):
        return self.decoder1.params()

    def decoder2_params(self):
        return self.decoder2.params()

    def all_params(self):
        return self.encoder_params() + self.decoder1_params() + self.decoder2_params()

    # forward pieces ---------------------------------------------------
    def _check_input(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise AutodiffError(
                f"encoder expected input shape {self.input_shape}, got {tuple(x.shape[1:])}"
            )

    def encode_mu(self, x):
        """Mean head only; the map whose Lipschitz constant is penalized."""
        return self.head_mu(self.trunk(x))

    def encode(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        h = self.trunk(x)
        mu = self.head_mu(h)
        log_sigma = clip(self.head_log_sigma(h), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return LatentCode(mu=mu, sigma=exp(log_sigma))

    def decode_hard(self, z):
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
        if z.shape[-1] != self.latent_dim:
            raise AutodiffError(
                f"decoder expected latent length {self.latent_dim}, got {z.shape[-1]}"
            )
        return self.decoder1(z)

    def decode_soft(self, z):
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
        if z.shape[-1] != self.latent_dim:
            raise AutodiffError(
                f"decoder expected latent length {self.latent_dim}, got {z.shape[-1]}"
            )
        return self.decoder2(z)

    def defend(self, x, batch_size=256):
        """Inference purification pipeline: encode mean, quantize, decode.

        Deterministic (no latent sampling).  Assumes a trained model;
        on an untrained one it simply returns poor reconstructions.
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == len(self.input_shape)
        if squeeze:
            x = x[None]
        out = np.empty_like(x)
        with no_grad():
            for s in range(0, len(x), batch_size):
                xb = Tensor(x[s : s + batch_size])
                code = hard_quantize(self.encode(xb).mu, self.eta)
                out[s : s + batch_size] = self.decode_hard(code).data
        return out[0] if squeeze else out

    def latent_mu(self, x, batch_size=256):
        """Encoder means as a plain array (evaluation helper)."""
        x = np.asarray(x, dtype=np.float64)
        outs = []
        with no_grad():
            for s in range(0, len(x), batch_size):
                outs.append(self.encode(Tensor(x[s : s + batch_size])).mu.data)
        return np.concatenate(outs, axis=0)


def reparameterize(code, rng):
    """z = mu + sigma * eps with eps ~ N(0, I); fills code.sample."""
    eps = Tensor(rng.standard_normal(code.mu.shape))
    code.sample = code.mu + mul(code.sigma, eps)
    return code.sample


def kl_gaussian(mu, sigma):
    """KL( N(mu, sigma^2) || N(0, 1) ), summed over all entries."""
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("sigma must be strictly positive")
    var = mul(sigma, sigma)
    return 0.5 * tsum(mul(mu, mu) + var - 1.0 - log(var))


def lipschitz_penalty(model, x, rng=None, directions=None, create_graph=True):
    """Sum over the batch of (||grad_x <u_i, mu(x_i)>||_2 - K)^2.

    Each sample gets a fresh random unit direction u_i over the latent
    dimensions (random-projection surrogate for the Jacobian norm).
    The result stays differentiable w.r.t. the encoder weights.
    """
    if not isinstance(x, Tensor) or not x.requires_grad:
        x = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
    n = x.shape[0]
    if directions is None:
        u = rng.standard_normal((n, model.latent_dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
    else:
        u = np.asarray(directions, dtype=np.float64)
    mu = model.encode_mu(x)
    y = tsum(mul(mu, Tensor(u)))
    g = grad(y, x, create_graph=create_graph)
    sq = tsum(reshape(mul(g, g), (n, -1)), axis=1)
    norms = sqrt(sq + 1e-24)
    resid = norms - model.lipschitz_k
    return tsum(mul(resid, resid))


def compute_losses(model, x, rng, cfg=None, eps=None, directions=None):
    """Algorithm losses for one batch, as live tape tensors.

    Returns (loss_f, loss_g, loss_h) where loss_f is the encoder
    objective (soft reconstruction + KL + Lipschitz penalty), loss_g
    the hard-path and loss_h the soft-path reconstruction loss.  ``eps``
    and ``directions`` override the random draws (for tests).
    """
    cfg = cfg or TrainConfig()
    target = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    x_in = target
    if cfg.input_noise > 0:
        # Denoising variant: the encoder sees a jittered input while both
        # reconstruction losses still target the clean image, pushing the
        # encoder toward local invariance around the data manifold.
        x_in = np.clip(target + rng.normal(0.0, cfg.input_noise, target.shape), 0.0, 1.0)
    x = Tensor(x_in, requires_grad=True)
    model._check_input(x)
    n = x.shape[0]
    target = Tensor(target)

    h = model.trunk(x)
    mu = model.head_mu(h)
    log_sigma = clip(model.head_log_sigma(h), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    sigma = exp(log_sigma)

    if eps is None:
        eps = rng.standard_normal(mu.shape)
    zhat = mu + mul(sigma, Tensor(np.asarray(eps, dtype=np.float64)))

    x1 = model.decoder2(soft_quantize(zhat, model.eta, model.soft_c))
    x2 = model.decoder1(hard_quantize(zhat, model.eta))

    diff1 = target - x1
    diff2 = target - x2
    loss_h = tsum(mul(diff1, diff1))
    loss_g = tsum(mul(diff2, diff2))

    kl = kl_gaussian(mu, sigma)

    if directions is None:
        directions = rng.standard_normal((n, model.latent_dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    y = tsum(mul(mu, Tensor(np.asarray(directions, dtype=np.float64))))
    g = grad(y, x, create_graph=True)
    sq = tsum(reshape(mul(g, g), (n, -1)), axis=1)
    resid = sqrt(sq + 1e-24) - model.lipschitz_k
    penalty = tsum(mul(resid, resid))

    loss_f = loss_h + cfg.kl_weight * kl + cfg.penalty_weight * penalty
    return loss_f, loss_g, loss_h


def train_step(model, batch, optimizers, rng, cfg=None):
    """One step of the three-loss training dataflow.

    Encoder weights move only with the full objective; the hard-path
    decoder only with its own reconstruction loss; the soft-path
    decoder only with the soft reconstruction loss.
    """
    opt_enc, opt_dec1, opt_dec2 = optimizers
    loss_f, loss_g, loss_h = compute_losses(model, batch, rng, cfg)

    g_enc = grad(loss_f, model.encoder_params())
    g_dec1 = grad(loss_g, model.decoder1_params())
    g_dec2 = grad(loss_h, model.decoder2_params())

    opt_enc.step(g_enc)
    opt_dec1.step(g_dec1)
    opt_dec2.step(g_dec2)

    return loss_f.item(), loss_g.item(), loss_h.item()


def train(model, images, config=None, log_every=0):
    """Train on clean images only; returns per-epoch mean loss history."""
    cfg = config or TrainConfig()
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)

    opts = (
        Adam(model.encoder_params(), lr=cfg.learning_rate),
        Adam(model.decoder1_params(), lr=cfg.learning_rate),
        Adam(model.decoder2_params(), lr=cfg.learning_rate),
    )

    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        sums = np.zeros(3)
        n_batches = 0
        for s in range(0, len(images), cfg.batch_size):
            batch = images[order[s : s + cfg.batch_size]]
            losses = train_step(model, batch, opts, rng, cfg)
            sums += np.array(losses) / len(batch)
            n_batches += 1
        history.append(
            {
                "epoch": epoch,
                "loss_f": sums[0] / n_batches,
                "loss_g": sums[1] / n_batches,
                "loss_h": sums[2] / n_batches,
            }
        )
        if log_every and (epoch + 1) % log_every == 0:
            h = history[-1]
            print(
                f"epoch {epoch + 1}/{cfg.epochs}  "
                f"L_f={h['loss_f']:.4f} L_g={h['loss_g']:.4f} L_h={h['loss_h']:.4f}"
            )
    return model, history


# architecture builders ----------------------------------------------


def build_model(arch="mlp", input_shape=(1, 28, 28), latent_dim=64,
                eta=0.67449, lipschitz_k=0.1, soft_c=1.0, seed=0,
                hidden=(256, 128)):
    """Construct an LQ-VAE.

    arch 'mlp': dense trunk (fast property tests); 'conv-desk' /
    'conv-full': the convolutional stacks at reduced / full width.
    """
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    d = c * h * w

    if arch == "mlp":
        h1, h2 = hidden
        trunk = Sequential([
            Flatten(),
            Dense(d, h1, rng=rng, name="enc_fc1"), LeakyReLU(0.2),
            Dense(h1, h2, rng=rng, name="enc_fc2"), LeakyReLU(0.2),
        ])
        head_mu = Dense(h2, latent_dim, rng=rng, name="enc_mu")
        head_ls = Dense(h2, latent_dim, rng=rng, name="enc_log_sigma")
        decoder1 = Sequential([
            Dense(latent_dim, h2, rng=rng, name="dec_fc1"), LeakyReLU(0.2),
            Dense(h2, h1, rng=rng, name="dec_fc2"), LeakyReLU(0.2),
            Dense(h1, d, rng=rng, name="dec_out"), Sigmoid(),
            Reshape(input_shape),
        ])
    elif arch in ("conv-desk", "conv-full"):
        if h % 4 or w % 4:
            raise ValueError(
                "conv architectures need spatial dims divisible by 4"
            )
        h4, w4 = h // 4, w // 4
        if arch == "conv-full":
            f1, f2, fc = 64, 128, 1024
        else:
            f1, f2, fc = 16, 32, 256
        trunk = Sequential([
            Conv2d(c, f1, 3, 1, rng=rng, name="enc_c1"), LeakyReLU(0.2),
            Conv2d(f1, f1, 3, 2, rng=rng, name="enc_c2"), LeakyReLU(0.2),
            Conv2d(f1, f2, 3, 2, rng=rng, name="enc_c3"), LeakyReLU(0.2),
            Conv2d(f2, f2, 3, 1, rng=rng, name="enc_c4"), LeakyReLU(0.2),
            Flatten(),
            Dense(h4 * w4 * f2, fc, rng=rng, name="enc_fc"), LeakyReLU(0.2),
        ])
        head_mu = Dense(fc, latent_dim, rng=rng, name="enc_mu")
        head_ls = Dense(fc, latent_dim, rng=rng, name="enc_log_sigma")
        decoder1 = Sequential([
            Dense(latent_dim, fc, rng=rng, name="dec_fc1"), LeakyReLU(0.2),
            Dense(fc, h4 * w4 * f2, rng=rng, name="dec_fc2"), LeakyReLU(0.2),
            Reshape((f2, h4, w4)),
            ConvTranspose2d(f2, f2, 3, 1, rng=rng, name="dec_ct1"), LeakyReLU(0.2),
            ConvTranspose2d(f2, f2, 3, 2, rng=rng, name="dec_ct2"), LeakyReLU(0.2),
            ConvTranspose2d(f2, f1, 3, 2, rng=rng, name="dec_ct3"), LeakyReLU(0.2),
            ConvTranspose2d(f1, c, 3, 1, rng=rng, name="dec_ct4"), Sigmoid(),
        ])
    else:
        raise ValueError(f"unknown architecture '{arch}'")

    cfg = {
        "arch": arch,
        "input_shape": list(input_shape),
        "latent_dim": latent_dim,
        "eta": eta,
        "lipschitz_k": lipschitz_k,
        "soft_c": soft_c,
        "seed": seed,
        "hidden": list(hidden),
    }
    return LqVaeModel(
        trunk, head_mu, head_ls, decoder1, input_shape,
        latent_dim=latent_dim, eta=eta, lipschitz_k=lipschitz_k,
        soft_c=soft_c, config=cfg,
    )
