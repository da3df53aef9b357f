from .quantizers import hard_quantize, soft_quantize, soft_quantize_ste
from .vae import (
    LatentCode,
    LqVaeModel,
    TrainConfig,
    build_model,
    compute_losses,
    kl_gaussian,
    lipschitz_penalty,
    reparameterize,
    train,
    train_step,
)
