"""Fully-connected VAE backbone, the five loss variants, and their training loop."""
from .checkpoint import load, save
from .losses import compute_loss, discriminator_loss_and_grads, loss_and_grads, permute_dims, tc_decomposition
from .model import (
    ALL_VARIANTS,
    TrainedModel,
    VaeArchitectureSpec,
    Variant,
    build_model,
    decode,
    encode,
    heldout_split,
    kl_to_standard_normal,
    mean_predictor_mse,
    reparameterize,
)
from .training import (
    TrainConfig,
    TrainingDivergedError,
    decode_mean,
    discriminator_codes_step,
    factorvae_discriminator_step,
    train,
)
