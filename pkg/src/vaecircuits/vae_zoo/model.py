from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..tensor_core import (
    Activation,
    ConfigurationError,
    DenseLayer,
    SeededRng,
    forward,
    init_layer,
    init_mlp,
)


class Variant(str, enum.Enum):
    STANDARD = "standard"
    BETA = "beta"
    BETA_TC = "beta_tc"
    FACTOR = "factor"
    DIP_II = "dip_ii"


ALL_VARIANTS = tuple(Variant)


@dataclass(frozen=True)
class VaeArchitectureSpec:
    variant: Variant
    encoder_widths: tuple[int, ...] = (256, 128, 64)
    latent_dim: int = 10
    beta: float = 4.0
    tc_weight: float = 6.0
    gamma: float = 10.0
    lambda_od: float = 10.0
    lambda_d: float = 100.0
    discriminator_widths: tuple[int, ...] = (64, 64, 64)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(
            self, "discriminator_widths", tuple(int(w) for w in self.discriminator_widths)
        )
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be >= 1")
        if not self.encoder_widths or min(self.encoder_widths) < 1:
            raise ConfigurationError("encoder needs at least one positive hidden width")

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        return tuple(reversed(self.encoder_widths))

    def hyper(self) -> dict[str, float]:
        """The hyperparameters that matter for this variant."""
        return {
            Variant.STANDARD: {},
            Variant.BETA: {"beta": self.beta},
            Variant.BETA_TC: {"tc_weight": self.tc_weight},
            Variant.FACTOR: {"gamma": self.gamma},
            Variant.DIP_II: {"lambda_od": self.lambda_od, "lambda_d": self.lambda_d},
        }[self.variant]


@dataclass
class TrainedModel:
    spec: VaeArchitectureSpec
    input_dim: int
    encoder_layers: list[DenseLayer]
    mu_head: DenseLayer
    logvar_head: DenseLayer
    decoder_layers: list[DenseLayer]
    discriminator: Optional[list[DenseLayer]] = None
    seed: int = 0
    final_mse: float = float("nan")
    epochs_run: int = 0
    converged: bool = False
    history: list[dict] = field(default_factory=list)

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    @property
    def n_encoder_layers(self) -> int:
        return len(self.encoder_layers)

    def generator_layers(self) -> list[DenseLayer]:
        return [*self.encoder_layers, self.mu_head, self.logvar_head, *self.decoder_layers]


def build_model(spec: VaeArchitectureSpec, input_dim: int, rng: SeededRng) -> TrainedModel:
    """Freshly initialized network for ``spec``; nothing trained yet."""
    widths = (input_dim, *spec.encoder_widths)
    encoder = init_mlp(rng, widths, final_activation=Activation.RELU)
    mu_head = init_layer(rng, widths[-1], spec.latent_dim, Activation.IDENTITY)
    logvar_head = init_layer(rng, widths[-1], spec.latent_dim, Activation.IDENTITY)
    decoder = init_mlp(rng, (spec.latent_dim, *spec.decoder_widths, input_dim))
    disc = None
    if spec.variant is Variant.FACTOR:
        disc = init_mlp(rng, (spec.latent_dim, *spec.discriminator_widths, 2))
        # zero head: the untrained discriminator sits exactly at chance
        disc[-1].weight[:] = 0.0
        disc[-1].bias[:] = 0.0
    return TrainedModel(spec, input_dim, encoder, mu_head, logvar_head, decoder, disc, seed=rng.seed)


def encode(model: TrainedModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and log-variance for a vector or batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ConfigurationError(f"expected {model.input_dim} features, got {x.shape[-1]}")
    h, _ = forward(model.encoder_layers, x)
    mu, _ = forward([model.mu_head], h)
    logvar, _ = forward([model.logvar_head], h)
    return mu, logvar


def decode(model: TrainedModel, z: np.ndarray) -> np.ndarray:
    out, _ = forward(model.decoder_layers, z)
    return out


def reparameterize(mu: np.ndarray, logvar: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return mu + np.exp(0.5 * np.asarray(logvar)) * eps


def kl_to_standard_normal(mu: np.ndarray, logvar: np.ndarray) -> float:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over every entry given."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0))


def mean_predictor_mse(train_x: np.ndarray, test_x: np.ndarray) -> float:
    """Held-out MSE of predicting the training column means; the floor every model must beat."""
    return float(np.mean((test_x - train_x.mean(axis=0)) ** 2))


def heldout_split(n_rows: int, seed: int, fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Seed-deterministic (train_idx, heldout_idx), both sorted."""
    n_held = max(1, int(round(fraction * n_rows))) if n_rows > 1 else 0
    perm = SeededRng(seed).spawn("heldout-split").permutation(n_rows)
    return np.sort(perm[n_held:]), np.sort(perm[:n_held])
