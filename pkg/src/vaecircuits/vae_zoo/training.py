from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ..tensor_core import (
    AdamState,
    ConfigurationError,
    SeededRng,
    adam_step,
    bump_versions,
    layer_params,
)
from .losses import discriminator_loss_and_grads, loss_and_grads, permute_dims
from .model import (
    TrainedModel,
    VaeArchitectureSpec,
    Variant,
    build_model,
    decode,
    encode,
    heldout_split,
    reparameterize,
)

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    """Loss or gradient went non-finite; the run is abandoned."""


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    plateau_threshold: float = 1e-4
    early_stop_patience: int = 20
    discriminator_lr: float = 1e-4
    heldout_fraction: float = 0.1
    seed: int = 42

    def __post_init__(self):
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("max_epochs must be >= 0 and batch_size >= 1")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("patience values must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class ReduceLROnPlateau:
    """Multiply the LR by ``factor`` once ``patience`` epochs pass without a relative improvement."""

    def __init__(self, state: AdamState, patience: int, factor: float, threshold: float):
        self.state = state
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> bool:
        if loss < self.best - abs(self.best) * self.threshold:
            self.best = loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.state.lr *= self.factor
            self.bad_epochs = 0
            return True
        return False


def _snapshot(model: TrainedModel) -> list[np.ndarray]:
    return [p.copy() for p in layer_params(model.generator_layers())]


def _restore(model: TrainedModel, snap: list[np.ndarray]) -> None:
    for p, s in zip(layer_params(model.generator_layers()), snap):
        p[...] = s
    bump_versions(model.generator_layers())


def evaluate_loss(model: TrainedModel, x: np.ndarray, eps: np.ndarray, dataset_size: int):
    res = loss_and_grads(model, x, eps, dataset_size, need_grad=False)
    return res.total, res.recon_mse


def train(spec: VaeArchitectureSpec, X: np.ndarray, config: TrainConfig) -> TrainedModel:
    """Fit one VAE on the rows of ``X``.

    A seed-determined ``heldout_fraction`` of rows is kept out of the gradient
    steps; its total loss drives the plateau scheduler and early stopping, and
    the returned model carries the parameters from the best held-out epoch.
    Raises :class:`TrainingDivergedError` on a non-finite loss.
    """
    X = np.asarray(getattr(X, "X", X), dtype=np.float64)
    n, input_dim = X.shape
    rng = SeededRng(config.seed)
    model = build_model(spec, input_dim, rng.spawn("init"))
    train_idx, held_idx = heldout_split(n, config.seed, config.heldout_fraction)
    x_train, x_held = X[train_idx], X[held_idx]
    if len(x_held) < 2:
        raise ConfigurationError("need at least 2 held-out rows")
    n_train = len(x_train)

    batch_rng = rng.spawn("batches")
    noise_rng = rng.spawn("noise")
    perm_rng = rng.spawn("discriminator-permutations")
    held_eps = rng.spawn("heldout-noise").normal((len(x_held), spec.latent_dim))

    params = layer_params(model.generator_layers())
    opt = AdamState.for_params(params, lr=config.lr)
    sched = ReduceLROnPlateau(opt, config.plateau_patience, config.plateau_factor, config.plateau_threshold)
    disc_params = disc_opt = None
    if model.discriminator is not None:
        disc_params = layer_params(model.discriminator)
        disc_opt = AdamState.for_params(disc_params, lr=config.discriminator_lr)

    best_loss, best_snap, best_epoch = np.inf, _snapshot(model), 0
    since_best = 0
    history = []
    stopped_early = False
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = batch_rng.permutation(n_train)
        train_losses = []
        for start in range(0, n_train, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            xb = x_train[idx]
            eps = noise_rng.normal((len(idx), spec.latent_dim))
            res = loss_and_grads(model, xb, eps, n_train)
            if not np.isfinite(res.total):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            try:
                adam_step(opt, params, res.grads)
            except FloatingPointError as exc:
                raise TrainingDivergedError(str(exc)) from exc
            bump_versions(model.generator_layers())
            if model.discriminator is not None:
                z = res.z
                d_loss, d_grads = discriminator_loss_and_grads(model, z, permute_dims(z, perm_rng))
                adam_step(disc_opt, disc_params, d_grads)
                bump_versions(model.discriminator)
            train_losses.append(res.total)

        held_total, held_mse = evaluate_loss(model, x_held, held_eps, n_train)
        if not np.isfinite(held_total):
            raise TrainingDivergedError(f"non-finite held-out loss at epoch {epoch}")
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(train_losses)) if train_losses else float("nan"),
            "heldout_loss": held_total,
            "heldout_mse": held_mse,
            "lr": opt.lr,
        })
        sched.step(held_total)
        if held_total < best_loss:
            best_loss, best_snap, best_epoch = held_total, _snapshot(model), epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                stopped_early = True
                break

    if config.max_epochs > 0:
        _restore(model, best_snap)
    model.final_mse = float(np.mean((decode_mean(model, x_held) - x_held) ** 2))
    model.epochs_run = epoch if config.max_epochs > 0 else 0
    model.converged = stopped_early
    model.history = history
    model.seed = config.seed
    log.debug("%s seed=%d epochs=%d best_epoch=%d mse=%.4f", spec.variant.value,
              config.seed, model.epochs_run, best_epoch, model.final_mse)
    return model


def decode_mean(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    """Reconstruction through the posterior mean (no sampling)."""
    mu, _ = encode(model, x)
    return decode(model, mu)


def factorvae_discriminator_step(model: TrainedModel, batch, rng: SeededRng, state=None, lr: float = 1e-4):
    """One Adam step of the FactorVAE discriminator on ``batch``.

    The positive class is posterior samples for the batch; the negative class
    is the same codes with each latent column shuffled independently.
    Returns ``(loss_before_step, optimizer_state)`` so callers can keep stepping.
    """
    if model.spec.variant is not Variant.FACTOR or model.discriminator is None:
        raise ConfigurationError("discriminator step only applies to the FactorVAE variant")
    mu, logvar = encode(model, batch)
    z = reparameterize(mu, logvar, rng.normal(mu.shape))
    return discriminator_codes_step(model, z, rng, state, lr)


def discriminator_codes_step(model: TrainedModel, z: np.ndarray, rng: SeededRng, state=None, lr: float = 1e-4):
    params = layer_params(model.discriminator)
    if state is None:
        state = AdamState.for_params(params, lr=lr)
    loss, grads = discriminator_loss_and_grads(model, z, permute_dims(z, rng))
    adam_step(state, params, grads)
    bump_versions(model.discriminator)
    return loss, state
