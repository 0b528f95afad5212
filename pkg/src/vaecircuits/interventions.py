"""Four levels of causal intervention against a trained VAE.

Level 1 perturbs input feature groups and watches the posterior mean move.
Level 2 sweeps single latent dimensions and watches the decoder output move.
Level 3 patches encoder activations from a source input into a target input.
Level 4 freezes one encoder layer at its clean activations while the
perturbed input flows in, and asks how much of the effect survives.

All functions are pure in (model, data, settings). The evaluation set is by
default the model's held-out rows, capped at 512.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data_ingest import DatasetBundle
from .tensor_core import ConfigurationError, SeededRng, forward, run_from
from .vae_zoo import TrainedModel, decode, encode, heldout_split

log = logging.getLogger(__name__)

DEFAULT_SCALES = (0.5, 1.0, 2.0)
SWEEP_POINTS = 51
SWEEP_RANGE = 3.0
EVAL_CAP = 512
TE_FLOOR = 1e-12
MR_TOL = 1e-9


def evaluation_rows(n_rows: int, seed: int, cap: int = EVAL_CAP, heldout_fraction: float = 0.1) -> np.ndarray:
    """Held-out rows of the model's training split, deterministically capped."""
    _, held = heldout_split(n_rows, seed, heldout_fraction)
    if len(held) > cap:
        held = np.sort(SeededRng(seed).spawn("eval-subsample").permutation(held)[:cap])
    return held


def _eval_x(model: TrainedModel, bundle: DatasetBundle, rows) -> np.ndarray:
    if rows is None:
        rows = evaluation_rows(bundle.n_rows, model.seed)
    X = bundle.X[np.asarray(rows)]
    if len(X) == 0:
        raise ConfigurationError("empty evaluation set")
    return X


# -- Level 1 -----------------------------------------------------------------

def perturb_group(x: np.ndarray, group: Sequence[int], scale: float, sigma_per_feature: np.ndarray) -> np.ndarray:
    """Copy of ``x`` with every feature in ``group`` shifted by ``scale * sigma``."""
    out = np.array(x, dtype=np.float64, copy=True)
    idx = np.asarray(group, dtype=int)
    out[..., idx] += scale * np.asarray(sigma_per_feature)[idx]
    return out


def linearity_r2(scales: Sequence[float], response: Sequence[float]) -> float:
    """R^2 of an ordinary least-squares line of ``response`` on ``scales``.

    A response that is exactly constant is fitted perfectly by a flat line
    and scores 1.
    """
    s = np.asarray(scales, dtype=np.float64)
    y = np.asarray(response, dtype=np.float64)
    A = np.column_stack([np.ones_like(s), s])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_res = float(np.sum((y - A @ coef) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot <= 1e-300:
        return 1.0
    return 1.0 - ss_res / ss_tot


@dataclass
class ImportanceMatrix:
    R: np.ndarray  # (G, D)
    scales: tuple[float, ...]
    delta: np.ndarray  # (G, n_scales): mean norm of the posterior-mean shift
    linearity: np.ndarray  # (G,)
    group_names: tuple[str, ...]


def level1_scan(
    model: TrainedModel,
    bundle: DatasetBundle,
    scales: Sequence[float] = DEFAULT_SCALES,
    rows=None,
    partition=None,
) -> ImportanceMatrix:
    """Group-perturbation responses of the posterior mean.

    ``R[g, d]`` is the mean absolute shift of latent ``d`` over samples and
    scales; ``delta[g, s]`` the mean Euclidean shift at one scale.
    """
    X = _eval_x(model, bundle, rows)
    partition = partition or bundle.partition
    mu0, _ = encode(model, X)
    G, D = partition.n_groups, model.latent_dim
    R = np.zeros((G, D))
    delta = np.zeros((G, len(scales)))
    for g, group in enumerate(partition.groups):
        for k, s in enumerate(scales):
            mu, _ = encode(model, perturb_group(X, group, s, bundle.sigma_per_feature))
            shift = mu - mu0
            delta[g, k] = np.mean(np.linalg.norm(shift, axis=1))
            R[g] += np.mean(np.abs(shift), axis=0)
    R /= len(scales)
    lin = np.array([linearity_r2(scales, delta[g]) for g in range(G)])
    return ImportanceMatrix(R, tuple(scales), delta, lin, partition.names)


# -- Level 2 -----------------------------------------------------------------

@dataclass
class PosteriorStats:
    mu_mean: np.ndarray
    mu_std: np.ndarray
    mean_logvar: np.ndarray
    sigma_eff: np.ndarray


def stats_from_posterior(mu: np.ndarray, logvar: np.ndarray) -> PosteriorStats:
    if len(mu) < 2:
        raise ConfigurationError("posterior statistics need at least 2 samples")
    mu_std = mu.std(axis=0)
    mean_logvar = logvar.mean(axis=0)
    sigma_eff = np.maximum(mu_std, np.sqrt(np.exp(mean_logvar)))
    return PosteriorStats(mu.mean(axis=0), mu_std, mean_logvar, sigma_eff)


def posterior_stats(model: TrainedModel, bundle: DatasetBundle, rows=None) -> PosteriorStats:
    mu, logvar = encode(model, _eval_x(model, bundle, rows))
    return stats_from_posterior(mu, logvar)


def sweep_effects(
    model: TrainedModel,
    mu: np.ndarray,
    values: np.ndarray,
    d: int,
) -> np.ndarray:
    """Mean |decoder(z with z_d swept) - decoder(mu)| per output feature.

    ``values`` has shape (T,) for a shared sweep or (N, T) for per-sample sweeps.
    """
    N, D = mu.shape
    if not 0 <= d < D:
        raise ConfigurationError(f"latent dimension {d} out of range")
    values = np.asarray(values, dtype=np.float64)
    T = values.shape[-1]
    base = decode(model, mu)
    Z = np.repeat(mu, T, axis=0)
    Z[:, d] = np.broadcast_to(values, (N, T)).reshape(-1)
    out = decode(model, Z).reshape(N, T, -1)
    return np.mean(np.abs(out - base[:, None, :]), axis=(0, 1))


def effect_matrix(
    model: TrainedModel,
    bundle: DatasetBundle,
    stats: Optional[PosteriorStats] = None,
    mode: str = "calibrated",
    n_points: int = SWEEP_POINTS,
    sweep_range: float = SWEEP_RANGE,
    center: str = "global",
    rows=None,
) -> np.ndarray:
    """(D, n) matrix of mean absolute output effects of each latent sweep.

    ``mode="calibrated"`` sweeps ``center + sigma_eff * t`` with ``t`` in
    ``[-range, range]``; ``center="global"`` uses the dataset mean of the
    posterior means, ``center="sample"`` each sample's own mean.
    ``mode="fixed"`` sweeps ``t`` itself. The partition is never read.
    """
    X = _eval_x(model, bundle, rows)
    mu, logvar = encode(model, X)
    if stats is None and mode != "fixed":
        stats = stats_from_posterior(mu, logvar)
    t = np.linspace(-sweep_range, sweep_range, n_points)
    C = np.zeros((model.latent_dim, model.input_dim))
    for d in range(model.latent_dim):
        if mode == "fixed":
            values = t
        elif mode == "calibrated":
            if center == "global":
                values = stats.mu_mean[d] + stats.sigma_eff[d] * t
            elif center == "sample":
                values = mu[:, d:d + 1] + stats.sigma_eff[d] * t[None, :]
            else:
                raise ConfigurationError(f"unknown sweep center {center!r}")
        else:
            raise ConfigurationError(f"unknown CES mode {mode!r}")
        C[d] = sweep_effects(model, mu, values, d)
    return C


def ces_vector(model, bundle, stats=None, mode="calibrated", **kw) -> np.ndarray:
    """Per-dimension CES: mean over output features of :func:`effect_matrix` rows."""
    return effect_matrix(model, bundle, stats, mode, **kw).mean(axis=1)


def _single_dim(model, bundle, stats, d, mode, n_points, sweep_range, center, rows) -> float:
    X = _eval_x(model, bundle, rows)
    mu, logvar = encode(model, X)
    if mode != "fixed":
        stats = stats or stats_from_posterior(mu, logvar)
    t = np.linspace(-sweep_range, sweep_range, n_points)
    if mode == "fixed":
        values = t
    elif center == "sample":
        values = mu[:, d:d + 1] + stats.sigma_eff[d] * t[None, :]
    else:
        values = stats.mu_mean[d] + stats.sigma_eff[d] * t
    return float(sweep_effects(model, mu, values, d).mean())


def ces_calibrated(model, bundle, stats: Optional[PosteriorStats], d: int, n_points: int = SWEEP_POINTS,
                   sweep_range: float = SWEEP_RANGE, center: str = "global", rows=None) -> float:
    return _single_dim(model, bundle, stats, d, "calibrated", n_points, sweep_range, center, rows)


def ces_fixed(model, bundle, d: int, sweep_range: float = SWEEP_RANGE, n_points: int = SWEEP_POINTS, rows=None) -> float:
    return _single_dim(model, bundle, None, d, "fixed", n_points, sweep_range, "global", rows)


# -- Level 3 -----------------------------------------------------------------

def encoder_trace(model: TrainedModel, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Post-activations of every encoder hidden layer, and the posterior mean."""
    h, cache = forward(model.encoder_layers, x)
    mu, _ = forward([model.mu_head], h)
    return cache.post_activations, mu


def mu_from_layer(model: TrainedModel, h: np.ndarray, layer: int) -> np.ndarray:
    """Posterior mean when encoder layer ``layer`` outputs ``h``."""
    h = run_from(model.encoder_layers, h, layer + 1)
    return run_from([model.mu_head], h, 0)


def patch_compound(model: TrainedModel, x_source: np.ndarray, x_target: np.ndarray, layer: int):
    """‖mu(target with layer's output taken from source) - mu(target)‖; one value per pair."""
    L = model.n_encoder_layers
    if not 0 <= layer < L:
        raise ConfigurationError(f"layer must be in [0, {L})")
    src_acts, _ = encoder_trace(model, x_source)
    _, mu_t = encoder_trace(model, x_target)
    patched = mu_from_layer(model, src_acts[layer], layer)
    out = np.linalg.norm(patched - mu_t, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def patch_direct(compound: Sequence[float]) -> np.ndarray:
    """direct(l) = compound(l) - compound(l+1), with compound(L) = 0."""
    c = np.asarray(compound, dtype=np.float64)
    nxt = np.zeros_like(c)
    nxt[..., :-1] = c[..., 1:]
    return c - nxt


@dataclass
class PatchingProfile:
    compound: np.ndarray  # (L,) mean over pairs
    direct: np.ndarray  # (L,)
    per_pair_compound: np.ndarray  # (pairs, L)
    max_telescoping_error: float  # max over pairs of |sum direct - compound(0)| / max(1, compound(0))


def patching_profile(model: TrainedModel, x_source: np.ndarray, x_target: np.ndarray) -> PatchingProfile:
    L = model.n_encoder_layers
    src_acts, _ = encoder_trace(model, x_source)
    _, mu_t = encoder_trace(model, x_target)
    comp = np.stack(
        [np.linalg.norm(mu_from_layer(model, src_acts[l], l) - mu_t, axis=-1) for l in range(L)], axis=-1
    )
    comp = np.atleast_2d(comp)
    direct = patch_direct(comp)
    err = np.abs(direct.sum(axis=1) - comp[:, 0]) / np.maximum(1.0, comp[:, 0])
    return PatchingProfile(comp.mean(axis=0), patch_direct(comp.mean(axis=0)), comp, float(err.max()))


def random_pairs(n: int, n_pairs: int, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (source, target) with source != target."""
    src = rng.integers(0, n, n_pairs)
    tgt = (src + rng.integers(1, max(n, 2), n_pairs)) % n
    return src, tgt


# -- Level 4 -----------------------------------------------------------------

@dataclass
class MediationGrid:
    MR: np.ndarray  # (G, L), clamped; NaN where undefined
    MR_raw: np.ndarray
    TE: np.ndarray  # (G,)
    RE: np.ndarray  # (G, L)
    raw_violations: int
    NIS: float
    undefined_groups: list[str] = field(default_factory=list)
    group_names: tuple[str, ...] = ()


def mediation_scan(model: TrainedModel, bundle: DatasetBundle, scale: float = 1.0, rows=None,
                   partition=None) -> MediationGrid:
    """Mediation ratios MR(g, l) = (TE - RE) / TE with layer ``l`` frozen at clean activations."""
    X = _eval_x(model, bundle, rows)
    partition = partition or bundle.partition
    clean_acts, mu0 = encoder_trace(model, X)
    G, L = partition.n_groups, model.n_encoder_layers
    TE = np.full(G, np.nan)
    RE = np.full((G, L), np.nan)
    raw = np.full((G, L), np.nan)
    undefined = []
    for g, group in enumerate(partition.groups):
        xp = perturb_group(X, group, scale, bundle.sigma_per_feature)
        _, mu_p = encoder_trace(model, xp)
        te_i = np.linalg.norm(mu_p - mu0, axis=1)
        keep = te_i >= TE_FLOOR
        if not keep.any():
            undefined.append(partition.names[g])
            continue
        TE[g] = te_i[keep].mean()
        for l in range(L):
            # the frozen layer emits its clean output wholesale; later layers run normally
            mu_f = mu_from_layer(model, clean_acts[l], l)
            RE[g, l] = np.linalg.norm(mu_f - mu0, axis=1)[keep].mean()
            raw[g, l] = (TE[g] - RE[g, l]) / TE[g]
    if undefined:
        log.warning("mediation undefined for groups %s (no sample moved the posterior)", undefined)
    defined = ~np.isnan(raw)
    violations = int(np.sum(defined & ((raw < -MR_TOL) | (raw > 1.0 + MR_TOL))))
    MR = np.where(defined, np.clip(raw, 0.0, 1.0), np.nan)
    return MediationGrid(MR, raw, TE, RE, violations, violations / (G * L), undefined, partition.names)
