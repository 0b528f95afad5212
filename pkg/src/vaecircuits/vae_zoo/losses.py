"""Loss functions of the five variants, with their gradients.

Each regularizer returns its value and the partial derivatives with respect
to ``mu``, ``logvar`` and the sampled ``z``; :func:`loss_and_grads` chains
those through the reparameterization and the encoder/decoder stacks.

The reconstruction term is the squared error summed over features and
averaged over the batch. ``recon_mse`` (what gets reported) is the
per-element mean of the same quantity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from ..tensor_core import ConfigurationError, SeededRng, backward, flatten_grads, forward
from .model import TrainedModel, Variant

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class RegTerm:
    value: float
    d_mu: np.ndarray
    d_logvar: np.ndarray
    d_z: Optional[np.ndarray] = None
    parts: dict[str, float] = field(default_factory=dict)


@dataclass
class LossResult:
    total: float
    recon_mse: float
    terms: dict[str, float]
    grads: Optional[list[np.ndarray]] = None  # aligned with model.generator_layers() params
    z: Optional[np.ndarray] = None


def kl_term(mu: np.ndarray, logvar: np.ndarray, weight: float = 1.0) -> RegTerm:
    b = mu.shape[0]
    ev = np.exp(logvar)
    value = 0.5 * np.sum(mu * mu + ev - logvar - 1.0) / b
    return RegTerm(weight * value, weight * mu / b, weight * 0.5 * (ev - 1.0) / b, parts={"kl": value})


def dip_ii_term(mu: np.ndarray, logvar: np.ndarray, lambda_od: float, lambda_d: float) -> RegTerm:
    """Covariance penalty on Cov(mu) + E[diag(exp(logvar))]."""
    b, d = mu.shape
    if b < 2:
        raise ConfigurationError("DIP-VAE-II needs a batch of at least 2 rows")
    centered = mu - mu.mean(axis=0)
    cov = centered.T @ centered / b + np.diag(np.exp(logvar).mean(axis=0))
    off = cov - np.diag(np.diag(cov))
    diag = np.diag(cov) - 1.0
    value = lambda_od * np.sum(off * off) + lambda_d * np.sum(diag * diag)
    dcov = 2.0 * lambda_od * off + np.diag(2.0 * lambda_d * diag)
    d_mu = 2.0 / b * centered @ dcov
    d_logvar = np.exp(logvar) * np.diag(dcov)[None, :] / b
    return RegTerm(float(value), d_mu, d_logvar, parts={"dip_penalty": float(value)})


def _log_q_pairwise(z: np.ndarray, mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """lq[i, j, d] = log N(z_id; mu_jd, exp(logvar_jd))."""
    diff = z[:, None, :] - mu[None, :, :]
    return -0.5 * (LOG_2PI + logvar[None, :, :] + diff * diff * np.exp(-logvar)[None, :, :])


def tc_decomposition(z, mu, logvar, dataset_size: int) -> dict[str, float]:
    """Minibatch-weighted-sampling estimates of (MI, TC, dimension-wise KL)."""
    b = z.shape[0]
    lq = _log_q_pairwise(z, mu, logvar)
    log_norm = np.log(dataset_size * b)
    log_qzx = np.einsum("iid->i", lq)
    log_qz = logsumexp(lq.sum(axis=2), axis=1) - log_norm
    log_qz_prod = (logsumexp(lq, axis=1) - log_norm).sum(axis=1)
    log_pz = (-0.5 * (LOG_2PI + z * z)).sum(axis=1)
    return {
        "mi": float(np.mean(log_qzx - log_qz)),
        "tc": float(np.mean(log_qz - log_qz_prod)),
        "dim_kl": float(np.mean(log_qz_prod - log_pz)),
    }


def beta_tc_term(z, mu, logvar, tc_weight: float, dataset_size: int) -> RegTerm:
    """MI + tc_weight * TC + dimension-wise KL.

    Rewritten as mean(log q(z|x) - log p(z)) + (tc_weight - 1) * TC, which
    makes the gradient a sum of a diagonal part and a pairwise softmax part.
    """
    b = z.shape[0]
    if b < 2:
        raise ConfigurationError("the TC estimator needs a batch of at least 2 rows")
    inv_var = np.exp(-logvar)
    diff = z[:, None, :] - mu[None, :, :]
    sq = diff * diff * inv_var[None, :, :]
    lq = -0.5 * (LOG_2PI + logvar[None, :, :] + sq)
    log_norm = np.log(dataset_size * b)
    joint = lq.sum(axis=2)
    # one exp pass serves both the log-sum-exps and the softmax weights
    m_joint = joint.max(axis=1, keepdims=True)
    e_joint = np.exp(joint - m_joint)
    s_joint = e_joint.sum(axis=1, keepdims=True)
    m_lq = lq.max(axis=1, keepdims=True)
    e_lq = np.exp(lq - m_lq)
    s_lq = e_lq.sum(axis=1, keepdims=True)
    log_qzx = np.diagonal(joint).copy()
    log_qz = (np.log(s_joint) + m_joint)[:, 0] - log_norm
    log_qz_prod = ((np.log(s_lq) + m_lq)[:, 0, :] - log_norm).sum(axis=1)
    log_pz = (-0.5 * (LOG_2PI + z * z)).sum(axis=1)
    mi = np.mean(log_qzx - log_qz)
    tc = np.mean(log_qz - log_qz_prod)
    dim_kl = np.mean(log_qz_prod - log_pz)
    value = mi + tc_weight * tc + dim_kl

    # diagonal part: mean_i [log q(z_i|x_i) - log p(z_i)]
    diff_ii = z - mu
    d_z = (-diff_ii * inv_var + z) / b
    d_mu = diff_ii * inv_var / b
    d_logvar = (-0.5 + 0.5 * diff_ii * diff_ii * inv_var) / b

    # pairwise part: (tc_weight - 1) * mean_i [LSE_j joint_ij - sum_d LSE_j lq_ijd]
    coef = (tc_weight - 1.0) / b
    if coef != 0.0:
        c = e_lq
        c /= s_lq
        c *= -coef
        c += (coef * e_joint / s_joint)[:, :, None]
        scaled = c * diff
        scaled *= inv_var[None, :, :]
        d_z -= scaled.sum(axis=1)
        d_mu += scaled.sum(axis=0)
        d_logvar += 0.5 * ((c * sq).sum(axis=0) - c.sum(axis=0))
    parts = {"mi": float(mi), "tc": float(tc), "dim_kl": float(dim_kl)}
    return RegTerm(float(value), d_mu, d_logvar, d_z, parts)


def factor_tc_term(model: TrainedModel, z: np.ndarray, gamma: float) -> RegTerm:
    """gamma * mean(logit_true - logit_permuted); gradient flows to z only."""
    b = z.shape[0]
    logits, cache = forward(model.discriminator, z)
    tc = float(np.mean(logits[:, 0] - logits[:, 1]))
    out_grad = np.zeros_like(logits)
    out_grad[:, 0] = gamma / b
    out_grad[:, 1] = -gamma / b
    _, d_z = backward(model.discriminator, cache, out_grad)
    zeros = np.zeros_like(z)
    return RegTerm(gamma * tc, zeros, zeros.copy(), d_z, {"tc": tc})


def loss_and_grads(
    model: TrainedModel,
    x: np.ndarray,
    eps: np.ndarray,
    dataset_size: Optional[int] = None,
    variant: Optional[Variant] = None,
    need_grad: bool = True,
) -> LossResult:
    """Total loss for one batch with fixed noise ``eps``; optional gradients."""
    spec = model.spec
    variant = Variant(variant or spec.variant)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    b = x.shape[0]
    if b < 1:
        raise ConfigurationError("empty batch")
    if b < 2 and variant in (Variant.BETA_TC, Variant.DIP_II):
        raise ConfigurationError(f"{variant.value} needs a batch of at least 2 rows")
    dataset_size = dataset_size or b

    h, enc_cache = forward(model.encoder_layers, x)
    mu, mu_cache = forward([model.mu_head], h)
    logvar, lv_cache = forward([model.logvar_head], h)
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    xhat, dec_cache = forward(model.decoder_layers, z)
    resid = xhat - x
    recon = float(np.sum(resid * resid) / b)
    recon_mse = float(np.mean(resid * resid))

    if variant is Variant.STANDARD:
        reg = kl_term(mu, logvar)
    elif variant is Variant.BETA:
        reg = kl_term(mu, logvar, spec.beta)
    elif variant is Variant.BETA_TC:
        reg = beta_tc_term(z, mu, logvar, spec.tc_weight, dataset_size)
    elif variant is Variant.FACTOR:
        kl = kl_term(mu, logvar)
        tc = factor_tc_term(model, z, spec.gamma)
        reg = RegTerm(kl.value + tc.value, kl.d_mu, kl.d_logvar, tc.d_z, {**kl.parts, **tc.parts})
    else:
        kl = kl_term(mu, logvar)
        dip = dip_ii_term(mu, logvar, spec.lambda_od, spec.lambda_d)
        reg = RegTerm(
            kl.value + dip.value, kl.d_mu + dip.d_mu, kl.d_logvar + dip.d_logvar,
            None, {**kl.parts, **dip.parts},
        )

    total = recon + reg.value
    terms = {"recon": recon, "regularizer": reg.value, **reg.parts}
    if not need_grad:
        return LossResult(total, recon_mse, terms, None, z)

    dec_grads, d_z = backward(model.decoder_layers, dec_cache, 2.0 * resid / b)
    if reg.d_z is not None:
        d_z = d_z + reg.d_z
    d_mu = reg.d_mu + d_z
    d_logvar = reg.d_logvar + d_z * 0.5 * std * eps
    mu_grads, d_h1 = backward([model.mu_head], mu_cache, d_mu)
    lv_grads, d_h2 = backward([model.logvar_head], lv_cache, d_logvar)
    enc_grads, _ = backward(model.encoder_layers, enc_cache, d_h1 + d_h2)
    grads = flatten_grads([*enc_grads, *mu_grads, *lv_grads, *dec_grads])
    return LossResult(total, recon_mse, terms, grads, z)


def compute_loss(
    model: TrainedModel,
    batch: np.ndarray,
    rng: SeededRng,
    variant: Optional[Variant] = None,
    dataset_size: Optional[int] = None,
) -> tuple[float, float, dict[str, float]]:
    """(total, recon_mse, regularizer terms) for one batch with fresh noise from ``rng``."""
    batch = np.atleast_2d(batch)
    eps = rng.normal((batch.shape[0], model.latent_dim))
    res = loss_and_grads(model, batch, eps, dataset_size, variant, need_grad=False)
    return res.total, res.recon_mse, res.terms


def permute_dims(z: np.ndarray, rng: SeededRng) -> np.ndarray:
    """Shuffle every latent column independently across the batch."""
    out = np.empty_like(z)
    for d in range(z.shape[1]):
        out[:, d] = z[rng.permutation(z.shape[0]), d]
    return out


def discriminator_loss_and_grads(model: TrainedModel, z: np.ndarray, z_perm: np.ndarray):
    """Cross-entropy of true (class 0) vs permuted (class 1) codes, averaged over both."""
    b = z.shape[0]
    both = np.vstack([z, z_perm])
    target = np.concatenate([np.zeros(b, dtype=int), np.ones(len(z_perm), dtype=int)])
    logits, cache = forward(model.discriminator, both)
    log_p = logits - logsumexp(logits, axis=1, keepdims=True)
    n = len(both)
    loss = float(-np.mean(log_p[np.arange(n), target]))
    out_grad = np.exp(log_p)
    out_grad[np.arange(n), target] -= 1.0
    grads, _ = backward(model.discriminator, cache, out_grad / n)
    return loss, flatten_grads(grads)
