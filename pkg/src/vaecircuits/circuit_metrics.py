"""Scores derived from the intervention outputs.

Entropies are in nats and normalized by ``ln G`` (or ``ln n`` for
specificity), so every score lives in [0, 1].
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import entropy as scipy_entropy

from .data_ingest import DatasetBundle, Partition, random_partition
from .interventions import PosteriorStats, effect_matrix, level1_scan
from .tensor_core import ConfigurationError, SeededRng
from .vae_zoo import TrainedModel

log = logging.getLogger(__name__)


def _as_matrix(R) -> np.ndarray:
    R = np.asarray(getattr(R, "R", R), dtype=np.float64)
    if R.ndim != 2:
        raise ConfigurationError("importance matrix must be 2-D (groups x latents)")
    if np.any(R < 0):
        raise ConfigurationError("importance matrix must be non-negative")
    return R


def column_completeness(R) -> np.ndarray:
    """1 - H(column)/ln G per latent column; all-zero columns score 0."""
    R = _as_matrix(R)
    G = R.shape[0]
    if G < 2:
        # one group: every responsive column is trivially concentrated
        return (R.sum(axis=0) > 0).astype(np.float64)
    mass = R.sum(axis=0)
    out = np.zeros(R.shape[1])
    for d in np.flatnonzero(mass > 0):
        p = R[:, d] / mass[d]
        p = p[p > 0]
        out[d] = 1.0 - float(-np.sum(p * np.log(p))) / math.log(G)
    return out


def modularity(R) -> float:
    """1 - mean over latent columns of normalized group entropy."""
    R = _as_matrix(R)
    if not np.any(R > 0):
        log.warning("modularity of an all-zero importance matrix is 0")
        return 0.0
    return float(np.clip(column_completeness(R).mean(), 0.0, 1.0))


def fgd(R) -> float:
    """Responsiveness-weighted mean of column completeness."""
    R = _as_matrix(R)
    w = R.sum(axis=0)
    if w.sum() <= 0:
        log.warning("FGD of an all-zero importance matrix is 0")
        return 0.0
    return float(np.clip(np.sum(w / w.sum() * column_completeness(R)), 0.0, 1.0))


def dci_completeness(R, partition: Optional[Partition] = None) -> float:
    """Completeness of a DCI importance matrix whose code axis is the group axis of ``R``.

    Follows the usual reference recipe: per-factor entropy over codes with
    base equal to the number of codes, weighted by each factor's share of
    the total importance. Groups must be singletons for this to be DCI.
    """
    if partition is not None and any(len(g) != 1 for g in partition.groups):
        raise ConfigurationError("DCI completeness is only defined for singleton feature groups")
    R = _as_matrix(R)
    n_codes = R.shape[0]
    mass = R.sum(axis=0)
    per_factor = np.zeros(R.shape[1])
    for j in range(R.shape[1]):
        if mass[j] > 0:
            per_factor[j] = 1.0 - (scipy_entropy(R[:, j], base=n_codes) if n_codes > 1 else 0.0)
    if R.sum() == 0:
        return 0.0
    return float(np.sum(per_factor * mass / R.sum()))


def specificity_from_effects(C: np.ndarray) -> float:
    """CES-weighted mean over latents of 1 - H(effect row)/ln n."""
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[1]
    weights = C.mean(axis=1)
    if weights.sum() <= 0 or n < 2:
        return 0.0
    per_dim = np.zeros(C.shape[0])
    for d in np.flatnonzero(weights > 0):
        p = C[d] / C[d].sum()
        p = p[p > 0]
        per_dim[d] = 1.0 - float(-np.sum(p * np.log(p))) / math.log(n)
    return float(np.clip(np.sum(weights / weights.sum() * per_dim), 0.0, 1.0))


def specificity(model: TrainedModel, bundle: DatasetBundle, stats: Optional[PosteriorStats] = None, rows=None) -> float:
    """How concentrated each latent's decoder effect is across output features."""
    return specificity_from_effects(effect_matrix(model, bundle, stats, "calibrated", rows=rows))


# -- MIG ---------------------------------------------------------------------

def discretize(v: np.ndarray, n_bins: int = 20) -> np.ndarray:
    """Equal-frequency bins from empirical quantiles; tied values share a bin."""
    v = np.asarray(v, dtype=np.float64)
    edges = np.quantile(v, np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.searchsorted(edges, v, side="right")


def _entropy_discrete(a: np.ndarray) -> float:
    _, counts = np.unique(a, return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def _mutual_info(a: np.ndarray, b: np.ndarray) -> float:
    ab = a.astype(np.int64) * (int(b.max()) + 1) + b
    return _entropy_discrete(a) + _entropy_discrete(b) - _entropy_discrete(ab)


def mig(latent_means: np.ndarray, factors: np.ndarray, n_bins: int = 20) -> float:
    """Mean over factors of (top-1 minus top-2 latent MI) / H(factor), plug-in estimates."""
    Z = np.asarray(latent_means, dtype=np.float64)
    F = np.asarray(factors, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    if Z.shape[1] < 2:
        raise ConfigurationError("MIG needs at least two latent dimensions")
    zb = [discretize(Z[:, d], n_bins) for d in range(Z.shape[1])]
    gaps = []
    for k in range(F.shape[1]):
        fb = discretize(F[:, k], n_bins)
        h = _entropy_discrete(fb)
        if h <= 0:
            log.warning("skipping constant factor %d in MIG", k)
            continue
        mi = np.sort([_mutual_info(z, fb) for z in zb])[::-1]
        gaps.append((mi[0] - mi[1]) / h)
    if not gaps:
        raise ConfigurationError("no factor with at least two distinct values")
    return float(max(0.0, np.mean(gaps)))


def group_proxies(bundle: DatasetBundle) -> np.ndarray:
    """Per-group mean of standardized features; the factor stand-in for real tabular data."""
    X = bundle.X
    Xs = (X - X.mean(axis=0)) / np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0)
    return np.column_stack([Xs[:, list(g)].mean(axis=1) for g in bundle.partition.groups])


def factor_targets(bundle: DatasetBundle) -> np.ndarray:
    return bundle.factors if bundle.factors is not None else group_proxies(bundle)


# -- aggregation -------------------------------------------------------------

@dataclass
class MetricSet:
    ces_mean: float
    ces_per_dim: list[float]
    specificity: float
    modularity: float
    fgd: float
    mig: float
    dci_completeness: Optional[float] = None

    def __post_init__(self):
        for name in ("modularity", "fgd", "specificity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class AblationResult:
    semantic_modularity: float
    semantic_fgd: float
    random_modularity: list[float]
    random_fgd: list[float]
    ces_invariant: bool = True
    specificity_invariant: bool = True

    @property
    def random_modularity_mean(self) -> float:
        return float(np.mean(self.random_modularity))

    @property
    def random_fgd_mean(self) -> float:
        return float(np.mean(self.random_fgd))

    @property
    def modularity_gap(self) -> float:
        return self.semantic_modularity - self.random_modularity_mean

    @property
    def fgd_gap(self) -> float:
        return self.semantic_fgd - self.random_fgd_mean


def grouping_ablation(
    model: TrainedModel,
    bundle: DatasetBundle,
    n_perm: int = 10,
    rng: Optional[SeededRng] = None,
    rows=None,
    check_invariance: bool = True,
    scales=(0.5, 1.0, 2.0),
) -> AblationResult:
    """Modularity and FGD under the semantic partition vs size-preserving random ones.

    The Level-1 scan is recomputed for every permuted partition. When
    ``check_invariance`` is set, CES and specificity are recomputed on the
    permuted bundles as well and compared bit for bit with the semantic ones.
    """
    if bundle.group_count < 2:
        log.warning("grouping ablation with a single group is trivial")
    rng = rng or SeededRng(model.seed).spawn("grouping-ablation")
    sem = level1_scan(model, bundle, scales, rows)
    res = AblationResult(modularity(sem.R), fgd(sem.R), [], [])
    if check_invariance:
        C0 = effect_matrix(model, bundle, rows=rows)
    for _ in range(n_perm):
        permuted = bundle.with_partition(random_partition(bundle.partition, rng))
        imp = level1_scan(model, permuted, scales, rows)
        res.random_modularity.append(modularity(imp.R))
        res.random_fgd.append(fgd(imp.R))
        if check_invariance:
            C = effect_matrix(model, permuted, rows=rows)
            res.ces_invariant &= bool(np.array_equal(C.mean(axis=1), C0.mean(axis=1)))
            res.specificity_invariant &= specificity_from_effects(C) == specificity_from_effects(C0)
    return res
