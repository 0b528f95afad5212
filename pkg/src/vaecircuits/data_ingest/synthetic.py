"""Desk-scale benchmarks: planted-group tabular data and 16x16 miniSprites."""
from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..tensor_core import ConfigurationError, SeededRng
from .bundle import DatasetBundle
from .partition import Partition

log = logging.getLogger(__name__)

# (transform, raw scale) pairs cycled over continuous features when heterogeneous
_TRANSFORMS = (
    ("linear", lambda f: f, 1.0),
    ("tanh", lambda f: np.tanh(1.5 * f), 1e3),
    ("exp", lambda f: np.exp(0.6 * f), 0.01),
    ("quad", lambda f: f + 0.3 * f * f, 50.0),
    ("softplus", lambda f: np.log1p(np.exp(2.0 * f)), 0.2),
)
# category probabilities for one-hot columns; the rare tail gives low-variance indicators
_LEVEL_PROBS = (0.55, 0.27, 0.13, 0.05)


@dataclass(frozen=True)
class SynthTabularSpec:
    continuous_per_group: tuple[int, ...] = (3, 3, 3)
    categorical_per_group: tuple[int, ...] = (1, 1, 1)
    noise: float | tuple[float, ...] = 0.5  # a tuple is cycled over continuous features
    heterogeneous: bool = True
    label_factors: tuple[int, ...] = (0, 1)
    label_strength: float = 4.0
    protected_factor: int = 2
    group_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if len(self.categorical_per_group) != len(self.continuous_per_group):
            raise ConfigurationError("per-group feature counts must have equal length")
        g = self.n_groups
        if any(not 0 <= k < g for k in (*self.label_factors, self.protected_factor)):
            raise ConfigurationError("label/protected factors must index existing groups")
        for k in range(g):
            n_cat = self.categorical_per_group[k] if self.heterogeneous else 0
            if self.continuous_per_group[k] + n_cat == 0:
                raise ConfigurationError(f"group {k} has no features")

    @property
    def n_groups(self) -> int:
        return len(self.continuous_per_group)


def synth_tabular(n_rows: int, spec: SynthTabularSpec = SynthTabularSpec(), seed: int = 0, name: str = "synth_tabular") -> DatasetBundle:
    """One standard-normal factor per group; every feature in a group is a noisy function of it.

    With ``heterogeneous`` set, continuous features go through different
    monotone transforms and raw scales, and each group also gets skewed
    categorical columns (one-hot encoded). Otherwise all features are
    linear in their factor. Labels are Bernoulli with logit
    ``label_strength * mean(label factors) * sqrt(k)``; the protected
    attribute is a noisy threshold of ``protected_factor``.
    """
    rng = SeededRng(seed)
    G = spec.n_groups
    factors = rng.normal((n_rows, G))
    cols, names, groups, onehot, raw_cols = [], [], [], [], []
    gnames = spec.group_names or tuple(f"group{k}" for k in range(G))
    noise_levels = np.atleast_1d(np.asarray(spec.noise, dtype=np.float64))
    t_index = n_cont = 0
    for g in range(G):
        f = factors[:, g]
        for j in range(spec.continuous_per_group[g]):
            if spec.heterogeneous:
                tname, fn, scale = _TRANSFORMS[t_index % len(_TRANSFORMS)]
                t_index += 1
            else:
                tname, fn, scale = "linear", (lambda v: v), 1.0
            signal = fn(f)
            signal = (signal - signal.mean()) / signal.std()
            noise = noise_levels[n_cont % len(noise_levels)]
            n_cont += 1
            raw = scale * (signal + noise * rng.normal(n_rows))
            raw_cols.append(raw)
            cols.append(((raw - raw.mean()) / raw.std())[:, None])
            names.append(f"{gnames[g]}_{tname}{j}")
            groups.append(g)
            onehot.append(False)
        if not spec.heterogeneous:
            continue
        for j in range(spec.categorical_per_group[g]):
            latent = f + float(noise_levels.mean()) * rng.normal(n_rows)
            cuts = np.quantile(latent, np.cumsum(_LEVEL_PROBS)[:-1])
            level = np.searchsorted(cuts, latent)
            block = np.eye(len(_LEVEL_PROBS))[level]
            cols.append(block)
            raw_cols.append(level.astype(float))
            names.extend(f"{gnames[g]}_cat{j}={k}" for k in range(len(_LEVEL_PROBS)))
            groups.extend([g] * len(_LEVEL_PROBS))
            onehot.extend([True] * len(_LEVEL_PROBS))
    X = np.hstack(cols)
    keep = X.std(axis=0) > 0
    if not keep.all():
        log.warning("dropping %d constant synthetic columns", int((~keep).sum()))
    X = X[:, keep]
    names = [n for n, k in zip(names, keep) if k]
    groups = [g for g, k in zip(groups, keep) if k]
    onehot = np.asarray(onehot)[keep]

    lf = list(spec.label_factors)
    logit = spec.label_strength * factors[:, lf].sum(axis=1) / np.sqrt(len(lf))
    labels = (rng.uniform(size=n_rows) < 1.0 / (1.0 + np.exp(-logit))).astype(np.float64)
    protected = (factors[:, spec.protected_factor] + 0.5 * rng.normal(n_rows) > 0).astype(np.float64)
    sigma = np.where(onehot, 1.0, X.std(axis=0))
    return DatasetBundle(
        X=X,
        sigma_per_feature=sigma,
        partition=Partition.from_labels(groups, gnames),
        feature_names=tuple(names),
        labels=labels,
        protected=protected,
        factors=factors,
        factor_names=tuple(gnames),
        name=name,
        domain="tabular",
        provenance={"generator": "synth_tabular", "seed": seed, "n_rows": n_rows,
                    "spec": asdict(spec), "raw_variances": [float(np.var(c)) for c in raw_cols]},
    )


SHAPES = ("square", "ellipse", "heart")


@dataclass(frozen=True)
class MiniSpritesSpec:
    side: int = 16
    shapes: tuple[str, ...] = SHAPES
    scales: tuple[float, ...] = (0.55, 0.7, 0.85, 1.0)
    n_positions: int = 8
    max_half_extent: float = 4.5
    n_samples: Optional[int] = 2000  # None = every factor combination once
    position_margin: Optional[float] = None  # defaults to max_half_extent; smaller lets big sprites overhang the border

    def __post_init__(self):
        if any(s not in SHAPES for s in self.shapes):
            raise ConfigurationError(f"shapes must come from {SHAPES}")
        if self.side < 4 or self.n_positions < 1 or not self.scales:
            raise ConfigurationError("degenerate miniSprites spec")
        if 2 * self.margin > self.side or self.margin < 0:
            raise ConfigurationError("sprite centers would leave the image")

    @property
    def factor_names(self) -> tuple[str, ...]:
        return ("shape", "scale", "posX", "posY")

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return (len(self.shapes), len(self.scales), self.n_positions, self.n_positions)

    @property
    def margin(self) -> float:
        return self.max_half_extent if self.position_margin is None else self.position_margin

    def positions(self) -> np.ndarray:
        r = self.margin
        if self.n_positions == 1:
            return np.array([self.side / 2.0])
        return np.linspace(r, self.side - r, self.n_positions)


def render_sprite(spec: MiniSpritesSpec, shape: int, scale: int, pos_x: int, pos_y: int) -> np.ndarray:
    """Binary ``side x side`` image (row = y, column = x) for one factor combination."""
    pos = spec.positions()
    r = spec.max_half_extent * spec.scales[scale]
    centers = np.arange(spec.side) + 0.5
    u = (centers[None, :] - pos[pos_x]) / r
    v = (centers[:, None] - pos[pos_y]) / r
    kind = spec.shapes[shape]
    if kind == "square":
        mask = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    elif kind == "ellipse":
        mask = u * u + (v / 0.6) ** 2 <= 1.0
    else:
        lobes = ((u + 0.5) ** 2 + (v + 0.35) ** 2 <= 0.3) | ((u - 0.5) ** 2 + (v + 0.35) ** 2 <= 0.3)
        point = (v >= -0.35) & (v <= 1.0) & (np.abs(u) <= (1.0 - v) / 1.35 * 1.05)
        mask = lobes | point
    return mask.astype(np.float64)


def gen_minisprites(spec: MiniSpritesSpec = MiniSpritesSpec(), rng: Optional[SeededRng] = None, name: str = "minisprites") -> DatasetBundle:
    """Flattened binary sprites; factor levels kept as ground truth.

    Pixels that never switch on are dropped (they have zero spread); the
    remaining pixels are grouped by :func:`factor_pixel_grouping`.
    """
    rng = rng or SeededRng(0)
    cards = spec.cardinalities
    if spec.n_samples is None:
        levels = np.array(list(itertools.product(*(range(c) for c in cards))), dtype=int)
    else:
        levels = np.stack([rng.integers(0, c, spec.n_samples) for c in cards], axis=1)
    cache: dict[tuple, np.ndarray] = {}
    images = np.empty((len(levels), spec.side * spec.side))
    for i, lv in enumerate(map(tuple, levels)):
        if lv not in cache:
            cache[lv] = render_sprite(spec, *lv).reshape(-1)
        images[i] = cache[lv]
    std = images.std(axis=0)
    keep = np.flatnonzero(std > 0)
    if len(keep) < images.shape[1]:
        log.info("miniSprites: dropping %d never-varying pixels", images.shape[1] - len(keep))
    X = images[:, keep]
    pixel_names = tuple(f"px{p // spec.side}_{p % spec.side}" for p in keep)
    factors = levels.astype(np.float64)
    partition = factor_pixel_grouping(X, factors, spec.factor_names)
    return DatasetBundle(
        X=X,
        sigma_per_feature=std[keep],
        partition=partition,
        feature_names=pixel_names,
        factors=factors,
        factor_names=spec.factor_names,
        name=name,
        domain="image",
        provenance={"generator": "minisprites", "seed": rng.seed, "spec": asdict(spec),
                    "pixel_index": keep.tolist()},
    )


def factor_sensitivity(X: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """(K, n_pixels) variance across each factor's levels of the level-conditional pixel means."""
    X = np.asarray(X, dtype=np.float64)
    out = np.zeros((factors.shape[1], X.shape[1]))
    for k in range(factors.shape[1]):
        levels = np.unique(factors[:, k])
        means = np.stack([X[factors[:, k] == lv].mean(axis=0) for lv in levels])
        out[k] = means.var(axis=0)
    return out


def factor_pixel_grouping(X, factors, factor_names, tol: float = 1e-15) -> Partition:
    """Assign each pixel to the factor it is most sensitive to (ties to the lower index).

    Pixels with no sensitivity to any factor go to a trailing ``background`` group,
    which exists only when non-empty. Groups that receive no pixel are dropped.
    """
    if factors is None:
        raise ConfigurationError("factor_pixel_grouping needs ground-truth factors")
    sens = factor_sensitivity(X, np.asarray(factors))
    labels = np.argmax(sens, axis=0)
    names = list(factor_names)
    background = sens.max(axis=0) <= tol
    if background.any():
        labels = np.where(background, len(names), labels)
        names.append("background")
    used = [k for k in range(len(names)) if np.any(labels == k)]
    remap = {k: i for i, k in enumerate(used)}
    return Partition.from_labels([remap[k] for k in labels], [names[k] for k in used])
