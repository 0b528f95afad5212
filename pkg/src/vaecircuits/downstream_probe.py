"""Logistic probe on posterior means and the four downstream measures.

The probe is fit on the training split and every measure is computed on
the held-out split, so results are deterministic given the model seed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .tensor_core import ConfigurationError, SeededRng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeConfig:
    l2: float = 1e-3
    lr: float = 1.0
    tol: float = 1e-6
    max_iter: int = 5000
    noise_sd: float = 0.5
    n_draws: int = 10


@dataclass
class LogisticProbe:
    weights: np.ndarray
    bias: float
    mean: np.ndarray  # input standardization
    scale: np.ndarray
    n_iter: int
    converged: bool

    def decision(self, Z: np.ndarray) -> np.ndarray:
        return ((np.asarray(Z, dtype=np.float64) - self.mean) / self.scale) @ self.weights + self.bias

    def predict_proba(self, Z: np.ndarray) -> np.ndarray:
        return expit(self.decision(Z))

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return (self.decision(Z) > 0).astype(np.float64)


def _check_binary(labels: np.ndarray) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ConfigurationError("labels must be 0/1")
    if y.min() == y.max():
        raise ConfigurationError("both classes must be present")
    return y


def fit_logistic(Z: np.ndarray, labels: np.ndarray, config: ProbeConfig = ProbeConfig()) -> LogisticProbe:
    """L2-penalized logistic regression by full-batch gradient descent.

    Inputs are standardized first; the bias is not penalized. Stops when the
    gradient norm drops below ``config.tol`` or after ``config.max_iter`` steps.
    """
    y = _check_binary(labels)
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or len(Z) != len(y):
        raise ConfigurationError("Z must be (N, D) with one label per row")
    mean = Z.mean(axis=0)
    scale = np.where(Z.std(axis=0) > 0, Z.std(axis=0), 1.0)
    A = (Z - mean) / scale
    n, D = A.shape
    w, b = np.zeros(D), 0.0
    # the logistic loss Hessian is bounded by ||A||^2 / 4n, so this step is always stable
    lip = 0.25 * np.linalg.norm(A, 2) ** 2 / n + config.l2 + 0.25
    step = config.lr / lip
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        r = expit(A @ w + b) - y
        gw = A.T @ r / n + config.l2 * w
        gb = r.mean()
        if np.sqrt(gw @ gw + gb * gb) < config.tol:
            converged = True
            break
        w -= step * gw
        b -= step * gb
    if not converged:
        log.info("logistic probe stopped at the iteration cap (%d)", config.max_iter)
    return LogisticProbe(w, float(b), mean, scale, it, converged)


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    y = _check_binary(labels)
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    n_pos = y.sum()
    n_neg = len(y) - n_pos
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


def robustness(probe: LogisticProbe, Z: np.ndarray, labels: np.ndarray, noise_sd: float = 0.5,
               n_draws: int = 10, rng: Optional[SeededRng] = None) -> float:
    """Mean accuracy under Gaussian noise of ``noise_sd`` times each latent's std."""
    rng = rng or SeededRng(0)
    Z = np.asarray(Z, dtype=np.float64)
    sd = noise_sd * Z.std(axis=0)
    accs = [accuracy(probe.predict(Z + sd * rng.normal(Z.shape)), labels) for _ in range(n_draws)]
    return float(np.mean(accs))


def dp_gap(predictions: np.ndarray, protected: np.ndarray) -> Optional[float]:
    """|P(yhat=1 | A=0) - P(yhat=1 | A=1)|, or None when a group is absent."""
    p = np.asarray(predictions, dtype=np.float64)
    a = np.asarray(protected, dtype=np.float64)
    if not (np.any(a == 0) and np.any(a == 1)):
        log.warning("demographic parity gap undefined: a protected group is absent")
        return None
    return float(abs(p[a == 0].mean() - p[a == 1].mean()))


@dataclass
class ProbeResult:
    accuracy: float
    auc: float
    robustness: float
    dp_gap: Optional[float]
    weights: list[float] = field(default_factory=list)
    bias: float = 0.0
    noise_sd: float = 0.5

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "auc": self.auc, "robustness": self.robustness,
                "dp_gap": self.dp_gap, "weights": list(self.weights), "bias": self.bias,
                "noise_sd": self.noise_sd}


def evaluate_probe(Z_train, y_train, Z_test, y_test, protected_test=None,
                   config: ProbeConfig = ProbeConfig(), rng: Optional[SeededRng] = None) -> ProbeResult:
    """Fit on the training rows and report all four measures on the test rows."""
    probe = fit_logistic(Z_train, y_train, config)
    pred = probe.predict(Z_test)
    try:
        a = auc(probe.decision(Z_test), y_test)
    except ConfigurationError:
        log.warning("held-out split has a single class; AUC set to NaN")
        a = float("nan")
    gap = dp_gap(pred, protected_test) if protected_test is not None else None
    return ProbeResult(
        accuracy=accuracy(pred, y_test),
        auc=a,
        robustness=robustness(probe, Z_test, y_test, config.noise_sd, config.n_draws, rng),
        dp_gap=gap,
        weights=probe.weights.tolist(),
        bias=probe.bias,
        noise_sd=config.noise_sd,
    )
