"""Paired tests, multiplicity correction, effect sizes and correlations.

Everything here is self-contained: the Wilcoxon null is built by dynamic
programming over signed ranks, and Pearson p-values go through an in-repo
regularized incomplete beta function.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

EXACT_MAX_N = 25


# -- Wilcoxon signed-rank ----------------------------------------------------

@dataclass
class WilcoxonResult:
    p: float
    w_plus: float
    n: int  # pairs used after dropping zeros
    n_zero: int
    exact: bool
    undefined: bool = False


def _differences(a, b=None) -> np.ndarray:
    d = np.asarray(a, dtype=np.float64)
    if b is not None:
        d = d - np.asarray(b, dtype=np.float64)
    return d


def signed_rank_null(ranks: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Exact null distribution of W+ for the given (possibly tied) ranks.

    Ranks are doubled so midranks become integers; returns (support, probability).
    """
    r2 = np.rint(2 * np.asarray(ranks, dtype=np.float64)).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    support = np.arange(total + 1) / 2.0
    prob = counts / 2.0 ** len(r2)
    keep = counts > 0
    return support[keep], prob[keep]


def wilcoxon_signed_rank(a, b=None, exact_max_n: int = EXACT_MAX_N) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired values (or on differences if ``b`` is None).

    Zero differences are dropped. Up to ``exact_max_n`` pairs the null is
    exact; beyond that a tie-corrected normal approximation is used.
    """
    d = _differences(a, b)
    nz = d[d != 0]
    n_zero = len(d) - len(nz)
    n = len(nz)
    if n == 0:
        log.warning("all paired differences are zero; Wilcoxon test undefined, p reported as 1")
        return WilcoxonResult(1.0, 0.0, 0, n_zero, True, undefined=True)
    ranks = rankdata(np.abs(nz))
    w_plus = float(ranks[nz > 0].sum())
    if n <= exact_max_n:
        support, prob = signed_rank_null(ranks)
        eps = 1e-9
        lower = prob[support <= w_plus + eps].sum()
        upper = prob[support >= w_plus - eps].sum()
        p = min(1.0, 2.0 * min(lower, upper))
        return WilcoxonResult(float(p), w_plus, n, n_zero, True)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return WilcoxonResult(float(min(1.0, p)), w_plus, n, n_zero, False)


def wilcoxon_bruteforce(diffs) -> float:
    """Two-sided p by explicit enumeration of all 2^n sign assignments (testing oracle)."""
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 1.0
    ranks = rankdata(np.abs(d))
    w_obs = ranks[d > 0].sum()
    signs = (np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1
    w = signs @ ranks
    eps = 1e-9
    lower = np.mean(w <= w_obs + eps)
    upper = np.mean(w >= w_obs - eps)
    return float(min(1.0, 2.0 * min(lower, upper)))


# -- multiplicity ------------------------------------------------------------

def holm_sidak(p_values, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Step-down Holm-Sidak adjusted p-values and rejection flags, in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    if m == 0:
        return p.copy(), np.zeros(0, dtype=bool)
    order = np.argsort(p, kind="stable")
    k = m - np.arange(m)
    # the last factor has exponent 1; keep it exact rather than 1 - (1 - p)
    ps = p[order]
    with np.errstate(divide="ignore"):
        adj_sorted = np.where(k == 1, ps, -np.expm1(k * np.log1p(-ps)))
    adj_sorted = np.minimum(np.maximum.accumulate(adj_sorted), 1.0)
    reject_sorted = np.zeros(m, dtype=bool)
    for i in range(m):
        if adj_sorted[i] > alpha:
            break
        reject_sorted[i] = True
    adj = np.empty(m)
    reject = np.empty(m, dtype=bool)
    adj[order] = adj_sorted
    reject[order] = reject_sorted
    return adj, reject


def sidak(p_values) -> np.ndarray:
    p = np.asarray(p_values, dtype=np.float64)
    return 1.0 - (1.0 - p) ** len(p)


# -- effect size ---------------------------------------------------------------

@dataclass
class EffectSize:
    d: float
    degenerate: bool


def cohens_d_paired(a, b=None) -> EffectSize:
    """mean(diff) / sample sd(diff). Zero spread gives +-inf (0 if the mean is 0) and a flag."""
    diff = _differences(a, b)
    if len(diff) < 2:
        raise ValueError("paired Cohen's d needs at least two pairs")
    sd = float(np.std(diff, ddof=1))
    mean = float(diff.mean())
    if sd == 0.0:
        return EffectSize(math.copysign(math.inf, mean) if mean != 0 else 0.0, True)
    return EffectSize(mean / sd, False)


# -- Pearson -------------------------------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    log.warning("incomplete beta continued fraction did not converge")
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class CorrelationResult:
    r: float
    p: float
    n: int
    undefined: bool = False
    label: str = ""


def pearson(x, y, label: str = "") -> CorrelationResult:
    """Product-moment r with a two-sided t-test p-value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n != len(y):
        raise ValueError("x and y must have equal length")
    if n < 3:
        raise ValueError("pearson needs at least 3 points")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        log.warning("pearson undefined for a zero-variance input")
        return CorrelationResult(float("nan"), float("nan"), n, True, label)
    r = float(np.clip((xc @ yc) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return CorrelationResult(r, 0.0, n, False, label)
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return CorrelationResult(r, float(min(1.0, t_two_sided_p(t, n - 2))), n, False, label)


# -- paired comparisons --------------------------------------------------------

@dataclass
class PairedComparison:
    label: str
    metric: str
    a: list[float]
    b: list[float]
    p_raw: float
    cohens_d: float
    d_degenerate: bool
    n_zero: int = 0
    test_undefined: bool = False
    p_adj: float = float("nan")
    significant: bool = False
    family: str = "global"

    @property
    def n(self) -> int:
        return len(self.a)


def compare_paired(label: str, metric: str, a, b) -> PairedComparison:
    w = wilcoxon_signed_rank(a, b)
    if len(a) >= 2:
        es = cohens_d_paired(a, b)
    else:
        es = EffectSize(float("nan"), True)
    return PairedComparison(label, metric, [float(v) for v in a], [float(v) for v in b],
                            w.p, es.d, es.degenerate, w.n_zero, w.undefined)


def correct_family(comparisons: list[PairedComparison], scope: str = "global", alpha: float = 0.05) -> None:
    """Fill ``p_adj``/``significant`` in place, over all tests or within each metric."""
    if scope not in ("global", "per_metric"):
        raise ValueError(f"unknown correction scope {scope!r}")
    families: dict[str, list[PairedComparison]] = {}
    for c in comparisons:
        key = "global" if scope == "global" else c.metric
        families.setdefault(key, []).append(c)
    for key, fam in families.items():
        adj, rej = holm_sidak([c.p_raw for c in fam], alpha)
        for c, p, r in zip(fam, adj, rej):
            c.p_adj, c.significant, c.family = float(p), bool(r), key
