import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from vaecircuits.stats_engine import (
    betainc_regularized,
    cohens_d_paired,
    compare_paired,
    correct_family,
    holm_sidak,
    pearson,
    sidak,
    signed_rank_null,
    wilcoxon_bruteforce,
    wilcoxon_signed_rank,
)


def test_wilcoxon_all_positive_five():
    res = wilcoxon_signed_rank([1.0, 2.0, 3.0, 4.0, 5.0])
    assert res.exact and res.p == pytest.approx(2 / 32, abs=1e-15)


def test_wilcoxon_antisymmetric_pairs():
    assert wilcoxon_signed_rank([-1.0, 1.0]).p == 1.0


def test_wilcoxon_n15_matches_enumeration():
    d = np.random.default_rng(0).normal(0.3, 1.0, 15)
    assert wilcoxon_signed_rank(d).p == pytest.approx(wilcoxon_bruteforce(d), abs=1e-12)


def test_wilcoxon_matches_bruteforce_on_random_sets():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 13))
        # rounding creates ties and zero differences now and then
        d = np.round(rng.normal(0.2, 1.0, n), 1)
        assert wilcoxon_signed_rank(d).p == pytest.approx(wilcoxon_bruteforce(d), abs=1e-12)


def test_wilcoxon_zeros_dropped_and_counted():
    res = wilcoxon_signed_rank([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    assert res.n == 2 and res.n_zero == 1


def test_wilcoxon_all_zero_flagged():
    res = wilcoxon_signed_rank([1.0, 2.0], [1.0, 2.0])
    assert res.undefined and res.p == 1.0


def test_wilcoxon_normal_approximation_large_n():
    d = np.random.default_rng(3).normal(0.0, 1.0, 40)
    approx = wilcoxon_signed_rank(d)
    exact = wilcoxon_signed_rank(d, exact_max_n=100)
    assert not approx.exact and exact.exact
    assert approx.p == pytest.approx(exact.p, abs=0.02)


def test_signed_rank_null_sums_to_one():
    support, prob = signed_rank_null([1, 2, 3, 4])
    assert prob.sum() == pytest.approx(1.0) and support.max() == 10


def test_holm_sidak_examples():
    adj, rej = holm_sidak([0.03])
    assert adj[0] == 0.03 and rej[0]
    adj, rej = holm_sidak([0.01, 0.04])
    assert adj == pytest.approx([0.0199, 0.04], abs=1e-12)
    assert rej.all()
    adj, rej = holm_sidak([1.0, 1.0, 1.0])
    assert np.all(adj == 1.0) and not rej.any()


def test_holm_sidak_input_order_kept():
    adj, _ = holm_sidak([0.04, 0.01])
    assert adj == pytest.approx([0.04, 0.0199], abs=1e-12)


def test_holm_sidak_rejects_bad_p():
    with pytest.raises(ValueError):
        holm_sidak([1.2])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30))
def test_holm_sidak_properties(p):
    adj, rej = holm_sidak(p)
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(adj[order]) >= 0)
    assert np.all(adj >= np.asarray(p) - 1e-15) and np.all(adj <= 1.0)
    single = sidak(p) <= 0.05
    assert np.all(rej[single])


def test_cohens_d_examples():
    assert cohens_d_paired([1.0, 1.0, 1.0]).degenerate
    assert cohens_d_paired([1.0, 1.0, 1.0]).d == math.inf
    assert cohens_d_paired([1.0, 3.0]).d == pytest.approx(math.sqrt(2), abs=1e-12)
    assert cohens_d_paired([-1.0, -3.0]).d == pytest.approx(-math.sqrt(2), abs=1e-12)


def test_cohens_d_shift_invariant():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=10), rng.normal(size=10)
    assert cohens_d_paired(a + 7, b + 7).d == pytest.approx(cohens_d_paired(a, b).d, abs=1e-12)


def test_cohens_d_needs_two_pairs():
    with pytest.raises(ValueError):
        cohens_d_paired([1.0])


def test_pearson_examples():
    x = np.arange(1.0, 6.0)
    assert pearson(x, x).r == 1.0 and pearson(x, x).p == 0.0
    assert pearson(x, -2 * x + 3).r == pytest.approx(-1.0)
    res = pearson([1, 2, 3, 4, 5], [2, 1, 4, 3, 5])
    assert res.r == pytest.approx(0.8, abs=1e-12)
    t = 0.8 * math.sqrt(3 / (1 - 0.64))
    dens = lambda u: math.gamma(2) / (math.sqrt(3 * math.pi) * math.gamma(1.5)) * (1 + u * u / 3) ** -2
    tail, _ = integrate.quad(dens, t, math.inf, epsabs=1e-14)
    assert res.p == pytest.approx(2 * tail, abs=1e-10)
    assert res.p == pytest.approx(0.1041, abs=1e-4)


def test_pearson_zero_variance_flagged():
    res = pearson([1, 1, 1], [1, 2, 3])
    assert res.undefined and math.isnan(res.r)


def test_pearson_affine_invariance():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=12), rng.normal(size=12)
    base = pearson(x, y).r
    assert pearson(3 * x + 1, y).r == pytest.approx(base, abs=1e-12)
    assert pearson(x, -0.5 * y).r == pytest.approx(-base, abs=1e-12)


@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2.0, 3.0, 0.7), (7.5, 0.5, 0.95), (1.0, 1.0, 0.25)])
def test_incomplete_beta_against_quadrature(a, b, x):
    integrand = lambda t: t ** (a - 1) * (1 - t) ** (b - 1)
    num, _ = integrate.quad(integrand, 0, x, epsabs=1e-14, epsrel=1e-13, limit=200)
    den = math.exp(math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))
    assert betainc_regularized(a, b, x) == pytest.approx(num / den, abs=1e-10)


def test_identical_architectures_p_one():
    c = compare_paired("A vs B", "FGD", [0.2, 0.3, 0.4], [0.2, 0.3, 0.4])
    assert c.p_raw == 1.0 and c.test_undefined and c.d_degenerate


def test_correct_family_scopes():
    comps = [compare_paired("x", m, [1, 2, 3, 4, 5, 6], [0, 0, 0, 0, 0, 0]) for m in ("FGD", "FGD", "MIG")]
    correct_family(comps, "global")
    assert all(c.family == "global" for c in comps)
    glob = comps[0].p_adj
    correct_family(comps, "per_metric")
    assert comps[2].p_adj == pytest.approx(comps[2].p_raw)
    assert comps[0].p_adj <= glob
    with pytest.raises(ValueError):
        correct_family(comps, "weird")
