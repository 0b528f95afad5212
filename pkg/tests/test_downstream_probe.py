import numpy as np
import pytest

from vaecircuits.downstream_probe import (
    ProbeConfig,
    accuracy,
    auc,
    dp_gap,
    evaluate_probe,
    fit_logistic,
    robustness,
)
from vaecircuits.tensor_core import ConfigurationError, SeededRng


def gaussian_task(n, seed, D=3):
    rng = SeededRng(seed)
    Z = rng.normal((n, D))
    y = (Z[:, 0] - 0.5 * Z[:, 1] + 0.3 * rng.normal(n) > 0).astype(float)
    return Z, y


def test_separable_two_points():
    Z = np.array([[-1.0], [1.0]])
    y = np.array([0.0, 1.0])
    probe = fit_logistic(Z, y)
    assert accuracy(probe.predict(Z), y) == 1.0


def test_single_class_rejected():
    with pytest.raises(ConfigurationError):
        fit_logistic(np.ones((4, 2)), np.ones(4))
    with pytest.raises(ConfigurationError):
        auc([0.1, 0.2], [1, 1])


def test_permuted_labels_give_chance_auc():
    Z, y = gaussian_task(4000, 1)
    y = SeededRng(2).permutation(y)
    probe = fit_logistic(Z[:2000], y[:2000])
    assert 0.4 <= auc(probe.decision(Z[2000:]), y[2000:]) <= 0.6


def test_duplicated_feature_same_predictions():
    Z, y = gaussian_task(600, 3, D=2)
    Z2 = np.column_stack([Z, Z[:, 0]])
    # unpenalized: the split weight leaves the decision function unchanged
    cfg = ProbeConfig(l2=0.0, max_iter=50_000)
    assert np.array_equal(fit_logistic(Z, y, cfg).predict(Z), fit_logistic(Z2, y, cfg).predict(Z2))
    # with the default penalty a duplicate halves the effective L2 on that direction
    agree = fit_logistic(Z, y).predict(Z) == fit_logistic(Z2, y).predict(Z2)
    assert agree.mean() >= 0.99


def test_fit_converges_and_is_deterministic():
    Z, y = gaussian_task(500, 4)
    a, b = fit_logistic(Z, y), fit_logistic(Z, y)
    assert a.converged and np.array_equal(a.weights, b.weights)


def test_auc_examples():
    assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert auc([0.3, 0.3, 0.3, 0.3], [1, 0, 1, 0]) == 0.5
    assert auc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == pytest.approx(0.75)


def test_auc_monotone_invariance():
    rng = SeededRng(5)
    s, y = rng.normal(100), (rng.uniform(size=100) > 0.5).astype(float)
    assert auc(np.exp(3 * s) + 1, y) == pytest.approx(auc(s, y), abs=1e-15)


def test_robustness_zero_noise_equals_accuracy():
    Z, y = gaussian_task(300, 6)
    probe = fit_logistic(Z, y)
    assert robustness(probe, Z, y, noise_sd=0.0) == pytest.approx(accuracy(probe.predict(Z), y), abs=1e-12)


def test_robustness_huge_noise_tends_to_prior():
    Z, y = gaussian_task(2000, 7)
    probe = fit_logistic(Z, y)
    r = robustness(probe, Z, y, noise_sd=1e6, n_draws=20)
    prior = max(y.mean(), 1 - y.mean())
    assert abs(r - 0.5) < 0.05 and r <= prior + 0.05


def test_dp_gap_examples():
    assert dp_gap(np.ones(4), [0, 0, 1, 1]) == 0.0
    assert dp_gap([1, 1, 0, 0], [0, 0, 1, 1]) == 1.0
    pred = np.r_[np.ones(12), np.zeros(8), np.ones(7), np.zeros(13)]
    prot = np.r_[np.zeros(20), np.ones(20)]
    assert dp_gap(pred, prot) == pytest.approx(0.25)
    assert dp_gap([1, 0], [1, 1]) is None


def test_evaluate_probe_ranges_and_determinism():
    Z, y = gaussian_task(800, 8)
    prot = (SeededRng(9).uniform(size=800) > 0.5).astype(float)
    run = lambda: evaluate_probe(Z[:600], y[:600], Z[600:], y[600:], prot[600:], ProbeConfig(), SeededRng(1))
    a, b = run(), run()
    assert a.to_dict() == b.to_dict()
    for v in (a.accuracy, a.auc, a.robustness, a.dp_gap):
        assert 0.0 <= v <= 1.0
    assert a.auc > 0.9 and a.robustness <= a.accuracy + 0.02
