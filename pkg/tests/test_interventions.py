import math

import numpy as np
import pytest

from conftest import bundle_from, linear_model
from vaecircuits.data_ingest import random_partition
from vaecircuits.interventions import (
    PosteriorStats,
    ces_calibrated,
    ces_fixed,
    ces_vector,
    effect_matrix,
    encoder_trace,
    evaluation_rows,
    level1_scan,
    linearity_r2,
    mediation_scan,
    patch_compound,
    patch_direct,
    patching_profile,
    perturb_group,
    posterior_stats,
    random_pairs,
    stats_from_posterior,
)
from vaecircuits.tensor_core import ConfigurationError, SeededRng

T51 = np.linspace(-3, 3, 51)


def stats_1d(mu_mean=0.0, sigma=1.0):
    return PosteriorStats(np.array([mu_mean]), np.array([sigma]), np.array([0.0]), np.array([sigma]))


def test_perturb_examples():
    x = np.array([1.0, 2.0, 3.0])
    sigma = np.array([1.0, 2.0, 5.0])
    assert np.array_equal(perturb_group(x, [0, 2], 0.0, sigma), x)
    assert np.array_equal(perturb_group(x, [1], 1.0, sigma), [1.0, 4.0, 3.0])
    out = perturb_group(x, [2], 0.5, sigma)
    assert out[0] == x[0] and out[1] == x[1]
    assert np.array_equal(x, [1.0, 2.0, 3.0])


def test_dead_pathway_gives_zero_row():
    W = np.array([[1.0, 0.0], [0.5, 0.0]])  # feature 1 never reaches the latents
    m = linear_model(W, np.eye(2))
    b = bundle_from(SeededRng(0).normal((20, 2)), [[0], [1]])
    imp = level1_scan(m, b, rows=np.arange(20))
    assert np.all(imp.R[1] == 0) and np.all(imp.delta[1] == 0)
    assert np.all(imp.R[0] > 0)


def test_linear_encoder_linearity_is_exact():
    m = linear_model(SeededRng(1).normal((3, 4)), np.eye(4)[:, :3])
    b = bundle_from(SeededRng(2).normal((30, 4)), [[0, 1], [2, 3]])
    imp = level1_scan(m, b, rows=np.arange(30))
    assert np.allclose(imp.linearity, 1.0, atol=1e-12)
    assert np.allclose(imp.delta[:, 1] / imp.delta[:, 0], 2.0)


def test_level1_matches_closed_form():
    W = np.array([[2.0, -1.0], [0.5, 3.0]])
    sigma = np.array([1.5, 0.4])
    m = linear_model(W, np.eye(2))
    b = bundle_from(SeededRng(3).normal((10, 2)), [[0], [1]], sigma=sigma)
    imp = level1_scan(m, b, scales=(0.5, 1.0, 2.0), rows=np.arange(10))
    mean_s = np.mean([0.5, 1.0, 2.0])
    expected = np.array([[abs(W[d, g]) * sigma[g] * mean_s for d in range(2)] for g in range(2)])
    assert np.allclose(imp.R, expected, atol=1e-12)


def test_linearity_r2_constant_and_line():
    assert linearity_r2([0.5, 1, 2], [3, 3, 3]) == 1.0
    assert linearity_r2([0.5, 1, 2], [1, 2, 4]) == pytest.approx(1.0)
    assert linearity_r2([0.5, 1, 2], [1, 3, 2]) < 0.9


def test_empty_evaluation_set():
    m = linear_model(np.eye(2), np.eye(2))
    b = bundle_from(np.ones((3, 2)), [[0], [1]])
    with pytest.raises(ConfigurationError):
        level1_scan(m, b, rows=np.array([], dtype=int))


def test_sigma_eff_examples():
    s = stats_from_posterior(np.zeros((4, 1)), np.zeros((4, 1)))
    assert s.sigma_eff[0] == 1.0
    s = stats_from_posterior(np.array([[-2.0], [2.0], [-2.0], [2.0]]), np.full((4, 1), math.log(0.01)))
    assert s.sigma_eff[0] == pytest.approx(2.0)
    s = stats_from_posterior(np.ones((3, 1)), np.full((3, 1), math.log(9)))
    assert s.sigma_eff[0] == pytest.approx(3.0)
    with pytest.raises(ConfigurationError):
        stats_from_posterior(np.zeros((1, 1)), np.zeros((1, 1)))


def test_posterior_stats_reads_logvar_head():
    m = linear_model(np.eye(2), np.eye(2), logvar_bias=math.log(4))
    b = bundle_from(np.zeros((5, 2)), [[0], [1]])
    s = posterior_stats(m, b, rows=np.arange(5))
    assert np.allclose(s.sigma_eff, 2.0)


def test_ces_identity_decoder_enumeration():
    m = linear_model([[1.0]], [[1.0]])
    b = bundle_from(np.zeros((1, 1)), [[0]])
    expected = np.mean(np.abs(T51))
    assert expected == pytest.approx(1.52941, abs=1e-5)
    assert ces_calibrated(m, b, stats_1d(), 0, rows=[0]) == pytest.approx(expected, abs=1e-12)
    assert ces_fixed(m, b, 0, rows=[0]) == pytest.approx(expected, abs=1e-12)


def test_ces_zero_jacobian():
    m = linear_model(np.eye(2), np.array([[1.0, 0.0], [2.0, 0.0]]))
    b = bundle_from(SeededRng(4).normal((8, 2)), [[0], [1]])
    assert ces_calibrated(m, b, None, 1, rows=np.arange(8)) == 0.0
    assert ces_fixed(m, b, 1, rows=np.arange(8)) == 0.0
    assert ces_fixed(m, b, 0, rows=np.arange(8)) > 0.0


def test_ces_doubles_with_sigma_eff():
    m = linear_model([[1.0]], [[0.7], [-1.3]])
    b = bundle_from(np.zeros((1, 1)), [[0]])
    one = ces_calibrated(m, b, stats_1d(sigma=1.0), 0, rows=[0])
    two = ces_calibrated(m, b, stats_1d(sigma=2.0), 0, rows=[0])
    assert two == pytest.approx(2 * one, rel=1e-12)


@pytest.mark.parametrize("sigma", [0.1, 0.5, 1.0, 2.0])
def test_calibrated_to_fixed_ratio_tracks_sigma_eff(sigma):
    # latent means cluster tightly around zero; the log-variance head sets sigma_eff
    m = linear_model([[1.0]], [[0.8], [-0.3], [1.5]], logvar_bias=2 * math.log(sigma))
    X = 0.002 * SeededRng(5).normal((64, 1))
    b = bundle_from(X, [[0]])
    rows = np.arange(64)
    ratio = ces_calibrated(m, b, None, 0, rows=rows) / ces_fixed(m, b, 0, rows=rows)
    assert ratio == pytest.approx(sigma, rel=0.05)


def test_ces_ignores_partition(small_model, small_tabular):
    rows = evaluation_rows(small_tabular.n_rows, small_model.seed)
    shuffled = small_tabular.with_partition(random_partition(small_tabular.partition, SeededRng(2)))
    a = effect_matrix(small_model, small_tabular, rows=rows)
    b = effect_matrix(small_model, shuffled, rows=rows)
    assert np.array_equal(a, b)
    assert np.array_equal(ces_vector(small_model, small_tabular, mode="fixed"),
                          ces_vector(small_model, shuffled, mode="fixed"))


def test_ces_non_negative_and_per_sample_center(small_model, small_tabular):
    glob = ces_vector(small_model, small_tabular)
    per = ces_vector(small_model, small_tabular, center="sample")
    assert np.all(glob >= 0) and np.all(per >= 0)
    with pytest.raises(ConfigurationError):
        ces_vector(small_model, small_tabular, center="nowhere")


def test_patch_same_input_is_zero(small_model, small_tabular):
    x = small_tabular.X[:5]
    for layer in range(small_model.n_encoder_layers):
        assert np.all(patch_compound(small_model, x, x, layer) == 0)


def test_patch_last_hidden_layer_closed_form(small_model, small_tabular):
    xs, xt = small_tabular.X[3], small_tabular.X[9]
    acts_s, _ = encoder_trace(small_model, xs)
    acts_t, _ = encoder_trace(small_model, xt)
    last = small_model.n_encoder_layers - 1
    expected = np.linalg.norm(small_model.mu_head.weight @ (acts_s[last] - acts_t[last]).ravel())
    assert patch_compound(small_model, xs, xt, last) == pytest.approx(expected, rel=1e-12, abs=1e-14)


def test_patch_direct_examples():
    assert np.array_equal(patch_direct([5.0, 3.0, 1.0]), [2.0, 2.0, 1.0])
    assert np.array_equal(patch_direct(np.zeros(3)), np.zeros(3))


def test_telescoping_on_trained_model(small_model, small_tabular):
    src, tgt = random_pairs(small_tabular.n_rows, 200, SeededRng(8))
    assert np.all(src != tgt)
    prof = patching_profile(small_model, small_tabular.X[src], small_tabular.X[tgt])
    assert prof.max_telescoping_error <= 1e-9
    assert prof.direct.sum() == pytest.approx(prof.compound[0], rel=1e-9)


def test_patch_layer_range_checked(small_model, small_tabular):
    with pytest.raises(ConfigurationError):
        patch_compound(small_model, small_tabular.X[0], small_tabular.X[1], small_model.n_encoder_layers)


def test_mediation_sequential_blocks_signal(small_model, small_tabular):
    grid = mediation_scan(small_model, small_tabular, rows=np.arange(64))
    assert np.allclose(grid.MR[:, 0], 1.0, atol=1e-9)
    assert np.all((grid.MR >= 0) & (grid.MR <= 1))
    assert grid.NIS == 0.0 and grid.raw_violations == 0


def test_mediation_zero_scale_skips_everything(small_model, small_tabular, caplog):
    grid = mediation_scan(small_model, small_tabular, scale=0.0, rows=np.arange(16))
    assert np.all(np.isnan(grid.MR))
    assert list(grid.undefined_groups) == list(small_tabular.partition.names)


def test_evaluation_rows_capped_and_seeded():
    rows = evaluation_rows(10_000, 42)
    assert len(rows) == 512 and np.array_equal(rows, evaluation_rows(10_000, 42))
    assert len(evaluation_rows(100, 42)) == 10
