import numpy as np
import pytest

from vaecircuits.data_ingest import DatasetBundle, Partition, synth_tabular, SynthTabularSpec
from vaecircuits.tensor_core import Activation, DenseLayer, SeededRng
from vaecircuits.vae_zoo import TrainConfig, TrainedModel, VaeArchitectureSpec, train


def linear_model(W_enc, W_dec, logvar_bias=0.0, seed=0):
    """Hand-built VAE: mu = W_enc x, x_hat = W_dec z, constant log-variance."""
    W_enc = np.atleast_2d(np.asarray(W_enc, dtype=float))
    W_dec = np.atleast_2d(np.asarray(W_dec, dtype=float))
    D, n = W_enc.shape
    spec = VaeArchitectureSpec("standard", (D,), D)
    enc = [DenseLayer(W_enc, np.zeros(D), Activation.IDENTITY)]
    mu_head = DenseLayer(np.eye(D), np.zeros(D), Activation.IDENTITY)
    lv_head = DenseLayer(np.zeros((D, D)), np.full(D, float(logvar_bias)), Activation.IDENTITY)
    dec = [DenseLayer(W_dec, np.zeros(W_dec.shape[0]), Activation.IDENTITY)]
    return TrainedModel(spec, n, enc, mu_head, lv_head, dec, seed=seed)


def bundle_from(X, groups, sigma=None, names=None):
    X = np.asarray(X, dtype=float)
    n = X.shape[1]
    names = names or tuple(f"g{k}" for k in range(len(groups)))
    return DatasetBundle(
        X=X,
        sigma_per_feature=np.ones(n) if sigma is None else np.asarray(sigma, dtype=float),
        partition=Partition(tuple(tuple(g) for g in groups), names),
        feature_names=tuple(f"f{i}" for i in range(n)),
    )


@pytest.fixture(scope="session")
def small_tabular():
    return synth_tabular(400, SynthTabularSpec(), seed=3)


@pytest.fixture(scope="session")
def small_model(small_tabular):
    spec = VaeArchitectureSpec("standard", (24, 12), 4)
    return train(spec, small_tabular.X, TrainConfig(max_epochs=15, batch_size=64, seed=7))


# -- acceptance reporting ------------------------------------------------------

_CRITERIA: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    n = marker.args[0]
    entry = _CRITERIA.setdefault(n, [True, []])
    if report.failed or report.skipped:
        entry[0] = False
    detail = dict(item.user_properties).get("detail")
    if report.when == "call" and detail and detail not in entry[1]:
        entry[1].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, details = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {'; '.join(details)}")
