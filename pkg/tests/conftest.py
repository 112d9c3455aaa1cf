"""Shared fixtures: small random models and one desk-scale trained model per session."""

import time

import numpy as np
import pytest

from gmvae_defense.data import SyntheticSpec, gen_synthetic
from gmvae_defense.gmvae import init_model
from gmvae_defense.selector import calibrate
from gmvae_defense.training import TrainConfig, train

#: criterion number -> (verdict, title, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def small_model(seed=0, input_dim=6, k=3, d=None, enc=(5,), dec=(4,), **kw):
    """Tiny model with random (non-zero) biases so every code path carries signal."""
    model = init_model(input_dim, k, latent_dim=d, encoder_hidden=enc, decoder_hidden=dec, seed=seed, **kw)
    rng = np.random.default_rng(seed + 1000)
    params = {n: v + (0.1 * rng.standard_normal(v.shape) if n.endswith("bias") else 0.0) for n, v in model.named_parameters().items()}
    return model.with_parameters(params)


@pytest.fixture(scope="session")
def toy_data():
    train_ds = gen_synthetic(SyntheticSpec())
    test_ds = gen_synthetic(SyntheticSpec(samples_per_class=200, seed=1))
    return train_ds, test_ds


@pytest.fixture(scope="session")
def trained(toy_data):
    """Supervised model on the default synthetic set, calibrated thresholds and the training time."""
    train_ds, _ = toy_data
    start = time.perf_counter()
    model, stats = train(train_ds, TrainConfig())
    elapsed = time.perf_counter() - start
    return model, stats, calibrate(stats, model.latent_dim), elapsed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {title}: {detail}")
