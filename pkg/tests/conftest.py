import pytest

from imbtrader.data_io import SyntheticConfig, synthetic_ticks
from imbtrader.pipeline import attach_z, train_models


@pytest.fixture(scope="session")
def small_market():
    """A compact synthetic market with mild noise, shared across tests."""
    cfg = SyntheticConfig(seed=7, n_periods=96 * 8, price_noise_std=8.0, price_gap_std=5.0)
    ticks, truth = synthetic_ticks(cfg)
    return cfg, ticks, truth


@pytest.fixture(scope="session")
def trained(small_market):
    """Models fitted on the first 60% of the small market; test ticks carry z."""
    cfg, ticks, truth = small_market
    split = int(len(ticks) * 0.6)
    models = train_models(
        ticks[:split],
        grid=cfg.grid,
        n_q=12,
        kfold=3,
        logistic_max_iter=400,
        bank_max_iter=150,
    )
    test_ticks = attach_z(ticks[split:], models)
    return models, ticks[:split], test_ticks
