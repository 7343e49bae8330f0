"""
Shared fixtures for the test suite.
"""

import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add backend and cli to path
BACKEND_DIR = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(BACKEND_DIR))
sys.path.insert(0, str(BACKEND_DIR.parent / "cli"))

from app.data.market_data import AssetSeries, generate_synthetic  # noqa: E402
from app.pipeline.features import FeaturePanel  # noqa: E402
from app.schemas import (  # noqa: E402
    BacktestSettings,
    DataSection,
    FeatureSpec,
    HyperGrid,
    ModelConfig,
    RunConfig,
    StrategySection,
    SyntheticSpec,
)


def _series_from_arrays(asset_id, closes, opens=None, highs=None, lows=None, start="2000-01-03"):
    closes = np.asarray(closes, dtype=float)
    opens = closes.copy() if opens is None else np.asarray(opens, dtype=float)
    highs = np.maximum(opens, closes) if highs is None else np.asarray(highs, dtype=float)
    lows = np.minimum(opens, closes) if lows is None else np.asarray(lows, dtype=float)
    dates = pd.bdate_range(start=start, periods=len(closes), name="date")
    frame = pd.DataFrame(
        {"open": opens, "high": highs, "low": lows, "close": closes, "settle": closes}, index=dates
    )
    frame["filled"] = False
    return AssetSeries(asset_id, frame)


@pytest.fixture
def make_series():
    """Factory: AssetSeries from close (and optional open/high/low) arrays on business days."""
    return _series_from_arrays


@pytest.fixture
def gbm_closes():
    """Factory: geometric random walk closes."""
    def _make(n, sigma=0.2, drift=0.0, seed=0, start=100.0):
        rng = np.random.default_rng(seed)
        r = drift / 252 + sigma / np.sqrt(252) * rng.standard_normal(n - 1)
        return start * np.exp(np.concatenate([[0.0], np.cumsum(r)]))
    return _make


@pytest.fixture
def synthetic_universe():
    """Factory around generate_synthetic with trend regimes."""
    def _make(n_assets=3, n_days=600, seed=7, **overrides):
        spec = {
            "n_assets": n_assets,
            "n_days": n_days,
            "drift": 0.15,
            "volatility": 0.15,
            "regime_persistence": 0.995,
            "overnight_fraction": 0.2,
            **overrides,
        }
        return generate_synthetic(spec, seed=seed)
    return _make


@pytest.fixture
def toy_panel():
    """Factory: fully valid random FeaturePanel [assets, dates, features]."""
    def _make(n_assets=2, n_dates=30, n_features=3, seed=0):
        rng = np.random.default_rng(seed)
        dates = pd.bdate_range("2001-01-01", periods=n_dates, name="date")
        return FeaturePanel(
            asset_ids=[f"A{i}" for i in range(n_assets)],
            dates=dates,
            feature_names=[f"x{i}" for i in range(n_features)],
            features=rng.standard_normal((n_assets, n_dates, n_features)),
            targets=np.abs(rng.standard_normal((n_assets, n_dates, 5))) * 0.2,
            returns=0.01 * rng.standard_normal((n_assets, n_dates)),
            valid_mask=np.ones((n_assets, n_dates), dtype=bool),
        )
    return _make


SMALL_FEATURES = FeatureSpec(
    return_horizons=[1, 5, 10], rv_horizons=[5, 10], volvol_window=5, zscore_window=5, target_horizon=5
)


def tiny_model(**overrides) -> ModelConfig:
    fields = dict(
        n_lstm_layers=1, lstm_hidden=8, lstm_dropout=0.1, n_mlp_layers=1, mlp_hidden=8, mlp_dropout=0.1,
        learning_rate=0.001, max_grad_norm=1.0, lookback_len=5,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


def tiny_grid() -> HyperGrid:
    return HyperGrid(
        n_lstm_layers=[1], lstm_hidden=[8], lstm_dropout=[0.1], n_mlp_layers=[1], mlp_hidden=[8],
        mlp_dropout=[0.1], learning_rate=[0.001], max_grad_norm=[1.0],
    )


@pytest.fixture
def tiny_run_config():
    """Factory: a run that trains in seconds (3 synthetic years, test year 2002)."""
    def _make(tags=("MTL-TSMOM",), last_test_year=2002, n_days=756, **backtest):
        settings = dict(
            train_start=2000, first_test_year=2002, last_test_year=last_test_year, grid_budget="exhaustive",
            max_epochs=3, patience=2, batch_len=63, master_seed=5,
        )
        settings.update(backtest)
        return RunConfig(
            data=DataSection(
                synthetic=SyntheticSpec(
                    n_assets=3, n_days=n_days, drift=0.15, volatility=0.15, regime_persistence=0.995
                ),
                seed=11,
            ),
            strategy=StrategySection(
                tags=list(tags), features=SMALL_FEATURES, model=tiny_model(), grid=tiny_grid()
            ),
            backtest=BacktestSettings(**settings),
        )
    return _make
