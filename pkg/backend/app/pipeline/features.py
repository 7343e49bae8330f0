"""
Model input features.

Per asset and date: log returns and realized volatility over several
horizons plus the realized volatility of each realized-volatility series,
all standardized with a trailing z-score. The panel also carries the
forward-volatility targets of the auxiliary tasks (not standardized) and
the daily settle log returns used for portfolio accounting.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd

from ..core.errors import WindowTooLarge
from ..data.market_data import TRADING_DAYS, AssetSeries, Universe
from ..schemas import TARGET_KINDS, FeatureSpec
from .vol_estimators import forward_target

logger = logging.getLogger(__name__)

RV_FLOOR = 1e-8
ZSCORE_EPS = 1e-12


def feature_names(spec: FeatureSpec) -> List[str]:
    """Fixed feature order: returns, realized vols, vol-of-vols (by horizon)."""
    return (
        [f"ret_{d}" for d in spec.return_horizons]
        + [f"rv_{n}" for n in spec.rv_horizons]
        + [f"volvol_{n}" for n in spec.rv_horizons]
    )


TARGET_COLUMNS = [f"tgt_{k.value}" for k in TARGET_KINDS]


def _check_window(length: int, needed: int, what: str) -> None:
    if length < needed:
        raise WindowTooLarge(f"{what} needs {needed} observations, got {length}")


def log_return(series: AssetSeries, d: int) -> pd.Series:
    """ln(P_t / P_{t-d}) on settle prices."""
    if d < 1:
        raise WindowTooLarge("log_return needs d >= 1")
    _check_window(len(series), d + 1, f"log_return(d={d})")
    settle = series.settle
    return np.log(settle / settle.shift(d))


def _realized_vol(prices: pd.Series, N: int) -> pd.Series:
    """sqrt((252 / N) * sum of the last N squared daily log returns)."""
    r = np.log(prices / prices.shift(1))
    return np.sqrt(TRADING_DAYS * (r ** 2).rolling(N).mean())


def realized_vol_feature(series: AssetSeries, N: int) -> pd.Series:
    """Realized volatility from raw (non-demeaned) squared settle log returns."""
    if N < 1:
        raise WindowTooLarge("realized_vol_feature needs N >= 1")
    _check_window(len(series), N + 1, f"realized_vol_feature(N={N})")
    return _realized_vol(series.settle, N)


def vol_of_vol(rv_series: pd.Series, window: int = 21) -> pd.Series:
    """
    Realized volatility of a realized-volatility series.

    The RV series stands in for prices: its daily log-changes feed the
    realized-vol formula. RV is floored at 1e-8 before taking logs.
    """
    if window < 1:
        raise WindowTooLarge("vol_of_vol needs window >= 1")
    _check_window(len(rv_series), window + 1, f"vol_of_vol(window={window})")
    return _realized_vol(rv_series.clip(lower=RV_FLOOR), window)


def sliding_zscore(x: pd.Series, window: int = 21) -> pd.Series:
    """Trailing z-score (window includes t, sample std); 0 where std < 1e-12."""
    if window < 2:
        raise WindowTooLarge("sliding_zscore needs window >= 2")
    _check_window(len(x), window, f"sliding_zscore(window={window})")
    rolling = x.rolling(window)
    mean = rolling.mean()
    std = rolling.std(ddof=1)
    z = (x - mean) / std
    return z.mask(std < ZSCORE_EPS, 0.0)


@dataclass(frozen=True)
class FeaturePanel:
    """
    Arrays are indexed [asset, date] in the order of `asset_ids` and `dates`.

    features: (A, T, F) z-scored features, NaN where undefined
    targets:  (A, T, 5) forward vols in TARGET_KINDS order, NaN where absent
    returns:  (A, T) settle log return from t-1 to t, NaN before an asset's second bar
    valid_mask: (A, T) feature vector fully defined
    """
    asset_ids: List[str]
    dates: pd.DatetimeIndex
    feature_names: List[str]
    features: np.ndarray
    targets: np.ndarray
    returns: np.ndarray
    valid_mask: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def to_frame(self) -> pd.DataFrame:
        """Long layout: asset_id, date, f1..fF, tgt_*, valid."""
        frames = []
        for a, aid in enumerate(self.asset_ids):
            frame = pd.DataFrame(self.features[a], columns=[f"f{i + 1}" for i in range(self.n_features)])
            for k, column in enumerate(TARGET_COLUMNS):
                frame[column] = self.targets[a, :, k]
            frame.insert(0, "date", self.dates.strftime("%Y-%m-%d"))
            frame.insert(0, "asset_id", aid)
            frame["valid"] = self.valid_mask[a]
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
        return path


def _asset_features(series: AssetSeries, spec: FeatureSpec) -> pd.DataFrame:
    columns = {}
    n = len(series)
    for d in spec.return_horizons:
        columns[f"ret_{d}"] = log_return(series, d) if n > d else pd.Series(np.nan, index=series.dates)
    rvs = {}
    for N in spec.rv_horizons:
        rvs[N] = realized_vol_feature(series, N) if n > N else pd.Series(np.nan, index=series.dates)
        columns[f"rv_{N}"] = rvs[N]
    for N in spec.rv_horizons:
        rv = rvs[N]
        columns[f"volvol_{N}"] = (
            vol_of_vol(rv, spec.volvol_window) if n > spec.volvol_window else pd.Series(np.nan, index=series.dates)
        )
    raw = pd.DataFrame(columns, index=series.dates)
    if n < spec.zscore_window:
        return raw * np.nan
    return raw.apply(lambda col: sliding_zscore(col, spec.zscore_window))


def build_panel(universe: Universe, spec: Optional[FeatureSpec] = None) -> FeaturePanel:
    """
    Feature/target panel over the universe calendar.

    A date is valid for an asset once the asset has max(horizon) +
    zscore_window bars and every feature is finite.
    """
    spec = spec or FeatureSpec()
    names = feature_names(spec)
    calendar = universe.calendar
    A, T, F = len(universe.assets), len(calendar), len(names)

    features = np.full((A, T, F), np.nan)
    targets = np.full((A, T, len(TARGET_KINDS)), np.nan)
    returns = np.full((A, T), np.nan)
    valid = np.zeros((A, T), dtype=bool)
    min_history = spec.max_horizon + spec.zscore_window

    for a, (aid, series) in enumerate(universe.assets.items()):
        pos = calendar.get_indexer(series.dates)
        feats = _asset_features(series, spec)[names].to_numpy()
        features[a, pos] = feats

        for k, kind in enumerate(TARGET_KINDS):
            targets[a, pos, k] = forward_target(series, kind, spec.target_horizon).values.to_numpy()

        settle = series.settle
        returns[a, pos] = np.log(settle / settle.shift(1)).to_numpy()

        history_ok = np.arange(1, len(series) + 1) >= min_history
        valid[a, pos] = history_ok & np.isfinite(feats).all(axis=1)
        logger.debug(f"{aid}: {int(valid[a].sum())} valid feature dates")

    return FeaturePanel(list(universe.assets), calendar, names, features, targets, returns, valid)
