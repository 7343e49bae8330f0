"""
Benchmark momentum strategies.

TSMOM: sign of the trailing 252-day log return, sized by sigma_tgt / sigma_t
with sigma_t the EWMA ex-ante volatility. CTA-MOM: three EWMA crossovers of
the settle price, normalized twice and passed through the x exp(-x^2/4)
response, sized the same way. Both rebalance daily and average over the
assets that have a position (1 / S_t).
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import pandas as pd

from ..core.errors import InsufficientHistory
from ..data.market_data import AssetSeries, Universe
from ..schemas import VolTargetConfig
from .vol_estimators import ewma_ex_ante

logger = logging.getLogger(__name__)

LOOKBACK = 252
ZERO_VOL = 1e-8
ZERO_STD = 1e-12

CTA_TIMESCALES: Tuple[Tuple[int, int], ...] = ((8, 24), (16, 48), (32, 96))
CTA_PRICE_STD_WINDOW = 63
CTA_SIGNAL_STD_WINDOW = 252
CTA_RESPONSE_SCALE = 0.89


@dataclass(frozen=True)
class StrategyOutput:
    """
    weights: decision-date x asset positions (sigma_tgt / sigma scaled), NaN when flat by lack of data
    next_returns: decision-date x asset log return realized over (t, t+1]
    per_asset_returns: realization-date x asset strategy returns
    daily_returns: realization-date portfolio return (mean over active assets, gross of costs)
    """
    tag: str
    weights: pd.DataFrame
    next_returns: pd.DataFrame
    per_asset_returns: pd.DataFrame
    daily_returns: pd.Series

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.daily_returns.index


def sgn(x: float) -> int:
    """-1, 0 or 1."""
    return int(np.sign(x))


def _position(signal, sigma, cfg: VolTargetConfig):
    """signal * sigma_tgt / sigma, flat where sigma is (near) zero."""
    sigma = np.asarray(sigma, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        position = np.asarray(signal, dtype=float) * cfg.sigma_target / sigma
    return np.where(sigma < ZERO_VOL, 0.0, position)


def _ex_ante(series: AssetSeries, cfg: VolTargetConfig) -> pd.Series:
    return ewma_ex_ante(series, cfg.span).values


def _next_log_returns(series: AssetSeries) -> pd.Series:
    settle = series.settle
    return np.log(settle.shift(-1) / settle)


def tsmom_positions(series: AssetSeries, cfg: VolTargetConfig) -> pd.Series:
    """Position decided at each date; NaN until the signal and sigma exist."""
    settle = series.settle
    signal = np.sign(np.log(settle / settle.shift(LOOKBACK)))
    sigma = _ex_ante(series, cfg)
    zero = sigma < ZERO_VOL
    if zero.any():
        logger.warning(f"{series.asset_id}: ex-ante volatility below {ZERO_VOL} on {int(zero.sum())} dates, flat")
    position = pd.Series(_position(signal, sigma, cfg), index=series.dates)
    return position.where(signal.notna() & sigma.notna())


def tsmom_asset_return(series: AssetSeries, t, cfg: VolTargetConfig = VolTargetConfig()) -> float:
    """sgn(r_{t-252,t}) * sigma_tgt / sigma_t * r_{t,t+1} for one asset and date."""
    i = series.dates.get_loc(pd.Timestamp(t))
    if i < LOOKBACK or i + 1 >= len(series):
        raise InsufficientHistory(f"{series.asset_id}: TSMOM at {t} needs {LOOKBACK} prior bars and a next bar")
    sigma = float(_ex_ante(series, cfg).iloc[i])
    if np.isnan(sigma):
        raise InsufficientHistory(f"{series.asset_id}: no ex-ante volatility at {t}")
    settle = series.settle.to_numpy()
    signal = sgn(np.log(settle[i] / settle[i - LOOKBACK]))
    if sigma < ZERO_VOL:
        logger.warning(f"{series.asset_id}: ex-ante volatility {sigma:.3g} at {t}, position forced to 0")
        return 0.0
    return signal * cfg.sigma_target / sigma * float(np.log(settle[i + 1] / settle[i]))


def _portfolio(tag: str, universe: Universe, positions: dict, next_returns: dict) -> StrategyOutput:
    weights = pd.DataFrame(positions, index=universe.calendar)
    nxt = pd.DataFrame(next_returns, index=universe.calendar)
    contrib = weights * nxt
    # a contribution counts only where both the position and the next return exist
    contrib = contrib.where(weights.notna() & nxt.notna())
    per_asset = contrib.shift(1)
    daily = per_asset.mean(axis=1, skipna=True).dropna()
    return StrategyOutput(tag, weights, nxt, per_asset, daily.rename(tag))


def tsmom_portfolio(universe: Universe, cfg: VolTargetConfig = VolTargetConfig()) -> StrategyOutput:
    """Equal-weighted average of the per-asset TSMOM returns."""
    positions = {aid: tsmom_positions(s, cfg) for aid, s in universe.assets.items()}
    nxt = {aid: _next_log_returns(s) for aid, s in universe.assets.items()}
    return _portfolio("TSMOM", universe, positions, nxt)


def cta_response(z):
    """z exp(-z^2 / 4) / 0.89; maximum sqrt(2) e^(-1/2) / 0.89 at z = sqrt(2)."""
    z = np.asarray(z, dtype=float)
    return z * np.exp(-(z ** 2) / 4.0) / CTA_RESPONSE_SCALE


def _safe_divide(num: pd.Series, den: pd.Series) -> pd.Series:
    out = num / den
    return out.mask(den < ZERO_STD, 0.0)


def cta_mom_signals(
    series: AssetSeries, timescales: Sequence[Tuple[int, int]] = CTA_TIMESCALES
) -> pd.Series:
    """CTA momentum signal per date, NaN before 252 + 96 bars of history."""
    settle = series.settle
    price_std = settle.rolling(CTA_PRICE_STD_WINDOW).std()
    responses = []
    for short_hl, long_hl in timescales:
        x = (
            settle.ewm(halflife=short_hl, adjust=False).mean()
            - settle.ewm(halflife=long_hl, adjust=False).mean()
        )
        y = _safe_divide(x, price_std)
        z = _safe_divide(y, y.rolling(CTA_SIGNAL_STD_WINDOW).std())
        responses.append(pd.Series(cta_response(z), index=settle.index))
    signal = pd.concat(responses, axis=1).mean(axis=1, skipna=False)
    warmup = CTA_SIGNAL_STD_WINDOW + max(long for _, long in timescales)
    signal.iloc[: warmup - 1] = np.nan
    return signal


def cta_mom_signal(series: AssetSeries, t) -> float:
    i = series.dates.get_loc(pd.Timestamp(t))
    value = cta_mom_signals(series).iloc[i]
    if np.isnan(value):
        raise InsufficientHistory(f"{series.asset_id}: CTA-MOM at {t} needs 348 bars of history")
    return float(value)


def cta_mom_positions(series: AssetSeries, cfg: VolTargetConfig) -> pd.Series:
    signal = cta_mom_signals(series)
    sigma = _ex_ante(series, cfg)
    position = pd.Series(_position(signal, sigma, cfg), index=series.dates)
    return position.where(signal.notna() & sigma.notna())


def cta_mom_portfolio(universe: Universe, cfg: VolTargetConfig = VolTargetConfig()) -> StrategyOutput:
    """Equal-weighted average of the per-asset CTA-MOM returns."""
    positions = {aid: cta_mom_positions(s, cfg) for aid, s in universe.assets.items()}
    nxt = {aid: _next_log_returns(s) for aid, s in universe.assets.items()}
    return _portfolio("CTA-MOM", universe, positions, nxt)
