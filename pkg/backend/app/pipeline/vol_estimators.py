"""
Volatility estimators.

Close-to-close, Parkinson, Garman-Klass, Rogers-Satchell and Yang-Zhang
range estimators over a rolling window, the EWMA ex-ante estimator used
for position sizing, and forward-looking targets for the auxiliary tasks.

All outputs are annualized: sqrt(252 * daily variance). Per bar t:
u = ln(H/O), d = ln(L/O), c = ln(C/O), o = ln(O_t / C_{t-1}),
r = ln(C_t / C_{t-1}).
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Literal

import numpy as np
import pandas as pd

from ..core.errors import InvalidKind, WindowTooLarge
from ..data.market_data import TRADING_DAYS, AssetSeries
from ..schemas import TARGET_KINDS, VolEstimatorKind

logger = logging.getLogger(__name__)

Direction = Literal["backward", "forward"]

_TWO_LN2_MINUS_1 = 2.0 * np.log(2.0) - 1.0


@dataclass(frozen=True)
class VolSeries:
    """Annualized volatility per date; NaN marks an absent value."""
    asset_id: str
    kind: VolEstimatorKind
    window: int
    direction: Direction
    values: pd.Series

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.values.index


def _log_terms(series: AssetSeries) -> Dict[str, pd.Series]:
    bars = series.bars
    o, h, l, c = bars["open"], bars["high"], bars["low"], bars["close"]
    return {
        "u": np.log(h / o),
        "d": np.log(l / o),
        "c": np.log(c / o),
        "hl": np.log(h / l),
        "o": np.log(o / c.shift(1)),
        "r": np.log(c / c.shift(1)),
    }


def _annualize(daily_var: pd.Series) -> pd.Series:
    return np.sqrt(daily_var.clip(lower=0.0) * TRADING_DAYS)


def _require(series: AssetSeries, n_min: int, N: int, name: str) -> None:
    if len(series) < n_min:
        raise WindowTooLarge(f"{name}: window {N} needs {n_min} bars, {series.asset_id} has {len(series)}")


def _wrap(series: AssetSeries, kind: VolEstimatorKind, N: int, values: pd.Series) -> VolSeries:
    return VolSeries(series.asset_id, kind, N, "backward", values.rename(kind.value))


def close_to_close(series: AssetSeries, N: int) -> VolSeries:
    """Sample standard deviation (ddof=1) of the last N daily log returns."""
    if N < 2:
        raise WindowTooLarge("close_to_close needs N >= 2")
    _require(series, N + 1, N, "close_to_close")
    r = _log_terms(series)["r"]
    return _wrap(series, VolEstimatorKind.CLOSE_TO_CLOSE, N, _annualize(r.rolling(N).var(ddof=1)))


def parkinson(series: AssetSeries, N: int) -> VolSeries:
    """(1 / (4 N ln 2)) * sum of squared log ranges."""
    if N < 1:
        raise WindowTooLarge("parkinson needs N >= 1")
    _require(series, N, N, "parkinson")
    hl = _log_terms(series)["hl"]
    daily = (hl ** 2).rolling(N).mean() / (4.0 * np.log(2.0))
    return _wrap(series, VolEstimatorKind.PARKINSON, N, _annualize(daily))


def garman_klass(series: AssetSeries, N: int) -> VolSeries:
    """Mean of 0.5 ln(H/L)^2 - (2 ln 2 - 1) c^2; negative window means clamp to 0."""
    if N < 1:
        raise WindowTooLarge("garman_klass needs N >= 1")
    _require(series, N, N, "garman_klass")
    t = _log_terms(series)
    term = 0.5 * t["hl"] ** 2 - _TWO_LN2_MINUS_1 * t["c"] ** 2
    return _wrap(series, VolEstimatorKind.GARMAN_KLASS, N, _annualize(term.rolling(N).mean()))


def _rogers_satchell_daily(t: Dict[str, pd.Series], N: int) -> pd.Series:
    term = t["u"] * (t["u"] - t["c"]) + t["d"] * (t["d"] - t["c"])
    return term.rolling(N).mean()


def rogers_satchell(series: AssetSeries, N: int) -> VolSeries:
    """Mean of u(u - c) + d(d - c); drift independent."""
    if N < 1:
        raise WindowTooLarge("rogers_satchell needs N >= 1")
    _require(series, N, N, "rogers_satchell")
    daily = _rogers_satchell_daily(_log_terms(series), N)
    return _wrap(series, VolEstimatorKind.ROGERS_SATCHELL, N, _annualize(daily))


def yang_zhang_k(N: int) -> float:
    return 0.34 / (1.34 + (N + 1) / (N - 1))


def yang_zhang(series: AssetSeries, N: int) -> VolSeries:
    """Overnight variance + k * open-to-close variance + (1 - k) * Rogers-Satchell."""
    if N < 2:
        raise WindowTooLarge("yang_zhang needs N >= 2")
    _require(series, N + 1, N, "yang_zhang")
    t = _log_terms(series)
    k = yang_zhang_k(N)
    var_o = t["o"].rolling(N).var(ddof=1)
    var_c = t["c"].rolling(N).var(ddof=1)
    var_rs = _rogers_satchell_daily(t, N).clip(lower=0.0)
    daily = var_o + k * var_c + (1.0 - k) * var_rs
    return _wrap(series, VolEstimatorKind.YANG_ZHANG, N, _annualize(daily))


def ewma_ex_ante(series: AssetSeries, span: int = 60) -> VolSeries:
    """
    Exponentially weighted std of daily settle log returns (alpha = 2 / (span + 1)).

    Values before `span` returns have accumulated are absent.
    """
    if span < 2:
        raise WindowTooLarge("ewma_ex_ante needs span >= 2")
    if len(series) < 2:
        raise WindowTooLarge(f"ewma_ex_ante needs 2 bars, {series.asset_id} has {len(series)}")
    r = np.log(series.settle / series.settle.shift(1))
    daily_std = r.ewm(span=span, min_periods=span).std()
    values = daily_std * np.sqrt(TRADING_DAYS)
    return VolSeries(series.asset_id, VolEstimatorKind.EWMA_EX_ANTE, span, "backward",
                     values.rename(VolEstimatorKind.EWMA_EX_ANTE.value))


ESTIMATORS: Dict[VolEstimatorKind, Callable[[AssetSeries, int], VolSeries]] = {
    VolEstimatorKind.CLOSE_TO_CLOSE: close_to_close,
    VolEstimatorKind.PARKINSON: parkinson,
    VolEstimatorKind.GARMAN_KLASS: garman_klass,
    VolEstimatorKind.ROGERS_SATCHELL: rogers_satchell,
    VolEstimatorKind.YANG_ZHANG: yang_zhang,
}


def estimate(series: AssetSeries, kind: VolEstimatorKind, N: int) -> VolSeries:
    if kind == VolEstimatorKind.EWMA_EX_ANTE:
        return ewma_ex_ante(series, N)
    return ESTIMATORS[VolEstimatorKind(kind)](series, N)


def forward_target(series: AssetSeries, kind: VolEstimatorKind, horizon: int = 21) -> VolSeries:
    """
    Volatility realized over the bars (t, t + horizon].

    Equals the backward estimator at t + horizon with window = horizon;
    the last `horizon` dates (and all dates of a too-short series) are absent.
    """
    kind = VolEstimatorKind(kind)
    if kind not in TARGET_KINDS:
        raise InvalidKind(f"{kind.value} is not a forward-volatility target")
    try:
        backward = ESTIMATORS[kind](series, horizon).values
    except WindowTooLarge:
        logger.debug(f"{series.asset_id}: too short for {kind.value} target, all absent")
        backward = pd.Series(np.nan, index=series.dates)
    return VolSeries(series.asset_id, kind, horizon, "forward", backward.shift(-horizon).rename(kind.value))
