"""
Performance analytics service.

Backtest metrics on daily simple returns (risk-free rate 0, 252 trading
days a year), ex-post volatility rescaling, drawdown and recovery
periods, rolling correlation against an external index, crisis-window
returns, and the report files of a run directory.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

import numpy as np
import pandas as pd

from ..core.errors import (
    DuplicateDate,
    MissingColumn,
    MissingDataFile,
    NoOverlap,
    ReportIoError,
    TooFewObservations,
    TotalLoss,
    UnparseableDate,
    WindowTooLarge,
    ZeroVolatility,
)
from ..data.market_data import TRADING_DAYS
from ..schemas import MetricReport, ReportSection

logger = logging.getLogger(__name__)

ZERO_STD = 1e-12
FLOAT_FORMAT = "%.10g"

METRIC_LABELS = {
    "annualized_return": "Annualized Return (%)",
    "sharpe": "Annualized Sharpe Ratio",
    "sortino": "Annualized Sortino Ratio",
    "return_over_max_drawdown": "Return Over Max Drawdown",
    "max_drawdown": "Max Drawdown (%)",
    "max_drawdown_period": "Max Drawdown Period (days)",
    "max_drawdown_recovery_period": "Max Drawdown Recovery Period (days)",
    "proportion_positive": "Proportion of Positive Returns (%)",
}
PERCENT_METRICS = {"annualized_return", "max_drawdown", "proportion_positive"}


def _series(returns) -> pd.Series:
    if isinstance(returns, pd.Series):
        return returns.astype(float).dropna()
    return pd.Series(np.asarray(returns, dtype=float)).dropna()


def _require(r: pd.Series, n: int, what: str) -> None:
    if len(r) < n:
        raise TooFewObservations(f"{what} needs at least {n} observations, got {len(r)}")


def rescale_to_target_vol(returns, sigma_target: float = 0.10) -> pd.Series:
    """Scale returns so their realized annualized volatility equals sigma_target."""
    r = _series(returns)
    _require(r, 2, "rescale_to_target_vol")
    vol = float(r.std(ddof=1)) * np.sqrt(TRADING_DAYS)
    if not np.isfinite(vol) or vol < ZERO_STD:
        raise ZeroVolatility("cannot rescale a return stream with zero volatility")
    return r * (sigma_target / vol)


def annualized_return(returns, method: str = "geometric") -> float:
    """Geometric: (prod(1 + r))^(252 / T) - 1. Arithmetic: mean * 252."""
    r = _series(returns)
    _require(r, 1, "annualized_return")
    if method == "arithmetic":
        return float(r.mean() * TRADING_DAYS)
    if (r <= -1.0).any():
        raise TotalLoss("a daily return of -100% or worse wipes out the capital")
    return float(np.expm1(np.log1p(r).sum() * TRADING_DAYS / len(r)))


def sharpe_ratio(returns) -> float:
    r = _series(returns)
    _require(r, 2, "sharpe_ratio")
    sd = float(r.std(ddof=1))
    if sd < ZERO_STD:
        raise ZeroVolatility("sharpe_ratio of a constant return stream")
    return float(r.mean() / sd * np.sqrt(TRADING_DAYS))


def sortino_ratio(returns) -> float:
    """Mean over downside deviation sqrt(mean(min(r, 0)^2)); +inf without losses."""
    r = _series(returns)
    _require(r, 2, "sortino_ratio")
    downside = float(np.sqrt((np.minimum(r, 0.0) ** 2).mean()))
    mu = float(r.mean())
    if downside < ZERO_STD:
        return float("inf") if mu > 0 else 0.0
    return mu / downside * float(np.sqrt(TRADING_DAYS))


@dataclass(frozen=True)
class DrawdownStats:
    """
    Positions count the inception (equity 1) as 0 and the i-th return as i.
    recovery_period is None when the equity never regains the peak.
    """
    max_drawdown: float
    max_drawdown_period: int
    recovery_period: Optional[int]
    peak: int
    trough: int
    recovery: Optional[int]


def equity_curve(returns, initial: float = 1.0) -> np.ndarray:
    """Compounded equity including the inception value."""
    r = _series(returns).to_numpy()
    return initial * np.concatenate([[1.0], np.cumprod(1.0 + r)])


def drawdown_series(returns) -> np.ndarray:
    equity = equity_curve(returns)
    return equity / np.maximum.accumulate(equity) - 1.0


def drawdown_stats(returns) -> DrawdownStats:
    r = _series(returns)
    _require(r, 1, "drawdown_stats")
    equity = equity_curve(r)
    running_max = np.maximum.accumulate(equity)
    drawdown = equity / running_max - 1.0
    trough = int(np.argmin(drawdown))
    mdd = float(drawdown[trough])
    if mdd >= 0.0:
        return DrawdownStats(0.0, 0, 0, 0, 0, 0)
    peak_value = running_max[trough]
    peak = int(np.flatnonzero(equity[: trough + 1] == peak_value)[-1])
    after = np.flatnonzero(equity[trough + 1:] >= peak_value)
    recovery = int(trough + 1 + after[0]) if after.size else None
    return DrawdownStats(
        max_drawdown=mdd,
        max_drawdown_period=trough - peak,
        recovery_period=None if recovery is None else recovery - trough,
        peak=peak,
        trough=trough,
        recovery=recovery,
    )


def proportion_positive(returns) -> float:
    r = _series(returns)
    _require(r, 1, "proportion_positive")
    return float((r > 0).sum() / len(r))


def rolling_correlation(a: pd.Series, b: pd.Series, window: int = 252) -> pd.Series:
    """Trailing Pearson correlation on the common dates; NaN where either window is flat."""
    if window < 2:
        raise WindowTooLarge("rolling_correlation needs window >= 2")
    joined = pd.concat([a.rename("a"), b.rename("b")], axis=1, join="inner").dropna()
    if joined.empty:
        raise NoOverlap("return series share no dates")
    x, y = joined["a"], joined["b"]
    corr = x.rolling(window).corr(y)
    flat = (x.rolling(window).std() < ZERO_STD) | (y.rolling(window).std() < ZERO_STD)
    return corr.mask(flat).rename("correlation")


def period_performance(returns: pd.Series, start, end) -> Optional[float]:
    """Compounded return over [start, end]; None if no observation falls inside."""
    window = _series(returns).loc[pd.Timestamp(start):pd.Timestamp(end)]
    if window.empty:
        return None
    return float(np.prod(1.0 + window.to_numpy()) - 1.0)


def metric_report(
    returns,
    sigma_target: Optional[float] = 0.10,
    annualization: str = "geometric",
) -> MetricReport:
    """
    Full metric set for one return stream.

    With sigma_target set, the stream is first rescaled to that realized
    volatility; undefined ratios are reported as NaN.
    """
    r = _series(returns)
    _require(r, 2, "metric_report")
    if sigma_target is not None:
        try:
            r = rescale_to_target_vol(r, sigma_target)
        except ZeroVolatility:
            logger.warning("zero-volatility stream, metrics computed without rescaling")

    try:
        ann = annualized_return(r, annualization)
    except TotalLoss:
        logger.warning("stream contains a total loss, annualized return set to -100%")
        ann = -1.0
    try:
        sharpe = sharpe_ratio(r)
    except ZeroVolatility:
        sharpe = float("nan")
    dd = drawdown_stats(r)
    if dd.max_drawdown < 0:
        romdd = ann / abs(dd.max_drawdown)
    else:
        romdd = float("inf") if ann > 0 else float("nan")
    return MetricReport(
        annualized_return=ann,
        sharpe=sharpe,
        sortino=sortino_ratio(r),
        return_over_max_drawdown=romdd,
        max_drawdown=dd.max_drawdown,
        max_drawdown_period=dd.max_drawdown_period,
        max_drawdown_recovery_period=dd.recovery_period,
        proportion_positive=proportion_positive(r),
    )


# ---------------------------------------------------------------------------
# External index
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IndexSeries:
    name: str
    levels: pd.Series
    returns: pd.Series

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.returns.index


def load_index_csv(
    path: Union[str, Path], date_column: str = "date", level_column: Optional[str] = None
) -> IndexSeries:
    """
    Read a (date, total-return level) CSV.

    The level column defaults to "level", else the first non-date column.
    Daily simple returns come from log-changes of the level.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingDataFile(f"no such index file: {path}")
    raw = pd.read_csv(path, encoding="utf-8")
    if date_column not in raw.columns:
        raise MissingColumn(date_column)
    if level_column is None:
        others = [c for c in raw.columns if c != date_column]
        level_column = "level" if "level" in raw.columns else (others[0] if others else "level")
    if level_column not in raw.columns:
        raise MissingColumn(level_column)

    dates = pd.to_datetime(raw[date_column], format="ISO8601", errors="coerce")
    bad = np.flatnonzero(dates.isna().to_numpy())
    if bad.size:
        raise UnparseableDate(f"cannot parse date '{raw[date_column].iloc[bad[0]]}'", row=int(bad[0]))
    levels = pd.Series(pd.to_numeric(raw[level_column], errors="coerce").to_numpy(), index=pd.DatetimeIndex(dates))
    dup = np.flatnonzero(levels.index.duplicated())
    if dup.size:
        raise DuplicateDate(f"duplicate date {levels.index[dup[0]].date()}", row=int(dup[0]))
    levels = levels.sort_index(kind="mergesort")
    levels.index.name = "date"
    returns = np.expm1(np.log(levels).diff()).dropna()
    return IndexSeries(path.stem, levels, returns.rename(path.stem))


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def _iso(index: pd.DatetimeIndex) -> pd.Index:
    return pd.Index(index.strftime("%Y-%m-%d"), name="date")


def _write_csv(frame: pd.DataFrame, path: Path, index: bool = True) -> Path:
    frame.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n", na_rep="")
    return path


def _format_metric(name: str, value) -> str:
    if value is None:
        return "not recovered"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if not np.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "n/a")
    if name in PERCENT_METRICS:
        return f"{100.0 * value:.2f}"
    return f"{value:.2f}"


def metrics_table(reports: Mapping[str, MetricReport]) -> pd.DataFrame:
    """One row per stream, MetricReport fields as columns."""
    rows = [{"strategy": tag, **report.model_dump()} for tag, report in reports.items()]
    return pd.DataFrame(rows, columns=["strategy"] + list(METRIC_LABELS))


def metrics_text(reports: Mapping[str, MetricReport], title: str = "Backtest metrics (net)") -> str:
    """Metrics as rows, strategies as columns."""
    table = pd.DataFrame(
        {
            tag: [_format_metric(name, getattr(report, name)) for name in METRIC_LABELS]
            for tag, report in reports.items()
        },
        index=list(METRIC_LABELS.values()),
    )
    return f"{title}\n\n{table.to_string()}\n"


def _streams(runs: Mapping[str, object], include_gross: bool) -> Dict[str, pd.Series]:
    streams: Dict[str, pd.Series] = {}
    for tag, run in runs.items():
        streams[tag] = run.returns
        if include_gross:
            streams[f"{tag} (gross)"] = run.gross_returns
    return streams


def _aligned(streams: Mapping[str, pd.Series]) -> pd.DataFrame:
    if not streams:
        raise NoOverlap("no return streams to report")
    frame = pd.concat({tag: s for tag, s in streams.items()}, axis=1, join="inner").dropna()
    if len(frame) < 2:
        raise NoOverlap(f"runs share only {len(frame)} dates")
    lengths = {tag: len(s) for tag, s in streams.items()}
    if len(set(lengths.values())) > 1:
        logger.warning(f"runs cover different date spans {lengths}, report uses the {len(frame)} common dates")
    return frame


def emit_report(
    runs: Mapping[str, object],
    index: Optional[IndexSeries],
    outdir: Union[str, Path],
    report_cfg: Optional[ReportSection] = None,
    ablation: Optional[Mapping[str, object]] = None,
) -> List[Path]:
    """
    Write the report files of a set of backtest runs.

    Files: metrics.csv/.txt, equity.csv (100 invested one business day
    before the first return), drawdown.csv, crisis.csv, rolling_corr.csv
    when an index is supplied, ablation.csv/.txt when ablation runs are
    supplied. Equity and drawdown use the same volatility-rescaled streams
    as the metrics.

    Args:
        runs: Backtest runs by strategy tag (objects with returns / gross_returns)
        index: Optional external index for the rolling correlation
        outdir: Report directory
        report_cfg: Report settings (defaults to ReportSection())
        ablation: Optional ablation runs by tag

    Returns:
        Paths written, in write order
    """
    cfg = report_cfg or ReportSection()
    outdir = Path(outdir)
    written: List[Path] = []
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        frame = _aligned(_streams(runs, cfg.include_gross))
        reports = {tag: metric_report(frame[tag], cfg.sigma_target, cfg.annualization) for tag in frame.columns}
        written.append(_write_csv(metrics_table(reports), outdir / "metrics.csv", index=False))
        (outdir / "metrics.txt").write_text(metrics_text(reports), encoding="utf-8")
        written.append(outdir / "metrics.txt")

        scaled = pd.DataFrame(index=frame.index)
        for tag in frame.columns:
            try:
                scaled[tag] = rescale_to_target_vol(frame[tag], cfg.sigma_target)
            except ZeroVolatility:
                scaled[tag] = frame[tag]
        inception = frame.index[0] - pd.offsets.BDay(1)
        dates = _iso(pd.DatetimeIndex([inception]).append(frame.index))
        equity = pd.DataFrame({tag: equity_curve(scaled[tag], 100.0) for tag in scaled.columns}, index=dates)
        written.append(_write_csv(equity, outdir / "equity.csv"))
        drawdown = pd.DataFrame({tag: drawdown_series(scaled[tag]) for tag in scaled.columns}, index=dates)
        written.append(_write_csv(drawdown, outdir / "drawdown.csv"))

        crisis_rows = []
        for window in cfg.crisis_windows:
            candidates = dict(scaled.items())
            if index is not None:
                candidates["index"] = index.returns
            for tag, stream in candidates.items():
                value = period_performance(stream, window.start, window.end)
                if value is not None:
                    crisis_rows.append(
                        {"window": window.name, "start": window.start.isoformat(), "end": window.end.isoformat(),
                         "strategy": tag, "cumulative_return": value}
                    )
        crisis = pd.DataFrame(crisis_rows, columns=["window", "start", "end", "strategy", "cumulative_return"])
        written.append(_write_csv(crisis, outdir / "crisis.csv", index=False))

        if index is not None:
            corr = pd.DataFrame(
                {tag: rolling_correlation(frame[tag], index.returns, cfg.rolling_window) for tag in frame.columns}
            )
            corr.index = _iso(corr.index)
            written.append(_write_csv(corr, outdir / "rolling_corr.csv"))

        if ablation:
            ab_frame = _aligned({tag: run.returns for tag, run in ablation.items()})
            ab_reports = {
                tag: metric_report(ab_frame[tag], cfg.sigma_target, cfg.annualization) for tag in ab_frame.columns
            }
            table = metrics_table(ab_reports)
            table.insert(
                1, "aux_tasks", ["+".join(ablation[tag].aux_tasks or []) or "none" for tag in ab_frame.columns]
            )
            written.append(_write_csv(table, outdir / "ablation.csv", index=False))
            (outdir / "ablation.txt").write_text(
                metrics_text(ab_reports, "Auxiliary-task ablation (net)"), encoding="utf-8"
            )
            written.append(outdir / "ablation.txt")
    except OSError as e:
        raise ReportIoError(f"cannot write report to {outdir}: {e}") from e

    logger.info(f"Report written to {outdir} ({len(written)} files)")
    return written
