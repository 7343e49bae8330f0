"""
Unit tests for performance metrics and report files.
"""

from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from app.core.errors import (
    DuplicateDate,
    MissingColumn,
    MissingDataFile,
    NoOverlap,
    TooFewObservations,
    TotalLoss,
    ZeroVolatility,
)
from app.pipeline.baselines import tsmom_portfolio
from app.schemas import CrisisWindow, ReportSection
from app.services.analytics import (
    annualized_return,
    drawdown_series,
    drawdown_stats,
    emit_report,
    equity_curve,
    load_index_csv,
    metric_report,
    metrics_table,
    metrics_text,
    period_performance,
    proportion_positive,
    rescale_to_target_vol,
    rolling_correlation,
    sharpe_ratio,
    sortino_ratio,
)


def _returns(n=500, seed=0, mean=0.0003, vol=0.01, start="2001-01-01"):
    rng = np.random.default_rng(seed)
    index = pd.bdate_range(start, periods=n, name="date")
    return pd.Series(mean + vol * rng.standard_normal(n), index=index)


def test_rescale_to_target_vol():
    """Test rescaled returns have exactly the target annualized volatility."""
    scaled = rescale_to_target_vol(_returns(), 0.15)
    assert scaled.std(ddof=1) * np.sqrt(252) == pytest.approx(0.15, rel=1e-12)

    with pytest.raises(ZeroVolatility):
        rescale_to_target_vol(np.full(10, 0.001))
    with pytest.raises(TooFewObservations):
        rescale_to_target_vol([0.01])


def test_annualized_return():
    """Test geometric and arithmetic annualization."""
    r = np.full(252, 0.001)
    assert annualized_return(r) == pytest.approx(1.001 ** 252 - 1, rel=1e-12)
    assert annualized_return(r, "arithmetic") == pytest.approx(0.252)
    assert annualized_return(np.full(126, 0.001)) == pytest.approx(1.001 ** 252 - 1, rel=1e-12)
    with pytest.raises(TotalLoss):
        annualized_return([0.01, -1.0])


def test_sharpe_and_sortino():
    """Test the ratios against direct formulas."""
    r = np.array([0.01, -0.02, 0.015, 0.005, -0.003])
    assert sharpe_ratio(r) == pytest.approx(r.mean() / r.std(ddof=1) * np.sqrt(252))
    downside = np.sqrt(np.mean(np.minimum(r, 0) ** 2))
    assert sortino_ratio(r) == pytest.approx(r.mean() / downside * np.sqrt(252))

    assert sortino_ratio([0.01, 0.02, 0.0]) == float("inf")
    assert sortino_ratio([0.0, 0.0]) == 0.0
    with pytest.raises(ZeroVolatility):
        sharpe_ratio([0.01, 0.01, 0.01])


def test_sharpe_is_scale_invariant():
    """Test rescaling leaves the Sharpe ratio unchanged."""
    r = _returns(seed=1)
    assert sharpe_ratio(rescale_to_target_vol(r, 0.1)) == pytest.approx(sharpe_ratio(r), rel=1e-12)


def test_drawdown_hand_computed():
    """Test peak, trough and recovery on a short path."""
    r = [0.1, -0.5, 0.2, 1.0, -0.1]
    stats = drawdown_stats(r)

    np.testing.assert_allclose(equity_curve(r), [1.0, 1.1, 0.55, 0.66, 1.32, 1.188])
    assert stats.max_drawdown == pytest.approx(-0.5)
    assert (stats.peak, stats.trough, stats.recovery) == (1, 2, 4)
    assert stats.max_drawdown_period == 1
    assert stats.recovery_period == 2
    np.testing.assert_allclose(drawdown_series(r), [0, 0, -0.5, -0.4, 0, -0.1], atol=1e-12)


def test_drawdown_not_recovered_and_none():
    """Test an unrecovered drawdown and a path without drawdown."""
    stats = drawdown_stats([0.05, -0.1, 0.02])
    assert stats.recovery is None
    assert stats.recovery_period is None
    assert stats.max_drawdown_period == 1

    flat = drawdown_stats([0.01, 0.02, 0.0])
    assert flat.max_drawdown == 0.0
    assert flat.max_drawdown_period == 0


def test_drawdown_matches_brute_force():
    """Test the maximum drawdown against every peak/trough pair."""
    rng = np.random.default_rng(12)
    for _ in range(200):
        r = 0.0005 + 0.02 * rng.standard_normal(500)
        stats = drawdown_stats(r)
        equity = equity_curve(r)

        ratios = equity[None, :] / equity[:, None] - 1.0  # [i, j] = E[j] / E[i] - 1
        ratios[np.tril_indices(len(equity), k=-1)] = np.inf
        per_trough = ratios.min(axis=0)
        trough = int(np.argmin(per_trough))

        assert stats.max_drawdown == pytest.approx(per_trough.min(), rel=1e-12)
        assert stats.trough == trough
        peak_value = equity[: trough + 1].max()
        assert equity[stats.peak] == peak_value
        assert stats.peak == np.flatnonzero(equity[: trough + 1] == peak_value)[-1]


def test_proportion_positive():
    """Test zero returns do not count as positive."""
    assert proportion_positive([0.01, 0.0, -0.01, 0.02]) == 0.5


def test_rolling_correlation():
    """Test perfect correlation, flat windows and disjoint series."""
    a = _returns(n=40, seed=2)
    corr = rolling_correlation(a, 2 * a + 0.001, window=10)
    assert corr.iloc[:9].isna().all()
    np.testing.assert_allclose(corr.iloc[9:], 1.0, rtol=1e-10)

    flat = pd.Series(0.001, index=a.index)
    assert rolling_correlation(a, flat, window=10).isna().all()

    later = _returns(n=10, start="2010-01-01")
    with pytest.raises(NoOverlap):
        rolling_correlation(a, later, window=5)


def test_period_performance():
    """Test compounding inside a window and absence outside."""
    r = pd.Series([0.1, -0.1, 0.2], index=pd.bdate_range("2008-01-01", periods=3))
    assert period_performance(r, "2008-01-02", "2008-01-03") == pytest.approx(0.9 * 1.2 - 1)
    assert period_performance(r, "2020-01-01", "2020-12-31") is None


def test_metric_report_rescales_first():
    """Test the report rescales to the target volatility before computing metrics."""
    r = _returns(seed=3) * 3
    report = metric_report(r, sigma_target=0.10)
    scaled = rescale_to_target_vol(r, 0.10)

    assert report.sharpe == pytest.approx(sharpe_ratio(r), rel=1e-10)
    assert report.annualized_return == pytest.approx(annualized_return(scaled))
    assert report.max_drawdown == pytest.approx(drawdown_stats(scaled).max_drawdown)
    assert report.max_drawdown <= 0
    assert 0 <= report.proportion_positive <= 1
    assert report.return_over_max_drawdown == pytest.approx(
        report.annualized_return / abs(report.max_drawdown)
    )

    raw = metric_report(r, sigma_target=None, annualization="arithmetic")
    assert raw.annualized_return == pytest.approx(r.mean() * 252)


def test_metrics_text_formatting():
    """Test percentages, integers and unrecovered drawdowns in the text table."""
    report = metric_report([0.05, -0.1, 0.02], sigma_target=None)
    text = metrics_text({"X": report})

    assert "Max Drawdown Recovery Period (days)" in text
    assert "not recovered" in text
    assert "Proportion of Positive Returns (%)" in text
    assert "66.67" in text
    table = metrics_table({"X": report})
    assert list(table.columns)[0] == "strategy"
    assert len(table) == 1


def test_load_index_csv(tmp_path):
    """Test index returns come from level changes in date order."""
    path = tmp_path / "SPX.csv"
    path.write_text("date,level\n2020-01-03,110\n2020-01-02,100\n2020-01-06,99\n", encoding="utf-8")
    index = load_index_csv(path)

    assert index.name == "SPX"
    np.testing.assert_allclose(index.returns.to_numpy(), [0.1, 99 / 110 - 1])
    assert index.dates[0] == pd.Timestamp("2020-01-03")


def test_load_index_csv_errors(tmp_path):
    """Test missing files, columns and duplicate dates."""
    with pytest.raises(MissingDataFile):
        load_index_csv(tmp_path / "none.csv")

    path = tmp_path / "x.csv"
    path.write_text("day,level\n2020-01-02,1\n", encoding="utf-8")
    with pytest.raises(MissingColumn):
        load_index_csv(path)

    path.write_text("date,close\n2020-01-02,1\n2020-01-02,2\n", encoding="utf-8")
    with pytest.raises(DuplicateDate):
        load_index_csv(path)


def _run(returns, aux_tasks=None):
    return SimpleNamespace(returns=returns, gross_returns=returns + 0.0001, aux_tasks=aux_tasks)


def test_emit_report_files(tmp_path):
    """Test report files, the equity inception row and crisis windows."""
    runs = {
        "TSMOM": _run(_returns(seed=4, start="2008-01-01")),
        "MTL-TSMOM": _run(_returns(seed=5, start="2008-01-01")),
    }
    cfg = ReportSection(
        crisis_windows=[CrisisWindow(name="GFC", start="2008-06-01", end="2008-12-31")], include_gross=True
    )
    paths = emit_report(runs, None, tmp_path / "report", cfg)

    assert [p.name for p in paths] == ["metrics.csv", "metrics.txt", "equity.csv", "drawdown.csv", "crisis.csv"]
    metrics = pd.read_csv(tmp_path / "report" / "metrics.csv")
    assert metrics["strategy"].tolist() == ["TSMOM", "TSMOM (gross)", "MTL-TSMOM", "MTL-TSMOM (gross)"]

    equity = pd.read_csv(tmp_path / "report" / "equity.csv", index_col="date")
    assert equity.index[0] == "2007-12-31"
    assert (equity.iloc[0] == 100.0).all()
    assert len(equity) == 501

    crisis = pd.read_csv(tmp_path / "report" / "crisis.csv")
    assert set(crisis["strategy"]) == {"TSMOM", "TSMOM (gross)", "MTL-TSMOM", "MTL-TSMOM (gross)"}
    assert (crisis["window"] == "GFC").all()


def test_emit_report_with_index_and_ablation(tmp_path):
    """Test rolling correlations with an index and the ablation table."""
    base = _returns(seed=6, start="2008-01-01")
    levels = 100 * np.cumprod(1 + _returns(seed=7, start="2008-01-01"))
    index_path = tmp_path / "SPX.csv"
    pd.DataFrame({"date": levels.index.strftime("%Y-%m-%d"), "level": levels.to_numpy()}).to_csv(
        index_path, index=False
    )
    ablation = {
        "MTL-ablation-none": _run(_returns(seed=8, start="2008-01-01"), []),
        "MTL-ablation-ctc": _run(_returns(seed=9, start="2008-01-01"), ["ctc"]),
    }
    cfg = ReportSection(rolling_window=63)
    paths = emit_report({"TSMOM": _run(base)}, load_index_csv(index_path), tmp_path / "r", cfg, ablation)

    names = [p.name for p in paths]
    assert "rolling_corr.csv" in names
    assert names[-2:] == ["ablation.csv", "ablation.txt"]
    corr = pd.read_csv(tmp_path / "r" / "rolling_corr.csv")
    assert corr["TSMOM"].dropna().between(-1, 1).all()
    table = pd.read_csv(tmp_path / "r" / "ablation.csv")
    assert table["aux_tasks"].tolist() == ["none", "ctc"]
    assert "Auxiliary-task ablation" in (tmp_path / "r" / "ablation.txt").read_text()


def test_emit_report_no_overlap(tmp_path):
    """Test runs without common dates cannot be reported."""
    runs = {"A": _run(_returns(n=50, start="2001-01-01")), "B": _run(_returns(n=50, start="2005-01-01"))}
    with pytest.raises(NoOverlap):
        emit_report(runs, None, tmp_path)
    with pytest.raises(NoOverlap):
        emit_report({}, None, tmp_path)


def test_tsmom_is_profitable_in_a_persistent_uptrend(synthetic_universe):
    """Test TSMOM earns a positive risk-adjusted return when every asset trends up."""
    universe = synthetic_universe(
        n_assets=6, n_days=1500, drift=0.3, volatility=0.15, regime_persistence=None, seed=21
    )
    report = metric_report(tsmom_portfolio(universe).daily_returns)

    assert report.sharpe > 0.3
    assert report.annualized_return > 0
