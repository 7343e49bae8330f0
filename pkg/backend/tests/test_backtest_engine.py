"""
Tests for fold planning, training, grid search and the backtest runner.
"""

import json
import logging

import numpy as np
import pandas as pd
import pytest

from app.core.errors import InvalidSpan, InvalidSpec, NoValidData, ReportIoError
from app.core.logging import NO_RUN, RunContextFilter, current_run
from app.data.market_data import generate_synthetic
from app.pipeline.baselines import tsmom_portfolio
from app.pipeline.features import build_panel
from app.schemas import (
    TARGET_KINDS,
    BacktestSettings,
    DataSection,
    HyperGrid,
    ModelConfig,
    RunConfig,
    StrategySection,
    SyntheticSpec,
    VolEstimatorKind,
)
from app.services import backtest_engine as engine
from app.services.analytics import sharpe_ratio
from app.services.backtest_engine import (
    DEFAULT_ABLATION_SUBSETS,
    EarlyStopping,
    FoldPlan,
    TrainRunResult,
    ablation_tag,
    derive_seed,
    fold_plan_hash,
    grid_candidates,
    grid_search,
    plan_folds,
    prepare_fold,
    read_run,
    read_runs,
    run_ablation,
    run_backtest,
    split_positions,
    train_fold,
    write_run,
)

from conftest import SMALL_FEATURES, tiny_model


def _small_grid(**axes):
    fields = dict(
        n_lstm_layers=[1], lstm_hidden=[8], lstm_dropout=[0.1], n_mlp_layers=[1], mlp_hidden=[8],
        mlp_dropout=[0.1], learning_rate=[0.001], max_grad_norm=[1.0],
    )
    fields.update(axes)
    return HyperGrid(**fields)


def _universe_and_panel(config):
    universe = generate_synthetic(config.data.synthetic, config.data.seed)
    return universe, build_panel(universe, SMALL_FEATURES)


# ---------------------------------------------------------------------------
# Seeds and folds
# ---------------------------------------------------------------------------

def test_derive_seed():
    """Test seeds are reproducible and distinct per key."""
    assert derive_seed(5, 0, 1, 2) == derive_seed(5, 0, 1, 2)
    seeds = {derive_seed(5, fold, grid, purpose) for fold in range(3) for grid in range(3) for purpose in range(4)}
    assert len(seeds) == 36
    assert derive_seed(6, 0, 1, 2) != derive_seed(5, 0, 1, 2)


def test_plan_folds():
    """Test one expanding fold per test year."""
    folds = plan_folds(None, 2000, 2002, 1990)

    assert [f.test_year for f in folds] == [2000, 2001, 2002]
    assert all(f.train_start == pd.Timestamp("1990-01-01") for f in folds)
    assert folds[2].train_end == pd.Timestamp("2001-12-31")
    assert folds[2].test_end == pd.Timestamp("2002-12-31")
    assert [f.fold_index for f in folds] == [0, 1, 2]


@pytest.mark.parametrize("first, last, start", [(2000, 1999, 1990), (1990, 2000, 1990), (1989, 2000, 1990)])
def test_plan_folds_invalid_span(first, last, start):
    """Test misordered years are rejected."""
    with pytest.raises(InvalidSpan):
        plan_folds(None, first, last, start)


def test_plan_folds_warns_on_missing_test_year(caplog):
    """Test a test year outside the calendar is logged."""
    calendar = pd.bdate_range("2000-01-03", "2001-12-31")
    with caplog.at_level(logging.WARNING):
        plan_folds(calendar, 2001, 2002, 2000)
    assert "no dates in test year 2002" in caplog.text


def test_fold_plan_hash():
    """Test the hash is stable and sensitive to the plan."""
    a = fold_plan_hash(plan_folds(None, 2000, 2002, 1990))
    assert a == fold_plan_hash(plan_folds(None, 2000, 2002, 1990))
    assert a != fold_plan_hash(plan_folds(None, 2000, 2002, 1991))
    assert a != fold_plan_hash(plan_folds(None, 2000, 2002, 1990, validation_fraction=0.3))


def test_split_positions():
    """Test the validation split is the last 20% of the train span and the test year follows."""
    calendar = pd.bdate_range("2000-01-03", "2002-12-31")
    fold = plan_folds(calendar, 2002, 2002, 2000)[0]
    split = split_positions(calendar, fold)

    n_train_span = len(split.train) + len(split.validation)
    assert n_train_span == int((calendar <= "2001-12-31").sum())
    assert len(split.validation) == round(0.2 * n_train_span)
    assert split.train[-1] + 1 == split.validation[0]
    assert split.validation[-1] + 1 == split.test[0]
    assert calendar[split.test[0]] == pd.Timestamp("2002-01-01")
    assert np.all(np.diff(split.train) == 1)


def test_split_positions_too_short():
    """Test a train span of fewer than 4 dates is rejected."""
    calendar = pd.bdate_range("2000-12-27", "2001-03-01")
    fold = plan_folds(calendar, 2001, 2001, 2000)[0]
    with pytest.raises(NoValidData):
        split_positions(calendar, fold)


def test_early_stopping():
    """Test best-epoch tracking and patience on strict improvements."""
    stopper = EarlyStopping(patience=2)
    flags = [stopper.step(e, loss) for e, loss in enumerate([1.0, 0.9, 0.95, 0.9], start=1)]

    assert flags == [True, True, False, False]
    assert stopper.best_epoch == 2
    assert stopper.best_loss == 0.9
    assert stopper.should_stop

    stopper = EarlyStopping(patience=3)
    assert not stopper.step(1, float("nan"))
    assert stopper.best_loss == float("inf")


def test_default_protocol_folds_and_patience():
    """Test 21 yearly folds for 2000-2020 and a stop exactly 25 epochs after the best."""
    folds = plan_folds(None, 2000, 2020, 1990)
    assert len(folds) == 21
    assert folds[-1].train_end == pd.Timestamp("2019-12-31")

    losses = [1.0 - 0.01 * e for e in range(10)] + [0.95] * 100
    stopper = EarlyStopping()
    for epoch, loss in enumerate(losses, start=1):
        stopper.step(epoch, loss)
        if stopper.should_stop:
            break
    assert stopper.best_epoch == 10
    assert epoch == 10 + 25


# ---------------------------------------------------------------------------
# Grid candidates and selection
# ---------------------------------------------------------------------------

def test_default_grid_size():
    """Test the default search space has 49152 points."""
    assert HyperGrid().size == 4 ** 7 * 3 == 49152


def test_grid_candidates():
    """Test exhaustive and sampled candidates keep the base fields."""
    grid = _small_grid(lstm_hidden=[8, 16], learning_rate=[0.01, 0.001])
    base = tiny_model(lookback_len=7, active_aux_tasks=["gk"])

    full = grid_candidates(grid, base, "exhaustive")
    assert len(full) == 4
    assert {(c.lstm_hidden, c.learning_rate) for c in full} == {(8, 0.01), (8, 0.001), (16, 0.01), (16, 0.001)}
    assert all(c.lookback_len == 7 and c.active_aux_tasks == [VolEstimatorKind.GARMAN_KLASS] for c in full)

    sampled = grid_candidates(grid, base, "random", k=3, seed=1)
    assert len(sampled) == 3
    assert len({(c.lstm_hidden, c.learning_rate) for c in sampled}) == 3
    assert sampled == grid_candidates(grid, base, "random", k=3, seed=1)
    assert len(grid_candidates(grid, base, "random", k=100, seed=1)) == 4


def _fake_train_fold(loss_of):
    """train_fold stand-in: loss from the candidate config, parameter count = lstm_hidden."""
    def fake(panel, fold, config, settings, sigma_target, target_horizon, grid_index, fold_data):
        return TrainRunResult(
            config=config, grid_index=grid_index, best_epoch=1, best_validation_loss=loss_of(config),
            initial_validation_loss=1.0, validation_loss_curve=[], train_loss_curve=[], train_sharpe_curve=[],
            diverged=False, n_params=config.lstm_hidden, seed=0, wall_time=0.0,
        )
    return fake


def _selection_setup():
    settings = BacktestSettings(train_start=2000, first_test_year=2001, last_test_year=2001, grid_budget="exhaustive")
    fold = plan_folds(None, 2001, 2001, 2000)[0]
    grid = _small_grid(lstm_hidden=[8, 16], learning_rate=[0.01, 0.001])
    return settings, fold, grid


def test_grid_search_prefers_lowest_loss(monkeypatch):
    """Test the lowest validation loss wins."""
    settings, fold, grid = _selection_setup()
    monkeypatch.setattr(engine, "train_fold", _fake_train_fold(lambda c: 0.5 if c.lstm_hidden == 16 else 1.0))
    result = grid_search(None, fold, grid, tiny_model(), settings, fold_data=object())

    assert result.best.config.lstm_hidden == 16
    assert len(result.runs) == 4


def test_grid_search_tie_breaks(monkeypatch):
    """Test ties go to fewer parameters, then the lower learning rate."""
    settings, fold, grid = _selection_setup()
    monkeypatch.setattr(engine, "train_fold", _fake_train_fold(lambda c: 1.0))
    best = grid_search(None, fold, grid, tiny_model(), settings, fold_data=object()).best

    assert best.config.lstm_hidden == 8
    assert best.config.learning_rate == 0.001


def test_grid_search_skips_diverged_runs(monkeypatch):
    """Test an infinite loss never beats a finite one."""
    settings, fold, grid = _selection_setup()
    monkeypatch.setattr(
        engine, "train_fold", _fake_train_fold(lambda c: float("inf") if c.lstm_hidden == 8 else 2.0)
    )
    best = grid_search(None, fold, grid, tiny_model(), settings, fold_data=object()).best
    assert best.config.lstm_hidden == 16


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_prepare_fold(tiny_run_config):
    """Test train batches are contiguous chunks and the validation batch follows them."""
    config = tiny_run_config()
    universe, panel = _universe_and_panel(config)
    fold = plan_folds(universe.calendar, 2002, 2002, 2000)[0]
    data = prepare_fold(panel, fold, 5, config.backtest, target_horizon=5)

    assert all(b.n_dates <= 63 for b in data.train_batches)
    positions = np.concatenate([b.positions for b in data.train_batches])
    np.testing.assert_array_equal(positions, data.split.train[: len(positions)])
    assert data.validation.positions[0] == data.split.validation[0]
    # no train target may look into the validation split
    for b in data.train_batches:
        late = b.positions + 5 >= data.split.validation[0]
        assert np.isnan(b.targets.numpy()[:, late]).all()


def test_train_fold_reproducible(tiny_run_config, caplog):
    """Test training is deterministic and logs one line per epoch."""
    config = tiny_run_config()
    universe, panel = _universe_and_panel(config)
    fold = plan_folds(universe.calendar, 2002, 2002, 2000)[0]
    model_cfg = tiny_model()

    with caplog.at_level(logging.INFO, logger="app.services.backtest_engine"):
        r1 = train_fold(panel, fold, model_cfg, config.backtest, target_horizon=5)
    r2 = train_fold(panel, fold, model_cfg, config.backtest, target_horizon=5)

    assert 1 <= len(r1.validation_loss_curve) <= 3
    assert r1.validation_loss_curve == r2.validation_loss_curve
    assert r1.train_loss_curve == r2.train_loss_curve
    assert all(np.array_equal(r1.state_dict[k], r2.state_dict[k]) for k in r1.state_dict)
    assert r1.best_validation_loss == min(r1.validation_loss_curve)
    assert r1.validation_loss_curve[r1.best_epoch - 1] == r1.best_validation_loss
    assert np.isfinite(r1.initial_validation_loss)
    assert "epoch fold=0 grid=0 epoch=1 train_loss=" in caplog.text
    assert "val_loss=" in caplog.text
    json.dumps(r1.to_dict())


def test_train_fold_without_aux_tasks_optimizes_sharpe_only(tiny_run_config):
    """Test the empty aux subset trains on mu * sharpe loss alone."""
    config = tiny_run_config()
    universe, panel = _universe_and_panel(config)
    fold = plan_folds(universe.calendar, 2002, 2002, 2000)[0]
    result = train_fold(panel, fold, tiny_model(active_aux_tasks=[]), config.backtest, target_horizon=5)

    np.testing.assert_allclose(
        result.train_loss_curve, 0.5 * np.array(result.train_sharpe_curve), rtol=0, atol=1e-12
    )


# ---------------------------------------------------------------------------
# Backtests
# ---------------------------------------------------------------------------

def test_baseline_run_matches_strategy_returns(tiny_run_config):
    """Test baseline gross returns equal the strategy's own daily returns on the test year."""
    config = tiny_run_config(tags=("TSMOM",))
    universe = generate_synthetic(config.data.synthetic, config.data.seed)
    run = run_backtest(universe, "TSMOM", config)

    test_dates = universe.calendar[universe.calendar.year == 2002]
    assert run.returns.index.equals(test_dates)
    expected = tsmom_portfolio(universe, config.strategy.vol_target).daily_returns.loc[test_dates]
    np.testing.assert_allclose(run.gross_returns.to_numpy(), expected.to_numpy(), rtol=1e-10)
    assert (run.returns <= run.gross_returns + 1e-15).all()
    assert (run.turnover >= 0).all()
    assert run.folds[0].result is None


def test_mtl_run(tiny_run_config, tmp_path):
    """Test a neural run covers the test year, saves checkpoints and is reproducible."""
    config = tiny_run_config()
    universe, panel = _universe_and_panel(config)
    run = run_backtest(universe, "MTL-TSMOM", config, panel, run_dir=tmp_path)

    test_dates = universe.calendar[universe.calendar.year == 2002]
    assert run.returns.index.equals(test_dates)
    assert np.isfinite(run.returns).all()
    assert (run.weights.abs().stack() < 1).all()
    assert run.aux_tasks == [k.value for k in config.strategy.model.active_aux_tasks]
    record = run.folds[0]
    assert record.n_candidates == 1
    assert record.result is not None
    assert (tmp_path / "checkpoints" / "MTL-TSMOM_fold00.pt").is_file()
    assert not run.interrupted

    again = run_backtest(universe, "MTL-TSMOM", config, panel)
    np.testing.assert_array_equal(run.returns.to_numpy(), again.returns.to_numpy())


def test_run_backtest_labels_log_records(tiny_run_config, caplog):
    """Test records logged while a fold trains carry the strategy tag and fold."""
    config = tiny_run_config()
    universe, panel = _universe_and_panel(config)
    caplog.handler.addFilter(RunContextFilter())
    with caplog.at_level(logging.INFO, logger="app.services.backtest_engine"):
        run_backtest(universe, "MTL-TSMOM", config, panel)
        run_backtest(universe, "TSMOM", config)

    labels = {r.run for r in caplog.records if "grid search over" in r.getMessage()}
    assert labels == {"MTL-TSMOM/fold00"}
    assert {r.run for r in caplog.records if "pricing baseline" in r.getMessage()} == {"TSMOM"}
    assert current_run() == NO_RUN


def test_mtl_run_interrupted_keeps_completed_folds(tiny_run_config, monkeypatch):
    """Test an interrupt during the second fold keeps the first fold's returns."""
    config = tiny_run_config(last_test_year=2003, n_days=1008)
    universe, panel = _universe_and_panel(config)
    real = engine.grid_search
    calls = []

    def interrupting(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise KeyboardInterrupt
        return real(*args, **kwargs)

    monkeypatch.setattr(engine, "grid_search", interrupting)
    run = run_backtest(universe, "MTL-TSMOM", config, panel)

    assert run.interrupted
    assert len(run.folds) == 1
    assert run.returns.index.equals(universe.calendar[universe.calendar.year == 2002])


def test_ablation(tiny_run_config):
    """Test one run per subset with the matching aux tasks."""
    config = tiny_run_config()
    universe, panel = _universe_and_panel(config)
    runs = run_ablation(universe, [[], [VolEstimatorKind.CLOSE_TO_CLOSE]], config, panel)

    assert list(runs) == ["MTL-ablation-none", "MTL-ablation-ctc"]
    assert runs["MTL-ablation-none"].aux_tasks == []
    assert runs["MTL-ablation-ctc"].aux_tasks == ["ctc"]
    assert runs["MTL-ablation-none"].fold_plan_hash == runs["MTL-ablation-ctc"].fold_plan_hash

    with pytest.raises(InvalidSpec):
        run_ablation(universe, [], config, panel)


def test_ablation_tags():
    """Test the default subsets and their tags."""
    tags = [ablation_tag(s) for s in DEFAULT_ABLATION_SUBSETS]
    assert tags == [
        "MTL-ablation-none", "MTL-ablation-ctc", "MTL-ablation-p", "MTL-ablation-gk",
        "MTL-ablation-rs", "MTL-ablation-yz", "MTL-ablation-all",
    ]
    assert ablation_tag([VolEstimatorKind.YANG_ZHANG, VolEstimatorKind.PARKINSON]) == "MTL-ablation-p+yz"


def test_write_and_read_run(tiny_run_config, tmp_path):
    """Test a written run directory reads back."""
    config = tiny_run_config(tags=("TSMOM",))
    universe = generate_synthetic(config.data.synthetic, config.data.seed)
    run = run_backtest(universe, "TSMOM", config)
    outdir = write_run(run, tmp_path)

    assert sorted(p.name for p in outdir.iterdir()) == ["meta.json", "returns.csv", "weights.csv"]
    back = read_run(outdir)
    assert back.tag == "TSMOM"
    assert back.returns.index.equals(run.returns.index)
    np.testing.assert_allclose(back.returns.to_numpy(), run.returns.to_numpy(), rtol=1e-9)
    np.testing.assert_allclose(back.gross_returns.to_numpy(), run.gross_returns.to_numpy(), rtol=1e-9)
    expected_weights = run.weights.dropna(how="all")
    np.testing.assert_allclose(back.weights.to_numpy(), expected_weights.to_numpy(), rtol=1e-9)
    assert back.fold_plan_hash == run.fold_plan_hash
    assert back.folds[0].plan == run.folds[0].plan

    assert list(read_runs(tmp_path)) == ["TSMOM"]
    with pytest.raises(ReportIoError):
        read_runs(tmp_path / "empty")


def test_fold_plan_round_trip():
    """Test the fold plan dictionary keeps ISO dates."""
    fold = FoldPlan(0, pd.Timestamp("1990-01-01"), pd.Timestamp("1999-12-31"),
                    pd.Timestamp("2000-01-01"), pd.Timestamp("2000-12-31"))
    assert fold.to_dict()["train_end"] == "1999-12-31"
    assert fold.test_year == 2000


@pytest.mark.slow
def test_trend_following_end_to_end():
    """Test both strategies earn on six trending assets over five expanding folds, reproducibly."""
    config = RunConfig(
        data=DataSection(
            synthetic=SyntheticSpec(
                n_assets=6, n_days=8 * 252, drift=0.15, volatility=0.15, regime_persistence=0.995
            ),
            seed=7,
        ),
        strategy=StrategySection(
            tags=["TSMOM", "MTL-TSMOM"],
            model=ModelConfig(lookback_len=21),
            grid=_small_grid(lstm_hidden=[8, 16, 32], mlp_hidden=[8, 16, 32], learning_rate=[0.001, 0.01]),
        ),
        backtest=BacktestSettings(
            train_start=2000, first_test_year=2002, last_test_year=2006, tau=0.0003, grid_budget="random",
            grid_k=8, max_epochs=60, patience=10, master_seed=3,
        ),
    )
    universe = generate_synthetic(config.data.synthetic, config.data.seed)
    panel = build_panel(universe, config.strategy.features)

    tsmom = run_backtest(universe, "TSMOM", config)
    assert len(tsmom.folds) == 5
    assert sharpe_ratio(tsmom.returns) > 0.3

    mtl = run_backtest(universe, "MTL-TSMOM", config, panel)
    assert mtl.aux_tasks == [k.value for k in TARGET_KINDS]
    assert sharpe_ratio(mtl.returns) > 0
    trained = [f for f in mtl.folds if f.result is not None]
    assert len(trained) == 5
    for record in trained:
        assert record.n_candidates == 8
        assert record.result.best_validation_loss < record.result.initial_validation_loss, record.plan.test_year

    again = run_backtest(universe, "MTL-TSMOM", config, panel)
    np.testing.assert_array_equal(again.returns.to_numpy(), mtl.returns.to_numpy())
    np.testing.assert_array_equal(again.weights.to_numpy(), mtl.weights.to_numpy())
    assert [f.result.grid_index for f in again.folds] == [f.result.grid_index for f in mtl.folds]
