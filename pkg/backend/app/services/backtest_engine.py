"""
Backtest orchestration service.

Expanding-window cross-validation: one fold per test year, retrained from
scratch, with a chronological validation split at the end of each train
span. Neural strategies run a grid search per fold (early-stopped Adam
training), then generate daily weights for the test year; baselines skip
training. Every strategy is priced with the same turnover-cost accounting
and the out-of-sample years are stitched into one return series.

All randomness derives from backtest.master_seed through
numpy SeedSequence keys (fold, grid index, purpose).
"""

import copy
import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from joblib import Parallel, delayed
from sklearn.model_selection import ParameterGrid, ParameterSampler

from ..core.errors import InvalidSpan, InvalidSpec, NoValidData, ReportIoError, TooFewObservations
from ..core.logging import run_context
from ..data.market_data import Universe
from ..models.mtl_model import (
    Batch,
    MtlModel,
    build_batch,
    portfolio_return_net,
    run_model,
    total_loss,
    window_valid,
)
from ..models.neural_core import adam_step, backward, clip_grad_norm, make_generator, make_optimizer, save_checkpoint
from ..pipeline.baselines import cta_mom_portfolio, tsmom_portfolio
from ..pipeline.features import FeaturePanel, build_panel
from ..schemas import TARGET_KINDS, BacktestSettings, HyperGrid, ModelConfig, RunConfig, VolEstimatorKind

logger = logging.getLogger(__name__)

BASELINE_TAGS = ("TSMOM", "CTA-MOM")
MTL_TAG = "MTL-TSMOM"
ABLATION_PREFIX = "MTL-ablation-"

# SeedSequence purposes
SEED_INIT, SEED_DROPOUT, SEED_BATCHES, SEED_GRID = 0, 1, 2, 3

INFERENCE_CHUNK = 4096


def derive_seed(master: int, *keys: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in keys)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Fold plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    """Train on [train_start, train_end], test on the following calendar year."""
    fold_index: int
    train_start: pd.Timestamp
    train_end: pd.Timestamp
    test_start: pd.Timestamp
    test_end: pd.Timestamp
    validation_fraction: float = 0.20

    @property
    def test_year(self) -> int:
        return self.test_start.year

    def to_dict(self) -> Dict[str, object]:
        return {
            "fold_index": self.fold_index,
            "train_start": self.train_start.strftime("%Y-%m-%d"),
            "train_end": self.train_end.strftime("%Y-%m-%d"),
            "test_start": self.test_start.strftime("%Y-%m-%d"),
            "test_end": self.test_end.strftime("%Y-%m-%d"),
            "validation_fraction": self.validation_fraction,
        }


def plan_folds(
    calendar: Optional[pd.DatetimeIndex],
    first_test_year: int,
    last_test_year: int,
    train_start: int,
    validation_fraction: float = 0.20,
) -> List[FoldPlan]:
    """One expanding-window fold per test year."""
    if not train_start < first_test_year <= last_test_year:
        raise InvalidSpan(
            f"require train_start < first_test_year <= last_test_year, "
            f"got {train_start}, {first_test_year}, {last_test_year}"
        )
    folds = [
        FoldPlan(
            fold_index=k,
            train_start=pd.Timestamp(train_start, 1, 1),
            train_end=pd.Timestamp(year - 1, 12, 31),
            test_start=pd.Timestamp(year, 1, 1),
            test_end=pd.Timestamp(year, 12, 31),
            validation_fraction=validation_fraction,
        )
        for k, year in enumerate(range(first_test_year, last_test_year + 1))
    ]
    if calendar is not None and len(calendar):
        for fold in folds:
            if not ((calendar >= fold.test_start) & (calendar <= fold.test_end)).any():
                logger.warning(f"fold {fold.fold_index}: calendar has no dates in test year {fold.test_year}")
    return folds


def fold_plan_hash(folds: Sequence[FoldPlan]) -> str:
    payload = json.dumps([f.to_dict() for f in folds], sort_keys=True)
    return hashlib.sha1(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class FoldSplit:
    """Calendar positions of the train, validation and test dates of one fold."""
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def split_positions(calendar: pd.DatetimeIndex, fold: FoldPlan) -> FoldSplit:
    """The validation split is the chronologically last share of the train span."""
    span = np.flatnonzero((calendar >= fold.train_start) & (calendar <= fold.train_end))
    if len(span) < 4:
        raise NoValidData(f"fold {fold.fold_index}: only {len(span)} train dates")
    n_val = min(len(span) - 2, max(2, int(round(len(span) * fold.validation_fraction))))
    test = np.flatnonzero((calendar >= fold.test_start) & (calendar <= fold.test_end))
    return FoldSplit(span[:-n_val], span[-n_val:], test)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Stop after `patience` consecutive epochs without a strictly lower loss."""

    def __init__(self, patience: int = 25):
        self.patience = patience
        self.best_loss = float("inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, epoch: int, loss: float) -> bool:
        """Record one epoch; True if it is the new best."""
        if np.isfinite(loss) and loss < self.best_loss:
            self.best_loss = float(loss)
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class FoldData:
    """Batches of one fold, shared by every grid point (lookback is not a grid axis)."""
    split: FoldSplit
    train_batches: List[Batch]
    validation: Batch


def prepare_fold(
    panel: FeaturePanel,
    fold: FoldPlan,
    lookback: int,
    settings: BacktestSettings,
    sigma_target: float = 0.10,
    target_horizon: int = 21,
) -> FoldData:
    """
    Cut the train split into contiguous batches of `batch_len` decision dates.

    A decision date is used only when its next-day return lies inside the
    same split; targets whose horizon crosses the split end are dropped.
    """
    split = split_positions(panel.dates, fold)
    window_ok = window_valid(panel.valid_mask, lookback)

    def batch(positions: np.ndarray, split_end: int) -> Batch:
        return build_batch(
            panel, positions, lookback, split_end, target_horizon, sigma_target, settings.tau, window_ok
        )

    train_end = int(split.train[-1]) + 1
    chunks = [split.train[s:s + settings.batch_len] for s in range(0, len(split.train), settings.batch_len)]
    train_batches = [b for b in (batch(c, train_end) for c in chunks) if int(b.active.any(dim=0).sum()) >= 2]
    validation = batch(split.validation, int(split.validation[-1]) + 1)

    if not train_batches:
        raise NoValidData(f"fold {fold.fold_index}: no train batch with 2 or more active dates")
    if int(validation.active.any(dim=0).sum()) < 2:
        raise NoValidData(f"fold {fold.fold_index}: validation split has fewer than 2 active dates")
    logger.debug(
        f"fold {fold.fold_index}: {len(train_batches)} train batches, "
        f"{validation.n_entries} validation entries"
    )
    return FoldData(split, train_batches, validation)


@dataclass
class TrainRunResult:
    config: ModelConfig
    grid_index: int
    best_epoch: int
    best_validation_loss: float
    initial_validation_loss: float
    validation_loss_curve: List[float]
    train_loss_curve: List[float]
    train_sharpe_curve: List[float]
    diverged: bool
    n_params: int
    seed: int
    wall_time: float
    state_dict: Optional[Dict[str, torch.Tensor]] = field(default=None, repr=False)
    checkpoint: Optional[str] = None

    def to_dict(self) -> Dict[str, object]:
        return {
            "config": self.config.model_dump(mode="json", by_alias=True),
            "grid_index": self.grid_index,
            "best_epoch": self.best_epoch,
            "best_validation_loss": _json_float(self.best_validation_loss),
            "initial_validation_loss": _json_float(self.initial_validation_loss),
            "validation_loss_curve": [_json_float(v) for v in self.validation_loss_curve],
            "train_loss_curve": [_json_float(v) for v in self.train_loss_curve],
            "train_sharpe_curve": [_json_float(v) for v in self.train_sharpe_curve],
            "diverged": self.diverged,
            "n_params": self.n_params,
            "seed": self.seed,
            "wall_time": round(self.wall_time, 3),
            "checkpoint": self.checkpoint,
        }


def _json_float(x: float) -> Optional[float]:
    return float(x) if np.isfinite(x) else None


def evaluate(model: MtlModel, batch: Batch) -> float:
    """Total loss with dropout off and no graph."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return float(total_loss(model, batch, chunk_size=INFERENCE_CHUNK).total)
    except TooFewObservations:
        return float("inf")
    finally:
        model.train(was_training)


def train_fold(
    panel: FeaturePanel,
    fold: FoldPlan,
    config: ModelConfig,
    settings: BacktestSettings,
    sigma_target: float = 0.10,
    target_horizon: int = 21,
    grid_index: int = 0,
    fold_data: Optional[FoldData] = None,
) -> TrainRunResult:
    """
    Train one model on a fold's train split with early stopping.

    Args:
        panel: Feature panel covering the fold
        fold: Fold plan
        config: Model hyper-parameters
        settings: Protocol settings (epochs, patience, batch length, tau, seed)
        grid_index: Position of `config` in the fold's candidate list (seeds)
        fold_data: Pre-built batches, shared across grid points

    Returns:
        TrainRunResult holding the best-validation parameters
    """
    started = time.perf_counter()
    data = fold_data or prepare_fold(panel, fold, config.lookback_len, settings, sigma_target, target_horizon)
    k = fold.fold_index
    init_seed = derive_seed(settings.master_seed, k, grid_index, SEED_INIT)

    model = MtlModel(panel.n_features, config, seed=init_seed)
    generator = make_generator(derive_seed(settings.master_seed, k, grid_index, SEED_DROPOUT))
    rng = np.random.default_rng(derive_seed(settings.master_seed, k, grid_index, SEED_BATCHES))
    optimizer = make_optimizer(model.parameters(), lr=config.learning_rate)

    initial_val = evaluate(model, data.validation)
    stopper = EarlyStopping(settings.patience)
    best_state = copy.deepcopy(model.state_dict())
    val_curve: List[float] = []
    train_curve: List[float] = []
    sharpe_curve: List[float] = []
    diverged = False

    for epoch in range(1, settings.max_epochs + 1):
        model.train()
        totals, sharpes = [], []
        for j in rng.permutation(len(data.train_batches)):
            optimizer.zero_grad()
            out = total_loss(model, data.train_batches[j], generator)
            if not torch.isfinite(out.total):
                diverged = True
                break
            backward(out.total)
            clip_grad_norm(model.parameters(), config.max_grad_norm)
            adam_step(optimizer)
            totals.append(float(out.total))
            sharpes.append(float(out.sharpe))

        val = float("inf") if diverged else evaluate(model, data.validation)
        if not np.isfinite(val):
            diverged = True
        train_loss = float(np.mean(totals)) if totals else float("nan")
        train_sharpe = float(np.mean(sharpes)) if sharpes else float("nan")
        train_curve.append(train_loss)
        sharpe_curve.append(train_sharpe)
        val_curve.append(val)
        logger.info(
            f"epoch fold={k} grid={grid_index} epoch={epoch} train_loss={train_loss:.10g} "
            f"train_sharpe_loss={train_sharpe:.10g} val_loss={val:.10g}"
        )
        if diverged:
            logger.warning(f"fold={k} grid={grid_index}: training diverged at epoch {epoch}")
            break
        if stopper.step(epoch, val):
            best_state = copy.deepcopy(model.state_dict())
        if stopper.should_stop:
            logger.info(f"fold={k} grid={grid_index}: early stop at epoch {epoch}, best epoch {stopper.best_epoch}")
            break

    model.load_state_dict(best_state)
    return TrainRunResult(
        config=config,
        grid_index=grid_index,
        best_epoch=stopper.best_epoch,
        best_validation_loss=float("inf") if diverged else stopper.best_loss,
        initial_validation_loss=initial_val,
        validation_loss_curve=val_curve,
        train_loss_curve=train_curve,
        train_sharpe_curve=sharpe_curve,
        diverged=diverged,
        n_params=model.n_params,
        seed=init_seed,
        wall_time=time.perf_counter() - started,
        state_dict=best_state,
    )


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

def grid_candidates(
    grid: HyperGrid, base: ModelConfig, budget: str = "random", k: int = 64, seed: int = 0
) -> List[ModelConfig]:
    """Exhaustive grid order, or k points sampled without replacement."""
    axes = grid.axes()
    if budget == "exhaustive":
        points = list(ParameterGrid(axes))
    else:
        points = list(ParameterSampler(axes, n_iter=min(k, grid.size), random_state=seed))
    base_fields = base.model_dump(by_alias=True)
    return [ModelConfig.model_validate({**base_fields, **point}) for point in points]


@dataclass
class GridSearchResult:
    best: TrainRunResult
    runs: List[TrainRunResult]


def _selection_key(run: TrainRunResult):
    loss = run.best_validation_loss if np.isfinite(run.best_validation_loss) else float("inf")
    return (loss, run.n_params, run.config.learning_rate, run.grid_index)


def grid_search(
    panel: FeaturePanel,
    fold: FoldPlan,
    grid: HyperGrid,
    base: ModelConfig,
    settings: BacktestSettings,
    sigma_target: float = 0.10,
    target_horizon: int = 21,
    fold_data: Optional[FoldData] = None,
) -> GridSearchResult:
    """
    Train every candidate on the fold and keep the lowest validation loss.

    Ties go to fewer parameters, then the lower learning rate, then grid order.
    Candidates run on a joblib thread pool of `settings.workers`.
    """
    candidates = grid_candidates(
        grid, base, settings.grid_budget, settings.grid_k,
        derive_seed(settings.master_seed, fold.fold_index, 0, SEED_GRID),
    )
    data = fold_data or prepare_fold(panel, fold, base.lookback_len, settings, sigma_target, target_horizon)
    logger.info(f"fold={fold.fold_index}: grid search over {len(candidates)} candidates")
    runs = Parallel(n_jobs=settings.workers, prefer="threads")(
        delayed(train_fold)(panel, fold, cfg, settings, sigma_target, target_horizon, g, data)
        for g, cfg in enumerate(candidates)
    )
    best = min(runs, key=_selection_key)
    logger.info(
        f"fold={fold.fold_index}: selected grid={best.grid_index} "
        f"val_loss={best.best_validation_loss:.10g} best_epoch={best.best_epoch}"
    )
    return GridSearchResult(best, list(runs))


# ---------------------------------------------------------------------------
# Backtests
# ---------------------------------------------------------------------------

@dataclass
class FoldRecord:
    plan: FoldPlan
    result: Optional[TrainRunResult] = None
    n_candidates: int = 0

    def to_dict(self) -> Dict[str, object]:
        out = self.plan.to_dict()
        out["n_candidates"] = self.n_candidates
        if self.result is not None:
            out["selected"] = self.result.to_dict()
        return out


@dataclass
class BacktestRun:
    """
    returns / gross_returns are indexed by realization date and tile the
    union of the test years; weights and turnover by decision date.
    """
    tag: str
    returns: pd.Series
    gross_returns: pd.Series
    weights: pd.DataFrame
    turnover: pd.Series
    tau: float
    sigma_target: float
    master_seed: int
    fold_plan_hash: str
    folds: List[FoldRecord] = field(default_factory=list)
    aux_tasks: Optional[List[str]] = None
    interrupted: bool = False


def _decision_positions(calendar: pd.DatetimeIndex, folds: Sequence[FoldPlan]) -> Dict[int, np.ndarray]:
    """Per fold, the dates t whose next calendar date falls in the test year."""
    out = {}
    for fold in folds:
        test = np.flatnonzero((calendar >= fold.test_start) & (calendar <= fold.test_end))
        out[fold.fold_index] = test[test >= 1] - 1
    return out


def _account(
    tag: str,
    calendar: pd.DatetimeIndex,
    asset_ids: List[str],
    positions: np.ndarray,
    weights: np.ndarray,
    next_returns: np.ndarray,
    active: np.ndarray,
    sigma_target: float,
    tau: float,
):
    """Net and gross stitched returns for decision dates at `positions`."""
    w = np.where(active, weights, 0.0)
    net = portfolio_return_net(w, next_returns, None, sigma_target, tau, active).numpy()
    gross = portfolio_return_net(w, next_returns, None, sigma_target, 0.0, active).numpy()
    realized = calendar[positions + 1]
    lagged = np.concatenate([np.zeros((w.shape[0], 1)), w], axis=1)[:, :-1]
    decided = calendar[positions]
    weight_frame = pd.DataFrame(np.where(active, weights, np.nan).T, index=decided, columns=asset_ids)
    weight_frame.index.name = "date"
    turnover = pd.Series(np.abs(w - lagged).sum(axis=0), index=decided, name="turnover")
    return (
        pd.Series(net, index=realized, name=tag),
        pd.Series(gross, index=realized, name=tag),
        weight_frame,
        turnover,
    )


def _baseline_run(
    universe: Universe, tag: str, config: RunConfig, folds: List[FoldPlan]
) -> BacktestRun:
    vol_target = config.strategy.vol_target
    output = tsmom_portfolio(universe, vol_target) if tag == "TSMOM" else cta_mom_portfolio(universe, vol_target)
    positions = np.concatenate(list(_decision_positions(universe.calendar, folds).values()))
    sigma = vol_target.sigma_target
    w = output.weights.to_numpy().T / sigma
    nxt = output.next_returns.to_numpy().T
    active = np.isfinite(w) & np.isfinite(nxt)
    net, gross, weights, turnover = _account(
        tag, universe.calendar, universe.asset_ids, positions,
        w[:, positions], nxt[:, positions], active[:, positions], sigma, config.backtest.tau,
    )
    return BacktestRun(
        tag, net, gross, weights, turnover, config.backtest.tau, sigma,
        config.backtest.master_seed, fold_plan_hash(folds), [FoldRecord(f) for f in folds],
    )


def run_slug(tag: str) -> str:
    return re.sub(r"[^A-Za-z0-9_-]+", "_", tag)


def run_backtest(
    universe: Universe,
    tag: str,
    config: RunConfig,
    panel: Optional[FeaturePanel] = None,
    aux_tasks: Optional[Sequence[VolEstimatorKind]] = None,
    run_dir: Optional[Union[str, Path]] = None,
) -> BacktestRun:
    """
    Out-of-sample backtest of one strategy over every fold.

    Baselines are priced directly. Neural strategies run grid search and
    training per fold; `aux_tasks` overrides the configured auxiliary
    tasks. A KeyboardInterrupt between folds returns the completed folds
    with `interrupted=True`.
    """
    bt = config.backtest
    folds = plan_folds(universe.calendar, bt.first_test_year, bt.last_test_year, bt.train_start,
                       bt.validation_fraction)
    if tag in BASELINE_TAGS:
        with run_context(tag):
            logger.info(f"{tag}: pricing baseline over {len(folds)} folds")
            return _baseline_run(universe, tag, config, folds)

    strategy = config.strategy
    base = strategy.model
    if aux_tasks is not None:
        base = base.model_copy(update={"active_aux_tasks": [k for k in TARGET_KINDS if k in set(aux_tasks)]})
    panel = panel if panel is not None else build_panel(universe, strategy.features)
    sigma = strategy.vol_target.sigma_target
    horizon = strategy.features.target_horizon
    calendar = panel.dates
    window_ok = window_valid(panel.valid_mask, base.lookback_len)
    decisions = _decision_positions(calendar, folds)

    records: List[FoldRecord] = []
    blocks = []
    interrupted = False
    try:
        for fold in folds:
            with run_context(tag, fold.fold_index):
                positions = decisions[fold.fold_index]
                if not len(positions):
                    records.append(FoldRecord(fold))
                    continue
                data = prepare_fold(panel, fold, base.lookback_len, bt, sigma, horizon)
                search = grid_search(panel, fold, strategy.grid, base, bt, sigma, horizon, data)
                best = search.best
                model = MtlModel(panel.n_features, best.config)
                model.load_state_dict(best.state_dict)
                model.eval()
                if run_dir is not None:
                    path = Path(run_dir) / "checkpoints" / f"{run_slug(tag)}_fold{fold.fold_index:02d}.pt"
                    save_checkpoint(path, model, best.seed, best.config.model_dump(mode="json", by_alias=True))
                    best.checkpoint = str(path)

                batch = build_batch(
                    panel, positions, base.lookback_len, len(calendar), horizon, sigma, bt.tau, window_ok
                )
                weights = np.zeros((len(panel.asset_ids), len(positions)))
                if batch.n_entries:
                    with torch.no_grad():
                        w, _ = run_model(model, batch.windows, chunk_size=INFERENCE_CHUNK)
                    weights[batch.asset_index.numpy(), batch.date_index.numpy()] = w.numpy()
                blocks.append((positions, weights, batch.next_returns.numpy(), batch.active.numpy()))
                records.append(FoldRecord(fold, best, len(search.runs)))
    except KeyboardInterrupt:
        interrupted = True
        logger.warning(f"{tag}: interrupted, keeping {len(blocks)} completed folds")

    if blocks:
        positions = np.concatenate([b[0] for b in blocks])
        weights, nxt, active = (np.concatenate([b[i] for b in blocks], axis=1) for i in (1, 2, 3))
    else:
        positions = np.zeros(0, dtype=np.int64)
        weights = nxt = np.zeros((len(panel.asset_ids), 0))
        active = np.zeros((len(panel.asset_ids), 0), dtype=bool)
    net, gross, weight_frame, turnover = _account(
        tag, calendar, panel.asset_ids, positions, weights, nxt, active, sigma, bt.tau
    )
    return BacktestRun(
        tag, net, gross, weight_frame, turnover, bt.tau, sigma, bt.master_seed, fold_plan_hash(folds),
        records, [k.value for k in base.active_aux_tasks], interrupted,
    )


DEFAULT_ABLATION_SUBSETS: List[List[VolEstimatorKind]] = (
    [[]] + [[kind] for kind in TARGET_KINDS] + [list(TARGET_KINDS)]
)


def ablation_tag(subset: Sequence[VolEstimatorKind]) -> str:
    kinds = [k for k in TARGET_KINDS if k in set(subset)]
    if not kinds:
        return ABLATION_PREFIX + "none"
    if len(kinds) == len(TARGET_KINDS):
        return ABLATION_PREFIX + "all"
    return ABLATION_PREFIX + "+".join(k.value for k in kinds)


def run_ablation(
    universe: Universe,
    subsets: Optional[Sequence[Sequence[VolEstimatorKind]]],
    config: RunConfig,
    panel: Optional[FeaturePanel] = None,
    run_dir: Optional[Union[str, Path]] = None,
) -> Dict[str, BacktestRun]:
    """One neural backtest per aux-task subset, sharing fold plans, panel and seeds."""
    subsets = DEFAULT_ABLATION_SUBSETS if subsets is None else list(subsets)
    if not subsets:
        raise InvalidSpec("at least one subset is required", field="strategy.ablation_subsets")
    panel = panel if panel is not None else build_panel(universe, config.strategy.features)
    runs: Dict[str, BacktestRun] = {}
    for subset in subsets:
        tag = ablation_tag(subset)
        logger.info(f"ablation run {tag}")
        runs[tag] = run_backtest(universe, tag, config, panel, subset, run_dir)
        if runs[tag].interrupted:
            break
    return runs


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------

def write_run(run: BacktestRun, run_dir: Union[str, Path]) -> Path:
    """returns.csv, weights.csv and meta.json under <run_dir>/runs/<tag>/."""
    outdir = Path(run_dir) / "runs" / run_slug(run.tag)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        returns = pd.DataFrame({"net": run.returns, "gross": run.gross_returns})
        returns.index = returns.index.strftime("%Y-%m-%d")
        returns.index.name = "date"
        returns.to_csv(outdir / "returns.csv", float_format="%.17g", lineterminator="\n")

        weights = run.weights.stack().rename("weight").reset_index()
        weights.columns = ["date", "asset", "weight"]
        weights["date"] = weights["date"].dt.strftime("%Y-%m-%d")
        weights.to_csv(outdir / "weights.csv", index=False, float_format="%.10g", lineterminator="\n")

        meta = {
            "tag": run.tag,
            "tau": run.tau,
            "sigma_target": run.sigma_target,
            "master_seed": run.master_seed,
            "fold_plan_hash": run.fold_plan_hash,
            "aux_tasks": run.aux_tasks,
            "interrupted": run.interrupted,
            "folds": [f.to_dict() for f in run.folds],
        }
        (outdir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise ReportIoError(f"cannot write run {run.tag} to {outdir}: {e}") from e
    return outdir


def read_run(path: Union[str, Path]) -> BacktestRun:
    """Load a run written by write_run (returns, weights and metadata; no model state)."""
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
        returns = pd.read_csv(
            path / "returns.csv", parse_dates=["date"], index_col="date", float_precision="round_trip"
        )
        weights = pd.read_csv(path / "weights.csv", parse_dates=["date"])
    except (OSError, ValueError, KeyError) as e:
        raise ReportIoError(f"cannot read run directory {path}: {e}") from e
    weight_frame = weights.pivot(index="date", columns="asset", values="weight")
    weight_frame.columns.name = None
    tag = meta["tag"]
    folds = [
        FoldRecord(
            FoldPlan(
                f["fold_index"], pd.Timestamp(f["train_start"]), pd.Timestamp(f["train_end"]),
                pd.Timestamp(f["test_start"]), pd.Timestamp(f["test_end"]), f["validation_fraction"],
            ),
            n_candidates=f.get("n_candidates", 0),
        )
        for f in meta.get("folds", [])
    ]
    return BacktestRun(
        tag=tag,
        returns=returns["net"].rename(tag),
        gross_returns=returns["gross"].rename(tag),
        weights=weight_frame,
        turnover=pd.Series(dtype=float, name="turnover"),
        tau=meta["tau"],
        sigma_target=meta["sigma_target"],
        master_seed=meta["master_seed"],
        fold_plan_hash=meta["fold_plan_hash"],
        folds=folds,
        aux_tasks=meta.get("aux_tasks"),
        interrupted=meta.get("interrupted", False),
    )


def read_runs(run_dir: Union[str, Path]) -> Dict[str, BacktestRun]:
    """All runs under <run_dir>/runs, in directory order."""
    root = Path(run_dir) / "runs"
    if not root.is_dir():
        raise ReportIoError(f"{run_dir} holds no runs/ directory")
    runs = [read_run(p) for p in sorted(root.iterdir()) if p.is_dir()]
    return {r.tag: r for r in runs}
