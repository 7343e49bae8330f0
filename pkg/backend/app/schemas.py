"""
Pydantic schemas for the run-config file and report records.

A single JSON document (RunConfig) drives every CLI subcommand; the
hyper-parameter search space defaults to the full 49152-point grid.
"""

from datetime import date
from enum import Enum
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class VolEstimatorKind(str, Enum):
    """Volatility estimators; the first five are auxiliary-task targets."""

    CLOSE_TO_CLOSE = "ctc"
    PARKINSON = "p"
    GARMAN_KLASS = "gk"
    ROGERS_SATCHELL = "rs"
    YANG_ZHANG = "yz"
    EWMA_EX_ANTE = "ewma"


# Fixed order of the auxiliary targets in panels, heads and CSV columns
TARGET_KINDS: List[VolEstimatorKind] = [
    VolEstimatorKind.CLOSE_TO_CLOSE,
    VolEstimatorKind.PARKINSON,
    VolEstimatorKind.GARMAN_KLASS,
    VolEstimatorKind.ROGERS_SATCHELL,
    VolEstimatorKind.YANG_ZHANG,
]


# ---------------------------------------------------------------------------
# Data section
# ---------------------------------------------------------------------------

class CsvSchema(BaseModel):
    """Maps canonical bar fields to CSV column names."""
    date: str = "date"
    open: str = "open"
    high: str = "high"
    low: str = "low"
    close: str = "close"
    settle: str = "settle"


class SyntheticSpec(BaseModel):
    """Geometric random walk market with optional trend-regime switching."""
    n_assets: int = Field(6, ge=1)
    n_days: int = Field(2016, ge=2)
    start_date: date = date(2000, 1, 3)
    drift: Union[float, List[float]] = Field(0.0, description="Annualized drift per asset")
    volatility: Union[float, List[float]] = Field(0.15, description="Annualized volatility per asset")
    regime_persistence: Optional[float] = Field(
        None, ge=0.0, le=1.0,
        description="Daily probability of keeping the trend sign; None disables switching",
    )
    overnight_fraction: float = Field(0.0, ge=0.0, lt=1.0, description="Share of daily variance overnight")
    initial_price: float = Field(100.0, gt=0.0)

    @model_validator(mode="after")
    def _check_per_asset_lists(self):
        for name in ("drift", "volatility"):
            value = getattr(self, name)
            if isinstance(value, list) and len(value) != self.n_assets:
                raise ValueError(f"{name} must be a scalar or a list of n_assets={self.n_assets} values")
        vols = self.volatility if isinstance(self.volatility, list) else [self.volatility]
        if any(v < 0 for v in vols):
            raise ValueError("volatility must be non-negative")
        return self

    def per_asset(self, name: str) -> List[float]:
        value = getattr(self, name)
        return list(value) if isinstance(value, list) else [float(value)] * self.n_assets


class DataSection(BaseModel):
    csv_paths: Optional[List[str]] = None
    csv_schema: CsvSchema = Field(default_factory=CsvSchema)
    synthetic: Optional[SyntheticSpec] = None
    seed: Optional[int] = None
    fill_policy: Literal["forward_fill", "drop_date"] = "forward_fill"

    @model_validator(mode="after")
    def _exactly_one_source(self):
        if (self.csv_paths is None) == (self.synthetic is None):
            raise ValueError("exactly one of data.csv_paths or data.synthetic must be set")
        if self.synthetic is not None and self.seed is None:
            raise ValueError("data.seed is required with data.synthetic")
        return self


# ---------------------------------------------------------------------------
# Strategy section
# ---------------------------------------------------------------------------

class VolTargetConfig(BaseModel):
    sigma_target: float = Field(0.10, gt=0.0)
    estimator: VolEstimatorKind = VolEstimatorKind.EWMA_EX_ANTE
    span: int = Field(60, ge=2)


class FeatureSpec(BaseModel):
    return_horizons: List[int] = Field(default_factory=lambda: [1, 21, 63, 126, 252])
    rv_horizons: List[int] = Field(default_factory=lambda: [5, 21, 63, 126, 252])
    volvol_window: int = Field(21, ge=1)
    zscore_window: int = Field(21, ge=2)
    target_horizon: int = Field(21, ge=2)

    @field_validator("return_horizons", "rv_horizons")
    @classmethod
    def _positive_nonempty(cls, value: List[int]) -> List[int]:
        if not value or any(h < 1 for h in value):
            raise ValueError("horizons must be a nonempty list of integers >= 1")
        return value

    @property
    def n_features(self) -> int:
        return len(self.return_horizons) + 2 * len(self.rv_horizons)

    @property
    def max_horizon(self) -> int:
        return max(self.return_horizons + self.rv_horizons)


class ModelConfig(BaseModel):
    """One point of the hyper-parameter space plus the loss weights."""
    model_config = ConfigDict(populate_by_name=True)

    n_lstm_layers: int = Field(1, ge=1)
    lstm_hidden: int = Field(32, ge=1)
    lstm_dropout: float = Field(0.10, ge=0.0, lt=1.0)
    n_mlp_layers: int = Field(1, ge=1)
    mlp_hidden: int = Field(32, ge=1)
    mlp_dropout: float = Field(0.10, ge=0.0, lt=1.0)
    learning_rate: float = Field(1e-4, gt=0.0)
    max_grad_norm: float = Field(1.0, gt=0.0)
    lookback_len: int = Field(63, ge=1)
    active_aux_tasks: List[VolEstimatorKind] = Field(default_factory=lambda: list(TARGET_KINDS))
    mu: float = Field(0.5, ge=0.0, le=1.0)
    lam: float = Field(0.5, ge=0.0, le=1.0, alias="lambda")

    @field_validator("active_aux_tasks")
    @classmethod
    def _aux_tasks(cls, value: List[VolEstimatorKind]) -> List[VolEstimatorKind]:
        if VolEstimatorKind.EWMA_EX_ANTE in value:
            raise ValueError("the EWMA ex-ante estimator is not an auxiliary task")
        if len(set(value)) != len(value):
            raise ValueError("active_aux_tasks contains duplicates")
        # keep the canonical order regardless of how the subset was written
        return [k for k in TARGET_KINDS if k in value]

    @model_validator(mode="after")
    def _weights_sum_to_one(self):
        if abs(self.mu + self.lam - 1.0) > 1e-12:
            raise ValueError("mu + lambda must equal 1")
        return self


class HyperGrid(BaseModel):
    """Hyper-parameter search space, one list of candidate values per axis."""
    n_lstm_layers: List[int] = Field(default_factory=lambda: [1, 2, 3, 4])
    lstm_hidden: List[int] = Field(default_factory=lambda: [32, 64, 126, 252])
    lstm_dropout: List[float] = Field(default_factory=lambda: [0.05, 0.10, 0.15, 0.20])
    n_mlp_layers: List[int] = Field(default_factory=lambda: [1, 2, 3, 4])
    mlp_hidden: List[int] = Field(default_factory=lambda: [32, 64, 126, 252])
    mlp_dropout: List[float] = Field(default_factory=lambda: [0.05, 0.10, 0.15, 0.20])
    learning_rate: List[float] = Field(default_factory=lambda: [0.0001, 0.001, 0.01, 0.1])
    max_grad_norm: List[float] = Field(default_factory=lambda: [0.01, 0.1, 1.0])

    @model_validator(mode="after")
    def _nonempty(self):
        for name, values in self.axes().items():
            if not values:
                raise ValueError(f"grid axis '{name}' is empty")
        return self

    def axes(self) -> Dict[str, list]:
        return {name: list(getattr(self, name)) for name in type(self).model_fields}

    @property
    def size(self) -> int:
        total = 1
        for values in self.axes().values():
            total *= len(values)
        return total


class StrategySection(BaseModel):
    tags: List[Literal["TSMOM", "CTA-MOM", "MTL-TSMOM"]] = Field(
        default_factory=lambda: ["TSMOM", "CTA-MOM", "MTL-TSMOM"]
    )
    vol_target: VolTargetConfig = Field(default_factory=VolTargetConfig)
    features: FeatureSpec = Field(default_factory=FeatureSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    grid: HyperGrid = Field(default_factory=HyperGrid)
    ablation: bool = Field(False, description="Run the auxiliary-task ablation after the main backtests")
    ablation_subsets: Optional[List[List[VolEstimatorKind]]] = Field(
        None,
        description="Aux-task subsets for the ablation; [] means no aux task. "
        "None selects no-aux, each single task, and all tasks",
    )


# ---------------------------------------------------------------------------
# Backtest / output / report sections
# ---------------------------------------------------------------------------

class BacktestSettings(BaseModel):
    train_start: int = 1990
    first_test_year: int = 2000
    last_test_year: int = 2020
    validation_fraction: float = Field(0.20, gt=0.0, lt=1.0)
    tau: float = Field(0.0003, ge=0.0)
    grid_budget: Literal["exhaustive", "random"] = "random"
    grid_k: int = Field(64, ge=1)
    master_seed: int = 0
    workers: int = Field(1, ge=1)
    max_epochs: int = Field(200, ge=1)
    patience: int = Field(25, ge=1)
    batch_len: int = Field(126, ge=2)

    @model_validator(mode="after")
    def _span_order(self):
        if not self.train_start < self.first_test_year <= self.last_test_year:
            raise ValueError("require train_start < first_test_year <= last_test_year")
        return self


class OutputSection(BaseModel):
    directory: str = "run"


class CrisisWindow(BaseModel):
    name: str
    start: date
    end: date


class ReportSection(BaseModel):
    sigma_target: float = Field(0.10, gt=0.0)
    annualization: Literal["geometric", "arithmetic"] = "geometric"
    index_csv: Optional[str] = None
    rolling_window: int = Field(252, ge=2)
    include_gross: bool = False
    crisis_windows: List[CrisisWindow] = Field(
        default_factory=lambda: [
            CrisisWindow(name="Global Financial Crisis", start=date(2007, 10, 1), end=date(2009, 3, 31)),
            CrisisWindow(name="Coronavirus Crash", start=date(2020, 2, 14), end=date(2020, 4, 7)),
        ]
    )


class RunConfig(BaseModel):
    """Root of the run-config file."""
    data: DataSection
    strategy: StrategySection = Field(default_factory=StrategySection)
    backtest: BacktestSettings = Field(default_factory=BacktestSettings)
    output: OutputSection = Field(default_factory=OutputSection)
    report: ReportSection = Field(default_factory=ReportSection)


# ---------------------------------------------------------------------------
# Report records
# ---------------------------------------------------------------------------

class MetricReport(BaseModel):
    """Backtest metrics for one return stream."""
    annualized_return: float = Field(..., description="Fraction per year")
    sharpe: float
    sortino: float
    return_over_max_drawdown: float
    max_drawdown: float = Field(..., le=0.0)
    max_drawdown_period: int = Field(..., ge=0, description="Trading days, peak to trough")
    max_drawdown_recovery_period: Optional[int] = Field(
        ..., ge=0, description="Trading days, trough to recovery; None if not recovered"
    )
    proportion_positive: float = Field(..., ge=0.0, le=1.0)
