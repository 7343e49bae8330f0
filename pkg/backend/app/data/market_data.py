"""
Market data ingestion and synthetic market generation.

Loads dated OHLC+settle CSVs into validated AssetSeries, aligns several
series onto one trading calendar (Universe) and simulates futures-like
markets for self-contained runs.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from ..core.errors import (
    DuplicateAssetId,
    DuplicateDate,
    EmptyInput,
    InvalidSpec,
    MissingColumn,
    MissingDataFile,
    PriceInvariantViolation,
    UnparseableDate,
)
from ..schemas import CsvSchema, SyntheticSpec

logger = logging.getLogger(__name__)

PRICE_COLUMNS = ["open", "high", "low", "close", "settle"]
TRADING_DAYS = 252

FillPolicy = Literal["forward_fill", "drop_date"]


@dataclass(frozen=True)
class Bar:
    """One trading day of one asset."""
    date: pd.Timestamp
    open: float
    high: float
    low: float
    close: float
    settle: float

    def violations(self) -> List[str]:
        problems = []
        if min(self.open, self.high, self.low, self.close, self.settle) <= 0:
            problems.append("prices must be strictly positive")
        if self.low > min(self.open, self.close):
            problems.append("low above min(open, close)")
        if self.high < max(self.open, self.close):
            problems.append("high below max(open, close)")
        return problems


@dataclass(frozen=True)
class AssetSeries:
    """
    Date-ascending bar history of one asset.

    `bars` is indexed by a DatetimeIndex named "date" with the columns
    open, high, low, close, settle and a boolean `filled` flag marking
    bars repeated by the forward-fill policy.
    """
    asset_id: str
    bars: pd.DataFrame

    def __len__(self) -> int:
        return len(self.bars)

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.bars.index

    @property
    def settle(self) -> pd.Series:
        return self.bars["settle"]

    def bar(self, i: int) -> Bar:
        row = self.bars.iloc[i]
        return Bar(self.bars.index[i], *(float(row[c]) for c in PRICE_COLUMNS))

    def truncate(self, end) -> "AssetSeries":
        return AssetSeries(self.asset_id, self.bars.loc[:end])

    @classmethod
    def from_bars(cls, asset_id: str, bars: Iterable[Bar]) -> "AssetSeries":
        bars = list(bars)
        frame = pd.DataFrame(
            {c: [getattr(b, c) for b in bars] for c in PRICE_COLUMNS},
            index=pd.DatetimeIndex([b.date for b in bars], name="date"),
        )
        frame["filled"] = False
        return cls(asset_id, _validated(frame))


@dataclass(frozen=True)
class Universe:
    """Assets aligned on a shared sorted calendar; read-only after construction."""
    assets: Dict[str, AssetSeries]
    calendar: pd.DatetimeIndex
    fill_policy: str = "forward_fill"
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def asset_ids(self) -> List[str]:
        return list(self.assets)

    def panel(self, column: str = "settle") -> pd.DataFrame:
        """Dates x assets frame of one bar field, NaN before an asset starts."""
        return pd.DataFrame(
            {aid: s.bars[column] for aid, s in self.assets.items()}, index=self.calendar
        )

    def truncate(self, end) -> "Universe":
        end = pd.Timestamp(end)
        assets = {aid: s.truncate(end) for aid, s in self.assets.items()}
        assets = {aid: s for aid, s in assets.items() if len(s)}
        return Universe(assets, self.calendar[self.calendar <= end], self.fill_policy, dict(self.meta))


def _validated(frame: pd.DataFrame) -> pd.DataFrame:
    """Check bar invariants row by row; raise with every offending row."""
    prices = frame[PRICE_COLUMNS]
    bad_positive = (prices <= 0).any(axis=1) | prices.isna().any(axis=1)
    bad_low = frame["low"] > frame[["open", "close"]].min(axis=1)
    bad_high = frame["high"] < frame[["open", "close"]].max(axis=1)
    bad = np.flatnonzero((bad_positive | bad_low | bad_high).to_numpy())
    if bad.size:
        first = int(bad[0])
        reasons = []
        if bad_positive.iloc[first]:
            reasons.append("prices must be strictly positive")
        if bad_low.iloc[first]:
            reasons.append("low above min(open, close)")
        if bad_high.iloc[first]:
            reasons.append("high below max(open, close)")
        raise PriceInvariantViolation("; ".join(reasons), row=first, rows=[int(r) for r in bad])
    return frame


def load_csv(
    path: Union[str, Path],
    schema: Optional[CsvSchema] = None,
    asset_id: Optional[str] = None,
) -> AssetSeries:
    """
    Load one asset's bars from a CSV file.

    Rows are validated in file order (row numbers are 0-based data rows)
    and then sorted ascending by date.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.is_file():
        raise MissingDataFile(f"no such data file: {path}")
    raw = pd.read_csv(path, encoding="utf-8")

    columns = {}
    for canonical in ["date"] + PRICE_COLUMNS:
        name = getattr(schema, canonical)
        if name not in raw.columns:
            raise MissingColumn(name)
        columns[canonical] = name

    dates = pd.to_datetime(raw[columns["date"]], format="ISO8601", errors="coerce")
    unparsed = np.flatnonzero(dates.isna().to_numpy())
    if unparsed.size:
        raise UnparseableDate(
            f"cannot parse date '{raw[columns['date']].iloc[unparsed[0]]}'",
            row=int(unparsed[0]),
            rows=[int(r) for r in unparsed],
        )

    frame = pd.DataFrame(
        {c: pd.to_numeric(raw[columns[c]], errors="coerce").astype(float) for c in PRICE_COLUMNS}
    )
    frame.index = pd.DatetimeIndex(dates, name="date")
    frame = _validated(frame)

    duplicated = np.flatnonzero(frame.index.duplicated(keep="first"))
    if duplicated.size:
        raise DuplicateDate(
            f"duplicate date {frame.index[duplicated[0]].date()}",
            row=int(duplicated[0]),
            rows=[int(r) for r in duplicated],
        )

    frame = frame.sort_index(kind="mergesort")
    frame["filled"] = False
    series = AssetSeries(asset_id or path.stem, frame)
    logger.debug(f"Loaded {series.asset_id}: {len(series)} bars from {path}")
    return series


def write_csv(series: AssetSeries, path: Union[str, Path]) -> Path:
    """Write bars with ISO dates and 10 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = series.bars[PRICE_COLUMNS].copy()
    out.index = out.index.strftime("%Y-%m-%d")
    out.index.name = "date"
    out.to_csv(path, float_format="%.10g", lineterminator="\n")
    return path


def build_universe(series: Iterable[AssetSeries], fill_policy: FillPolicy = "forward_fill") -> Universe:
    """
    Align asset series on the union calendar.

    forward_fill: an asset missing a calendar date after its first bar
    repeats its previous bar, flagged `filled` (its settle log return is 0).
    drop_date: calendar dates where any already-started asset lacks a bar
    are removed from the calendar and from every asset.
    """
    series = list(series)
    if not series:
        raise EmptyInput("build_universe needs at least one series")
    seen = set()
    for s in series:
        if s.asset_id in seen:
            raise DuplicateAssetId(f"asset_id '{s.asset_id}' appears twice")
        seen.add(s.asset_id)

    calendar = pd.DatetimeIndex(sorted(set().union(*(s.dates for s in series))), name="date")

    if fill_policy == "drop_date":
        keep = np.ones(len(calendar), dtype=bool)
        for s in series:
            started = calendar >= s.dates[0]
            keep &= ~started | calendar.isin(s.dates)
        calendar = calendar[keep]

    assets = {}
    for s in series:
        own = calendar[calendar >= s.dates[0]]
        frame = s.bars.reindex(own)
        filled = frame["settle"].isna().to_numpy()
        if filled.any():
            frame = frame.ffill()
            logger.info(f"{s.asset_id}: forward-filled {int(filled.sum())} calendar dates")
        frame["filled"] = filled | s.bars["filled"].reindex(own, fill_value=False).to_numpy(dtype=bool)
        assets[s.asset_id] = AssetSeries(s.asset_id, frame)

    return Universe(assets, calendar, fill_policy)


def generate_synthetic(spec: Union[SyntheticSpec, dict], seed: int) -> Universe:
    """
    Simulate a futures-like universe.

    Settles follow a geometric random walk whose drift sign switches between
    trend regimes (kept with probability `regime_persistence` each day).
    Opens gap from the previous settle by the overnight share of variance;
    highs and lows are drawn from the Brownian-bridge extremes of the
    intraday move, so every bar invariant holds by construction.
    """
    if not isinstance(spec, SyntheticSpec):
        try:
            spec = SyntheticSpec.model_validate(spec)
        except ValidationError as e:
            err = e.errors()[0]
            raise InvalidSpec(err["msg"], field=".".join(str(p) for p in err["loc"]) or None) from e

    rng = np.random.default_rng(seed)
    n = spec.n_days
    dates = pd.bdate_range(start=pd.Timestamp(spec.start_date), periods=n, name="date")
    drifts = spec.per_asset("drift")
    vols = spec.per_asset("volatility")

    series = []
    for a in range(spec.n_assets):
        mu, sigma = drifts[a], vols[a]
        var_day = sigma ** 2 / TRADING_DAYS
        var_on = spec.overnight_fraction * var_day
        var_id = var_day - var_on

        if spec.regime_persistence is None:
            regime = np.ones(n)
        else:
            flips = rng.random(n) >= spec.regime_persistence
            flips[0] = False
            regime = np.where(np.cumsum(flips) % 2 == 0, 1.0, -1.0)

        overnight = rng.standard_normal(n) * np.sqrt(var_on)
        overnight[0] = 0.0
        intraday = (regime * mu - 0.5 * sigma ** 2) / TRADING_DAYS + rng.standard_normal(n) * np.sqrt(var_id)

        log_close = np.log(spec.initial_price) + np.cumsum(overnight + intraday)
        log_open = log_close - intraday

        # extremes of a Brownian bridge from 0 to x with variance var_id
        u_up = rng.random(n)
        u_dn = rng.random(n)
        up = 0.5 * (intraday + np.sqrt(intraday ** 2 - 2.0 * var_id * np.log1p(-u_up)))
        dn = 0.5 * (intraday - np.sqrt(intraday ** 2 - 2.0 * var_id * np.log1p(-u_dn)))

        close = np.exp(log_close)
        frame = pd.DataFrame(
            {
                "open": np.exp(log_open),
                "high": np.maximum(np.exp(log_open + up), np.maximum(np.exp(log_open), close)),
                "low": np.minimum(np.exp(log_open + dn), np.minimum(np.exp(log_open), close)),
                "close": close,
                "settle": close,
            },
            index=dates,
        )
        frame["filled"] = False
        series.append(AssetSeries(f"SYN{a:02d}", _validated(frame)))

    universe = build_universe(series)
    universe.meta.update({"synthetic": spec.model_dump(mode="json"), "seed": seed})
    logger.info(f"Generated synthetic universe: {spec.n_assets} assets x {n} days (seed={seed})")
    return universe


def write_universe(universe: Universe, outdir: Union[str, Path]) -> List[Path]:
    """One CSV per asset, named <asset_id>.csv."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    return [write_csv(s, outdir / f"{aid}.csv") for aid, s in universe.assets.items()]
