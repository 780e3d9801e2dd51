"""CSV ingestion, feature engineering, and the synthetic market generator.

Two file schemas are defined here and documented in the README:

``market.csv``
    One row per quarter-hour: timestamp (ISO 8601, UTC), system imbalance
    volume ``s_mw``, both regulation prices, intraday/day-ahead forecasts
    of solar, wind and load, day-ahead and intraday reference prices, and
    one reserve-ladder price column per volume of the reserve grid
    (``afrr_<MW>`` columns first, then ``mfrr_<MW>``).

``books.csv``
    Order-book snapshot rows: timestamp, side (``ask``/``bid``), price,
    volume; asks best-first ascending, bids best-first descending.

Timestamps are UTC everywhere; conversion from market-local time happens
at the boundary, before files reach this module. The synthetic generator
stands in for licensed market feeds: it plants known regime dynamics,
sensitivity slopes, and ladder anchors, and returns them so tests can
assert recovery.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .price_models import ReserveGrid
from .strategy import OrderBook

__all__ = [
    "DataValidationError",
    "BASE_COLUMNS",
    "MarketCsvSchema",
    "RawRecord",
    "MarketTick",
    "FeatureLayout",
    "FeatureSet",
    "load_market_csv",
    "write_market_csv",
    "load_order_books",
    "write_order_books",
    "build_features",
    "assemble_ticks",
    "load_dataset",
    "SyntheticConfig",
    "generate_synthetic_market",
    "synthetic_ticks",
    "write_synthetic_dataset",
    "resolve_data_dir",
    "DATA_DIR_ENV",
]

DATA_DIR_ENV = "IMBTRADER_DATA_DIR"

PERIOD = timedelta(minutes=15)

BASE_COLUMNS = [
    "timestamp",
    "s_mw",
    "p_mdp",
    "p_mip",
    "solar_id",
    "solar_da",
    "wind_id",
    "wind_da",
    "load_id",
    "load_da",
    "price_da",
    "price_id",
]


class DataValidationError(ValueError):
    """Input data violates the schema; the message carries row numbers."""


@dataclass(frozen=True)
class MarketCsvSchema:
    """Column contract of ``market.csv`` for a given reserve grid."""

    grid: ReserveGrid

    @property
    def columns(self) -> list[str]:
        return BASE_COLUMNS + self.grid.column_labels()


@dataclass
class RawRecord:
    """One validated quarter-hour of market data."""

    timestamp: datetime
    s: float
    p_mdp: float
    p_mip: float
    solar_id: float
    solar_da: float
    wind_id: float
    wind_da: float
    load_id: float
    load_da: float
    price_da: float
    price_id: float
    reserve_prices: np.ndarray

    @property
    def settlement_price(self) -> float:
        """Realized single price: downregulation on a surplus, else up."""
        return self.p_mdp if self.s >= 0.0 else self.p_mip


@dataclass
class MarketTick:
    """Feature-complete snapshot consumed by models and the backtester.

    ``z`` is the price-model input (the mixture-weight output) and is
    attached by the training pipeline; raw loading leaves it None.
    """

    timestamp: datetime
    x: np.ndarray
    o: np.ndarray
    s: float
    p_mdp: float
    p_mip: float
    book: OrderBook | None = None
    z: np.ndarray | None = None

    @property
    def settlement_price(self) -> float:
        return self.p_mdp if self.s >= 0.0 else self.p_mip


@dataclass(frozen=True)
class FeatureLayout:
    """Names and named column blocks of the mixture-weight feature vector."""

    names: tuple[str, ...]
    blocks: dict[str, tuple[int, int]]

    def block_slice(self, name: str) -> slice:
        start, end = self.blocks[name]
        return slice(start, end)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "blocks": {k: list(v) for k, v in self.blocks.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLayout":
        return cls(
            names=tuple(d["names"]),
            blocks={k: (int(v[0]), int(v[1])) for k, v in d["blocks"].items()},
        )


@dataclass
class FeatureSet:
    """Feature matrix aligned to ``records[first_index:]``."""

    x: np.ndarray
    first_index: int
    layout: FeatureLayout


def _parse_timestamp(text: str, row: int) -> datetime:
    try:
        ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise DataValidationError(f"row {row}: bad timestamp {text!r}: {exc}") from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def _validate_cadence(timestamps: list[datetime]) -> None:
    for i, ts in enumerate(timestamps):
        if ts.minute % 15 != 0 or ts.second != 0 or ts.microsecond != 0:
            raise DataValidationError(f"row {i + 2}: timestamp {ts.isoformat()} not quarter-hour aligned")
    for i, (a, b) in enumerate(zip(timestamps, timestamps[1:])):
        if b == a:
            raise DataValidationError(f"row {i + 3}: duplicate timestamp {b.isoformat()}")
        if b - a != PERIOD:
            raise DataValidationError(
                f"row {i + 3}: gap or disorder between {a.isoformat()} and {b.isoformat()}"
            )


def load_market_csv(path, schema: MarketCsvSchema) -> list[RawRecord]:
    """Read and validate a ``market.csv`` file.

    Raises ``DataValidationError`` with the offending row number on header
    mismatches, unparseable numbers, misaligned timestamps, duplicates,
    or gaps in the quarter-hour cadence.
    """
    path = Path(path)
    expected = schema.columns
    records: list[RawRecord] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise DataValidationError(
                f"{path.name}: header mismatch; expected {expected}, got {header}"
            )
        n_reserve = schema.grid.size
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DataValidationError(f"row {row_no}: expected {len(expected)} fields, got {len(row)}")
            ts = _parse_timestamp(row[0], row_no)
            try:
                numbers = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataValidationError(f"row {row_no}: unparseable number: {exc}") from None
            if not all(math.isfinite(v) for v in numbers):
                raise DataValidationError(f"row {row_no}: non-finite value")
            records.append(
                RawRecord(
                    timestamp=ts,
                    s=numbers[0],
                    p_mdp=numbers[1],
                    p_mip=numbers[2],
                    solar_id=numbers[3],
                    solar_da=numbers[4],
                    wind_id=numbers[5],
                    wind_da=numbers[6],
                    load_id=numbers[7],
                    load_da=numbers[8],
                    price_da=numbers[9],
                    price_id=numbers[10],
                    reserve_prices=np.array(numbers[11 : 11 + n_reserve]),
                )
            )
    _validate_cadence([r.timestamp for r in records])
    return records


def write_market_csv(path, records: list[RawRecord], schema: MarketCsvSchema) -> None:
    """Write records in the documented schema; floats keep full precision."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(schema.columns)
        for r in records:
            writer.writerow(
                [r.timestamp.isoformat()]
                + [
                    repr(v)
                    for v in (
                        r.s, r.p_mdp, r.p_mip, r.solar_id, r.solar_da, r.wind_id,
                        r.wind_da, r.load_id, r.load_da, r.price_da, r.price_id,
                    )
                ]
                + [repr(float(v)) for v in r.reserve_prices]
            )


def load_order_books(path) -> dict[datetime, OrderBook]:
    """Read ``books.csv`` into per-timestamp ladders."""
    path = Path(path)
    sides: dict[datetime, dict[str, list[tuple[float, float]]]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["timestamp", "side", "price", "volume"]:
            raise DataValidationError(f"{path.name}: header mismatch, got {header}")
        for row_no, row in enumerate(reader, start=2):
            ts = _parse_timestamp(row[0], row_no)
            side = row[1]
            if side not in ("ask", "bid"):
                raise DataValidationError(f"row {row_no}: side must be ask or bid, got {side!r}")
            try:
                price, volume = float(row[2]), float(row[3])
            except ValueError as exc:
                raise DataValidationError(f"row {row_no}: unparseable number: {exc}") from None
            sides.setdefault(ts, {"ask": [], "bid": []})[side].append((price, volume))
    books = {}
    for ts, ladders in sides.items():
        try:
            books[ts] = OrderBook(asks=tuple(ladders["ask"]), bids=tuple(ladders["bid"]))
        except ValueError as exc:
            raise DataValidationError(f"book at {ts.isoformat()}: {exc}") from None
    return books


def write_order_books(path, books: dict[datetime, OrderBook]) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "side", "price", "volume"])
        for ts in sorted(books):
            book = books[ts]
            for price, volume in book.asks:
                writer.writerow([ts.isoformat(), "ask", repr(price), repr(volume)])
            for price, volume in book.bids:
                writer.writerow([ts.isoformat(), "bid", repr(price), repr(volume)])


# Imbalance lags in quarter-hours. Trading closes just over an hour before
# delivery, so the most recent observable volume is four periods old.
IMBALANCE_LAGS = (4, 5, 6, 7)
QUARTERS_PER_DAY = 96


def quarter_of_day(ts: datetime) -> int:
    return ts.hour * 4 + ts.minute // 15


def build_features(records: list[RawRecord], lags: tuple[int, ...] = IMBALANCE_LAGS) -> FeatureSet:
    """Mixture-weight features per the reference schema.

    Blocks: lagged imbalance volumes (information cutoff one hour before
    delivery), one-hot quarter of day, intraday-minus-day-ahead forecast
    differences, deviation of the intraday forecasts from their hourly
    mean, and the intraday/day-ahead price difference. Rows without full
    lag history are dropped (``first_index`` marks the first kept record).
    """
    max_lag = max(lags)
    n = len(records)
    if n <= max_lag:
        raise DataValidationError(f"need more than {max_lag} records for lag features, got {n}")
    s = np.array([r.s for r in records])
    solar_id = np.array([r.solar_id for r in records])
    wind_id = np.array([r.wind_id for r in records])
    load_id = np.array([r.load_id for r in records])
    diffs = np.column_stack(
        [
            solar_id - np.array([r.solar_da for r in records]),
            wind_id - np.array([r.wind_da for r in records]),
            load_id - np.array([r.load_da for r in records]),
        ]
    )
    price_diff = np.array([r.price_id - r.price_da for r in records])

    # hourly mean of the intraday forecasts over the (possibly partial) clock hour
    hour_keys = [(r.timestamp.date(), r.timestamp.hour) for r in records]
    sums: dict[tuple, np.ndarray] = {}
    counts: dict[tuple, int] = {}
    stacked = np.column_stack([solar_id, wind_id, load_id])
    for key, row in zip(hour_keys, stacked):
        if key in sums:
            sums[key] += row
            counts[key] += 1
        else:
            sums[key] = row.copy()
            counts[key] = 1
    deviations = np.array([stacked[i] - sums[k] / counts[k] for i, k in enumerate(hour_keys)])

    quarters = np.array([quarter_of_day(r.timestamp) for r in records])
    onehot = np.zeros((n, QUARTERS_PER_DAY))
    onehot[np.arange(n), quarters] = 1.0

    rows = np.arange(max_lag, n)
    lag_block = np.column_stack([s[rows - lag] for lag in lags])
    x = np.hstack(
        [lag_block, onehot[rows], diffs[rows], deviations[rows], price_diff[rows, None]]
    )
    return FeatureSet(x=x, first_index=max_lag, layout=reference_layout(lags))


def reference_layout(lags: tuple[int, ...] = IMBALANCE_LAGS) -> FeatureLayout:
    """Layout of the feature vector ``build_features`` emits (data independent)."""
    names: list[str] = [f"s_lag_{lag}" for lag in lags]
    blocks = {"imbalance_lags": (0, len(lags))}
    start = len(lags)
    names += [f"quarter_{q}" for q in range(QUARTERS_PER_DAY)]
    blocks["quarter_onehot"] = (start, start + QUARTERS_PER_DAY)
    start += QUARTERS_PER_DAY
    names += ["solar_id_minus_da", "wind_id_minus_da", "load_id_minus_da"]
    blocks["forecast_diffs"] = (start, start + 3)
    start += 3
    names += ["solar_hourly_dev", "wind_hourly_dev", "load_hourly_dev"]
    blocks["hourly_deviation"] = (start, start + 3)
    start += 3
    names += ["price_id_minus_da"]
    blocks["price_diff"] = (start, start + 1)
    return FeatureLayout(names=tuple(names), blocks=blocks)


def assemble_ticks(
    records: list[RawRecord],
    features: FeatureSet,
    books: dict[datetime, OrderBook] | None = None,
) -> list[MarketTick]:
    """Join records, features, and (optionally) order books into ticks."""
    ticks = []
    for offset, record in enumerate(records[features.first_index :]):
        book = books.get(record.timestamp) if books is not None else None
        ticks.append(
            MarketTick(
                timestamp=record.timestamp,
                x=features.x[offset],
                o=record.reserve_prices,
                s=record.s,
                p_mdp=record.p_mdp,
                p_mip=record.p_mip,
                book=book,
            )
        )
    return ticks


def load_dataset(data_dir, grid: ReserveGrid) -> list[MarketTick]:
    """Load ``market.csv`` (and ``books.csv`` when present) from a directory."""
    data_dir = Path(data_dir)
    records = load_market_csv(data_dir / "market.csv", MarketCsvSchema(grid))
    books_path = data_dir / "books.csv"
    books = load_order_books(books_path) if books_path.exists() else None
    return assemble_ticks(records, build_features(records), books)


def resolve_data_dir(cli_value) -> Path:
    """CLI flag wins; otherwise fall back to the environment override."""
    if cli_value:
        return Path(cli_value)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise ValueError(f"no data directory given and {DATA_DIR_ENV} is not set")


def _default_start() -> datetime:
    return datetime(2024, 1, 1, tzinfo=timezone.utc)


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic market; planted parameters are returned as truth.

    With ``price_noise_std`` and ``price_gap_std`` both zero the regulation
    prices are exactly affine in the imbalance volume and exactly equal to
    their anchored ladder column, so sensitivity and quantile fits recover
    the planted values to numerical precision.
    """

    seed: int = 0
    n_periods: int = 96 * 30
    start: datetime = field(default_factory=_default_start)
    regime_bias: float = 0.3
    regime_persistence: float = 0.6
    signal_strength: float = 1.0
    imbalance_scale: float = 120.0
    k_mdp: float = 0.40
    k_mip: float = 0.41
    mdp_price_mean: float = 40.0
    price_gap_mean: float = 140.0
    price_gap_std: float = 0.0
    price_noise_std: float = 0.0
    afrr_volumes: tuple[float, ...] = (1.0, 50.0, 100.0, 150.0, 200.0)
    mfrr_volumes: tuple[float, ...] = (1.0, 100.0, 200.0, 300.0, 500.0, 700.0)
    afrr_ladder_slope: float = 0.05
    mfrr_ladder_slope: float = 0.08
    mdp_anchor: int = 2  # aFRR ladder column carrying the downregulation price
    mip_anchor: int = 3  # mFRR ladder column carrying the upregulation price
    book_levels: int = 3
    book_level_volume: float = 6.0
    book_tick: float = 1.5
    book_spread: float = 2.0
    edge: float = 4.0
    book_noise_std: float = 0.0

    @property
    def grid(self) -> ReserveGrid:
        return ReserveGrid(self.afrr_volumes, self.mfrr_volumes)

    def __post_init__(self):
        for name in ("price_gap_std", "price_noise_std", "book_noise_std", "imbalance_scale"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 <= self.mdp_anchor < len(self.afrr_volumes):
            raise ValueError("mdp_anchor outside the aFRR ladder")
        if not 0 <= self.mip_anchor < len(self.mfrr_volumes):
            raise ValueError("mip_anchor outside the mFRR ladder")


# Fixed couplings between the forecast-difference features and the regime
# logit; scaled by SyntheticConfig.signal_strength.
_SIGNAL_WEIGHTS = {"solar": 0.004, "wind": 0.003, "load": -0.003, "price": -0.05}


def generate_synthetic_market(
    cfg: SyntheticConfig,
) -> tuple[list[RawRecord], dict[datetime, OrderBook], dict]:
    """Simulate a two-regime balancing market with planted parameters.

    The latent regime follows a logistic law that is linear in features the
    mixture-weight model observes (forecast differences, price difference,
    and the four-period-lagged imbalance), so the model family is well
    specified. Regulation prices follow the planted sensitivity slopes and
    equal their anchored ladder columns up to the configured noise.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_periods
    timestamps = [cfg.start + i * PERIOD for i in range(n)]
    quarters = np.array([quarter_of_day(ts) for ts in timestamps])

    daylight = np.clip(np.sin((quarters - 24) * np.pi / 48.0), 0.0, None)
    solar_da = 3000.0 * daylight * rng.uniform(0.7, 1.0, size=n)
    wind_da = np.clip(1500.0 + np.cumsum(rng.normal(0.0, 30.0, size=n)), 100.0, None)
    load_da = 9000.0 + 2500.0 * np.sin((quarters - 20) * np.pi / 48.0) ** 2
    diff_solar = rng.normal(0.0, 200.0, size=n) * (daylight > 0)
    diff_wind = rng.normal(0.0, 200.0, size=n)
    diff_load = rng.normal(0.0, 250.0, size=n)
    price_da = 60.0 + 20.0 * (load_da - 9000.0) / 2500.0 + rng.normal(0.0, 4.0, size=n)
    diff_price = rng.normal(0.0, 8.0, size=n)

    signal = cfg.signal_strength * (
        _SIGNAL_WEIGHTS["solar"] * diff_solar
        + _SIGNAL_WEIGHTS["wind"] * diff_wind
        + _SIGNAL_WEIGHTS["load"] * diff_load
        + _SIGNAL_WEIGHTS["price"] * diff_price
    )
    s = np.empty(n)
    logits = np.empty(n)
    magnitudes = np.abs(rng.normal(0.0, cfg.imbalance_scale, size=n)) + 1e-9
    regime_draws = rng.random(n)
    for t in range(n):
        lagged = s[t - 4] / cfg.imbalance_scale if t >= 4 else 0.0
        logits[t] = cfg.regime_bias + signal[t] + cfg.regime_persistence * lagged
        positive = regime_draws[t] < 1.0 / (1.0 + np.exp(-logits[t]))
        s[t] = magnitudes[t] if positive else -magnitudes[t]

    p_mdp_sys = cfg.mdp_price_mean - cfg.k_mdp * s
    gap = cfg.price_gap_mean + cfg.price_gap_std * rng.normal(size=n)
    p_mip_sys = cfg.mdp_price_mean + gap - cfg.k_mip * s
    p_mdp = p_mdp_sys + cfg.price_noise_std * rng.normal(size=n)
    p_mip = p_mip_sys + cfg.price_noise_std * rng.normal(size=n)

    afrr = np.asarray(cfg.afrr_volumes)
    mfrr = np.asarray(cfg.mfrr_volumes)
    afrr_prices = p_mdp_sys[:, None] + cfg.afrr_ladder_slope * (afrr - afrr[cfg.mdp_anchor])
    mfrr_prices = p_mip_sys[:, None] + cfg.mfrr_ladder_slope * (mfrr - mfrr[cfg.mip_anchor])
    reserve = np.hstack([afrr_prices, mfrr_prices])

    pi = 1.0 / (1.0 + np.exp(-logits))
    expected_settlement = pi * p_mdp_sys + (1.0 - pi) * p_mip_sys
    best_ask = expected_settlement - cfg.edge + cfg.book_noise_std * rng.normal(size=n)

    records = []
    books: dict[datetime, OrderBook] = {}
    for t, ts in enumerate(timestamps):
        records.append(
            RawRecord(
                timestamp=ts,
                s=float(s[t]),
                p_mdp=float(p_mdp[t]),
                p_mip=float(p_mip[t]),
                solar_id=float(solar_da[t] + diff_solar[t]),
                solar_da=float(solar_da[t]),
                wind_id=float(wind_da[t] + diff_wind[t]),
                wind_da=float(wind_da[t]),
                load_id=float(load_da[t] + diff_load[t]),
                load_da=float(load_da[t]),
                price_da=float(price_da[t]),
                price_id=float(price_da[t] + diff_price[t]),
                reserve_prices=reserve[t].copy(),
            )
        )
        asks = tuple(
            (float(best_ask[t] + level * cfg.book_tick), cfg.book_level_volume)
            for level in range(cfg.book_levels)
        )
        bids = tuple(
            (float(best_ask[t] - cfg.book_spread - level * cfg.book_tick), cfg.book_level_volume)
            for level in range(cfg.book_levels)
        )
        books[ts] = OrderBook(asks=asks, bids=bids)

    truth = {
        "k_mdp": cfg.k_mdp,
        "k_mip": cfg.k_mip,
        "regime_bias": cfg.regime_bias,
        "regime_persistence": cfg.regime_persistence,
        "signal_weights": dict(_SIGNAL_WEIGHTS),
        "signal_strength": cfg.signal_strength,
        "base_rate": float(np.mean(s > 0.0)),
        "mdp_anchor_column": cfg.mdp_anchor,
        "mip_anchor_column": len(cfg.afrr_volumes) + cfg.mip_anchor,
        "edge": cfg.edge,
    }
    return records, books, truth


def synthetic_ticks(cfg: SyntheticConfig) -> tuple[list[MarketTick], dict]:
    """Generate and assemble feature-complete ticks in one call."""
    records, books, truth = generate_synthetic_market(cfg)
    ticks = assemble_ticks(records, build_features(records), books)
    return ticks, truth


def write_synthetic_dataset(out_dir, cfg: SyntheticConfig) -> dict:
    """Generate a dataset and write ``market.csv`` plus ``books.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, books, truth = generate_synthetic_market(cfg)
    write_market_csv(out_dir / "market.csv", records, MarketCsvSchema(cfg.grid))
    write_order_books(out_dir / "books.csv", books)
    return truth
