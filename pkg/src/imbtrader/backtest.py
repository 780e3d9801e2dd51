"""Deterministic event-driven replay of the full trading loop.

Each settlement period: re-tune alpha from the trailing window (adaptive
mode), pick the position with the assumed market reactivity, fill against
the recorded ladder, settle at the impact-adjusted realized price, and
append one ledger row per strategy leg. Long and short legs run as two
one-sided decisions with separate alpha tracks; their net position drives
the settlement price. Ticks with missing or too-shallow books are skipped
and excluded from both the ledger and the adaptive window.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import date, datetime
from pathlib import Path

import numpy as np

from .data_io import MarketTick
from .market_impact import realized_settlement_price
from .pipeline import TrainedModels, make_forecaster
from .price_models import sigmoid_predict
from .risk import RISK_KINDS
from .strategy import (
    ActionSpace,
    AlphaAdapter,
    TradeRecord,
    decision_table,
    default_alpha_grid,
)

__all__ = [
    "LeakageError",
    "SimConfig",
    "Report",
    "BacktestResult",
    "run_backtest",
    "write_ledger",
    "read_ledger",
    "SweepResult",
    "beta_sweep",
    "leg_positions",
]

logger = logging.getLogger(__name__)

LEDGER_COLUMNS = ["timestamp", "leg", "u_mw", "fill_price", "realized_price", "alpha", "measure", "profit_eur"]


class LeakageError(RuntimeError):
    """Backtest range overlaps the model training range."""


def _default_actions() -> ActionSpace:
    return ActionSpace(step=0.1, u_max=5.0)


@dataclass(frozen=True)
class SimConfig:
    """One backtest run; ``alpha=None`` selects adaptive tuning."""

    measure: str = "cvar"
    alpha: float | None = None
    beta_est: float = 1.0
    beta_true: float = 1.0
    window: int = 500
    alpha_grid_size: int = 200
    actions: ActionSpace = field(default_factory=_default_actions)
    delta_hours: float = 0.25
    start: datetime | None = None
    end: datetime | None = None
    seed: int = 0

    def __post_init__(self):
        if self.measure not in RISK_KINDS:
            raise ValueError(f"unknown measure {self.measure!r}")
        for name in ("beta_est", "beta_true"):
            b = getattr(self, name)
            if not 0.0 <= b <= 1.0:
                raise ValueError(f"{name} {b} outside [0, 1]")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.delta_hours <= 0.0:
            raise ValueError("delta_hours must be positive")

    @property
    def adaptive(self) -> bool:
        return self.alpha is None


@dataclass
class Report:
    """Aggregates of one backtest run."""

    total_profit: float
    total_per_mw_period: float
    traded_volume_mwh: float
    profit_per_trade: float
    n_periods: int
    n_skipped: int
    daily_cumulative: list[tuple[date, float]]
    alpha_path: dict[str, list[tuple[datetime, float]]]

    def to_dict(self) -> dict:
        return {
            "total_profit_eur": self.total_profit,
            "total_per_mw_period": self.total_per_mw_period,
            "traded_volume_mwh": self.traded_volume_mwh,
            "profit_per_trade_eur_per_mwh": self.profit_per_trade,
            "n_periods": self.n_periods,
            "n_skipped": self.n_skipped,
            "daily_cumulative": [[d.isoformat(), p] for d, p in self.daily_cumulative],
            "alpha_path": {
                leg: [[ts.isoformat(), a] for ts, a in path] for leg, path in self.alpha_path.items()
            },
        }


@dataclass
class BacktestResult:
    config: SimConfig
    report: Report
    ledger: list[TradeRecord]
    skipped: list[tuple[datetime, str]]


def leg_positions(actions: ActionSpace, leg: str) -> np.ndarray:
    """One-sided position grid of a strategy leg, ordered by absolute size."""
    base = np.arange(actions.n_steps + 1) * actions.step
    return base if leg == "long" else -base


def _attach_missing_z(ticks: list[MarketTick], models: TrainedModels) -> list[MarketTick]:
    out = []
    for t in ticks:
        if t.z is None:
            z = np.array([sigmoid_predict(models.weight_model, t.x)])
            t = MarketTick(
                timestamp=t.timestamp, x=t.x, o=t.o, s=t.s, p_mdp=t.p_mdp,
                p_mip=t.p_mip, book=t.book, z=z,
            )
        out.append(t)
    return out


def run_backtest(config: SimConfig, models: TrainedModels, ticks: list[MarketTick]) -> BacktestResult:
    """Replay the strategy over recorded ticks; no randomness is consumed.

    Raises ``LeakageError`` when the tick range overlaps the model training
    range. Settlement applies the true reactivity to the recorded
    regulation prices and the realized imbalance, shifted by the net
    executed position of both legs.
    """
    selected = [
        t for t in ticks
        if (config.start is None or t.timestamp >= config.start)
        and (config.end is None or t.timestamp <= config.end)
    ]
    if not selected:
        raise ValueError("no ticks in the requested range")
    if selected[0].timestamp <= models.train_end:
        raise LeakageError(
            f"backtest starts {selected[0].timestamp.isoformat()} but models "
            f"were trained through {models.train_end.isoformat()}"
        )
    selected = _attach_missing_z(selected, models)

    legs = ("long", "short") if config.actions.allow_short else ("long",)
    positions = {leg: leg_positions(config.actions, leg) for leg in legs}
    if config.adaptive:
        alphas = default_alpha_grid(config.measure, config.alpha_grid_size)
        adapters = {leg: AlphaAdapter(alphas, config.window, config.measure) for leg in legs}
    else:
        alphas = np.array([config.alpha])
        adapters = None
    impact_true = models.impact_with_beta(config.beta_true)

    ledger: list[TradeRecord] = []
    skipped: list[tuple[datetime, str]] = []
    alpha_path: dict = {leg: [] for leg in legs}
    for tick in selected:
        if tick.book is None:
            skipped.append((tick.timestamp, "missing order book"))
            logger.info("skipping %s: missing order book", tick.timestamp.isoformat())
            continue
        depth_bad = tick.book.depth("ask") < config.actions.u_max or (
            "short" in legs and tick.book.depth("bid") < config.actions.u_max
        )
        if depth_bad:
            skipped.append((tick.timestamp, "insufficient book depth"))
            logger.info("skipping %s: insufficient book depth", tick.timestamp.isoformat())
            continue

        forecast_fn = make_forecaster(models, tick, config.beta_est)
        tables = {
            leg: decision_table(forecast_fn, tick.book, positions[leg], config.measure, alphas)
            for leg in legs
        }
        executed = {}
        for leg in legs:
            us, qs, _ = tables[leg].best_positions()
            idx = adapters[leg].current_index if config.adaptive else 0
            alpha_used = float(alphas[idx])
            executed[leg] = (float(us[idx]), float(qs[idx]), alpha_used)
            alpha_path[leg].append((tick.timestamp, alpha_used))
        u_net = sum(u for u, _, _ in executed.values())
        p_real = realized_settlement_price(tick.s, u_net, impact_true, tick.p_mdp, tick.p_mip)
        for leg in legs:
            u, q, alpha_used = executed[leg]
            ledger.append(
                TradeRecord(
                    timestamp=tick.timestamp, leg=leg, u=u, fill_price=q,
                    realized_price=p_real, alpha=alpha_used, measure=config.measure,
                )
            )
        if config.adaptive:
            for leg in legs:
                adapters[leg].record(tables[leg].hindsight_losses(p_real))
                adapters[leg].update()

    report = _build_report(config, ledger, skipped, alpha_path)
    return BacktestResult(config=config, report=report, ledger=ledger, skipped=skipped)


def _build_report(config, ledger, skipped, alpha_path) -> Report:
    total = sum(r.profit(config.delta_hours) for r in ledger)
    per_period = sum((r.realized_price - r.fill_price) * r.u for r in ledger)
    volume = sum(abs(r.u) * config.delta_hours for r in ledger)
    daily: list[tuple[date, float]] = []
    running = 0.0
    current_day = None
    for r in ledger:
        day = r.timestamp.date()
        if current_day is None:
            current_day = day
        if day != current_day:
            daily.append((current_day, running))
            current_day = day
        running += r.profit(config.delta_hours)
    if current_day is not None:
        daily.append((current_day, running))
    timestamps = {r.timestamp for r in ledger}
    return Report(
        total_profit=total,
        total_per_mw_period=per_period,
        traded_volume_mwh=volume,
        profit_per_trade=(total / volume) if volume > 0 else 0.0,
        n_periods=len(timestamps),
        n_skipped=len(skipped),
        daily_cumulative=daily,
        alpha_path=alpha_path,
    )


def write_ledger(path, result: BacktestResult) -> None:
    """Ledger CSV with a commented header stating both profit conventions."""
    config, report = result.config, result.report
    alpha_text = "adaptive" if config.adaptive else repr(config.alpha)
    lines = [
        "# imbtrader ledger v1",
        f"# measure={config.measure} alpha={alpha_text} beta_est={config.beta_est!r} "
        f"beta_true={config.beta_true!r} window={config.window} "
        f"delta_hours={config.delta_hours!r} seed={config.seed}",
        "# profit_eur = (realized_price - fill_price) * u_mw * delta_hours",
        f"# total_profit_eur={report.total_profit!r} "
        f"total_per_mw_period={report.total_per_mw_period!r} "
        f"traded_volume_mwh={report.traded_volume_mwh!r}",
        ",".join(LEDGER_COLUMNS),
    ]
    for r in result.ledger:
        lines.append(
            f"{r.timestamp.isoformat()},{r.leg},{r.u!r},{r.fill_price!r},"
            f"{r.realized_price!r},{r.alpha!r},{r.measure}"
            f",{r.profit(config.delta_hours)!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_ledger(path) -> tuple[list[TradeRecord], dict, float]:
    """Parse a ledger CSV back into records, header metadata, and delta."""
    meta: dict = {}
    records: list[TradeRecord] = []
    delta = 0.25
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                if "=" in token:
                    key, value = token.split("=", 1)
                    meta[key] = value
            continue
        if line.startswith("timestamp,"):
            continue
        parts = line.split(",")
        records.append(
            TradeRecord(
                timestamp=datetime.fromisoformat(parts[0]),
                leg=parts[1],
                u=float(parts[2]),
                fill_price=float(parts[3]),
                realized_price=float(parts[4]),
                alpha=float(parts[5]),
                measure=parts[6],
            )
        )
    if "delta_hours" in meta:
        delta = float(meta["delta_hours"])
    return records, meta, delta


@dataclass
class SweepResult:
    """Profit matrix of a reactivity sweep (rows: assumed, cols: true)."""

    beta_est_grid: np.ndarray
    beta_true_grid: np.ndarray
    profits: np.ndarray  # (n_est, n_true)

    def row_monotone_non_increasing(self) -> list[bool]:
        return [bool(np.all(np.diff(row) <= 1e-9)) for row in self.profits]

    def to_csv_string(self) -> str:
        header = "beta_est\\beta_true," + ",".join(repr(float(b)) for b in self.beta_true_grid)
        lines = [header]
        for i, b_est in enumerate(self.beta_est_grid):
            lines.append(
                repr(float(b_est)) + "," + ",".join(repr(float(p)) for p in self.profits[i])
            )
        return "\n".join(lines) + "\n"


def beta_sweep(
    config: SimConfig,
    models: TrainedModels,
    ticks: list[MarketTick],
    beta_est_grid,
    beta_true_grid,
) -> SweepResult:
    """Run one backtest per (assumed, true) reactivity pair."""
    est = np.atleast_1d(np.asarray(beta_est_grid, dtype=float))
    true = np.atleast_1d(np.asarray(beta_true_grid, dtype=float))
    profits = np.empty((est.size, true.size))
    for i, b_est in enumerate(est):
        for j, b_true in enumerate(true):
            cell = replace(config, beta_est=float(b_est), beta_true=float(b_true))
            profits[i, j] = run_backtest(cell, models, ticks).report.total_profit
    return SweepResult(beta_est_grid=est, beta_true_grid=true, profits=profits)
