"""Benchmark forecasters: regime-switching Markov chains and linear quantiles.

All explicit benchmarks share the trained regulation-price banks and differ
only in how they predict the balancing-state probability; the implicit
linear model predicts the settlement price distribution directly from the
full feature set. A benchmark run scores every model on the same aligned
evaluation slice and emits one metric row per model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from ._optim import minimize_gd
from .data_io import FeatureLayout, MarketTick
from .dists import DiscretePriceDistribution, ForecastScores, MixtureForecast, flatten, score_batch
from .pipeline import TrainedModels
from .price_models import (
    FeatureScaler,
    LogisticModel,
    fit_logistic,
    predict_regulation_distribution,
    quantile_levels,
)

__all__ = [
    "SplitMismatchError",
    "fit_static_transitions",
    "chain_state_probability",
    "markov_state_probability",
    "fit_transition_models",
    "dynamic_transition_matrix",
    "LinearQuantileBank",
    "linear_pinball_loss_and_grad",
    "fit_linear_quantile_bank",
    "dynamic_feature_columns",
    "BenchmarkSuite",
    "fit_benchmark_suite",
    "BenchmarkTable",
    "run_benchmark",
    "DEFAULT_HORIZON",
]

logger = logging.getLogger(__name__)

# Gate closure sits five quarter-hours before delivery, so Markov benchmarks
# must propagate the balancing state that far.
DEFAULT_HORIZON = 5

_STATE_POS, _STATE_NEG = 0, 1


class SplitMismatchError(ValueError):
    """Evaluation data overlaps the benchmark training range."""


def fit_static_transitions(labels) -> np.ndarray:
    """Empirical 2x2 transition matrix over {s >= 0, s < 0}.

    Rows are row-normalized counts; a never-visited state gets a uniform
    row (logged), keeping the matrix row-stochastic.
    """
    labels = np.asarray(labels, dtype=bool)
    if labels.size < 2:
        raise ValueError("need at least 2 consecutive labels")
    states = np.where(labels, _STATE_POS, _STATE_NEG)
    counts = np.zeros((2, 2))
    np.add.at(counts, (states[:-1], states[1:]), 1.0)
    matrix = np.empty((2, 2))
    for row in range(2):
        total = counts[row].sum()
        if total == 0.0:
            logger.warning("state %d never visited; using a uniform transition row", row)
            matrix[row] = 0.5
        else:
            matrix[row] = counts[row] / total
    return matrix


def chain_state_probability(matrices, start_positive: bool) -> float:
    """P(s >= 0) after stepping through the given transition matrices."""
    nu = np.array([1.0, 0.0]) if start_positive else np.array([0.0, 1.0])
    for t in matrices:
        t = np.asarray(t, dtype=float)
        if t.shape != (2, 2):
            raise ValueError("transition matrices must be 2x2")
        nu = nu @ t
    return float(nu[_STATE_POS])


def markov_state_probability(matrix, start_positive: bool, horizon: int = DEFAULT_HORIZON) -> float:
    """Static-chain state probability after ``horizon`` quarter-hours."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    return chain_state_probability([matrix] * horizon, start_positive)


def fit_transition_models(labels, features, *, l2: float = 1e-4, max_iter: int = 2000):
    """Input-conditioned transitions: one logistic model per current state.

    Each model predicts P(next state is positive) from the next period's
    exogenous features.
    """
    labels = np.asarray(labels, dtype=bool)
    features = np.asarray(features, dtype=float)
    if labels.size != features.shape[0] or labels.size < 3:
        raise ValueError("need aligned labels and features with at least 3 rows")
    prev = labels[:-1]
    nxt = labels[1:].astype(float)
    rows = features[1:]
    from_pos = fit_logistic(rows[prev], nxt[prev], l2=l2, max_iter=max_iter)
    from_neg = fit_logistic(rows[~prev], nxt[~prev], l2=l2, max_iter=max_iter)
    return from_pos, from_neg


def dynamic_transition_matrix(models: tuple[LogisticModel, LogisticModel], features) -> np.ndarray:
    """Per-step transition matrix from the two conditional logistic models."""
    p_pos = float(models[0].predict(np.asarray(features, dtype=float)))
    p_neg = float(models[1].predict(np.asarray(features, dtype=float)))
    return np.array([[p_pos, 1.0 - p_pos], [p_neg, 1.0 - p_neg]])


def linear_pinball_loss_and_grad(params: np.ndarray, x: np.ndarray, y: np.ndarray, tau: float):
    """Mean pinball loss of an affine predictor; analytic gradient."""
    w, b = params[:-1], params[-1]
    e = y - (x @ w + b)
    val = float(np.mean(np.where(e >= 0.0, tau * e, (tau - 1.0) * e)))
    d = -np.where(e >= 0.0, tau, tau - 1.0) / y.size
    return val, np.concatenate([x.T @ d, [d.sum()]])


@dataclass(frozen=True)
class LinearQuantileBank:
    """Per-level affine models of the settlement price (implicit benchmark)."""

    taus: np.ndarray
    weights: np.ndarray  # (n_q, n_features)
    biases: np.ndarray  # (n_q,)
    scaler: FeatureScaler

    def predict_matrix(self, x) -> np.ndarray:
        xs = self.scaler.transform(np.atleast_2d(np.asarray(x, dtype=float)))
        return xs @ self.weights.T + self.biases

    def predict_distribution(self, x) -> DiscretePriceDistribution:
        values = self.predict_matrix(x)[0]
        return DiscretePriceDistribution(values, np.full(values.size, 1.0 / values.size))


def fit_linear_quantile_bank(x, y, *, n_q: int, grad_tol: float = 1e-6, max_iter: int = 400) -> LinearQuantileBank:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if x.ndim != 2 or x.shape[0] != y.size or y.size == 0:
        raise ValueError("inconsistent training shapes")
    taus = quantile_levels(n_q)
    scaler = FeatureScaler.fit(x)
    xs = scaler.transform(x)
    weights = np.empty((n_q, x.shape[1]))
    biases = np.empty(n_q)
    for i, tau in enumerate(taus):
        x0 = np.zeros(x.shape[1] + 1)
        x0[-1] = float(np.quantile(y, tau))  # start at the unconditional quantile
        result = minimize_gd(
            lambda p, t=tau: linear_pinball_loss_and_grad(p, xs, y, t),
            x0,
            grad_tol=grad_tol,
            max_iter=max_iter,
        )
        weights[i] = result.x[:-1]
        biases[i] = result.x[-1]
    return LinearQuantileBank(taus=taus, weights=weights, biases=biases, scaler=scaler)


def dynamic_feature_columns(layout: FeatureLayout) -> np.ndarray:
    """Columns the dynamic Markov benchmark conditions on.

    Quarter-of-day one-hot, production and load derived variables, and the
    intraday/day-ahead price difference; falls back to every column for
    layouts without those blocks.
    """
    wanted = ("quarter_onehot", "forecast_diffs", "hourly_deviation", "price_diff")
    if not all(name in layout.blocks for name in wanted):
        return np.arange(len(layout.names))
    return np.concatenate([np.arange(*layout.blocks[name]) for name in wanted])


@dataclass
class BenchmarkSuite:
    """Trained benchmark models sharing one regulation-price bank pair."""

    models: TrainedModels
    static_matrix: np.ndarray
    transition_models: tuple[LogisticModel, LogisticModel]
    linear_bank: LinearQuantileBank
    horizon: int
    train_end: datetime


def fit_benchmark_suite(
    train_ticks: list[MarketTick],
    models: TrainedModels,
    *,
    horizon: int = DEFAULT_HORIZON,
    n_q: int | None = None,
    max_iter: int = 400,
) -> BenchmarkSuite:
    """Fit the state-transition and linear benchmarks on the training slice."""
    labels = np.array([t.s >= 0.0 for t in train_ticks])
    x = np.stack([t.x for t in train_ticks])
    o = np.stack([t.o for t in train_ticks])
    y = np.array([t.settlement_price for t in train_ticks])
    static_matrix = fit_static_transitions(labels)
    dyn_cols = dynamic_feature_columns(models.layout)
    transition_models = fit_transition_models(labels, x[:, dyn_cols], max_iter=max_iter)
    linear_bank = fit_linear_quantile_bank(
        np.hstack([x, o]), y, n_q=n_q or models.n_q, max_iter=max_iter
    )
    return BenchmarkSuite(
        models=models,
        static_matrix=static_matrix,
        transition_models=transition_models,
        linear_bank=linear_bank,
        horizon=horizon,
        train_end=train_ticks[-1].timestamp,
    )


def _regime_distributions(suite: BenchmarkSuite, tick: MarketTick):
    down = predict_regulation_distribution(suite.models.bank_mdp, tick.z, tick.o)
    up = predict_regulation_distribution(suite.models.bank_mip, tick.z, tick.o)
    return down, up


def benchmark_forecasts(suite: BenchmarkSuite, ticks: list[MarketTick]) -> dict[str, list]:
    """Per-model forecast distributions on a contiguous tick sequence.

    Markov models need the balancing state ``horizon`` periods back, so
    their first ``horizon`` entries are None; the caller aligns on indices
    every model covers.
    """
    dyn_cols = dynamic_feature_columns(suite.models.layout)
    n = len(ticks)
    out: dict[str, list] = {
        "mixture": [],
        "static_rsmm": [],
        "dynamic_rsmm": [],
        "linear_quantile": [],
    }
    for i, tick in enumerate(ticks):
        if tick.z is None:
            raise ValueError("ticks need the price-model input; run attach_z first")
        down, up = _regime_distributions(suite, tick)
        pi_mix = float(suite.models.weight_model.predict(tick.x))
        out["mixture"].append(flatten(MixtureForecast(pi_mix, down, up)))
        out["linear_quantile"].append(
            suite.linear_bank.predict_distribution(np.concatenate([tick.x, tick.o]))
        )
        if i < suite.horizon:
            out["static_rsmm"].append(None)
            out["dynamic_rsmm"].append(None)
            continue
        start_positive = ticks[i - suite.horizon].s >= 0.0
        pi_static = chain_state_probability([suite.static_matrix] * suite.horizon, start_positive)
        out["static_rsmm"].append(flatten(MixtureForecast(pi_static, down, up)))
        steps = [
            dynamic_transition_matrix(suite.transition_models, ticks[j].x[dyn_cols])
            for j in range(i - suite.horizon + 1, i + 1)
        ]
        pi_dyn = chain_state_probability(steps, start_positive)
        out["dynamic_rsmm"].append(flatten(MixtureForecast(pi_dyn, down, up)))
    assert all(len(v) == n for v in out.values())
    return out


@dataclass
class BenchmarkTable:
    """Per-model forecast metrics over one aligned evaluation slice."""

    rows: list[tuple[str, ForecastScores]]
    n_scored: int

    def to_csv_string(self) -> str:
        lines = ["model,rmse,mae,std,crps"]
        for name, scores in self.rows:
            lines.append(f"{name},{scores.rmse!r},{scores.mae!r},{scores.std!r},{scores.crps!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = f"{'model':<16}{'RMSE':>10}{'MAE':>10}{'Std':>10}{'CRPS':>10}"
        lines = [header, "-" * len(header)]
        for name, scores in self.rows:
            lines.append(
                f"{name:<16}{scores.rmse:>10.4f}{scores.mae:>10.4f}{scores.std:>10.4f}{scores.crps:>10.4f}"
            )
        return "\n".join(lines) + "\n"


def run_benchmark(suite: BenchmarkSuite, ticks: list[MarketTick]) -> BenchmarkTable:
    """Score every benchmark model on the ticks all of them can forecast."""
    if ticks and ticks[0].timestamp <= suite.train_end:
        raise SplitMismatchError(
            f"evaluation starts {ticks[0].timestamp.isoformat()}, inside the training range"
        )
    forecasts = benchmark_forecasts(suite, ticks)
    valid = [
        i for i in range(len(ticks))
        if all(series[i] is not None for series in forecasts.values())
    ]
    if not valid:
        raise ValueError("no evaluation ticks with full benchmark coverage")
    observed = [ticks[i].settlement_price for i in valid]
    rows = []
    for name in ("mixture", "static_rsmm", "dynamic_rsmm", "linear_quantile"):
        series = [forecasts[name][i] for i in valid]
        rows.append((name, score_batch(series, observed)))
    return BenchmarkTable(rows=rows, n_scored=len(valid))
