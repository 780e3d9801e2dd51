"""Training orchestration: fit every model of the trading loop and bundle them.

The bundle is what backtests pin: both logistic weight models (plain for
the price-model input, position-augmented for trading), the two quantile
banks, the reserve grid, estimated sensitivities, the feature layout, and
the training date range for leakage checks. Serialization is a versioned
JSON document with named weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from .data_io import FeatureLayout, MarketTick
from .dists import MixtureForecast
from .market_impact import ImpactParams, Regime, estimate_sensitivities
from .price_models import (
    LogisticModel,
    QuantileModelBank,
    ReserveGrid,
    augment_with_positions,
    fit_logistic,
    fit_quantile_bank,
    predict_regulation_distribution,
    sigmoid_predict,
)

__all__ = ["TrainedModels", "train_models", "attach_z", "make_forecaster"]

FORMAT_VERSION = 1


@dataclass
class TrainedModels:
    """Everything a backtest needs, pinned to its training range."""

    weight_model: LogisticModel
    position_model: LogisticModel
    bank_mdp: QuantileModelBank
    bank_mip: QuantileModelBank
    grid: ReserveGrid
    impact: ImpactParams
    layout: FeatureLayout
    n_q: int
    kfold: int
    train_start: datetime
    train_end: datetime
    seed: int

    def impact_with_beta(self, beta: float) -> ImpactParams:
        return replace(self.impact, beta=beta)

    def save(self, path) -> None:
        doc = {
            "format_version": FORMAT_VERSION,
            "package": "imbtrader",
            "train_start": self.train_start.isoformat(),
            "train_end": self.train_end.isoformat(),
            "seed": self.seed,
            "n_q": self.n_q,
            "kfold": self.kfold,
            "grid": self.grid.to_dict(),
            "impact": {"beta": self.impact.beta, "k_mdp": self.impact.k_mdp, "k_mip": self.impact.k_mip},
            "layout": self.layout.to_dict(),
            "weight_model": self.weight_model.to_dict(),
            "position_model": self.position_model.to_dict(),
            "bank_mdp": self.bank_mdp.to_dict(),
            "bank_mip": self.bank_mip.to_dict(),
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "TrainedModels":
        doc = json.loads(Path(path).read_text())
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model file version {version!r}")
        return cls(
            weight_model=LogisticModel.from_dict(doc["weight_model"]),
            position_model=LogisticModel.from_dict(doc["position_model"]),
            bank_mdp=QuantileModelBank.from_dict(doc["bank_mdp"]),
            bank_mip=QuantileModelBank.from_dict(doc["bank_mip"]),
            grid=ReserveGrid.from_dict(doc["grid"]),
            impact=ImpactParams(**doc["impact"]),
            layout=FeatureLayout.from_dict(doc["layout"]),
            n_q=int(doc["n_q"]),
            kfold=int(doc["kfold"]),
            train_start=datetime.fromisoformat(doc["train_start"]),
            train_end=datetime.fromisoformat(doc["train_end"]),
            seed=int(doc["seed"]),
        )


def _crossvalidated_weight(x: np.ndarray, labels: np.ndarray, kfold: int, l2: float, max_iter: int) -> np.ndarray:
    """Out-of-fold mixture-weight predictions (contiguous time-ordered folds).

    Keeps the price-model input free of the weight model's in-sample fit.
    """
    n = x.shape[0]
    z = np.empty(n)
    for fold in np.array_split(np.arange(n), kfold):
        rest = np.setdiff1d(np.arange(n), fold, assume_unique=True)
        model = fit_logistic(x[rest], labels[rest], l2=l2, max_iter=max_iter)
        z[fold] = model.predict(x[fold])
    return z


def train_models(
    ticks: list[MarketTick],
    *,
    grid: ReserveGrid,
    n_q: int = 100,
    kfold: int = 5,
    l2: float = 1e-4,
    u_max: float = 5.0,
    train_short_positions: bool = True,
    seed: int = 0,
    logistic_max_iter: int = 2000,
    bank_max_iter: int = 400,
    layout: FeatureLayout | None = None,
) -> TrainedModels:
    """Fit the full model set on feature-complete training ticks.

    The position-augmented weight model is trained with artificial trades
    whose appended feature is the induced imbalance shift (full reactivity),
    sampled over the signed range when short positions are enabled so one
    model serves both position types.
    """
    if not ticks:
        raise ValueError("no training ticks")
    x = np.stack([t.x for t in ticks])
    s = np.array([t.s for t in ticks])
    o = np.stack([t.o for t in ticks])
    if o.shape[1] != grid.size:
        raise ValueError(f"ticks carry {o.shape[1]} reserve prices, grid expects {grid.size}")
    labels = (s > 0.0).astype(float)

    weight_model = fit_logistic(x, labels, l2=l2, max_iter=logistic_max_iter)
    z = _crossvalidated_weight(x, labels, kfold, l2, logistic_max_iter)

    u_min = -u_max if train_short_positions else 0.0
    x_aug, aug_labels, _ = augment_with_positions(
        x, s, u_max=u_max, beta=1.0, rng=seed, u_min=u_min
    )
    position_model = fit_logistic(
        x_aug,
        aug_labels.astype(float),
        l2=l2,
        max_iter=logistic_max_iter,
        position_weight_index=x.shape[1],
    )

    pos = s >= 0.0
    p_mdp = np.array([t.p_mdp for t in ticks])
    p_mip = np.array([t.p_mip for t in ticks])
    bank_mdp = fit_quantile_bank(
        z[pos], o[pos], p_mdp[pos], regime=Regime.MDP, n_q=n_q, max_iter=bank_max_iter
    )
    bank_mip = fit_quantile_bank(
        z[~pos], o[~pos], p_mip[~pos], regime=Regime.MIP, n_q=n_q, max_iter=bank_max_iter
    )

    k_mdp, k_mip = estimate_sensitivities(s, np.where(pos, p_mdp, p_mip))
    impact = ImpactParams(beta=1.0, k_mdp=max(k_mdp, 0.0), k_mip=max(k_mip, 0.0))

    if layout is None:
        from .data_io import reference_layout

        reference = reference_layout()
        if len(reference.names) == x.shape[1]:
            layout = reference
        else:
            layout = FeatureLayout(
                names=tuple(f"f{i}" for i in range(x.shape[1])),
                blocks={"all": (0, x.shape[1])},
            )

    return TrainedModels(
        weight_model=weight_model,
        position_model=position_model,
        bank_mdp=bank_mdp,
        bank_mip=bank_mip,
        grid=grid,
        impact=impact,
        layout=layout,
        n_q=n_q,
        kfold=kfold,
        train_start=ticks[0].timestamp,
        train_end=ticks[-1].timestamp,
        seed=seed,
    )


def attach_z(ticks: list[MarketTick], models: TrainedModels) -> list[MarketTick]:
    """Fill the price-model input with the weight model's prediction."""
    out = []
    for t in ticks:
        z = np.array([sigmoid_predict(models.weight_model, t.x)])
        out.append(
            MarketTick(
                timestamp=t.timestamp, x=t.x, o=t.o, s=t.s, p_mdp=t.p_mdp,
                p_mip=t.p_mip, book=t.book, z=z,
            )
        )
    return out


def make_forecaster(models: TrainedModels, tick: MarketTick, beta_est: float):
    """Position-adjusted forecast closure for one tick.

    The regime distributions are predicted once and shifted per position;
    the result is atom-for-atom identical to rebuilding the full forecast
    at each position (covered by tests).
    """
    if tick.z is None:
        raise ValueError("tick has no price-model input; run attach_z first")
    impact = models.impact_with_beta(beta_est)
    down0 = predict_regulation_distribution(models.bank_mdp, tick.z, tick.o)
    up0 = predict_regulation_distribution(models.bank_mip, tick.z, tick.o)
    x = np.asarray(tick.x, dtype=float)

    def forecast_fn(u: float) -> MixtureForecast:
        pi = sigmoid_predict(models.position_model, np.append(x, impact.beta * u))
        return MixtureForecast(
            pi=pi,
            down=down0.shift(-impact.k_mdp * impact.beta * u),
            up=up0.shift(-impact.k_mip * impact.beta * u),
        )

    return forecast_fn
