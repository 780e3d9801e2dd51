"""Mixture-weight logistic model and reserve-ladder quantile price models.

The mixture weight is a logistic regression on exogenous features (plus an
optional position feature); each regulation-price distribution comes from a
bank of softmax models that allocate probability over a fixed ladder of
reserve volumes and price that allocation with the known ladder prices.
All fitting is deterministic full-batch gradient descent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._optim import minimize_gd
from .dists import DiscretePriceDistribution, MixtureForecast, QuantileSet
from .market_impact import ImpactParams, Regime

__all__ = [
    "DegenerateLabelsError",
    "FeatureScaler",
    "LogisticModel",
    "sigmoid_predict",
    "fit_logistic",
    "logistic_loss_and_grad",
    "augment_with_positions",
    "ReserveGrid",
    "SoftmaxPriceModel",
    "softmax_weights",
    "expected_reserve_price",
    "pinball_loss",
    "quantile_loss_and_grad",
    "QuantileModelBank",
    "fit_quantile_bank",
    "predict_quantiles",
    "predict_regulation_distribution",
    "quantile_matrix",
    "forecast",
]

# Probabilities are kept strictly inside (0, 1) so downstream logits stay finite.
_P_LO = 1e-300
_P_HI = float(np.nextafter(1.0, 0.0))


class DegenerateLabelsError(ValueError):
    """Raised when classification data contains a single label."""


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _stable_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ew = np.exp(shifted)
    return ew / ew.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class FeatureScaler:
    """Per-column standardization frozen at fit time."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "FeatureScaler":
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 0.0, scale, 1.0)  # constant columns pass through
        return cls(mean=mean, scale=scale)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        return cls(mean=np.asarray(d["mean"], float), scale=np.asarray(d["scale"], float))


@dataclass(frozen=True)
class LogisticModel:
    """Sigmoid of an affine score; optionally tracks a trade-position feature."""

    bias: float
    weights: np.ndarray
    scaler: FeatureScaler | None = None
    position_weight_index: int | None = None

    @property
    def n_features(self) -> int:
        return self.weights.size

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Probabilities for a feature matrix (n, d) or single vector (d,)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        mat = x[None, :] if single else x
        if mat.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {mat.shape[1]}")
        if self.scaler is not None:
            mat = self.scaler.transform(mat)
        p = np.clip(_stable_sigmoid(mat @ self.weights + self.bias), _P_LO, _P_HI)
        return float(p[0]) if single else p

    @property
    def position_weight(self) -> float:
        """Weight of the position feature in original (per-MW-shift) units."""
        if self.position_weight_index is None:
            raise ValueError("model was fitted without a position feature")
        w = float(self.weights[self.position_weight_index])
        if self.scaler is not None:
            w /= float(self.scaler.scale[self.position_weight_index])
        return w

    def to_dict(self) -> dict:
        return {
            "bias": self.bias,
            "weights": self.weights.tolist(),
            "scaler": None if self.scaler is None else self.scaler.to_dict(),
            "position_weight_index": self.position_weight_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        return cls(
            bias=float(d["bias"]),
            weights=np.asarray(d["weights"], float),
            scaler=None if d["scaler"] is None else FeatureScaler.from_dict(d["scaler"]),
            position_weight_index=d["position_weight_index"],
        )


def sigmoid_predict(model: LogisticModel, x) -> float:
    """Probability of a positive system imbalance for one feature vector."""
    return float(model.predict(np.asarray(x, dtype=float)))


def logistic_loss_and_grad(params: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float):
    """Mean negative log-likelihood plus an L2 penalty on the weights.

    ``params[0]`` is the bias (unpenalized); the rest are feature weights.
    Returns (value, gradient) with the gradient computed analytically.
    """
    b, w = params[0], params[1:]
    z = x @ w + b
    val = float(np.mean(np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))))
    val += l2 * float(w @ w)
    r = (_stable_sigmoid(z) - y) / y.size
    grad = np.concatenate(([r.sum()], x.T @ r + 2.0 * l2 * w))
    return val, grad


def fit_logistic(
    x,
    y,
    *,
    l2: float = 1e-4,
    standardize: bool = True,
    grad_tol: float = 1e-6,
    max_iter: int = 5000,
    position_weight_index: int | None = None,
) -> LogisticModel:
    """Maximum-likelihood logistic fit by gradient descent with line search."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    y = np.asarray(y, dtype=float).ravel()
    if y.size != x.shape[0]:
        raise ValueError("label length does not match feature rows")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite features")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise DegenerateLabelsError("training data contains a single label")
    scaler = FeatureScaler.fit(x) if (standardize and x.shape[1] > 0) else None
    xs = scaler.transform(x) if scaler is not None else x
    result = minimize_gd(
        lambda p: logistic_loss_and_grad(p, xs, y, l2),
        np.zeros(x.shape[1] + 1),
        grad_tol=grad_tol,
        max_iter=max_iter,
    )
    return LogisticModel(
        bias=float(result.x[0]),
        weights=result.x[1:].copy(),
        scaler=scaler,
        position_weight_index=position_weight_index,
    )


def augment_with_positions(
    x,
    imbalance,
    u_max: float,
    beta: float,
    rng,
    *,
    u_min: float = 0.0,
):
    """Append an artificial trade-position feature and relabel accordingly.

    Positions are sampled uniformly from [u_min, u_max]; the appended
    feature is the induced imbalance shift ``beta * u`` and the new label
    is 1{s > -beta * u}, i.e. whether the imbalance stays positive after
    absorbing the trade. Deterministic for a fixed seed or generator.

    Returns ``(augmented_features, labels, sampled_positions)``.
    """
    if u_max <= 0.0:
        raise ValueError("u_max must be positive")
    if u_min > u_max:
        raise ValueError("u_min must not exceed u_max")
    x = np.asarray(x, dtype=float)
    s = np.asarray(imbalance, dtype=float).ravel()
    if x.ndim != 2 or x.shape[0] != s.size:
        raise ValueError("feature matrix and imbalance sequence must align")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    u = gen.uniform(u_min, u_max, s.size)
    shift = beta * u
    labels = s > -shift
    return np.hstack([x, shift[:, None]]), labels, u


@dataclass(frozen=True)
class ReserveGrid:
    """Fixed ladders of reserve volumes (MW), automatic then manual."""

    afrr_volumes: tuple[float, ...]
    mfrr_volumes: tuple[float, ...]

    def __post_init__(self):
        for name, vols in (("afrr_volumes", self.afrr_volumes), ("mfrr_volumes", self.mfrr_volumes)):
            arr = tuple(float(v) for v in vols)
            if len(arr) == 0:
                raise ValueError(f"{name} must be non-empty")
            if arr[0] <= 0.0 or any(b <= a for a, b in zip(arr, arr[1:])):
                raise ValueError(f"{name} must be strictly increasing and positive")
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return len(self.afrr_volumes) + len(self.mfrr_volumes)

    def column_labels(self) -> list[str]:
        """Reserve-price column names, aFRR ladder first (matches price vectors)."""
        return [f"afrr_{v:g}" for v in self.afrr_volumes] + [
            f"mfrr_{v:g}" for v in self.mfrr_volumes
        ]

    def to_dict(self) -> dict:
        return {"afrr_volumes": list(self.afrr_volumes), "mfrr_volumes": list(self.mfrr_volumes)}

    @classmethod
    def from_dict(cls, d: dict) -> "ReserveGrid":
        return cls(tuple(d["afrr_volumes"]), tuple(d["mfrr_volumes"]))


@dataclass(frozen=True)
class SoftmaxPriceModel:
    """Linear-softmax allocation over the reserve ladder."""

    weight_matrix: np.ndarray  # (n_outputs, n_features)
    biases: np.ndarray  # (n_outputs,)
    scaler: FeatureScaler | None = None

    @property
    def n_outputs(self) -> int:
        return self.biases.size

    @property
    def n_features(self) -> int:
        return self.weight_matrix.shape[1]


def softmax_weights(model: SoftmaxPriceModel, z) -> np.ndarray:
    """Probability allocation over the ladder for one feature vector."""
    z = np.asarray(z, dtype=float).ravel()
    if z.size != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {z.size}")
    zs = model.scaler.transform(z) if model.scaler is not None else z
    return _stable_softmax_rows(model.weight_matrix @ zs + model.biases)


def expected_reserve_price(model: SoftmaxPriceModel, z, o) -> float:
    """Allocation-weighted ladder price <w(z), o>."""
    o = np.asarray(o, dtype=float).ravel()
    if o.size != model.n_outputs:
        raise ValueError(f"expected {model.n_outputs} ladder prices, got {o.size}")
    return float(softmax_weights(model, z) @ o)


def pinball_loss(tau: float, e):
    """Quantile loss: tau * e above the quantile, (tau - 1) * e below."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau {tau} outside [0, 1]")
    e_arr = np.asarray(e, dtype=float)
    out = np.where(e_arr >= 0.0, tau * e_arr, (tau - 1.0) * e_arr)
    return float(out) if np.isscalar(e) else out


def quantile_loss_and_grad(
    params: np.ndarray,
    z: np.ndarray,
    o: np.ndarray,
    y: np.ndarray,
    tau: float,
    n_outputs: int,
):
    """Mean pinball loss of the softmax-allocated ladder price.

    ``params`` flattens the (n_outputs, n_features) weight matrix followed
    by the biases. Uses the subgradient tau at a zero residual.
    """
    n, d = z.shape
    w_mat = params[: n_outputs * d].reshape(n_outputs, d)
    b = params[n_outputs * d :]
    weights = _stable_softmax_rows(z @ w_mat.T + b)
    yhat = np.sum(weights * o, axis=1)
    e = y - yhat
    val = float(np.mean(np.where(e >= 0.0, tau * e, (tau - 1.0) * e)))
    dval_dyhat = -np.where(e >= 0.0, tau, tau - 1.0) / n
    dlogits = dval_dyhat[:, None] * weights * (o - yhat[:, None])
    grad = np.concatenate([(dlogits.T @ z).ravel(), dlogits.sum(axis=0)])
    return val, grad


@dataclass(frozen=True)
class QuantileModelBank:
    """One softmax price model per quantile level, for a single regime."""

    regime: Regime
    taus: np.ndarray  # (n_q,)
    weights: np.ndarray  # (n_q, n_outputs, n_features)
    biases: np.ndarray  # (n_q, n_outputs)
    scaler: FeatureScaler | None

    @property
    def n_q(self) -> int:
        return self.taus.size

    @property
    def n_outputs(self) -> int:
        return self.biases.shape[1]

    def model(self, i: int) -> SoftmaxPriceModel:
        return SoftmaxPriceModel(self.weights[i], self.biases[i], self.scaler)

    def to_dict(self) -> dict:
        return {
            "regime": self.regime.value,
            "taus": self.taus.tolist(),
            "weights": self.weights.tolist(),
            "biases": self.biases.tolist(),
            "scaler": None if self.scaler is None else self.scaler.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantileModelBank":
        return cls(
            regime=Regime(d["regime"]),
            taus=np.asarray(d["taus"], float),
            weights=np.asarray(d["weights"], float),
            biases=np.asarray(d["biases"], float),
            scaler=None if d["scaler"] is None else FeatureScaler.from_dict(d["scaler"]),
        )


def quantile_levels(n_q: int) -> np.ndarray:
    """n_q evenly spaced levels placed at bin midpoints of (0, 1)."""
    if n_q < 2:
        raise ValueError("need at least 2 quantile levels")
    return (np.arange(n_q) + 0.5) / n_q


def fit_quantile_bank(
    z,
    o,
    y,
    *,
    regime: Regime,
    n_q: int,
    grad_tol: float = 1e-6,
    max_iter: int = 400,
) -> QuantileModelBank:
    """Fit the per-level softmax models of one regime independently.

    ``z`` are the model inputs, ``o`` the per-row ladder prices, and ``y``
    the observed regulation prices of this regime. Every level starts from
    a uniform allocation and is trained to its own pinball loss.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]  # single-feature input as a column
    o = np.asarray(o, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if z.shape[0] != y.size or o.shape != (y.size, o.shape[1]):
        raise ValueError("inconsistent training shapes")
    if y.size == 0:
        raise ValueError(f"no training rows for regime {regime.value}")
    taus = quantile_levels(n_q)
    n_out = o.shape[1]
    scaler = FeatureScaler.fit(z)
    zs = scaler.transform(z)
    weights = np.empty((n_q, n_out, z.shape[1]))
    biases = np.empty((n_q, n_out))
    residuals = y[:, None] - o  # per-row error of each pure ladder level
    for i, tau in enumerate(taus):
        # The softmax pullback of the pinball loss is non-convex with flat
        # one-hot corners; warm-starting at the best pure ladder level keeps
        # early line-search jumps out of the wrong corner.
        level_loss = np.mean(
            np.where(residuals >= 0.0, tau * residuals, (tau - 1.0) * residuals), axis=0
        )
        x0 = np.zeros(n_out * z.shape[1] + n_out)
        x0[n_out * z.shape[1] + int(np.argmin(level_loss))] = 2.0
        result = minimize_gd(
            lambda p, t=tau: quantile_loss_and_grad(p, zs, o, y, t, n_out),
            x0,
            grad_tol=grad_tol,
            max_iter=max_iter,
        )
        weights[i] = result.x[: n_out * z.shape[1]].reshape(n_out, z.shape[1])
        biases[i] = result.x[n_out * z.shape[1] :]
    return QuantileModelBank(regime=regime, taus=taus, weights=weights, biases=biases, scaler=scaler)


def predict_quantiles(bank: QuantileModelBank, z, o) -> QuantileSet:
    """Raw per-level price predictions for one tick (not yet reordered)."""
    z = np.asarray(z, dtype=float).ravel()
    o = np.asarray(o, dtype=float).ravel()
    if o.size != bank.n_outputs:
        raise ValueError(f"expected {bank.n_outputs} ladder prices, got {o.size}")
    zs = bank.scaler.transform(z) if bank.scaler is not None else z
    logits = bank.weights @ zs + bank.biases
    w = _stable_softmax_rows(logits)
    return QuantileSet(bank.taus, w @ o)


def predict_regulation_distribution(bank: QuantileModelBank, z, o) -> DiscretePriceDistribution:
    """Equal-mass distribution over the bank's (reordered) quantile prices."""
    return predict_quantiles(bank, z, o).to_distribution()


def quantile_matrix(bank: QuantileModelBank, z, o) -> np.ndarray:
    """Batched quantile predictions, one row of n_q prices per input row."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    o = np.atleast_2d(np.asarray(o, dtype=float))
    zs = bank.scaler.transform(z) if bank.scaler is not None else z
    logits = np.einsum("qkd,nd->nqk", bank.weights, zs) + bank.biases
    w = _stable_softmax_rows(logits)
    return np.einsum("nqk,nk->nq", w, o)


def forecast(
    weight_model: LogisticModel,
    mdp_bank: QuantileModelBank,
    mip_bank: QuantileModelBank,
    x,
    z,
    o,
    u: float,
    impact: ImpactParams,
) -> MixtureForecast:
    """Position-adjusted mixture forecast of the settlement price.

    The mixture weight is evaluated with the imbalance shift ``beta * u``
    appended as the position feature; each regime distribution is shifted
    down by its sensitivity times the same trade-induced imbalance shift.
    """
    if weight_model.position_weight_index is None:
        raise ValueError("weight model has no position feature; train with augmented data")
    if weight_model.position_weight_index != weight_model.n_features - 1:
        raise ValueError("position feature must be the last model feature")
    x_full = np.append(np.asarray(x, dtype=float), impact.beta * u)
    pi = sigmoid_predict(weight_model, x_full)
    down = predict_regulation_distribution(mdp_bank, z, o).shift(-impact.k_mdp * impact.beta * u)
    up = predict_regulation_distribution(mip_bank, z, o).shift(-impact.k_mip * impact.beta * u)
    return MixtureForecast(pi=pi, down=down, up=up)
