"""Risk-optimal position selection and adaptive tuning of the risk weight.

Positions live on a finite grid of multiples of the smallest tradable
unit. For each candidate position the forecast is position-adjusted, the
cost ``phi(u) = (q(u) + rho[-p]) * u`` is evaluated, and the grid argmin is
taken; a Newton fast path covers the expectation case under the convexity
conditions. The risk weight alpha is re-tuned each settlement period from
the hindsight losses of the trailing window.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dists import DiscretePriceDistribution, MixtureForecast, flatten
from .market_impact import ImpactParams
from .risk import RiskSpec, cvar_grid, evar_grid

__all__ = [
    "ActionSpace",
    "OrderBook",
    "InsufficientDepthError",
    "fill_cost",
    "position_loss",
    "DecisionTable",
    "decision_table",
    "PositionDecision",
    "optimal_position",
    "NewtonResult",
    "newton_expected_position",
    "convexity_bound",
    "TradeRecord",
    "default_alpha_grid",
    "select_alpha",
    "AlphaAdapter",
]

logger = logging.getLogger(__name__)

ForecastFn = Callable[[float], MixtureForecast]


@dataclass(frozen=True)
class ActionSpace:
    """Finite grid of tradable positions: multiples of ``step`` up to ``u_max``."""

    step: float
    u_max: float
    allow_short: bool = False

    def __post_init__(self):
        if self.step <= 0.0:
            raise ValueError("step must be positive")
        n = self.u_max / self.step
        if self.u_max < 0.0 or abs(n - round(n)) > 1e-9:
            raise ValueError(f"u_max {self.u_max} is not a multiple of step {self.step}")

    @property
    def n_steps(self) -> int:
        return int(round(self.u_max / self.step))

    def grid(self) -> np.ndarray:
        """All positions, ascending; includes the negative side when shorts are allowed."""
        lo = -self.n_steps if self.allow_short else 0
        return np.arange(lo, self.n_steps + 1) * self.step

    def ordered_grid(self) -> np.ndarray:
        """Positions ordered by absolute size (ties: short before long).

        This is the enumeration order of the optimizer, so exact cost ties
        resolve toward the smallest absolute position.
        """
        g = self.grid()
        return g[np.lexsort((g, np.abs(g)))]

    def long_only(self) -> "ActionSpace":
        return ActionSpace(self.step, self.u_max, allow_short=False)

    def short_only(self) -> "ActionSpace":
        """Mirror grid {0, -step, ..., -u_max}, expressed via negated fills."""
        return ActionSpace(self.step, self.u_max, allow_short=False)


class InsufficientDepthError(RuntimeError):
    """The order book cannot fill the requested volume."""


@dataclass(frozen=True)
class OrderBook:
    """Price/volume ladder; asks ascending by price, bids descending."""

    asks: tuple[tuple[float, float], ...] = ()
    bids: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        asks = tuple((float(p), float(v)) for p, v in self.asks)
        bids = tuple((float(p), float(v)) for p, v in self.bids)
        if not asks and not bids:
            raise ValueError("order book needs at least one level")
        for side, levels, sign in (("asks", asks, 1.0), ("bids", bids, -1.0)):
            prices = [p for p, _ in levels]
            if any(v <= 0.0 for _, v in levels):
                raise ValueError(f"{side}: volumes must be positive")
            if any(sign * (b - a) <= 0.0 for a, b in zip(prices, prices[1:])):
                raise ValueError(f"{side}: prices must be strictly {'ascending' if sign > 0 else 'descending'}")
        object.__setattr__(self, "asks", asks)
        object.__setattr__(self, "bids", bids)

    def depth(self, side: str) -> float:
        levels = self.asks if side == "ask" else self.bids
        return float(sum(v for _, v in levels))

    def best_price(self) -> float:
        return self.asks[0][0] if self.asks else self.bids[0][0]


def fill_cost(book: OrderBook, u: float) -> tuple[float, float]:
    """Cost and volume-weighted average price of filling ``u`` MW.

    Positive ``u`` buys from the asks, negative sells into the bids. The
    returned cost satisfies ``cost == q * u`` (negative for sales). At
    ``u == 0`` the cost is zero and the price is the best book level, kept
    for reporting continuity.
    """
    if u == 0.0:
        return 0.0, book.best_price()
    levels = book.asks if u > 0.0 else book.bids
    side = "ask" if u > 0.0 else "bid"
    remaining = abs(u)
    cost = 0.0
    for price, volume in levels:
        take = min(volume, remaining)
        cost += price * take
        remaining -= take
        if remaining <= 0.0:
            break
    if remaining > 1e-12:
        raise InsufficientDepthError(
            f"{side} depth {book.depth(side):g} MW cannot fill {abs(u):g} MW"
        )
    avg = cost / abs(u)
    return cost * (1.0 if u > 0.0 else -1.0), avg


def position_loss(imbalance_price: float, fill_price: float, u: float) -> float:
    """Per-period loss ``(q - p) * u`` of holding ``u`` MW to settlement.

    Negative values are profits. The quarter-hour energy factor is applied
    in ledger accounting, not here.
    """
    return (fill_price - imbalance_price) * u


@dataclass
class DecisionTable:
    """Cost surface of one settlement period over positions x alpha grid."""

    positions_by_size: np.ndarray  # grid ordered by |u| (optimizer order)
    fill_prices: np.ndarray  # q(u) per row
    rho: np.ndarray  # risk of -p per (row, alpha)
    phi: np.ndarray  # (q(u) + rho) * u per (row, alpha)

    def argmin_rows(self) -> np.ndarray:
        # First occurrence wins, so exact ties resolve to the smallest |u|.
        return np.argmin(self.phi, axis=0)

    def best_positions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-alpha optimal position, its fill price, and its cost."""
        rows = self.argmin_rows()
        cols = np.arange(self.phi.shape[1])
        return (
            self.positions_by_size[rows],
            self.fill_prices[rows],
            self.phi[rows, cols],
        )

    def hindsight_losses(self, realized_price: float) -> np.ndarray:
        """Realized per-alpha loss (q(u*) - p) * u* once the price is known.

        This is the summand of the adaptive-alpha window; the fill price of
        each counterfactual position replays the recorded ladder.
        """
        us, qs, _ = self.best_positions()
        return (qs - realized_price) * us


def _rho_row(kind: str, loss_dist: DiscretePriceDistribution, alphas: np.ndarray) -> np.ndarray:
    if kind == "expectation":
        return np.full(alphas.size, loss_dist.mean())
    if kind == "cvar":
        return cvar_grid(loss_dist, alphas)
    if kind == "evar":
        return evar_grid(loss_dist, alphas)
    raise ValueError(f"unknown risk kind {kind!r}")


def decision_table(
    forecast_fn: ForecastFn,
    book: OrderBook,
    actions,
    kind: str,
    alphas,
) -> DecisionTable:
    """Evaluate the position cost for every grid position and alpha.

    The forecast is rebuilt per position (decision-dependent distribution);
    the risk term is vectorized over the alpha grid so the same table
    serves both the live decision and the adaptive-alpha bookkeeping.
    ``actions`` is an ActionSpace or an explicit position array already
    ordered by absolute size (one-sided strategy legs pass the latter).
    """
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    us = actions.ordered_grid() if isinstance(actions, ActionSpace) else np.asarray(actions, dtype=float)
    q = np.empty(us.size)
    rho = np.empty((us.size, alphas.size))
    for i, u in enumerate(us):
        _, q[i] = fill_cost(book, float(u))
        loss_dist = flatten(forecast_fn(float(u))).negate()
        rho[i] = _rho_row(kind, loss_dist, alphas)
    phi = (q[:, None] + rho) * us[:, None]
    return DecisionTable(positions_by_size=us, fill_prices=q, rho=rho, phi=phi)


@dataclass(frozen=True)
class PositionDecision:
    u: float
    fill_price: float
    cost: float  # phi(u*); never positive because phi(0) = 0 is on the grid


def optimal_position(
    forecast_fn: ForecastFn,
    book: OrderBook,
    spec: RiskSpec,
    actions: ActionSpace,
) -> PositionDecision:
    """Grid argmin of the position cost for a single risk specification."""
    table = decision_table(forecast_fn, book, actions, spec.kind, [spec.alpha])
    us, qs, costs = table.best_positions()
    return PositionDecision(u=float(us[0]), fill_price=float(qs[0]), cost=float(costs[0]))


def convexity_bound(k: float, beta: float, w_u: float, mean_price_gap: float) -> float:
    """Largest position for which the expectation cost is provably convex.

    ``mean_price_gap`` is the gap between the regime mean prices (negated
    down-regulation mean minus negated up-regulation mean). All inputs must
    be positive; the bound is ``20 K / (beta * w_u^2 * gap)``.
    """
    for name, val in (("k", k), ("beta", beta), ("w_u", w_u), ("mean_price_gap", mean_price_gap)):
        if val <= 0.0:
            raise ValueError(f"{name} must be positive (zero denominator otherwise), got {val}")
    return 20.0 * k / (beta * w_u * w_u * mean_price_gap)


@dataclass(frozen=True)
class NewtonResult:
    u: float  # grid-rounded position
    u_continuous: float
    used_newton: bool
    iterations: int


def newton_expected_position(
    forecast_fn: ForecastFn,
    book: OrderBook,
    actions: ActionSpace,
    impact: ImpactParams,
    w_u: float,
    *,
    max_iter: int = 60,
    tol: float = 1e-12,
) -> NewtonResult:
    """Fast path for the expectation measure on a long-only segment.

    Requires equal regime sensitivities, a single ask level covering the
    whole grid, and ``u_max`` below the convexity bound; then the cost is
    smooth and convex and projected Newton iterations on its closed-form
    derivatives converge to the continuous optimum, which is rounded to
    the grid. Violated conditions fall back to enumeration with a warning.
    """

    def _fallback(reason: str) -> NewtonResult:
        logger.warning("newton fast path unavailable (%s); falling back to enumeration", reason)
        decision = optimal_position(forecast_fn, book, RiskSpec("expectation"), actions)
        return NewtonResult(u=decision.u, u_continuous=decision.u, used_newton=False, iterations=0)

    if actions.allow_short:
        return _fallback("grid includes short positions")
    if not math.isclose(impact.k_mdp, impact.k_mip, rel_tol=1e-9, abs_tol=1e-12):
        return _fallback("regime sensitivities differ")
    if not book.asks or book.asks[0][1] + 1e-12 < actions.u_max:
        return _fallback("order book is not a single linear ask segment over the grid")

    base = forecast_fn(0.0)
    pi0 = min(max(base.pi, 1e-15), 1.0 - 1e-15)
    eta0 = math.log(pi0 / (1.0 - pi0))
    c_down = -base.down.mean()
    c_up = -base.up.mean()
    gap = c_down - c_up
    k = impact.k_mdp
    beta = impact.beta
    ask = book.asks[0][0]
    if gap < 0.0:
        return _fallback("regime mean gap is negative; convexity conditions not met")
    if gap > 0.0 and beta > 0.0 and w_u != 0.0:
        bound = convexity_bound(k, beta, abs(w_u), gap)
        if actions.u_max > bound:
            return _fallback(f"u_max {actions.u_max:g} exceeds convexity bound {bound:g}")

    bw = beta * w_u

    def derivatives(u: float) -> tuple[float, float]:
        pi = 1.0 / (1.0 + math.exp(-(eta0 + bw * u)))
        d_pi = pi * (1.0 - pi) * bw
        dd_pi = pi * (1.0 - pi) * (1.0 - 2.0 * pi) * bw * bw
        d1 = 2.0 * k * beta * u + gap * (pi + d_pi * u) + c_up + ask
        d2 = 2.0 * k * beta + gap * (2.0 * d_pi + dd_pi * u)
        return d1, d2

    d1_zero, _ = derivatives(0.0)
    if d1_zero >= 0.0:
        u_cont = 0.0
        iterations = 0
    else:
        d1_max, _ = derivatives(actions.u_max)
        if d1_max <= 0.0:
            u_cont = actions.u_max
            iterations = 0
        else:
            u = actions.u_max / 2.0
            iterations = 0
            for iterations in range(1, max_iter + 1):
                d1, d2 = derivatives(u)
                if d2 <= 0.0:
                    return _fallback("non-convex curvature encountered")
                u_new = min(max(u - d1 / d2, 0.0), actions.u_max)
                if abs(u_new - u) <= tol:
                    u = u_new
                    break
                u = u_new
            u_cont = u
    u_grid = min(max(round(u_cont / actions.step) * actions.step, 0.0), actions.u_max)
    return NewtonResult(u=float(u_grid), u_continuous=float(u_cont), used_newton=True, iterations=iterations)


@dataclass
class TradeRecord:
    """One settlement-period ledger entry for one strategy leg."""

    timestamp: object
    leg: str  # "long" or "short"
    u: float
    fill_price: float
    realized_price: float
    alpha: float
    measure: str

    def profit(self, delta_hours: float) -> float:
        """Realized profit in EUR for a position held one settlement period."""
        return (self.realized_price - self.fill_price) * self.u * delta_hours


def default_alpha_grid(kind: str, size: int = 200) -> np.ndarray:
    """Alpha grid for adaptive tuning; always contains 1.0.

    The entropic measure reacts mostly near alpha = 1, so its grid puts
    four fifths of the points on [0.9, 1] and a coarse tail below.
    """
    if size < 2:
        raise ValueError("grid size must be at least 2")
    if kind == "evar":
        n_tail = max(size // 5, 1)
        tail = np.linspace(0.0, 0.9, n_tail, endpoint=False)
        head = np.linspace(0.9, 1.0, size - n_tail)
        return np.concatenate([tail, head])
    return np.linspace(0.0, 1.0, size)


def select_alpha(mean_losses: np.ndarray, alphas: np.ndarray, previous_index: int) -> int:
    """Index of the hindsight-optimal alpha.

    Exact ties keep the previously selected alpha if it is among the
    minimizers, otherwise resolve to the largest (least risk-averse) one.
    """
    best = mean_losses.min()
    candidates = np.flatnonzero(mean_losses == best)
    if previous_index in candidates:
        return int(previous_index)
    return int(candidates[-1])


class AlphaAdapter:
    """Rolling-window tuner for the risk weight of one strategy leg.

    Each settlement period stores the hindsight loss of every grid alpha
    (positions computed once per period and reused as the window rolls);
    the next alpha minimizes the mean loss over the trailing window. Before
    any history exists the leg trades at alpha = 1 (pure expectation).
    """

    def __init__(self, alphas: np.ndarray, window: int, kind: str):
        if window < 1:
            raise ValueError("window must be at least 1")
        self.alphas = np.asarray(alphas, dtype=float)
        if self.alphas.ndim != 1 or self.alphas.size < 1:
            raise ValueError("alpha grid must be a non-empty 1-D array")
        if np.any(np.diff(self.alphas) <= 0.0):
            raise ValueError("alpha grid must be strictly increasing")
        self.window = int(window)
        self.kind = kind
        self._history: deque[np.ndarray] = deque(maxlen=self.window)
        ones = np.flatnonzero(self.alphas == 1.0)
        self._index = int(ones[0]) if ones.size else self.alphas.size - 1

    @property
    def current_alpha(self) -> float:
        return float(self.alphas[self._index])

    @property
    def current_index(self) -> int:
        return self._index

    def record(self, losses: np.ndarray) -> None:
        losses = np.asarray(losses, dtype=float)
        if losses.shape != self.alphas.shape:
            raise ValueError("loss vector shape does not match the alpha grid")
        self._history.append(losses)

    def windowed_mean(self) -> np.ndarray:
        if not self._history:
            raise ValueError("no recorded losses yet")
        return np.sum(np.stack(tuple(self._history)), axis=0) / len(self._history)

    def update(self) -> float:
        """Re-select alpha from the trailing window; returns the new value."""
        if self._history:
            self._index = select_alpha(self.windowed_mean(), self.alphas, self._index)
        return self.current_alpha
