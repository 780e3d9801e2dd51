"""Full-batch gradient descent with backtracking line search.

Deterministic by construction (no shuffling, no randomness), so every fit
in the package is bit-reproducible for a given dataset and initial point.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["GdResult", "minimize_gd"]


@dataclass
class GdResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    iterations: int
    converged: bool


def minimize_gd(
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    *,
    grad_tol: float = 1e-6,
    max_iter: int = 1000,
    initial_step: float = 1.0,
    armijo: float = 1e-4,
    shrink: float = 0.5,
    grow: float = 2.0,
    min_step: float = 1e-18,
) -> GdResult:
    """Minimize a differentiable objective by steepest descent.

    The step size backtracks until the Armijo sufficient-decrease condition
    holds and is grown geometrically after each accepted step, which lets
    the iterates cover the exponentially growing parameter scales that
    separable classification data and near-one-hot softmax fits produce.
    Terminates on the max-norm of the gradient, the iteration cap, or a
    stalled line search.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = value_and_grad(x)
    step = float(initial_step)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= grad_tol:
            return GdResult(x, f, gnorm, iterations - 1, True)
        gsq = float(g @ g)
        step = min(step * grow, 1e12)
        while True:
            x_new = x - step * g
            f_new, g_new = value_and_grad(x_new)
            if np.isfinite(f_new) and f_new <= f - armijo * step * gsq:
                break
            step *= shrink
            if step < min_step:
                # Line search stalled (e.g., at a subgradient kink); report
                # the best point found so far.
                return GdResult(x, f, gnorm, iterations, False)
        x, f, g = x_new, f_new, g_new
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    return GdResult(x, f, gnorm, max_iter, gnorm <= grad_tol)
