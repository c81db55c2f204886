"""Safeguarded Newton minimizer for smooth convex duals.

Newton direction from the explicit Hessian, Armijo backtracking line
search, gradient-descent fallback whenever the Hessian solve fails or the
Newton direction is not a descent direction (possible for singular
Hessians when all softness parameters are zero).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import CalibrationError, ConfigurationError


@dataclass
class NewtonResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    iterations: int


def newton_minimize(
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    hessian: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    tol: float = 1e-9,
    max_iter: int = 200,
    armijo: float = 1e-4,
    max_backtracks: int = 60,
) -> NewtonResult:
    x = np.array(x0, dtype=float)
    value, grad = value_and_grad(x)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise ConfigurationError("objective not finite at the starting point")
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < tol:
            return NewtonResult(x=x, value=value, gradient=grad, iterations=it - 1)
        step = _direction(hessian(x), grad)
        slope = float(grad @ step)
        if slope >= 0.0:
            step = -grad
            slope = float(grad @ step)
        # absolute slack: near the optimum the predicted decrease sits below
        # float resolution of the objective, which must still count as accepted
        noise = 1e-14 * (1.0 + abs(value))
        t = 1.0
        for _ in range(max_backtracks):
            cand = x + t * step
            cand_value, cand_grad = value_and_grad(cand)
            if np.isfinite(cand_value) and (
                cand_value <= value + armijo * t * slope + noise
            ):
                break
            t *= 0.5
        else:
            raise CalibrationError(
                "line search failed to reduce the dual objective",
                gradient_norm=float(np.max(np.abs(grad))),
                iterations=it,
            )
        x, value, grad = cand, cand_value, cand_grad
    if np.max(np.abs(grad)) < tol:
        return NewtonResult(x=x, value=value, gradient=grad, iterations=max_iter)
    raise CalibrationError(
        f"no convergence in {max_iter} iterations "
        f"(grad inf-norm {np.max(np.abs(grad)):.3e})",
        gradient_norm=float(np.max(np.abs(grad))),
        iterations=max_iter,
    )


def _direction(hess: np.ndarray, grad: np.ndarray) -> np.ndarray:
    try:
        step = np.linalg.solve(hess, -grad)
    except np.linalg.LinAlgError:
        return -grad
    if not np.all(np.isfinite(step)):
        return -grad
    return step
