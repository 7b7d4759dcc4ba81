"""Bounded nonlinear least squares on top of CMA-ES."""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from ..errors import TooFewPoints
from .cmaes import CmaConfig, cmaes_minimize


def sum_squared_residuals(model: Callable, params, x, y) -> float:
    r = np.asarray(model(params, x), dtype=float) - y
    return float(np.dot(r, r))


def nls_fit(
    model: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x: Sequence[float],
    y: Sequence[float],
    p0: Sequence[float],
    bounds: Optional[Tuple[Sequence[float], Sequence[float]]] = None,
    config: Optional[CmaConfig] = None,
    restarts: int = 2,
) -> np.ndarray:
    """Fit ``model(params, x) ~ y`` by minimising the squared residual sum.

    Each restart warm-starts from the previous optimum with a fresh step size,
    which lets the search tighten well past the first run's stall point.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y must have the same length")
    if y.size < p0.size:
        raise TooFewPoints(f"{y.size} data points cannot determine {p0.size} parameters")

    lo, hi = (None, None) if bounds is None else (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
    cfg = config or CmaConfig(max_evaluations=20_000, tol_fun=1e-20)
    if np.isscalar(cfg.sigma0) or np.ndim(cfg.sigma0) == 0:
        scale = 0.1 * np.maximum(np.abs(p0), 1e-3)
        if lo is not None:
            span = hi - lo
            scale = np.where(np.isfinite(span), np.minimum(scale, 0.25 * span), scale)
        cfg = replace(cfg, sigma0=scale)
    cfg = replace(cfg, lower=lo, upper=hi)

    def loss(p):
        val = sum_squared_residuals(model, p, x, y)
        return val if np.isfinite(val) else np.inf

    best = p0 if lo is None else np.clip(p0, lo, hi)
    best_f = loss(best)
    for k in range(restarts + 1):
        res = cmaes_minimize(loss, best, replace(cfg, seed=cfg.seed + k))
        if res.fun <= best_f:
            best, best_f = res.x, res.fun
        cfg = replace(cfg, sigma0=np.asarray(cfg.sigma0) * 0.1)
    return best
