"""Covariance Matrix Adaptation Evolution Strategy.

(mu/mu_w, lambda)-CMA-ES with weighted recombination, cumulative step-size
adaptation and rank-one plus rank-mu covariance updates. The search runs in
coordinates normalised by a per-coordinate scale vector so that parameters of
very different magnitude (a focal length in the hundreds next to angles in
radians) share one step size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from ..errors import ObjectiveNonFinite


@dataclass
class CmaConfig:
    population_size: Optional[int] = None  # None -> 4 + floor(3 ln d)
    sigma0: Union[float, Sequence[float]] = 0.1
    max_evaluations: int = 4000
    seed: int = 0
    tol_fun: float = 1e-12
    tol_x: float = 1e-14
    lower: Optional[Sequence[float]] = None
    upper: Optional[Sequence[float]] = None
    penalty: float = 1.0

    def __post_init__(self):
        if self.population_size is not None and self.population_size < 4:
            raise ValueError("population_size must be >= 4")
        if np.any(np.asarray(self.sigma0, dtype=float) <= 0):
            raise ValueError("sigma0 must be positive")
        if self.max_evaluations <= 0:
            raise ValueError("max_evaluations must be positive")

    def lam(self, dim: int) -> int:
        return self.population_size or 4 + int(3 * math.log(dim))


class CmaResult(NamedTuple):
    x: np.ndarray
    fun: float
    nfev: int
    ngen: int
    history: List[float]  # best-so-far after each generation


def _as_batch(objective, vectorized):
    if vectorized:
        return lambda X: np.asarray(objective(X), dtype=float).reshape(len(X))
    return lambda X: np.array([float(objective(x)) for x in X])


def cmaes_minimize(
    objective: Callable,
    x0: Sequence[float],
    config: Optional[CmaConfig] = None,
    vectorized: bool = False,
    callback: Optional[Callable[[int, np.ndarray, np.ndarray], None]] = None,
) -> CmaResult:
    """Minimise ``objective`` starting from ``x0``.

    With ``vectorized=True`` the objective receives a ``(lambda, d)`` array of
    candidates and must return ``lambda`` values. Out-of-bound candidates are
    evaluated at their projection onto the box plus a quadratic penalty on the
    (scaled) distance; the returned point is always inside the box.
    """
    cfg = config or CmaConfig()
    rng = np.random.default_rng(cfg.seed)
    batch = _as_batch(objective, vectorized)

    x0 = np.asarray(x0, dtype=float).ravel()
    n = x0.size
    scale = np.broadcast_to(np.asarray(cfg.sigma0, dtype=float), (n,)).copy()
    lo = np.full(n, -np.inf) if cfg.lower is None else np.asarray(cfg.lower, dtype=float)
    hi = np.full(n, np.inf) if cfg.upper is None else np.asarray(cfg.upper, dtype=float)
    x0 = np.clip(x0, lo, hi)

    f0 = batch(x0[None])[0]
    if not np.isfinite(f0):
        raise ObjectiveNonFinite(f"objective is {f0} at the starting point")
    nfev = 1
    best_x, best_f = x0.copy(), float(f0)
    history: List[float] = []

    lam = cfg.lam(n)
    mu = lam // 2
    weights = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights /= weights.sum()
    mueff = 1.0 / np.sum(weights**2)

    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    # normalised coordinates: x = x0 + scale * y
    mean = np.zeros(n)
    sigma = 1.0
    pc = np.zeros(n)
    ps = np.zeros(n)
    B = np.eye(n)
    D = np.ones(n)
    C = np.eye(n)
    inv_sqrt_c = np.eye(n)
    eigen_every = max(1, int(1.0 / ((c1 + cmu) * n * 10)))
    recent: List[float] = []
    gen = 0

    while nfev + lam <= cfg.max_evaluations:
        z = rng.standard_normal((lam, n))
        y = (z * D) @ B.T
        cand = mean + sigma * y
        X = x0 + scale * cand
        Xp = np.clip(X, lo, hi)
        fx = batch(Xp)
        fx = np.where(np.isnan(fx), np.inf, fx)
        nfev += lam
        dist2 = np.sum(((X - Xp) / scale) ** 2, axis=1)
        fitness = fx + cfg.penalty * dist2

        order = np.argsort(fitness, kind="stable")
        i_best = int(np.argmin(fx))
        if fx[i_best] < best_f:
            best_f, best_x = float(fx[i_best]), Xp[i_best].copy()
        history.append(best_f)
        gen += 1
        if callback is not None:
            callback(gen, Xp, fx)

        y_sel = y[order[:mu]]
        old_mean = mean
        mean = old_mean + sigma * (weights @ y_sel)
        y_w = (mean - old_mean) / sigma

        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * (inv_sqrt_c @ y_w)
        ps_norm = np.linalg.norm(ps)
        hsig = ps_norm / math.sqrt(1 - (1 - cs) ** (2 * gen)) / chi_n < 1.4 + 2 / (n + 1)
        pc = (1 - cc) * pc + hsig * math.sqrt(cc * (2 - cc) * mueff) * y_w

        rank_mu = (y_sel.T * weights) @ y_sel
        C = (
            (1 - c1 - cmu) * C
            + c1 * (np.outer(pc, pc) + (not hsig) * cc * (2 - cc) * C)
            + cmu * rank_mu
        )
        sigma *= math.exp((cs / damps) * (ps_norm / chi_n - 1))

        if gen % eigen_every == 0:
            C = (C + C.T) / 2.0
            evals, B = np.linalg.eigh(C)
            D = np.sqrt(np.maximum(evals, 1e-300))
            inv_sqrt_c = (B / D) @ B.T

        finite = fx[np.isfinite(fx)]
        recent.append(float(np.min(finite)) if finite.size else np.inf)
        window = recent[-(10 + int(30 * n / lam)) :]
        spread = np.ptp(np.concatenate([window, finite])) if finite.size else np.inf
        if gen > 1 and spread < cfg.tol_fun:
            break
        if sigma * D.max() < cfg.tol_x:
            break
        if not np.isfinite(sigma) or D.max() / D.min() > 1e14:
            break

    return CmaResult(best_x, best_f, nfev, gen, history)
