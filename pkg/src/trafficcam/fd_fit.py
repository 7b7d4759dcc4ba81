"""Speed-density fundamental diagrams (Newell, Greenshields): evaluation and fitting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DensityOutOfRange, InputError, TooFewPoints
from .optimize import CmaConfig, nls_fit

NEWELL = "newell"
GREENSHIELDS = "greenshields"
MODELS = (NEWELL, GREENSHIELDS)

K_LIMIT = 1e-6  # below this density the Newell speed is taken at its k -> 0 limit
V_F_MAX = 200.0
K_J_MAX = 1000.0
LAMBDA_MAX = 1e5


@dataclass(frozen=True)
class FDParams:
    model: str
    v_f: float  # km/h
    k_j: float  # veh/km/lane
    lam: Optional[float] = None  # Newell speed-spacing slope

    def __post_init__(self):
        if self.model not in MODELS:
            raise InputError(f"unknown fundamental diagram {self.model!r}")
        if not (self.v_f > 0 and self.k_j > 0):
            raise InputError("v_f and k_j must be positive")
        if self.model == NEWELL and not (self.lam is not None and self.lam > 0):
            raise InputError("Newell model needs a positive lambda")

    def speed(self, k):
        return newell_speed(k, self) if self.model == NEWELL else greenshields_speed(k, self)

    def to_dict(self) -> dict:
        d = {"model": self.model, "v_f_kmh": self.v_f, "k_j_veh_per_km": self.k_j}
        if self.model == NEWELL:
            d["lambda"] = self.lam
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FDParams":
        return cls(d["model"], float(d["v_f_kmh"]), float(d["k_j_veh_per_km"]),
                   None if d.get("lambda") is None else float(d["lambda"]))


def _check_range(k: np.ndarray, k_j: float, strict_zero: bool):
    bad = (k < 0) | (k > k_j * (1 + 1e-12))
    if bad.any():
        raise DensityOutOfRange(f"density outside [0, {k_j}]: {k[bad][:3].tolist()}")


def _newell(k: np.ndarray, v_f: float, k_j: float, lam: float) -> np.ndarray:
    small = k < K_LIMIT
    ks = np.where(small, 1.0, k)
    v = v_f * (1.0 - np.exp(-(lam / v_f) * (1.0 / ks - 1.0 / k_j)))
    return np.where(small, v_f, v)


def newell_speed(k, params: FDParams):
    """``v = v_f (1 - exp(-lam / v_f * (1/k - 1/k_j)))``, equal to ``v_f`` as k -> 0."""
    karr = np.asarray(k, dtype=float)
    _check_range(karr, params.k_j, True)
    v = _newell(karr, params.v_f, params.k_j, params.lam)
    return float(v) if np.ndim(k) == 0 else v


def greenshields_speed(k, params: FDParams):
    karr = np.asarray(k, dtype=float)
    _check_range(karr, params.k_j, False)
    v = params.v_f * (1.0 - karr / params.k_j)
    return float(v) if np.ndim(k) == 0 else v


def flow(k, v):
    """Flow ``q = k v`` in veh/h/lane for k in veh/km/lane and v in km/h."""
    k = np.asarray(k, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(k < 0) or np.any(v < 0):
        raise InputError("density and speed must be non-negative")
    q = k * v
    return float(q) if q.ndim == 0 else q


def max_flow(params: FDParams, n_grid: int = 20001) -> Tuple[float, float]:
    """``(k*, q*)`` maximising ``q(k) = k v(k)`` on ``[0, k_j]``."""
    if params.model == GREENSHIELDS:
        return params.k_j / 2.0, params.v_f * params.k_j / 4.0
    q = lambda kk: kk * _newell(np.asarray(kk, float), params.v_f, params.k_j, params.lam)
    grid = np.linspace(0.0, params.k_j, n_grid)
    i = int(np.argmax(q(grid)))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    g = (np.sqrt(5.0) - 1.0) / 2.0
    for _ in range(100):
        c, d = b - g * (b - a), a + g * (b - a)
        if q(c) >= q(d):
            b = d
        else:
            a = c
    k_star = (a + b) / 2.0
    return float(k_star), float(q(k_star))


def _newell_model(p, k):
    return _newell(k, p[0], p[1], p[2])


def _newell_start(k, v):
    """Coarse grid search for a starting point."""
    vmax, kmax = float(v.max()), float(k.max())
    best, best_sse = None, np.inf
    for v_f in np.clip(vmax * np.linspace(1.0, 1.5, 11), 1e-3, V_F_MAX):
        for k_j in np.clip(kmax * np.geomspace(1.02, 8.0, 15), None, K_J_MAX):
            if k_j <= kmax:
                continue
            lam = np.geomspace(1.0, LAMBDA_MAX, 41)[:, None]
            pred = v_f * (1.0 - np.exp(-(lam / v_f) * (1.0 / k - 1.0 / k_j)))
            sse = ((pred - v) ** 2).sum(axis=1)
            j = int(np.argmin(sse))
            if sse[j] < best_sse:
                best, best_sse = np.array([v_f, k_j, float(lam[j, 0])]), sse[j]
    return best


def fit_fd(k: Sequence[float], v: Sequence[float], model: str = NEWELL, seed: int = 0) -> FDParams:
    """Least-squares fit of speed against density within the admissible parameter box."""
    k = np.asarray(k, dtype=float)
    v = np.asarray(v, dtype=float)
    if k.shape != v.shape:
        raise InputError("density and speed series differ in length")
    if model not in MODELS:
        raise InputError(f"unknown fundamental diagram {model!r}")
    need = 3 if model == NEWELL else 2
    if k.size < need:
        raise TooFewPoints(f"{model} fit needs at least {need} points, got {k.size}")
    if np.any(k <= 0):
        raise DensityOutOfRange("fitting requires strictly positive densities")
    kmax = float(k.max())
    k_j_lo = np.nextafter(kmax, np.inf)

    if model == GREENSHIELDS:
        A = np.column_stack([np.ones_like(k), k])
        (a, b), *_ = np.linalg.lstsq(A, v, rcond=None)
        if b < 0 and 0 < a <= V_F_MAX and k_j_lo < -a / b <= K_J_MAX:
            return FDParams(GREENSHIELDS, float(a), float(-a / b))
        p0 = np.array([min(max(v.max(), 1e-3), V_F_MAX), min(2.0 * kmax, K_J_MAX)])
        p = nls_fit(lambda p, x: p[0] * (1.0 - x / p[1]), k, v, p0,
                    bounds=([1e-9, k_j_lo], [V_F_MAX, K_J_MAX]),
                    config=CmaConfig(max_evaluations=20_000, tol_fun=1e-20, seed=seed))
        return FDParams(GREENSHIELDS, float(p[0]), float(p[1]))

    p0 = _newell_start(k, v)
    p = nls_fit(_newell_model, k, v, p0,
                bounds=([1e-9, k_j_lo, 1e-9], [V_F_MAX, K_J_MAX, LAMBDA_MAX]),
                config=CmaConfig(max_evaluations=20_000, tol_fun=1e-20, seed=seed), restarts=3)
    return FDParams(NEWELL, float(p[0]), float(p[1]), float(p[2]))


def curve_samples(params: FDParams, n: int = 101) -> np.ndarray:
    """``(n, 3)`` array of density, speed and flow along the fitted curve."""
    k = np.linspace(0.0, params.k_j, n)
    v = params.speed(k)
    return np.column_stack([k, v, k * v])


def curve_csv(params: FDParams, n: int = 101) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k_veh_per_km", "v_kmh", "q_veh_per_h"])
    w.writerows(curve_samples(params, n).tolist())
    return buf.getvalue()
