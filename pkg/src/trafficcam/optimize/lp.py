"""Dense two-phase simplex for small linear programs.

Solves ``max c^T x`` subject to ``A_ub x <= b_ub`` and per-variable bounds.
Bland's rule is used for both the entering and leaving variable, which rules
out cycling on the degenerate instances the dataset mixer produces.
"""

from __future__ import annotations

from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from ..errors import Infeasible, Unbounded

TOL = 1e-9


class LPResult(NamedTuple):
    x: np.ndarray
    objective: float
    iterations: int


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    for r in range(T.shape[0]):
        if r != row and T[r, col] != 0.0:
            T[r] -= T[r, col] * T[row]


def _run(T: np.ndarray, basis: list, allowed: int, max_iter: int) -> int:
    """Pivot until the last row has no negative reduced cost among the first ``allowed`` columns."""
    m = T.shape[0] - 1
    for it in range(max_iter):
        obj = T[-1, :allowed]
        entering = next((j for j in range(allowed) if obj[j] < -TOL), None)
        if entering is None:
            return it
        col = T[:m, entering]
        best_row, best_ratio = None, np.inf
        for i in range(m):
            if col[i] > TOL:
                ratio = T[i, -1] / col[i]
                if ratio < best_ratio - TOL or (abs(ratio - best_ratio) <= TOL and basis[i] < basis[best_row]):
                    best_row, best_ratio = i, ratio
        if best_row is None:
            raise Unbounded("objective is unbounded in the feasible region")
        _pivot(T, best_row, entering)
        basis[best_row] = entering
    raise RuntimeError("simplex iteration limit reached")


def lp_solve(
    c: Sequence[float],
    A_ub: Optional[np.ndarray] = None,
    b_ub: Optional[Sequence[float]] = None,
    bounds: Optional[Sequence[Tuple[Optional[float], Optional[float]]]] = None,
    max_iter: int = 10_000,
) -> LPResult:
    """Maximise ``c @ x`` subject to ``A_ub @ x <= b_ub`` and ``bounds``.

    ``bounds`` is a list of ``(low, high)`` pairs; ``None`` means unbounded on
    that side. The default is ``(0, None)`` for every variable.
    """
    c = np.asarray(c, dtype=float)
    n = c.size
    A = np.zeros((0, n)) if A_ub is None else np.asarray(A_ub, dtype=float).reshape(-1, n)
    b = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).ravel()
    if bounds is None:
        bounds = [(0.0, None)] * n
    if len(bounds) != n or A.shape[0] != b.size:
        raise ValueError("inconsistent LP dimensions")

    # substitute x_i = lo_i + x'_i, or x_i = x+_i - x-_i for free variables
    cols, offset, rows_extra, b_extra = [], np.zeros(n), [], []
    mapping = []  # (structural index, sign) per new column
    for i, (lo, hi) in enumerate(bounds):
        lo = -np.inf if lo is None else float(lo)
        hi = np.inf if hi is None else float(hi)
        if lo > hi + TOL:
            raise Infeasible(f"variable {i} has empty bounds [{lo}, {hi}]")
        if np.isfinite(lo):
            offset[i] = lo
            mapping.append((i, 1.0))
            if np.isfinite(hi):
                rows_extra.append((len(mapping) - 1, hi - lo))
        elif np.isfinite(hi):
            offset[i] = hi
            mapping.append((i, -1.0))  # x = hi - x'
        else:
            mapping.append((i, 1.0))
            mapping.append((i, -1.0))
    nv = len(mapping)
    M = np.zeros((n, nv))
    for k, (i, s) in enumerate(mapping):
        M[i, k] = s
    A2 = A @ M
    b2 = b - A @ offset
    if rows_extra:
        E = np.zeros((len(rows_extra), nv))
        for r, (k, ub) in enumerate(rows_extra):
            E[r, k] = 1.0
        A2 = np.vstack([A2, E])
        b2 = np.concatenate([b2, [ub for _, ub in rows_extra]])
    c2 = c @ M
    m = A2.shape[0]

    neg = b2 < 0
    sign = np.where(neg, -1.0, 1.0)
    n_art = int(neg.sum())
    ntot = nv + m + n_art
    T = np.zeros((m + 1, ntot + 1))
    T[:m, :nv] = A2 * sign[:, None]
    T[:m, nv : nv + m] = np.diag(sign)
    T[:m, -1] = b2 * sign
    basis = []
    art = 0
    for r in range(m):
        if neg[r]:
            T[r, nv + m + art] = 1.0
            basis.append(nv + m + art)
            art += 1
        else:
            basis.append(nv + r)

    iters = 0
    if n_art:
        # phase one: maximise -sum(artificials)
        T[-1, nv + m :ntot] = 1.0
        for r in range(m):
            if basis[r] >= nv + m:
                T[-1] -= T[r]
        iters += _run(T, basis, ntot, max_iter)
        if T[-1, -1] < -1e-7 * max(1.0, np.abs(b2).max()):  # holds minus the artificial sum
            raise Infeasible("no point satisfies all constraints")
        for r in range(m):
            if basis[r] >= nv + m:
                j = next((j for j in range(nv + m) if abs(T[r, j]) > TOL), None)
                if j is not None:
                    _pivot(T, r, j)
                    basis[r] = j
        T = np.delete(T, np.s_[nv + m : ntot], axis=1)
        # redundant rows whose artificial could not leave stay as all-zero rows
        ntot = nv + m

    T[-1, :] = 0.0
    T[-1, :nv] = -c2
    for r in range(m):
        if basis[r] < ntot and T[-1, basis[r]] != 0.0:
            T[-1] -= T[-1, basis[r]] * T[r]
    iters += _run(T, basis, ntot, max_iter)

    xp = np.zeros(ntot)
    for r in range(m):
        if basis[r] < ntot:
            xp[basis[r]] = T[r, -1]
    x = offset + M @ xp[:nv]
    return LPResult(x, float(c @ x), iters)
