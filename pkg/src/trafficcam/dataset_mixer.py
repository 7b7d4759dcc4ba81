"""Balanced multi-dataset image allocation as a linear program.

Maximise the number of images drawn from ``u`` source datasets across ``v``
traffic scenarios, subject to

* per scenario, each contributing dataset's share stays within ``1 +/- beta``
  of the mean share over the datasets that have images for that scenario;
* each scenario's total stays within ``(1 +/- gamma) / v`` of the grand total;
* ``0 <= q <= Q`` cell-wise.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import SchemaError, ShapeMismatch
from .optimize import lp_solve


@dataclass
class DatasetManifest:
    datasets: List[str]
    scenarios: List[str]
    capacities: np.ndarray  # (u, v) non-negative integers

    def __post_init__(self):
        Q = np.asarray(self.capacities)
        if Q.ndim != 2 or Q.shape != (len(self.datasets), len(self.scenarios)):
            raise ShapeMismatch(f"capacity matrix {Q.shape} does not match {len(self.datasets)} x {len(self.scenarios)}")
        if Q.shape[0] < 1 or Q.shape[1] < 1:
            raise ShapeMismatch("need at least one dataset and one scenario")
        if np.any(Q < 0) or np.any(Q != np.round(Q)):
            raise SchemaError("capacities must be non-negative integers", field="counts")
        self.capacities = Q.astype(np.int64)

    @property
    def shape(self):
        return self.capacities.shape

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetManifest":
        scenarios = list(doc["scenarios"])
        names, rows = [], []
        for k, d in enumerate(doc["datasets"]):
            counts = d.get("counts", {})
            unknown = set(counts) - set(scenarios)
            if unknown:
                raise SchemaError(f"unknown scenario(s) {sorted(unknown)}", field=f"datasets[{k}].counts")
            names.append(d["name"])
            rows.append([counts.get(s, 0) for s in scenarios])
        return cls(names, scenarios, np.array(rows, dtype=np.int64).reshape(len(names), len(scenarios)))

    def to_dict(self) -> dict:
        return {
            "scenarios": list(self.scenarios),
            "datasets": [
                {"name": n, "counts": {s: int(self.capacities[i, j]) for j, s in enumerate(self.scenarios)}}
                for i, n in enumerate(self.datasets)
            ],
        }


@dataclass
class LPInstance:
    c: np.ndarray
    A_ub: np.ndarray
    b_ub: np.ndarray
    bounds: List[tuple]
    row_names: List[str]
    shape: tuple

    @property
    def n_rows_with_bounds(self) -> int:
        return self.A_ub.shape[0] + 2 * len(self.bounds)


def _var(u_idx, v_idx, v):
    return u_idx * v + v_idx


def build_lp(manifest: DatasetManifest, beta: float, gamma: float) -> LPInstance:
    if not (0 <= beta < 1 and 0 <= gamma < 1):
        raise ValueError("beta and gamma must lie in [0, 1)")
    Q = manifest.capacities
    u, v = Q.shape
    n = u * v
    rows, names = [], []
    for nu in range(v):
        contributors = [mu for mu in range(u) if Q[mu, nu] != 0]
        n_nonzero = len(contributors)
        for mu in contributors:
            upper = np.zeros(n)
            lower = np.zeros(n)
            for mu2 in range(u):
                upper[_var(mu2, nu, v)] -= (1 + beta) / n_nonzero
                lower[_var(mu2, nu, v)] += (1 - beta) / n_nonzero
            upper[_var(mu, nu, v)] += 1.0
            lower[_var(mu, nu, v)] -= 1.0
            rows += [upper, lower]
            tag = f"{manifest.datasets[mu]}/{manifest.scenarios[nu]}"
            names += [f"share_upper[{tag}]", f"share_lower[{tag}]"]
    for nu in range(v):
        upper = np.full(n, -(1 + gamma) / v)
        lower = np.full(n, (1 - gamma) / v)
        for mu in range(u):
            upper[_var(mu, nu, v)] += 1.0
            lower[_var(mu, nu, v)] -= 1.0
        rows += [upper, lower]
        names += [f"scenario_upper[{manifest.scenarios[nu]}]", f"scenario_lower[{manifest.scenarios[nu]}]"]
    A = np.array(rows).reshape(-1, n)
    bounds = [(0.0, float(Q[mu, nu])) for mu in range(u) for nu in range(v)]
    return LPInstance(np.ones(n), A, np.zeros(A.shape[0]), bounds, names, (u, v))


@dataclass
class Allocation:
    q: np.ndarray  # continuous LP optimum, (u, v)
    counts: np.ndarray  # integer allocation, (u, v)
    objective: float
    beta: float
    gamma: float
    datasets: List[str] = field(default_factory=list)
    scenarios: List[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def round_allocation(q: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Floor every cell, then hand the leftover images to the largest remainders.

    Never exceeds capacity, and every cell stays within one image of ``q``.
    """
    q = np.asarray(q, dtype=float)
    counts = np.floor(q + 1e-9).astype(np.int64)
    counts = np.minimum(counts, Q)
    target = int(math.floor(q.sum() + 1e-9))
    remainder = (q - counts).ravel()
    order = sorted(range(remainder.size), key=lambda k: (-remainder[k], k))
    flat = counts.ravel()
    Qf = np.asarray(Q).ravel()
    for k in order:
        if flat.sum() >= target:
            break
        if flat[k] + 1 <= Qf[k] and remainder[k] > 1e-9:
            flat[k] += 1
    return flat.reshape(q.shape)


def solve_allocation(manifest: DatasetManifest, beta: float, gamma: float) -> Allocation:
    Q = manifest.capacities
    u, v = Q.shape
    if Q.sum() == 0:
        z = np.zeros((u, v))
        return Allocation(z, z.astype(np.int64), 0.0, beta, gamma, list(manifest.datasets), list(manifest.scenarios))
    lp = build_lp(manifest, beta, gamma)
    res = lp_solve(lp.c, lp.A_ub, lp.b_ub, lp.bounds)
    q = np.clip(res.x.reshape(u, v), 0.0, Q)
    counts = round_allocation(q, Q)
    return Allocation(q, counts, float(q.sum()), beta, gamma, list(manifest.datasets), list(manifest.scenarios))


@dataclass(frozen=True)
class ConstraintCheck:
    name: str
    lhs: float
    rhs: float
    slack: float  # rhs - lhs of the "<=" form; negative means violated
    satisfied: bool


@dataclass
class VerificationReport:
    checks: List[ConstraintCheck]

    @property
    def violations(self) -> List[ConstraintCheck]:
        return [c for c in self.checks if not c.satisfied]

    @property
    def ok(self) -> bool:
        return not self.violations

    def get(self, name: str) -> ConstraintCheck:
        return next(c for c in self.checks if c.name == name)


def verify_allocation(
    allocation, manifest: DatasetManifest, beta: float, gamma: float, tol: float = 0.0
) -> VerificationReport:
    """Audit every LP constraint for ``allocation`` (an ``Allocation`` or a ``(u, v)`` array).

    Integer-valued inputs are checked in exact rational arithmetic; ``beta``
    and ``gamma`` are converted through their decimal representation so 0.25
    is exactly one quarter.
    """
    q = allocation.counts if isinstance(allocation, Allocation) else allocation
    q = np.asarray(q)
    Q = manifest.capacities
    if q.shape != Q.shape:
        raise ShapeMismatch(f"allocation shape {q.shape} differs from manifest {Q.shape}")
    exact = np.all(q == np.round(q))
    conv = (lambda x: Fraction(int(round(x)))) if exact else (lambda x: Fraction(float(x)))
    qf = [[conv(q[i, j]) for j in range(Q.shape[1])] for i in range(Q.shape[0])]
    b = Fraction(str(beta))
    g = Fraction(str(gamma))
    u, v = Q.shape
    total = sum(sum(r) for r in qf)
    checks: List[ConstraintCheck] = []

    def add(name, lhs, rhs):
        slack = rhs - lhs
        checks.append(ConstraintCheck(name, float(lhs), float(rhs), float(slack), slack >= -Fraction(tol)))

    for nu in range(v):
        contributors = [mu for mu in range(u) if Q[mu, nu] != 0]
        col = sum(qf[mu][nu] for mu in range(u))
        for mu in contributors:
            tag = f"{manifest.datasets[mu]}/{manifest.scenarios[nu]}"
            add(f"share_upper[{tag}]", qf[mu][nu], (1 + b) * col / len(contributors))
            add(f"share_lower[{tag}]", (1 - b) * col / len(contributors), qf[mu][nu])
    for nu in range(v):
        col = sum(qf[mu][nu] for mu in range(u))
        name = manifest.scenarios[nu]
        add(f"scenario_upper[{name}]", col, (1 + g) * total / v)
        add(f"scenario_lower[{name}]", (1 - g) * total / v, col)
    for mu in range(u):
        for nu in range(v):
            tag = f"{manifest.datasets[mu]}/{manifest.scenarios[nu]}"
            add(f"capacity[{tag}]", qf[mu][nu], Fraction(int(Q[mu, nu])))
            add(f"nonnegative[{tag}]", Fraction(0), qf[mu][nu])
    return VerificationReport(checks)


def allocation_table(allocation: Allocation) -> List[List]:
    """Rows laid out as dataset, one column per scenario, total; last row sums."""
    rows = []
    for i, name in enumerate(allocation.datasets):
        row = [int(c) for c in allocation.counts[i]]
        rows.append([name, *row, sum(row)])
    totals = [int(c) for c in allocation.counts.sum(axis=0)]
    rows.append(["Total", *totals, sum(totals)])
    return rows


def allocation_csv(allocation: Allocation) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dataset", *[f"images_{s}" for s in allocation.scenarios], "images_total"])
    writer.writerows(allocation_table(allocation))
    return buf.getvalue()


def allocation_to_dict(allocation: Allocation) -> dict:
    return {
        "beta": allocation.beta,
        "gamma": allocation.gamma,
        "objective": allocation.objective,
        "total_images": allocation.total,
        "scenarios": allocation.scenarios,
        "datasets": [
            {
                "name": name,
                "counts": {s: int(allocation.counts[i, j]) for j, s in enumerate(allocation.scenarios)},
                "continuous": {s: float(allocation.q[i, j]) for j, s in enumerate(allocation.scenarios)},
            }
            for i, name in enumerate(allocation.datasets)
        ],
    }


def allocation_from_dict(doc: dict) -> Allocation:
    scenarios = list(doc["scenarios"])
    names = [d["name"] for d in doc["datasets"]]
    counts = np.array([[d["counts"][s] for s in scenarios] for d in doc["datasets"]], dtype=np.int64)
    q = np.array([[d.get("continuous", d["counts"])[s] for s in scenarios] for d in doc["datasets"]], dtype=float)
    return Allocation(q, counts, float(doc["objective"]), float(doc["beta"]), float(doc["gamma"]), names, scenarios)


# Reference allocation of 76,898 images over six public datasets (day / night).
REFERENCE_ALLOCATION = {
    "scenarios": ["daytime", "nighttime"],
    "datasets": ["BDD100K", "BITVehicle", "CityCam", "COCO", "MIO-TCD-L", "UA-DETRAC"],
    "counts": [[8319, 8398], [7325, 0], [8459, 0], [7111, 7619], [8892, 7413], [7955, 5407]],
}
