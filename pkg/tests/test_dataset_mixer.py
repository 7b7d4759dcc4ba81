import itertools
import json
from fractions import Fraction

import numpy as np
import pytest

from trafficcam.dataset_mixer import (
    REFERENCE_ALLOCATION,
    Allocation,
    DatasetManifest,
    allocation_csv,
    allocation_from_dict,
    allocation_table,
    allocation_to_dict,
    build_lp,
    round_allocation,
    solve_allocation,
    verify_allocation,
)
from trafficcam.errors import ShapeMismatch
from trafficcam.optimize import lp_solve


def manifest(Q):
    Q = np.asarray(Q)
    return DatasetManifest([f"d{i}" for i in range(Q.shape[0])], [f"s{j}" for j in range(Q.shape[1])], Q)


def reference_manifest():
    p = REFERENCE_ALLOCATION
    return DatasetManifest(p["datasets"], p["scenarios"], np.array(p["counts"]))


def lp_constraints(m, beta, gamma):
    lp = build_lp(m, beta, gamma)
    n = lp.c.size
    lo = np.array([b[0] for b in lp.bounds])
    hi = np.array([b[1] for b in lp.bounds])
    A = np.vstack([lp.A_ub, np.eye(n), -np.eye(n)])
    b = np.concatenate([lp.b_ub, hi, -lo])
    return A, b


def vertex_enumeration_optimum(m, beta, gamma):
    """Best objective over every basic solution: choose n active constraints, solve, keep feasible ones."""
    A, b = lp_constraints(m, beta, gamma)
    n = A.shape[1]
    best = -np.inf
    combos = np.array(list(itertools.combinations(range(A.shape[0]), n)))
    for chunk in np.array_split(combos, max(1, len(combos) // 20000)):
        As, bs = A[chunk], b[chunk]
        ok = np.abs(np.linalg.det(As)) > 1e-9
        if not ok.any():
            continue
        x = np.linalg.solve(As[ok], bs[ok][..., None])[..., 0]
        feasible = np.all(x @ A.T <= b + 1e-9, axis=1)
        if feasible.any():
            best = max(best, float(x[feasible].sum(axis=1).max()))
    return best


def integer_brute_force(m, beta, gamma):
    Q = m.capacities
    grids = np.array(list(itertools.product(*[range(int(c) + 1) for c in Q.ravel()])), dtype=float)
    A, b = lp_constraints(m, beta, gamma)
    ok = np.all(grids @ A.T <= b + 1e-9, axis=1)
    return float(grids[ok].sum(axis=1).max())


# ----------------------------------------------------------------- structure


def test_beta_zero_forces_equal_shares():
    alloc = solve_allocation(manifest([[10], [10]]), 0.0, 0.0)
    np.testing.assert_allclose(alloc.q.ravel(), [10, 10])
    alloc = solve_allocation(manifest([[10], [4]]), 0.0, 0.0)
    np.testing.assert_allclose(alloc.q.ravel(), [4, 4])


def test_row_count():
    m = manifest([[3, 0], [2, 5], [0, 0]])
    lp = build_lp(m, 0.25, 0.25)
    nonzero = 3
    assert lp.A_ub.shape == (2 * nonzero + 2 * 2, 6)
    assert lp.n_rows_with_bounds == 2 * nonzero + 2 * 2 + 2 * 6


def test_zero_capacity_cells_are_fixed_and_excluded():
    m = reference_manifest()
    lp = build_lp(m, 0.25, 0.25)
    v = len(m.scenarios)
    for name in ("BITVehicle", "CityCam"):
        i = m.datasets.index(name)
        assert lp.bounds[i * v + 1] == (0.0, 0.0)
        assert not any(f"{name}/nighttime" in r for r in lp.row_names)
    # night shares are averaged over the four datasets with night images
    row = lp.A_ub[lp.row_names.index("share_upper[COCO/nighttime]")]
    night_cols = [i * v + 1 for i in range(len(m.datasets))]
    np.testing.assert_allclose(sorted(set(np.round(row[night_cols], 12))), [-1.25 / 4, 1 - 1.25 / 4])


def test_invalid_parameters():
    with pytest.raises(ValueError):
        build_lp(manifest([[1]]), 1.0, 0.2)
    with pytest.raises(ShapeMismatch):
        DatasetManifest(["a"], ["x", "y"], np.array([[1]]))


def test_all_zero_capacities():
    alloc = solve_allocation(manifest([[0, 0], [0, 0]]), 0.25, 0.25)
    assert alloc.objective == 0 and alloc.total == 0


# ----------------------------------------------------------------- reference allocation


def test_reference_allocation_satisfies_every_constraint():
    m = reference_manifest()
    report = verify_allocation(np.array(REFERENCE_ALLOCATION["counts"]), m, 0.25, 0.25)
    assert report.ok
    day = report.get("scenario_upper[daytime]")
    night = report.get("scenario_lower[nighttime]")
    assert (day.lhs, day.rhs) == (48061, 48061.25)
    assert (night.lhs, night.rhs) == (28836.75, 28837)
    assert day.slack == 0.25 and night.slack == 0.25


def test_reference_band_arithmetic_is_exact():
    total = 76898
    assert Fraction(125, 100) / 2 * total == Fraction(19224500, 400)  # 48061.25
    assert 48061 <= Fraction(125, 100) / 2 * total
    assert 28837 >= Fraction(75, 100) / 2 * total


def test_solver_reproduces_reference_table_from_its_own_capacities():
    m = reference_manifest()
    alloc = solve_allocation(m, 0.25, 0.25)
    np.testing.assert_array_equal(alloc.counts, REFERENCE_ALLOCATION["counts"])
    assert alloc.total == 76898


def test_unbalanced_allocation_is_flagged():
    m = manifest([[10, 10], [10, 10]])
    report = verify_allocation(np.array([[10, 0], [1, 0]]), m, 0.25, 0.25)
    bad = {c.name: c.slack for c in report.violations}
    assert bad["share_upper[d0/s0]"] == pytest.approx(1.25 * 11 / 2 - 10)
    assert bad["scenario_lower[s1]"] == pytest.approx(-0.375 * 11)
    assert all(s < 0 for s in bad.values())


def test_verify_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        verify_allocation(np.zeros((1, 2)), manifest([[1, 1], [1, 1]]), 0.25, 0.25)


# ----------------------------------------------------------------- oracles


def random_manifests(seed, count):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        u, v = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        yield manifest(rng.integers(0, 7, size=(u, v)))


def test_continuous_optimum_matches_vertex_enumeration():
    for m in random_manifests(0, 40):
        alloc = solve_allocation(m, 0.25, 0.25)
        assert verify_allocation(alloc.q, m, 0.25, 0.25, tol=1e-7).ok
        assert alloc.objective == pytest.approx(vertex_enumeration_optimum(m, 0.25, 0.25), abs=1e-7)


def test_integer_rounding_against_brute_force():
    for m in random_manifests(1, 40):
        alloc = solve_allocation(m, 0.25, 0.25)
        assert np.all(np.abs(alloc.counts - alloc.q) <= 1.0 + 1e-9)
        assert np.all(alloc.counts <= m.capacities) and np.all(alloc.counts >= 0)
        best_int = integer_brute_force(m, 0.25, 0.25)
        assert best_int <= alloc.objective + 1e-7
        assert alloc.total == int(np.floor(alloc.objective + 1e-9))


def test_small_uniform_instance_is_integral():
    m = manifest([[4, 4], [4, 4]])
    alloc = solve_allocation(m, 0.25, 0.25)
    assert alloc.total == integer_brute_force(m, 0.25, 0.25) == 16


def test_optimum_dominates_random_feasible_points():
    rng = np.random.default_rng(5)
    for m in random_manifests(2, 15):
        opt = solve_allocation(m, 0.25, 0.25).objective
        lp = build_lp(m, 0.25, 0.25)
        for _ in range(5):
            other = lp_solve(rng.normal(size=lp.c.size), lp.A_ub, lp.b_ub, lp.bounds).x
            assert verify_allocation(other.reshape(m.shape), m, 0.25, 0.25, tol=1e-7).ok
            assert other.sum() <= opt + 1e-7


def test_enlarging_capacity_never_hurts():
    rng = np.random.default_rng(3)
    for m in random_manifests(3, 20):
        base = solve_allocation(m, 0.25, 0.25).objective
        Q = m.capacities.copy()
        i, j = rng.integers(Q.shape[0]), rng.integers(Q.shape[1])
        Q[i, j] += int(rng.integers(1, 5))
        assert solve_allocation(manifest(Q), 0.25, 0.25).objective >= base - 1e-9


def test_round_allocation_keeps_capacity():
    q = np.array([[2.6, 0.5], [1.4, 3.0]])
    counts = round_allocation(q, np.array([[3, 0], [2, 3]]))
    assert counts.sum() == 7
    assert np.all(counts <= [[3, 0], [2, 3]])
    assert np.all(np.abs(counts - q) <= 1)


# ----------------------------------------------------------------- files


def test_manifest_and_allocation_round_trip():
    m = reference_manifest()
    again = DatasetManifest.from_dict(json.loads(json.dumps(m.to_dict())))
    np.testing.assert_array_equal(again.capacities, m.capacities)
    alloc = solve_allocation(m, 0.25, 0.25)
    back = allocation_from_dict(json.loads(json.dumps(allocation_to_dict(alloc))))
    np.testing.assert_array_equal(back.counts, alloc.counts)
    np.testing.assert_allclose(back.q, alloc.q)


def test_table_layout():
    alloc = solve_allocation(reference_manifest(), 0.25, 0.25)
    rows = allocation_table(alloc)
    assert rows[0] == ["BDD100K", 8319, 8398, 16717]
    assert rows[-1] == ["Total", 48061, 28837, 76898]
    text = allocation_csv(alloc).splitlines()
    assert text[0] == "dataset,images_daytime,images_nighttime,images_total"
    assert text[-1] == "Total,48061,28837,76898"
