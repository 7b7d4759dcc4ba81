import numpy as np
import pytest

from trafficcam.errors import Infeasible, ObjectiveNonFinite, TooFewPoints, Unbounded
from trafficcam.optimize import CmaConfig, cmaes_minimize, lp_solve, nls_fit
from trafficcam.optimize.nls import sum_squared_residuals


# ---------------------------------------------------------------- CMA-ES


def sphere(x):
    return float(np.sum(np.asarray(x) ** 2))


def rosenbrock(x):
    x = np.asarray(x)
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1 - x[:-1]) ** 2))


def test_default_population_size():
    assert CmaConfig().lam(7) == 4 + int(3 * np.log(7))  # 9
    assert CmaConfig(population_size=20).lam(7) == 20


def test_sphere_converges_to_origin():
    res = cmaes_minimize(sphere, np.full(7, 1.0), CmaConfig(sigma0=0.5, max_evaluations=4000))
    assert res.fun < 1e-10
    np.testing.assert_allclose(res.x, 0.0, atol=1e-5)


def test_rosenbrock():
    res = cmaes_minimize(rosenbrock, np.zeros(5), CmaConfig(sigma0=0.5, max_evaluations=20000))
    np.testing.assert_allclose(res.x, 1.0, atol=1e-5)


def test_budget_is_respected():
    calls = []

    def f(x):
        calls.append(1)
        return sphere(x)

    res = cmaes_minimize(f, np.ones(7), CmaConfig(max_evaluations=500, tol_fun=0.0, tol_x=0.0))
    assert len(calls) == res.nfev <= 500


def test_history_is_nonincreasing_and_seeded():
    a = cmaes_minimize(rosenbrock, np.zeros(4), CmaConfig(seed=3, max_evaluations=2000))
    b = cmaes_minimize(rosenbrock, np.zeros(4), CmaConfig(seed=3, max_evaluations=2000))
    assert np.all(np.diff(a.history) <= 0)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.fun <= rosenbrock(np.zeros(4))


def test_vectorized_objective_gives_same_run():
    cfg = CmaConfig(seed=1, max_evaluations=1500)
    a = cmaes_minimize(sphere, np.ones(5), cfg)
    b = cmaes_minimize(lambda X: np.sum(X**2, axis=1), np.ones(5), cfg, vectorized=True)
    np.testing.assert_allclose(a.x, b.x, rtol=1e-12, atol=1e-300)


def test_constant_objective_returns_start():
    x0 = np.array([0.3, -2.0, 5.0])
    res = cmaes_minimize(lambda x: 1.0, x0, CmaConfig(max_evaluations=1000))
    np.testing.assert_array_equal(res.x, x0)
    assert res.fun == 1.0


def test_non_finite_start_raises():
    with pytest.raises(ObjectiveNonFinite):
        cmaes_minimize(lambda x: np.nan, np.zeros(3))


def test_nan_candidates_are_treated_as_worse():
    res = cmaes_minimize(lambda x: np.nan if x[0] < 0 else sphere(x - 1), np.full(3, 0.5), CmaConfig(max_evaluations=3000))
    assert res.x[0] >= 0 and res.fun < 1e-8


def test_bounds_are_honoured():
    cfg = CmaConfig(lower=[2.0, -np.inf], upper=[np.inf, -1.0], max_evaluations=3000, sigma0=0.5)
    res = cmaes_minimize(sphere, np.array([3.0, -2.0]), cfg)
    np.testing.assert_allclose(res.x, [2.0, -1.0], atol=1e-6)


def test_invalid_config():
    with pytest.raises(ValueError):
        CmaConfig(population_size=2)
    with pytest.raises(ValueError):
        CmaConfig(sigma0=0.0)


# ----------------------------------------------------------------- simplex


def test_lp_textbook_example():
    # maximise 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18
    res = lp_solve([3, 5], [[1, 0], [0, 2], [3, 2]], [4, 12, 18])
    np.testing.assert_allclose(res.x, [2, 6])
    assert res.objective == pytest.approx(36)


def test_lp_trivial_bounds():
    res = lp_solve([1, 1], bounds=[(0, 3), (1, 2)])
    assert res.objective == pytest.approx(5)


def test_lp_negative_rhs_needs_phase_one():
    # x + y >= 2 written as -x - y <= -2; minimise x + 2y
    res = lp_solve([-1, -2], [[-1, -1]], [-2])
    np.testing.assert_allclose(res.x, [2, 0], atol=1e-9)


def test_lp_infeasible_and_unbounded():
    with pytest.raises(Infeasible):
        lp_solve([1], [[1]], [-1])
    with pytest.raises(Unbounded):
        lp_solve([1, 0], [[-1, 1]], [0])


def test_lp_free_variable():
    res = lp_solve([-1], [[-1]], [3], bounds=[(None, None)])
    assert res.x[0] == pytest.approx(-3)


def test_lp_matches_scipy_on_random_instances():
    linprog = pytest.importorskip("scipy.optimize").linprog
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(150):
        n, m = rng.integers(2, 7), rng.integers(1, 8)
        c = rng.normal(size=n)
        A = rng.normal(size=(m, n))
        b = rng.normal(size=m) + 1.0
        bounds = [(float(rng.uniform(-2, 0)), float(rng.uniform(0.5, 3))) for _ in range(n)]
        ref = linprog(-c, A_ub=A, b_ub=b, bounds=bounds, method="highs")
        if ref.status == 2:
            with pytest.raises(Infeasible):
                lp_solve(c, A, b, bounds)
            continue
        assert ref.status == 0
        res = lp_solve(c, A, b, bounds)
        assert res.objective == pytest.approx(-ref.fun, abs=1e-7)
        assert np.all(A @ res.x <= b + 1e-7)
        checked += 1
    assert checked > 50


# ----------------------------------------------------------------- NLS


def test_nls_recovers_exponential_decay():
    model = lambda p, x: p[0] * np.exp(-p[1] * x)
    x = np.linspace(0, 4, 30)
    y = model([2.5, 1.3], x)
    p = nls_fit(model, x, y, [1.0, 0.5])
    np.testing.assert_allclose(p, [2.5, 1.3], rtol=1e-6)
    assert sum_squared_residuals(model, p, x, y) < 1e-12


def test_nls_respects_bounds():
    model = lambda p, x: p[0] * x
    p = nls_fit(model, [1, 2, 3], [2, 4, 6], [0.5], bounds=([0.0], [1.5]))
    assert p[0] == pytest.approx(1.5, abs=1e-9)


def test_nls_needs_enough_points():
    with pytest.raises(TooFewPoints):
        nls_fit(lambda p, x: p[0] + p[1] * x, [1.0], [2.0], [0.0, 1.0])
