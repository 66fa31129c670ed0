import itertools
import math

import numpy as np
import pytest

from lyapsyn import solver
from lyapsyn.milp import LinExpr, MilpModel


def _knapsack_model():
    # LP relaxation is fractional, forcing an actual tree search
    m = MilpModel()
    b1 = m.add_binary("b1")
    b2 = m.add_binary("b2")
    m.add_le(LinExpr.term(b1) + LinExpr.term(b2) - 1.5)
    m.set_objective_max(2.0 * LinExpr.term(b1) + 2.0 * LinExpr.term(b2))
    return m, b1, b2


def test_lp_solve_simple():
    m = MilpModel()
    x = m.add_var("x", 0.0, 1.0)
    y = m.add_var("y", 0.0, 2.0)
    m.set_objective_max(LinExpr.term(x) + LinExpr.term(y) + 1.0)
    res = solver.lp_solve(m)
    assert res.status == "optimal"
    assert res.objective == pytest.approx(4.0, abs=1e-9)
    np.testing.assert_allclose(res.point, [1.0, 2.0], atol=1e-9)


def test_lp_solve_infeasible():
    m = MilpModel()
    x = m.add_var("x", 0.0, 1.0)
    m.add_le(2.0 - LinExpr.term(x))  # x >= 2 against ub 1
    m.set_objective_max(LinExpr.term(x))
    res = solver.lp_solve(m)
    assert res.status == "infeasible"


def test_lp_solutions_are_vertices():
    rng = np.random.default_rng(40)
    for _ in range(20):
        n = int(rng.integers(2, 5))
        m = MilpModel()
        for j in range(n):
            m.add_var(f"x{j}", -1.0, 1.0)
        x0 = rng.uniform(-0.5, 0.5, size=n)
        for _ in range(int(rng.integers(1, 2 * n))):
            a = rng.normal(size=n)
            e = LinExpr({j: a[j] for j in range(n)}, -float(a @ x0) - float(rng.uniform(0.1, 1.0)))
            m.add_le(e)
        m.set_objective_max(LinExpr({j: rng.normal() for j in range(n)}))
        res = solver.lp_solve(m)
        assert res.status == "optimal"
        # count active rows/bounds; a vertex has at least n of them independent
        v = res.point
        rows = []
        for expr in m.le_rows:
            if abs(float(expr.value(v))) <= 1e-7:
                rows.append([expr.coeffs.get(j, 0.0) for j in range(n)])
        for j in range(n):
            if abs(v[j] - m.lb[j]) <= 1e-9 or abs(v[j] - m.ub[j]) <= 1e-9:
                row = [0.0] * n
                row[j] = 1.0
                rows.append(row)
        assert rows and np.linalg.matrix_rank(np.array(rows)) == n


def _random_mip(rng):
    n_c = int(rng.integers(1, 4))
    n_b = int(rng.integers(1, 6))
    m = MilpModel()
    cont = [m.add_var(f"x{j}", -2.0, 2.0) for j in range(n_c)]
    bins = [m.add_binary(f"b{j}") for j in range(n_b)]
    x0 = rng.uniform(-1, 1, size=n_c)
    beta0 = rng.integers(0, 2, size=n_b).astype(float)
    for _ in range(int(rng.integers(2, 7))):
        a = rng.normal(size=n_c)
        g = rng.normal(size=n_b)
        e = LinExpr()
        for j, v in zip(cont, a):
            e = e + float(v) * LinExpr.term(j)
        for j, v in zip(bins, g):
            e = e + float(v) * LinExpr.term(j)
        slack = float(rng.uniform(0.05, 1.5))
        e = e - (float(a @ x0 + g @ beta0) + slack)
        m.add_le(e)
    obj = LinExpr.constant(float(rng.normal()))
    for j in cont + bins:
        obj = obj + float(rng.normal()) * LinExpr.term(j)
    m.set_objective_max(obj)
    return m, bins


def _enumerate_optimum(m, bins):
    best = -math.inf
    for assignment in itertools.product((0.0, 1.0), repeat=len(bins)):
        fixed = {j: (v, v) for j, v in zip(bins, assignment)}
        res = solver.lp_solve(m, fixed)
        if res.status == "optimal" and res.objective > best:
            best = res.objective
    return best


def test_branch_and_bound_matches_enumeration():
    rng = np.random.default_rng(41)
    for _ in range(25):
        m, bins = _random_mip(rng)
        want = _enumerate_optimum(m, bins)
        res = solver.solve(m)
        assert res.status == "optimal"
        assert res.objective == pytest.approx(want, abs=1e-7)
        assert m.point_violation(res.point) <= 1e-6
        assert res.bound == pytest.approx(res.objective, abs=1e-12)


def test_branch_and_bound_deterministic():
    rng = np.random.default_rng(42)
    m, bins = _random_mip(rng)
    r1 = solver.solve(m)
    r2 = solver.solve(m)
    assert r1.objective == r2.objective
    assert r1.node_count == r2.node_count
    np.testing.assert_array_equal(r1.point, r2.point)


def test_pool_collects_all_qualifying_solutions():
    m, b1, b2 = _knapsack_model()
    res = solver.solve(m, solver.SolveOptions(pool_threshold=0.0))
    assert res.status == "optimal"
    assert res.objective == pytest.approx(2.0, abs=1e-9)
    assert len(res.pool) == 2  # (1,0) and (0,1); (0,0) scores 0 and stays out
    assert res.pool[0].objective >= res.pool[1].objective
    keys = sorted((round(e.point[0]), round(e.point[1])) for e in res.pool)
    assert keys == [(0, 1), (1, 0)]


def test_pool_threshold_and_disable():
    m, b1, b2 = _knapsack_model()
    res = solver.solve(m, solver.SolveOptions(pool_threshold=1.5))
    assert len(res.pool) == 2
    res_none = solver.solve(m, solver.SolveOptions(pool_threshold=None))
    assert res_none.pool == []
    res_high = solver.solve(m, solver.SolveOptions(pool_threshold=2.5))
    assert res_high.pool == []


def test_pool_dedup_by_key():
    # both optima share the same value of x, which is the dedup key
    m = MilpModel()
    x = m.add_var("x", 0.0, 1.0)
    b1 = m.add_binary("b1")
    b2 = m.add_binary("b2")
    m.add_eq(LinExpr.term(x) - 0.5)
    m.add_le(LinExpr.term(b1) + LinExpr.term(b2) - 1.5)
    m.set_objective_max(LinExpr.term(b1) + LinExpr.term(b2) + LinExpr.term(x))
    res = solver.solve(m, solver.SolveOptions(pool_threshold=0.0, pool_key=[x]))
    assert res.objective == pytest.approx(1.5, abs=1e-9)
    assert len(res.pool) == 1


def test_hint_seeds_incumbent():
    m, b1, b2 = _knapsack_model()
    hint = np.array([0.0, 1.0])
    res = solver.solve(m, solver.SolveOptions(hint=hint))
    assert res.status == "optimal"
    assert res.objective == pytest.approx(2.0, abs=1e-9)
    bad_hint = np.array([1.0, 1.0])  # violates the knapsack row
    res2 = solver.solve(m, solver.SolveOptions(hint=bad_hint))
    assert res2.objective == pytest.approx(2.0, abs=1e-9)


def test_budget_exceeded_reports_bound():
    m, b1, b2 = _knapsack_model()
    res = solver.solve(m, solver.SolveOptions(node_budget=1, hint=np.array([0.0, 1.0])))
    assert res.status == "budget_exceeded"
    assert res.objective == pytest.approx(2.0, abs=1e-9)  # hint incumbent survives
    assert res.bound >= 2.0
    res2 = solver.solve(m, solver.SolveOptions(node_budget=1))
    assert res2.status == "budget_exceeded"
    assert res2.objective is None
    assert res2.bound >= 2.0


def test_integer_infeasible_model():
    m = MilpModel()
    b = m.add_binary("b")
    m.add_le(0.25 - LinExpr.term(b))   # b >= 0.25
    m.add_le(LinExpr.term(b) - 0.75)   # b <= 0.75
    m.set_objective_max(LinExpr.term(b))
    res = solver.solve(m)
    assert res.status == "infeasible"


def test_active_set_reproduces_lp_vertex():
    rng = np.random.default_rng(43)
    for _ in range(10):
        n = int(rng.integers(2, 5))
        m = MilpModel()
        for j in range(n):
            m.add_var(f"x{j}", -1.0, 1.0)
        x0 = rng.uniform(-0.5, 0.5, size=n)
        for _ in range(n):
            a = rng.normal(size=n)
            e = LinExpr({j: a[j] for j in range(n)}, -float(a @ x0) - float(rng.uniform(0.1, 1.0)))
            m.add_le(e)
        m.set_objective_max(LinExpr({j: rng.normal() for j in range(n)}))
        res = solver.solve(m)
        cert = solver.extract_active_set(m, res)
        assert cert.a.shape == (n, n)
        s = np.linalg.solve(cert.a, cert.b)
        np.testing.assert_allclose(s, res.point[cert.cont_index], atol=1e-7)
        assert cert.c @ s + cert.d == pytest.approx(res.objective, abs=1e-8)


def test_active_set_folds_binaries():
    m, b1, b2 = _knapsack_model()
    x = m.add_var("x", -5.0, 5.0)
    # x tied to the binaries: x = 3 b1 + b2 + 0.25
    m.add_eq(LinExpr.term(x) - 3.0 * LinExpr.term(b1) - LinExpr.term(b2) - 0.25)
    m.set_objective_max(
        2.0 * LinExpr.term(b1) + 2.0 * LinExpr.term(b2) + 0.5 * LinExpr.term(x)
    )
    res = solver.solve(m)
    assert res.status == "optimal"
    cert = solver.extract_active_set(m, res)
    assert cert.cont_index.tolist() == [x]
    assert cert.a.shape == (1, 1)
    # rhs carries the frozen binary contribution
    s = np.linalg.solve(cert.a, cert.b)
    assert s[0] == pytest.approx(res.point[x], abs=1e-9)
    assert cert.c @ s + cert.d == pytest.approx(res.objective, abs=1e-8)
    assert cert.binary_values.tolist() == [round(res.point[b1]), round(res.point[b2])]


def test_active_set_degenerate_raises():
    # optimum in the interior of a face: only one row can be active for two vars
    m = MilpModel()
    x = m.add_var("x", -1.0, 1.0)
    y = m.add_var("y")
    m.add_le(LinExpr.term(y) - 0.5)
    m.set_objective_max(LinExpr.term(y))
    res = solver.solve(m)
    # x is anywhere on [-1, 1]; dual simplex lands on a vertex, so x hits a
    # bound and extraction succeeds; forcing the interior must then fail
    res.point = res.point.copy()
    res.point[x] = 0.123  # interior in x, no second active row
    with pytest.raises(solver.DegenerateActiveSet):
        solver.extract_active_set(m, res)


def test_stop_bound_proves_certification_level():
    # optimum is exactly 0 (x = -1 with b = 1); stop_bound finishes the
    # search as soon as the tree bound proves nothing exceeds the threshold
    m = MilpModel()
    x = m.add_var("x", -1.0, 1.0)
    b = m.add_binary("b")
    m.add_le(LinExpr.term(x) - LinExpr.term(b))       # x <= b
    m.add_le(-LinExpr.term(x) - 5.0 * LinExpr.term(b))  # x >= -5b
    m.set_objective_max(-1.0 * LinExpr.term(x) - 1.0)
    hint = np.array([-1.0, 1.0])
    res = solver.solve(m, solver.SolveOptions(hint=hint, stop_bound=1e-6))
    assert res.status in ("optimal", "bound_reached")
    assert res.bound <= 1e-6
    assert res.objective == pytest.approx(0.0, abs=1e-9)


def test_stop_incumbent_quits_early():
    m, b1, b2 = _knapsack_model()
    res = solver.solve(m, solver.SolveOptions(stop_incumbent=0.5))
    assert res.status == "incumbent_reached"
    assert res.objective is not None and res.objective > 0.5
    assert res.bound >= res.objective


def test_matches_scipy_milp_oracle():
    from scipy import optimize as sciopt

    rng = np.random.default_rng(44)
    for _ in range(15):
        m, bins = _random_mip(rng)
        arrays = m.to_arrays()
        integrality = np.zeros(m.num_vars)
        integrality[bins] = 1
        ref = sciopt.milp(
            c=-arrays.c,
            constraints=[
                sciopt.LinearConstraint(arrays.a_ub, -np.inf, arrays.b_ub),
            ],
            integrality=integrality,
            bounds=sciopt.Bounds(arrays.lb, arrays.ub),
        )
        res = solver.solve(m)
        if ref.status == 2:  # infeasible
            assert res.status == "infeasible"
            continue
        assert ref.status == 0
        want = -ref.fun + arrays.d
        assert res.status == "optimal"
        assert res.objective == pytest.approx(want, abs=1e-7)
