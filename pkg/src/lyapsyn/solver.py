"""LP relaxations and branch-and-bound maximization for MILP models.

LP relaxations are solved with dual simplex so optima land on vertices and
repeat runs are deterministic. Branch-and-bound uses best-bound node
selection with most-fractional branching (ties broken toward the lowest
variable index). Every integral-feasible point met during the search whose
objective clears a threshold is harvested into a counter-example pool, not
just the incumbent.

For a solved model, :func:`extract_active_set` freezes the binaries and the
tight rows at the optimum into a square invertible system ``A s = b`` with
objective ``c . s + d``, which downstream consumers replay with autograd
scalars to differentiate the optimal value with respect to model
parameters.
"""

from __future__ import annotations

import dataclasses
import heapq
import math
import time

import numpy as np
from scipy import optimize as sciopt

from lyapsyn.milp import MilpModel, ModelArrays

FEASIBILITY_TOL = 1e-6
INTEGRALITY_TOL = 1e-6
ACTIVE_TOL = 1e-7
DEFAULT_ABS_GAP = 1e-8


class LpFailure(RuntimeError):
    """The LP engine returned something unusable (unbounded or numerical)."""


class DegenerateActiveSet(RuntimeError):
    """No invertible square active system exists at the reported optimum."""


@dataclasses.dataclass
class LpResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    objective: float | None
    point: np.ndarray | None


def _linprog(c_min, arrays: ModelArrays, lb, ub):
    bounds = np.column_stack([lb, ub])
    kwargs = dict(
        c=c_min,
        A_ub=arrays.a_ub if arrays.a_ub.size else None,
        b_ub=arrays.b_ub if arrays.a_ub.size else None,
        A_eq=arrays.a_eq if arrays.a_eq.size else None,
        b_eq=arrays.b_eq if arrays.a_eq.size else None,
        bounds=bounds,
        method="highs-ds",
    )
    res = sciopt.linprog(**kwargs)
    if res.status == 4:
        res = sciopt.linprog(**kwargs, options={"presolve": False})
    return res


def lp_solve(model_or_arrays, fixed=None) -> LpResult:
    """Solve the LP relaxation (binaries relaxed to [0, 1]), maximizing.

    ``fixed`` optionally maps variable ids to (lo, hi) overrides, which is
    how branch-and-bound pins binaries.
    """
    arrays = (
        model_or_arrays
        if isinstance(model_or_arrays, ModelArrays)
        else model_or_arrays.to_arrays()
    )
    lb = arrays.lb.copy()
    ub = arrays.ub.copy()
    if fixed:
        for j, (lo, hi) in fixed.items():
            lb[j] = lo
            ub[j] = hi
    res = _linprog(-arrays.c, arrays, lb, ub)
    if res.status == 2:
        return LpResult("infeasible", None, None)
    if res.status == 3:
        return LpResult("unbounded", None, None)
    if res.status != 0 or res.x is None:
        raise LpFailure(f"LP solve failed: status {res.status} ({res.message})")
    return LpResult("optimal", float(-res.fun + arrays.d), np.asarray(res.x, dtype=float))


@dataclasses.dataclass
class SolveOptions:
    abs_gap: float = DEFAULT_ABS_GAP
    integrality_tol: float = INTEGRALITY_TOL
    feasibility_tol: float = FEASIBILITY_TOL
    pool_threshold: float | None = 0.0  # None disables pooling
    pool_key: list[int] | None = None  # vars used for near-duplicate detection
    pool_dedup_tol: float = 1e-6
    node_budget: int = 1_000_000
    time_budget: float = math.inf
    hint: np.ndarray | None = None  # feasible full assignment to seed the incumbent
    # early stops: prove "optimum <= stop_bound" without closing the gap, or
    # quit as soon as the incumbent beats stop_incumbent (a violation exists)
    stop_bound: float | None = None
    stop_incumbent: float | None = None


@dataclasses.dataclass
class PoolEntry:
    objective: float
    point: np.ndarray


@dataclasses.dataclass
class SolveResult:
    # "optimal": gap closed to abs_gap. "bound_reached": the optimum is
    # proved <= stop_bound. "incumbent_reached": search quit early because
    # the incumbent already beats stop_incumbent. "budget_exceeded": node or
    # time budget ran out. "infeasible": no integral point exists.
    status: str
    objective: float | None  # incumbent objective (a valid lower bound)
    point: np.ndarray | None
    pool: list[PoolEntry]
    node_count: int
    wall_time: float
    bound: float  # valid upper bound on the optimum at return time


class _Pool:
    def __init__(self, key, threshold, tol):
        self.key = key
        self.threshold = threshold
        self.tol = tol
        self.entries: list[PoolEntry] = []

    def offer(self, objective, point):
        if self.threshold is None or objective <= self.threshold:
            return
        k = point if self.key is None else point[self.key]
        for i, entry in enumerate(self.entries):
            ek = entry.point if self.key is None else entry.point[self.key]
            if np.max(np.abs(ek - k)) <= self.tol:
                if objective > entry.objective:
                    self.entries[i] = PoolEntry(objective, point.copy())
                return
        self.entries.append(PoolEntry(objective, point.copy()))

    def sorted(self):
        return sorted(self.entries, key=lambda e: -e.objective)


def solve(model: MilpModel, options: SolveOptions | None = None) -> SolveResult:
    """Maximize the model objective by branch-and-bound on LP relaxations."""
    opt = options or SolveOptions()
    arrays = model.to_arrays()
    bins = np.array(model.binaries, dtype=int)
    start = time.perf_counter()
    pool = _Pool(opt.pool_key, opt.pool_threshold, opt.pool_dedup_tol)

    inc_obj = -math.inf
    inc_point = None
    if opt.hint is not None:
        hint = np.asarray(opt.hint, dtype=float)
        if (
            hint.shape == (model.num_vars,)
            and model.point_violation(hint, opt.integrality_tol) <= opt.feasibility_tol
        ):
            inc_obj = float(arrays.c @ hint + arrays.d)
            inc_point = hint.copy()
            pool.offer(inc_obj, hint)

    nodes_solved = 0

    def lp(fixed):
        nonlocal nodes_solved
        nodes_solved += 1
        return lp_solve(arrays, fixed)

    def prune_line():
        line = inc_obj + opt.abs_gap
        if opt.stop_bound is not None:
            line = max(line, opt.stop_bound)
        return line

    def accept_candidate(fixed, res):
        """Polish an integral-looking relaxation point into an exact candidate."""
        nonlocal inc_obj, inc_point
        point = res.point
        obj = res.objective
        frac = np.abs(point[bins] - np.round(point[bins])) if bins.size else np.zeros(0)
        if frac.size and np.max(frac) > 1e-12:
            pinned = dict(fixed)
            for j in bins:
                r = round(point[j])
                pinned[j] = (float(r), float(r))
            polished = lp_solve(arrays, pinned)
            if polished.status != "optimal":
                return False
            point, obj = polished.point, polished.objective
        pool.offer(obj, point)
        if obj > inc_obj:
            inc_obj = obj
            inc_point = point.copy()
        return True

    root = lp({})
    if root.status == "infeasible":
        return SolveResult("infeasible", None, None, pool.sorted(), nodes_solved,
                           time.perf_counter() - start, -math.inf)
    if root.status == "unbounded":
        raise LpFailure("LP relaxation is unbounded; some derived variable is unconstrained")

    # heap of (negated bound, tiebreak, fixed binaries, LpResult or None);
    # children enter with the parent bound and are solved lazily on pop
    heap = []
    seq = 0

    def push(fixed, bound_estimate, res):
        nonlocal seq
        heapq.heappush(heap, (-bound_estimate, seq, fixed, res))
        seq += 1

    push({}, root.objective, root)
    status = "optimal"
    pruned_max = -math.inf
    early = False
    while heap:
        neg_bound, _, fixed, res = heapq.heappop(heap)
        bound = -neg_bound
        if bound <= prune_line():
            pruned_max = max(pruned_max, bound)
            break  # best-first: everything left is at or below this bound
        if opt.stop_incumbent is not None and inc_obj > opt.stop_incumbent:
            status = "incumbent_reached"
            push(fixed, bound, res)  # keep the node for an honest tree bound
            early = True
            break
        if nodes_solved >= opt.node_budget or time.perf_counter() - start > opt.time_budget:
            status = "budget_exceeded"
            push(fixed, bound, res)
            early = True
            break
        if res is None:
            res = lp(fixed)
            if res.status != "optimal":
                continue
            frac = (
                np.abs(res.point[bins] - np.round(res.point[bins]))
                if bins.size else np.zeros(0)
            )
            if frac.size == 0 or np.max(frac) <= opt.integrality_tol:
                # harvest right away so ties with the incumbent reach the
                # pool before the bound prune discards them
                if accept_candidate(fixed, res):
                    continue
                if frac.size == 0:
                    continue
            if res.objective <= prune_line():
                pruned_max = max(pruned_max, res.objective)
                continue
            if heap and res.objective < -heap[0][0]:
                push(fixed, res.objective, res)  # re-queue with the true bound
                continue
        frac = np.abs(res.point[bins] - np.round(res.point[bins])) if bins.size else np.zeros(0)
        if frac.size == 0 or np.max(frac) <= opt.integrality_tol:
            if accept_candidate(fixed, res):
                continue
            if frac.size == 0:
                continue
        scores = np.minimum(frac, 1.0 - frac)  # distance from the nearer integer
        j = bins[int(np.argmax(scores))]  # argmax takes the lowest index on ties
        for val in (0.0, 1.0):
            child = dict(fixed)
            child[j] = (val, val)
            push(child, res.objective, None)

    wall = time.perf_counter() - start
    heap_top = -heap[0][0] if heap else -math.inf
    tree_bound = max(inc_obj, heap_top, pruned_max)
    if early:
        return SolveResult(status, None if inc_point is None else inc_obj, inc_point,
                           pool.sorted(), nodes_solved, wall, tree_bound)
    if inc_point is None and tree_bound == -math.inf:
        return SolveResult("infeasible", None, None, pool.sorted(), nodes_solved, wall,
                           -math.inf)
    if inc_point is not None:
        viol = model.point_violation(inc_point, opt.integrality_tol)
        if viol > 10 * opt.feasibility_tol:
            raise LpFailure(f"incumbent violates the model by {viol:g}")
    if inc_obj >= tree_bound - opt.abs_gap:
        return SolveResult("optimal", inc_obj, inc_point, pool.sorted(), nodes_solved,
                           wall, inc_obj)
    if opt.stop_bound is not None and tree_bound <= opt.stop_bound:
        return SolveResult("bound_reached", None if inc_point is None else inc_obj,
                           inc_point, pool.sorted(), nodes_solved, wall, tree_bound)
    raise LpFailure("search ended without closing the gap")  # defensive; unreachable


@dataclasses.dataclass
class ActiveRow:
    kind: str  # "eq" | "le" | "lo" | "up"
    index: int  # row id for eq/le, variable id for lo/up


@dataclasses.dataclass
class ActiveSetCertificate:
    """Square active system at a MIP optimum with binaries frozen.

    Over the continuous variables ``cont_index`` (in ascending id order),
    the selected rows satisfy ``a @ s = b`` with the optimum ``s*`` as the
    unique solution, and the objective is ``c @ s + d``. Binary fixings are
    folded into ``b`` and ``d``. ``extra_ties`` flags that more rows were
    tight than the system needed (the vertex is overdetermined).
    """

    rows: list[ActiveRow]
    binary_values: np.ndarray
    cont_index: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: float
    objective: float
    extra_ties: bool


def extract_active_set(model: MilpModel, result: SolveResult, *,
                       activity_tol: float = ACTIVE_TOL) -> ActiveSetCertificate:
    """Freeze binaries and tight rows at the optimum into a square system.

    Candidate rows are scanned in a fixed order (equalities, inequalities,
    lower bounds, upper bounds) and greedily added when linearly
    independent of the rows picked so far. Raises
    :class:`DegenerateActiveSet` when no invertible square system exists.
    """
    if result.point is None:
        raise ValueError("solve result carries no point")
    v = np.asarray(result.point, dtype=float)
    bin_ids = sorted(model.binaries)
    beta = np.round(v[bin_ids]) if bin_ids else np.zeros(0)
    if bin_ids and np.max(np.abs(v[bin_ids] - beta)) > INTEGRALITY_TOL:
        raise ValueError("binaries are not integral at the reported optimum")
    beta_of = dict(zip(bin_ids, beta))
    cont = np.array([j for j in range(model.num_vars) if j not in beta_of], dtype=int)
    pos = {j: k for k, j in enumerate(cont)}
    n = cont.size

    def densify(expr):
        row = np.zeros(n)
        rhs = -float(expr.const)
        for var, coef in expr.coeffs.items():
            if var in beta_of:
                rhs -= float(coef) * beta_of[var]
            else:
                row[pos[var]] += float(coef)
        return row, rhs

    candidates: list[tuple[ActiveRow, np.ndarray, float]] = []
    for i, expr in enumerate(model.eq_rows):
        row, rhs = densify(expr)
        candidates.append((ActiveRow("eq", i), row, rhs))
    for i, expr in enumerate(model.le_rows):
        row, rhs = densify(expr)
        if abs(row @ v[cont] - rhs) <= activity_tol:
            candidates.append((ActiveRow("le", i), row, rhs))
    for j in cont:
        if math.isfinite(model.lb[j]) and abs(v[j] - model.lb[j]) <= activity_tol:
            row = np.zeros(n)
            row[pos[j]] = 1.0
            candidates.append((ActiveRow("lo", j), row, model.lb[j]))
    for j in cont:
        if math.isfinite(model.ub[j]) and abs(v[j] - model.ub[j]) <= activity_tol:
            row = np.zeros(n)
            row[pos[j]] = 1.0
            candidates.append((ActiveRow("up", j), row, model.ub[j]))

    picked: list[tuple[ActiveRow, np.ndarray, float]] = []
    q = np.zeros((0, n))
    for cand in candidates:
        if len(picked) == n:
            break
        row = cand[1]
        resid = row - q.T @ (q @ row) if q.size else row.copy()
        norm = np.linalg.norm(resid)
        if norm > 1e-9 * max(1.0, np.linalg.norm(row)):
            picked.append(cand)
            q = np.vstack([q, resid / norm])
    if len(picked) < n:
        raise DegenerateActiveSet(
            f"only {len(picked)} independent active rows for {n} continuous variables"
        )
    extra = len(candidates) > n

    if n == 0:
        a = np.zeros((0, 0))
        b = np.zeros(0)
        s = np.zeros(0)
    else:
        a = np.vstack([row for _, row, _ in picked])
        b = np.array([rhs for _, _, rhs in picked])
        if np.linalg.cond(a) > 1e10:
            raise DegenerateActiveSet("active system is numerically singular")
        s = np.linalg.solve(a, b)
        if np.max(np.abs(s - v[cont])) > 1e-5:
            raise DegenerateActiveSet("active system does not reproduce the optimum")

    c = np.zeros(n)
    d = float(model.objective.const)
    for var, coef in model.objective.coeffs.items():
        if var in beta_of:
            d += float(coef) * beta_of[var]
        else:
            c[pos[var]] += float(coef)
    obj = float(c @ s + d)
    if result.objective is not None and abs(obj - result.objective) > 1e-6:
        raise DegenerateActiveSet(
            f"active system objective {obj:g} disagrees with the solve ({result.objective:g})"
        )
    return ActiveSetCertificate(
        [r for r, _, _ in picked], beta, cont, a, b, c, d, obj, extra
    )
