"""Closed-loop certification of learned controllers and Lyapunov functions.

The controlled system is ``x+ = phi_dyn(x, pi(x)) - phi_dyn(x*, u*) + x*``
with the saturated network controller ``pi(x) = clamp(phi_pi(x) -
phi_pi(x*) + u*, u_min, u_max)``, so the equilibrium is a fixed point by
construction. The Lyapunov candidate is ``V(x) = phi_V(x) - phi_V(x*) +
|R (x - x*)|_1`` where ``R = U (S + diag(r^2)) V^T`` keeps full rank for
any ``r`` once the diagonal ``S`` is positive.

Two maximization MIPs decide the Lyapunov conditions over the box ``B``:

* positivity: ``max eps1 |R (x - x*)|_1 - V(x)``
* decrease: ``max V(x+) - V(x) + eps2 V(x)``

the pair certifies exponential stability exactly when both optima are at
most the certification tolerance. Every builder runs on generic scalars so
the trainer can replay it with autograd tensors; variable bounds stay
parameter-free floats.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import math

import numpy as np

from lyapsyn import milp, nets, solver
from lyapsyn.milp import LinExpr, MilpModel

CERTIFICATION_TOL = 1e-6


def _vec(x, n, what):
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (n,):
        raise ValueError(f"{what}: expected shape ({n},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{what}: entries must be finite")
    return v


@dataclasses.dataclass(frozen=True)
class Dynamics:
    """Equilibrium-anchored network dynamics with saturation limits.

    ``net`` maps the stacked ``(x, u)`` to the raw next state; the closed
    form subtracts its value at ``(x_star, u_star)`` and adds back
    ``x_star`` so the equilibrium is exact regardless of fit error.
    """

    net: nets.FeedforwardNetwork
    x_star: np.ndarray
    u_star: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        n_x = self.net.output_dim
        n_u = self.net.input_dim - n_x
        if n_u < 1:
            raise ValueError("dynamics network must take at least one input beyond the state")
        object.__setattr__(self, "x_star", _vec(self.x_star, n_x, "x_star"))
        object.__setattr__(self, "u_star", _vec(self.u_star, n_u, "u_star"))
        object.__setattr__(self, "u_min", _vec(self.u_min, n_u, "u_min"))
        object.__setattr__(self, "u_max", _vec(self.u_max, n_u, "u_max"))
        if np.any(self.u_min >= self.u_max):
            raise ValueError("u_min must be strictly below u_max")
        if np.any(self.u_star < self.u_min) or np.any(self.u_star > self.u_max):
            raise ValueError("u_star must respect the saturation limits")

    @property
    def n_x(self) -> int:
        return self.net.output_dim

    @property
    def n_u(self) -> int:
        return self.net.input_dim - self.net.output_dim


@dataclasses.dataclass(frozen=True)
class Controller:
    """Saturated network policy; the offsets live on :class:`Dynamics`."""

    net: nets.FeedforwardNetwork


@dataclasses.dataclass(frozen=True)
class LyapunovFunction:
    """Network-plus-1-norm Lyapunov candidate.

    ``u_factor`` and ``v_factor`` are orthogonal, ``sigma`` is a positive
    diagonal, and ``R = U (diag(sigma) + diag(r^2)) V^T``, which has full
    rank for every ``r``. ``V(x) = net(x) - net(x_star) + |R (x - x_star)|_1``.
    """

    net: nets.FeedforwardNetwork
    x_star: np.ndarray
    u_factor: np.ndarray
    v_factor: np.ndarray
    sigma: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        n = self.net.input_dim
        if self.net.output_dim != 1:
            raise ValueError("Lyapunov network must be scalar-valued")
        object.__setattr__(self, "x_star", _vec(self.x_star, n, "x_star"))
        u = np.asarray(self.u_factor, dtype=np.float64)
        v = np.asarray(self.v_factor, dtype=np.float64)
        if u.shape != (n, n) or v.shape != (n, n):
            raise ValueError("u_factor and v_factor must be square over the state")
        for name, mat in (("u_factor", u), ("v_factor", v)):
            if np.max(np.abs(mat.T @ mat - np.eye(n))) > 1e-7:
                raise ValueError(f"{name} must be orthogonal")
        object.__setattr__(self, "u_factor", u)
        object.__setattr__(self, "v_factor", v)
        sigma = _vec(self.sigma, n, "sigma")
        if np.any(sigma <= 0):
            raise ValueError("sigma must be strictly positive")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "r", _vec(self.r, n, "r"))

    @property
    def r_matrix(self) -> np.ndarray:
        return self.u_factor @ np.diag(self.sigma + self.r**2) @ self.v_factor.T


def identity_factors(n: int, sigma: float = 0.1):
    """Default rank factors: identity rotations and a uniform diagonal."""
    return np.eye(n), np.eye(n), np.full(n, float(sigma))


@dataclasses.dataclass(frozen=True)
class CertificationProblem:
    """Everything the verification MIPs need, over the box ``[box_lo, box_hi]``."""

    dynamics: Dynamics
    controller: Controller
    lyapunov: LyapunovFunction
    box_lo: np.ndarray
    box_hi: np.ndarray
    eps1: float = 0.01
    eps2: float = 0.01

    def __post_init__(self):
        n_x = self.dynamics.n_x
        if self.controller.net.input_dim != n_x:
            raise ValueError("controller input size must match the state")
        if self.controller.net.output_dim != self.dynamics.n_u:
            raise ValueError("controller output size must match the input count")
        if self.lyapunov.net.input_dim != n_x:
            raise ValueError("Lyapunov input size must match the state")
        if np.max(np.abs(self.lyapunov.x_star - self.dynamics.x_star)) > 0:
            raise ValueError("dynamics and Lyapunov candidate disagree on the equilibrium")
        object.__setattr__(self, "box_lo", _vec(self.box_lo, n_x, "box_lo"))
        object.__setattr__(self, "box_hi", _vec(self.box_hi, n_x, "box_hi"))
        if np.any(self.box_lo >= self.box_hi):
            raise ValueError("box must have positive volume")
        if np.any(self.dynamics.x_star < self.box_lo) or np.any(
            self.dynamics.x_star > self.box_hi
        ):
            raise ValueError("equilibrium must lie inside the box")
        if not (0.0 < self.eps1 < 1.0):
            raise ValueError("eps1 must lie in (0, 1)")
        if not (0.0 < self.eps2 < 1.0):
            raise ValueError("eps2 must lie in (0, 1)")

    @property
    def n_x(self) -> int:
        return self.dynamics.n_x

    @property
    def n_u(self) -> int:
        return self.dynamics.n_u


def eval_lyapunov(lyap: LyapunovFunction, x):
    """V(x) for a single state or a batch of states."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    phi = nets.forward(lyap.net, xb)[0][:, 0]
    phi_star = nets.forward(lyap.net, lyap.x_star)[0][0]
    l1 = np.sum(np.abs((xb - lyap.x_star) @ lyap.r_matrix.T), axis=1)
    v = phi - phi_star + l1
    return v[0] if single else v


def eval_controller(dyn: Dynamics, ctrl: Controller, x):
    """Saturated policy value for a single state or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    raw = nets.forward(ctrl.net, xb)[0]
    raw_star = nets.forward(ctrl.net, dyn.x_star)[0]
    u = np.clip(raw - raw_star + dyn.u_star, dyn.u_min, dyn.u_max)
    return u[0] if single else u


def step(dyn: Dynamics, ctrl: Controller, x):
    """Closed-loop successor state(s)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    u = eval_controller(dyn, ctrl, xb)
    inp = np.concatenate([xb, u], axis=1)
    phi = nets.forward(dyn.net, inp)[0]
    phi_star = nets.forward(dyn.net, np.concatenate([dyn.x_star, dyn.u_star]))[0]
    nxt = phi - phi_star + dyn.x_star
    return nxt[0] if single else nxt


def positivity_objective(problem: CertificationProblem, x):
    """eps1 |R (x - x*)|_1 - V(x); positive values violate positivity."""
    lyap = problem.lyapunov
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    l1 = np.sum(np.abs((xb - lyap.x_star) @ lyap.r_matrix.T), axis=1)
    val = problem.eps1 * l1 - eval_lyapunov(lyap, xb)
    return val[0] if single else val


def decrease_objective(problem: CertificationProblem, x):
    """V(x+) - V(x) + eps2 V(x); positive values violate the decrease."""
    nxt = step(problem.dynamics, problem.controller, x)
    val = eval_lyapunov(problem.lyapunov, nxt) - (1.0 - problem.eps2) * eval_lyapunov(
        problem.lyapunov, x
    )
    return val


# --- MIP construction -------------------------------------------------------
#
# Builders operate on a scalar view of the problem so that the same code
# serves the float path and the autograd replay. Branches (phase elision,
# interval sign splits) go through milp.scalar_float, keeping the structure
# identical at equal parameter values.


@dataclasses.dataclass
class _ScalarView:
    pi_layers: list
    pi_leak: float
    v_layers: list
    v_leak: float
    dyn_layers: list
    dyn_leak: float
    r_rows: list  # n_x rows of n_x scalars
    x_star: list
    u_star: list
    u_min: list
    u_max: list
    box_lo: list
    box_hi: list
    eps1: float
    eps2: float


def _float_layers(net: nets.FeedforwardNetwork):
    return [(w.tolist(), b.tolist()) for w, b in zip(net.weights, net.biases)]


def _layers_from_flat(template: nets.FeedforwardNetwork, flat):
    pairs = nets.slice_params(template, flat)
    out = []
    for w, b in pairs:
        rows = [[w[i][j] for j in range(w.shape[1])] for i in range(w.shape[0])]
        out.append((rows, [b[i] for i in range(b.shape[0])]))
    return out


def _r_rows_from_factors(u, sigma, v, r):
    n = len(sigma)
    rows = []
    for i in range(n):
        row = []
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc = acc + u[i][k] * (sigma[k] + r[k] * r[k]) * v[j][k]
            row.append(acc)
        rows.append(row)
    return rows


def _scalar_view(problem: CertificationProblem) -> _ScalarView:
    lyap = problem.lyapunov
    return _ScalarView(
        pi_layers=_float_layers(problem.controller.net),
        pi_leak=problem.controller.net.leak,
        v_layers=_float_layers(lyap.net),
        v_leak=lyap.net.leak,
        dyn_layers=_float_layers(problem.dynamics.net),
        dyn_leak=problem.dynamics.net.leak,
        r_rows=_r_rows_from_factors(
            lyap.u_factor.tolist(), lyap.sigma.tolist(), lyap.v_factor.tolist(),
            lyap.r.tolist(),
        ),
        x_star=problem.dynamics.x_star.tolist(),
        u_star=problem.dynamics.u_star.tolist(),
        u_min=problem.dynamics.u_min.tolist(),
        u_max=problem.dynamics.u_max.tolist(),
        box_lo=problem.box_lo.tolist(),
        box_hi=problem.box_hi.tolist(),
        eps1=problem.eps1,
        eps2=problem.eps2,
    )


def _scalar_forward(layers, leak, xs):
    """Network value on scalar inputs, matching the float forward exactly."""
    acts = list(xs)
    for li, (w, b) in enumerate(layers):
        nxt = []
        for i in range(len(b)):
            y = b[i]
            for j, a in enumerate(acts):
                y = y + w[i][j] * a
            if li < len(layers) - 1:
                y = y if milp.scalar_float(y) >= 0.0 else leak * y
            nxt.append(y)
        acts = nxt
    return acts


def _net_bounds(layers, leak, in_lo, in_up, bound_method):
    if bound_method == "lp":
        return milp.lp_bounds(layers, in_lo, in_up, leak)
    if bound_method == "ia":
        return milp.interval_bounds(layers, in_lo, in_up, leak)
    raise ValueError(f"unknown bound method {bound_method!r}")


@dataclasses.dataclass
class MipBuild:
    """A verification MIP plus the handles needed to interpret its solution."""

    model: MilpModel
    x_vars: list[int]
    hint: np.ndarray | None
    aux: dict


def _lyapunov_terms(model, s: _ScalarView, x_exprs, in_lo, in_up, prefix, bound_method):
    """Encode phi_V(x) and |R (x - x*)|_1; V = phi - phi* + l1 up to a constant."""
    vb = _net_bounds(s.v_layers, s.v_leak, in_lo, in_up, bound_method)
    phi = milp.encode_relu_network(
        model, s.v_layers, x_exprs, vb, leak=s.v_leak, prefix=f"{prefix}phi"
    )[0]
    elems = []
    elem_lo = []
    elem_up = []
    n = len(s.x_star)
    for i in range(n):
        e = LinExpr()
        shift = 0.0
        for j in range(n):
            e = e + s.r_rows[i][j] * x_exprs[j]
            shift = shift + s.r_rows[i][j] * s.x_star[j]
        e = e - shift
        lo = -shift
        up = -shift
        for j in range(n):
            coef = s.r_rows[i][j]
            if milp.scalar_float(coef) >= 0.0:
                lo = lo + coef * in_lo[j]
                up = up + coef * in_up[j]
            else:
                lo = lo + coef * in_up[j]
                up = up + coef * in_lo[j]
        elems.append(e)
        elem_lo.append(lo)
        elem_up.append(up)
    l1 = milp.encode_l1(model, elems, elem_lo, elem_up, prefix=f"{prefix}R")
    return phi, l1


def build_positivity_mip(problem_or_view, bound_method: str = "ia") -> MipBuild:
    """MIP maximizing ``eps1 |R (x - x*)|_1 - V(x)`` over the box.

    A certified candidate has optimum <= the certification tolerance. The
    returned hint is the (always feasible) equilibrium assignment, whose
    objective is exactly zero.
    """
    s = (
        problem_or_view
        if isinstance(problem_or_view, _ScalarView)
        else _scalar_view(problem_or_view)
    )
    model = MilpModel()
    model.start_witness()
    n = len(s.x_star)
    x_vars = []
    x_exprs = []
    for j in range(n):
        vj = model.add_var(f"x{j}", s.box_lo[j], s.box_hi[j])
        model.set_witness(vj, s.x_star[j])
        x_vars.append(vj)
        x_exprs.append(LinExpr.term(vj))
    phi, l1 = _lyapunov_terms(model, s, x_exprs, s.box_lo, s.box_hi, "V", bound_method)
    phi_star = _scalar_forward(s.v_layers, s.v_leak, s.x_star)[0]
    # eps1*l1 - (phi - phi* + l1) = (eps1 - 1) l1 - phi + phi*
    model.set_objective_max(l1 * (s.eps1 - 1.0) - phi + phi_star)
    hint = np.array(model.witness, dtype=float)
    return MipBuild(model, x_vars, hint, {"l1": l1, "phi": phi})


def build_decrease_mip(problem_or_view, bound_method: str = "ia") -> MipBuild:
    """MIP maximizing ``V(x+) - V(x) + eps2 V(x)`` over the box.

    Chains the controller, saturation, and dynamics encodings to express
    the successor state, then encodes the Lyapunov value at both states.
    """
    s = (
        problem_or_view
        if isinstance(problem_or_view, _ScalarView)
        else _scalar_view(problem_or_view)
    )
    model = MilpModel()
    model.start_witness()
    n = len(s.x_star)
    m = len(s.u_star)
    x_vars = []
    x_exprs = []
    for j in range(n):
        vj = model.add_var(f"x{j}", s.box_lo[j], s.box_hi[j])
        model.set_witness(vj, s.x_star[j])
        x_vars.append(vj)
        x_exprs.append(LinExpr.term(vj))

    # controller network and saturation
    pb = _net_bounds(s.pi_layers, s.pi_leak, s.box_lo, s.box_hi, bound_method)
    pi_raw = milp.encode_relu_network(
        model, s.pi_layers, x_exprs, pb, leak=s.pi_leak, prefix="pi"
    )
    pi_star = _scalar_forward(s.pi_layers, s.pi_leak, s.x_star)
    u_exprs = []
    u_lo = []
    u_up = []
    for k in range(m):
        pre = pi_raw[k] - pi_star[k] + s.u_star[k]
        pre_lo = pb.out_lo[k] - pi_star[k] + s.u_star[k]
        pre_up = pb.out_up[k] - pi_star[k] + s.u_star[k]
        sat = milp.encode_clamp(
            model, pre, pre_lo, pre_up, s.u_min[k], s.u_max[k], prefix=f"sat{k}"
        )
        uk = model.add_var(f"u{k}", s.u_min[k], s.u_max[k])
        ue = LinExpr.term(uk)
        model.add_eq(ue - sat)
        if model.witness is not None:
            model.set_witness(uk, milp.scalar_float(sat.value(model.witness)))
        u_exprs.append(ue)
        # reachable input range after saturation, for the dynamics bounds
        lo_k = milp.scalar_min(milp.scalar_max(pre_lo, s.u_min[k]), s.u_max[k])
        up_k = milp.scalar_min(milp.scalar_max(pre_up, s.u_min[k]), s.u_max[k])
        u_lo.append(lo_k)
        u_up.append(up_k)

    # dynamics network over (x, u)
    din_lo = list(s.box_lo) + u_lo
    din_up = list(s.box_hi) + u_up
    db = _net_bounds(s.dyn_layers, s.dyn_leak, din_lo, din_up, bound_method)
    f_raw = milp.encode_relu_network(
        model, s.dyn_layers, x_exprs + u_exprs, db, leak=s.dyn_leak, prefix="f"
    )
    f_star = _scalar_forward(s.dyn_layers, s.dyn_leak, s.x_star + s.u_star)
    xn_exprs = []
    xn_lo = []
    xn_up = []
    for j in range(n):
        xn_exprs.append(f_raw[j] - f_star[j] + s.x_star[j])
        xn_lo.append(db.out_lo[j] - f_star[j] + s.x_star[j])
        xn_up.append(db.out_up[j] - f_star[j] + s.x_star[j])

    phi1, l1_now = _lyapunov_terms(model, s, x_exprs, s.box_lo, s.box_hi, "V1", bound_method)
    phi2, l1_nxt = _lyapunov_terms(model, s, xn_exprs, xn_lo, xn_up, "V2", bound_method)
    phi_star = _scalar_forward(s.v_layers, s.v_leak, s.x_star)[0]
    v_now = phi1 - phi_star + l1_now
    v_nxt = phi2 - phi_star + l1_nxt
    model.set_objective_max(v_nxt - v_now * (1.0 - s.eps2))
    hint = np.array(model.witness, dtype=float)
    return MipBuild(
        model, x_vars, hint,
        {"u_vars": [model.names.index(f"u{k}") for k in range(m)], "xn": xn_exprs},
    )


def build_boundary_face_mip(
    problem: CertificationProblem, dim: int, side: str, bound_method: str = "ia"
) -> MipBuild:
    """MIP maximizing ``-V(x)`` over one face of the box boundary.

    Negating the optimum gives the minimum of V on that face; the level
    ``rho`` below the minimum over all faces stays inside the box.
    """
    s = _scalar_view(problem)
    if side not in ("lo", "hi"):
        raise ValueError("side must be 'lo' or 'hi'")
    face_val = s.box_lo[dim] if side == "lo" else s.box_hi[dim]
    in_lo = list(s.box_lo)
    in_up = list(s.box_hi)
    in_lo[dim] = face_val
    in_up[dim] = face_val
    model = MilpModel()
    model.start_witness()
    n = len(s.x_star)
    x_vars = []
    x_exprs = []
    witness_x = list(s.x_star)
    witness_x[dim] = face_val
    for j in range(n):
        vj = model.add_var(f"x{j}", in_lo[j], in_up[j])
        model.set_witness(vj, witness_x[j])
        x_vars.append(vj)
        x_exprs.append(LinExpr.term(vj))
    phi, l1 = _lyapunov_terms(model, s, x_exprs, in_lo, in_up, "V", bound_method)
    phi_star = _scalar_forward(s.v_layers, s.v_leak, s.x_star)[0]
    model.set_objective_max(-1.0 * (phi - phi_star + l1))
    hint = np.array(model.witness, dtype=float)
    return MipBuild(model, x_vars, hint, {})


# --- verification and region of attraction ----------------------------------


@dataclasses.dataclass
class MipOutcome:
    """One verification MIP after solving."""

    objective: float | None
    state: np.ndarray | None
    status: str
    bound: float
    node_count: int
    wall_time: float
    pool_states: list[np.ndarray]
    pool_values: list[float]


@dataclasses.dataclass
class VerificationReport:
    status: str  # "certified" | "falsified" | "undetermined"
    certified: bool
    positivity: MipOutcome
    decrease: MipOutcome
    tolerance: float


def _solve_build(build: MipBuild, options: solver.SolveOptions | None,
                 tolerance: float) -> MipOutcome:
    opts = dataclasses.replace(options) if options else solver.SolveOptions()
    opts.hint = build.hint
    opts.pool_key = build.x_vars
    if opts.pool_threshold is not None and opts.pool_threshold < tolerance:
        opts.pool_threshold = tolerance
    res = solver.solve(build.model, opts)
    state = None if res.point is None else res.point[build.x_vars].copy()
    return MipOutcome(
        objective=res.objective,
        state=state,
        status=res.status,
        bound=res.bound,
        node_count=res.node_count,
        wall_time=res.wall_time,
        pool_states=[e.point[build.x_vars].copy() for e in res.pool],
        pool_values=[e.objective for e in res.pool],
    )


def verify(
    problem: CertificationProblem,
    *,
    bound_method: str = "ia",
    solve_options: solver.SolveOptions | None = None,
    tolerance: float = CERTIFICATION_TOL,
) -> VerificationReport:
    """Decide both Lyapunov conditions over the box.

    ``certified`` requires both MIPs solved to optimality with optima at
    most ``tolerance``. A feasible point above the tolerance falsifies the
    candidate even when the search hit its budget; otherwise a budget stop
    leaves the verdict undetermined.
    """
    pos = _solve_build(build_positivity_mip(problem, bound_method), solve_options, tolerance)
    dec = _solve_build(build_decrease_mip(problem, bound_method), solve_options, tolerance)
    for out in (pos, dec):
        if out.status == "infeasible":
            raise solver.LpFailure("verification MIP infeasible; the box should never be empty")

    def satisfied(out: MipOutcome) -> bool:
        if out.status == "optimal":
            return out.objective <= tolerance
        # a proved tree bound below the tolerance rules violations out even
        # without pinning the exact optimum
        return out.status == "bound_reached" and out.bound <= tolerance

    if satisfied(pos) and satisfied(dec):
        status = "certified"
    elif any(o.objective is not None and o.objective > tolerance for o in (pos, dec)):
        status = "falsified"
    else:
        status = "undetermined"
    return VerificationReport(status, status == "certified", pos, dec, tolerance)


@dataclasses.dataclass
class FaceResult:
    dim: int
    side: str
    value: float  # lower bound on min V over the face
    exact: bool
    state: np.ndarray | None


@dataclasses.dataclass
class RoaResult:
    """Sublevel set ``{x : V(x) <= rho}`` certified to stay inside the box."""

    rho: float
    exact: bool
    minimizer: np.ndarray | None
    faces: list[FaceResult]


def roa_level(
    problem: CertificationProblem,
    *,
    bound_method: str = "ia",
    solve_options: solver.SolveOptions | None = None,
    workers: int = 1,
) -> RoaResult:
    """Minimum of V over the box boundary, face by face.

    Each of the ``2 n_x`` faces contributes one MIP. When a face search
    stops on budget, its tree bound still lower-bounds the face minimum,
    so the reported ``rho`` stays valid but is flagged inexact.
    """
    faces = [(d, side) for d in range(problem.n_x) for side in ("lo", "hi")]

    def run(face):
        d, side = face
        build = build_boundary_face_mip(problem, d, side, bound_method)
        opts = dataclasses.replace(solve_options) if solve_options else solver.SolveOptions()
        opts.hint = build.hint
        opts.pool_threshold = None
        res = solver.solve(build.model, opts)
        if res.status == "optimal":
            return FaceResult(d, side, -res.objective, True, res.point[build.x_vars].copy())
        if res.status == "budget_exceeded":
            state = None if res.point is None else res.point[build.x_vars].copy()
            return FaceResult(d, side, -res.bound, False, state)
        raise solver.LpFailure(f"face ({d}, {side}) reported {res.status}")

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, faces))
    else:
        results = [run(face) for face in faces]
    rho = math.inf
    minimizer = None
    exact = True
    for fr in results:
        exact = exact and fr.exact
        if fr.value < rho:
            rho = fr.value
            minimizer = fr.state
    return RoaResult(rho, exact, minimizer, results)


# --- parameter plumbing for the trainer --------------------------------------


def theta_layout(problem: CertificationProblem) -> dict:
    """Slices of the flat trainable vector: controller, Lyapunov net, r."""
    n_pi = nets.parameter_count(problem.controller.net)
    n_v = nets.parameter_count(problem.lyapunov.net)
    n_r = problem.n_x
    return {
        "controller": slice(0, n_pi),
        "lyapunov": slice(n_pi, n_pi + n_v),
        "r": slice(n_pi + n_v, n_pi + n_v + n_r),
        "total": n_pi + n_v + n_r,
    }


def get_theta(problem: CertificationProblem) -> np.ndarray:
    return np.concatenate(
        [
            nets.parameter_vector(problem.controller.net),
            nets.parameter_vector(problem.lyapunov.net),
            problem.lyapunov.r,
        ]
    )


def with_theta(problem: CertificationProblem, theta) -> CertificationProblem:
    lay = theta_layout(problem)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (lay["total"],):
        raise ValueError(f"expected {lay['total']} parameters, got {theta.shape}")
    ctrl = Controller(nets.with_params(problem.controller.net, theta[lay["controller"]]))
    lyap = dataclasses.replace(
        problem.lyapunov,
        net=nets.with_params(problem.lyapunov.net, theta[lay["lyapunov"]]),
        r=theta[lay["r"]],
    )
    return dataclasses.replace(problem, controller=ctrl, lyapunov=lyap)


@dataclasses.dataclass
class ThetaBinding:
    """Rebuilds one verification MIP from a flat parameter vector.

    ``rebuild`` accepts any scalar container (numpy vector, autograd
    tensor); at the numeric value :func:`get_theta` returned, the rebuilt
    model is structurally identical to the float build with interval
    bounds, which is what active-set replay requires.
    """

    problem: CertificationProblem
    which: str  # "positivity" | "decrease"
    theta: np.ndarray

    def rebuild(self, flat) -> MipBuild:
        base = _scalar_view(self.problem)
        lay = theta_layout(self.problem)
        pi_flat = flat[lay["controller"]]
        v_flat = flat[lay["lyapunov"]]
        r_flat = flat[lay["r"]]
        lyap = self.problem.lyapunov
        view = dataclasses.replace(
            base,
            pi_layers=_layers_from_flat(self.problem.controller.net, pi_flat),
            v_layers=_layers_from_flat(lyap.net, v_flat),
            r_rows=_r_rows_from_factors(
                lyap.u_factor.tolist(), lyap.sigma.tolist(), lyap.v_factor.tolist(),
                [r_flat[k] for k in range(self.problem.n_x)],
            ),
        )
        if self.which == "positivity":
            return build_positivity_mip(view, "ia")
        if self.which == "decrease":
            return build_decrease_mip(view, "ia")
        raise ValueError(f"unknown MIP kind {self.which!r}")


def make_theta_binding(problem: CertificationProblem, which: str) -> ThetaBinding:
    return ThetaBinding(problem, which, get_theta(problem))
