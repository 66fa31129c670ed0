"""Training loops that repair controller and Lyapunov candidates.

Two strategies share the verification MIPs from :mod:`lyapsyn.certify`:

* :func:`train_counterexamples` grows two sets of states where the
  conditions fail (harvested from the solver's solution pool) and fits a
  surrogate loss over them with batched gradient descent.
* :func:`train_minmax` descends directly on the verification optima. The
  optimum of a MIP with frozen binaries and active rows is a closed-form
  function of the parameters, so its gradient comes from replaying the
  active square system symbolically and back-propagating through it.
"""

import concurrent.futures
import csv
import dataclasses
import json
import math
import pathlib

import numpy as np

from lyapsyn import certify, nets, solver
from lyapsyn.milp import MilpModel


class IterationBudgetExceeded(RuntimeError):
    """Raised when the outer loop runs out of iterations; carries the best
    state reached so far in ``state``."""

    def __init__(self, message: str, state: "TrainState"):
        super().__init__(message)
        self.state = state


@dataclasses.dataclass
class LossConfig:
    """Surrogate-loss and inner-optimizer settings.

    ``p`` selects the norm aggregating per-sample violations; 4 behaves as
    a smooth stand-in for the max norm.
    """

    p: float = 4.0  # 1, 4, or math.inf
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 200
    optimizer: str = "gd"  # "gd" | "adam"

    def __post_init__(self):
        p = float(self.p)
        if not (p in (1.0, 4.0) or math.isinf(p)):
            raise ValueError(f"norm order must be 1, 4, or inf, got {self.p}")
        self.p = p
        if self.batch_size <= 0 or self.learning_rate <= 0 or self.max_epochs <= 0:
            raise ValueError("batch size, learning rate, and epochs must be positive")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclasses.dataclass
class TrainConfig:
    """Outer-loop settings shared by both training algorithms."""

    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    max_iterations: int = 50
    tolerance: float = certify.CERTIFICATION_TOL
    pool_cap: int = 50  # counter-examples appended per MIP per iteration
    dedup_tol: float = 1e-6
    step_size: float = 1e-2  # min-max gradient step (cap under the polyak rule)
    min_step_size: float = 1e-8
    step_rule: str = "polyak"  # "polyak" scales by violation/|grad|^2; "fixed" does not
    bound_method: str = "ia"
    node_budget: int = 500_000
    checkpoint_dir: str | None = None
    workers: int = 1  # the two condition MIPs may solve concurrently


@dataclasses.dataclass
class TrainState:
    """Mutable training state threaded through the outer loops.

    ``theta`` is the flat trainable vector (controller weights, Lyapunov
    weights, r). The counter-example sets only ever grow.
    """

    theta: np.ndarray
    x1_set: list  # positivity counter-examples
    x2_set: list  # decrease counter-examples
    moment1: np.ndarray
    moment2: np.ndarray
    adam_steps: int = 0
    iteration: int = 0
    epochs_run: int = 0
    seed: int = 0
    step_size: float | None = None  # running min-max step, None until used
    history: list = dataclasses.field(default_factory=list)
    converged: bool = False


def init_state(problem: certify.CertificationProblem, seed: int = 0) -> TrainState:
    theta = certify.get_theta(problem)
    if not np.all(np.isfinite(theta)):
        raise ValueError("initial parameters must be finite")
    n = theta.size
    return TrainState(theta, [], [], np.zeros(n), np.zeros(n), seed=seed)


# --- pointwise violations and the surrogate loss ------------------------------


def violation_eta1(problem: certify.CertificationProblem, x):
    """Positivity violation ``max(eps1 |R (x - x*)|_1 - V(x), 0)``."""
    return np.maximum(certify.positivity_objective(problem, x), 0.0)


def violation_eta2(problem: certify.CertificationProblem, x):
    """Decrease violation ``max(V(x+) - V(x) + eps2 V(x), 0)``."""
    return np.maximum(certify.decrease_objective(problem, x), 0.0)


def _as_set(x_list, n_x):
    if isinstance(x_list, np.ndarray):
        arr = np.asarray(x_list, dtype=np.float64)
        return arr.reshape(-1, n_x)
    if not x_list:
        return np.zeros((0, n_x))
    return np.asarray([np.asarray(x, dtype=np.float64) for x in x_list])


def _pnorm(v: np.ndarray, p: float) -> float:
    if v.size == 0:
        return 0.0
    if math.isinf(p):
        return float(np.max(v))
    return float(np.sum(v**p) ** (1.0 / p))


def _pnorm_weights(v: np.ndarray, p: float) -> np.ndarray:
    # d||v||_p / dv_i for v >= 0; the zero vector gets a zero subgradient
    if v.size == 0:
        return np.zeros(0)
    if math.isinf(p):
        w = np.zeros_like(v)
        if np.max(v) > 0.0:
            w[int(np.argmax(v))] = 1.0
        return w
    norm = np.sum(v**p) ** (1.0 / p)
    if norm <= 0.0:
        return np.zeros_like(v)
    return (v / norm) ** (p - 1.0)


def _dl1_dr(lyap: certify.LyapunovFunction, states: np.ndarray) -> np.ndarray:
    """Per-sample gradient of ``|R (x - x*)|_1`` in the r vector.

    With R = U diag(sigma + r^2) V^T, dR/dr_k = 2 r_k U[:, k] V[:, k]^T,
    so each component reduces to two projections.
    """
    delta = states - lyap.x_star
    sgn = np.sign(delta @ lyap.r_matrix.T)
    pu = sgn @ lyap.u_factor
    pv = delta @ lyap.v_factor
    return 2.0 * lyap.r[None, :] * pu * pv


def _push_eta1(problem, states: np.ndarray, w: np.ndarray, out: np.ndarray, lay):
    """Accumulate sum_i w_i * d(positivity objective)_i / d theta into out."""
    if states.shape[0] == 0 or not np.any(w):
        return
    lyap = problem.lyapunov
    # objective = (eps1 - 1) l1 - phi(x) + phi(x*)
    out[lay["lyapunov"]] += nets.grad_params(lyap.net, states, -w[:, None])
    out[lay["lyapunov"]] += nets.grad_params(
        lyap.net, lyap.x_star, np.array([np.sum(w)])
    )
    out[lay["r"]] += (problem.eps1 - 1.0) * (w @ _dl1_dr(lyap, states))


def _push_eta2(problem, states: np.ndarray, w: np.ndarray, out: np.ndarray, lay):
    """Accumulate sum_i w_i * d(decrease objective)_i / d theta into out."""
    if states.shape[0] == 0 or not np.any(w):
        return
    dyn = problem.dynamics
    lyap = problem.lyapunov
    eps2 = problem.eps2
    n_x = problem.n_x
    rmat = lyap.r_matrix

    raw = nets.forward(problem.controller.net, states)[0]
    raw_star = nets.forward(problem.controller.net, dyn.x_star)[0]
    q = raw - raw_star + dyn.u_star
    sat_mask = (q >= dyn.u_min) & (q <= dyn.u_max)
    u = np.clip(q, dyn.u_min, dyn.u_max)
    z = np.concatenate([states, u], axis=1)
    fz = nets.forward(dyn.net, z)[0]
    f_star = nets.forward(dyn.net, np.concatenate([dyn.x_star, dyn.u_star]))[0]
    nxt = fz - f_star + dyn.x_star

    # V-net path: phi(x+) - (1 - eps2) phi(x) - eps2 phi(x*)
    seed = w[:, None]
    _, pg_next, ig_next = nets.value_and_grads(lyap.net, nxt, seed)
    out[lay["lyapunov"]] += pg_next
    out[lay["lyapunov"]] += nets.grad_params(lyap.net, states, -(1.0 - eps2) * seed)
    out[lay["lyapunov"]] += nets.grad_params(
        lyap.net, lyap.x_star, np.array([-eps2 * np.sum(w)])
    )

    # r path: l1(x+) - (1 - eps2) l1(x)
    out[lay["r"]] += w @ _dl1_dr(lyap, nxt)
    out[lay["r"]] -= (1.0 - eps2) * (w @ _dl1_dr(lyap, states))

    # controller path: d V(x+) / d x+ pulled back through dynamics and clamp
    sgn_next = np.sign((nxt - lyap.x_star) @ rmat.T)
    cot_next = ig_next + w[:, None] * (sgn_next @ rmat)
    grad_z = nets.value_and_grads(dyn.net, z, cot_next)[2]
    cot_u = grad_z[:, n_x:] * sat_mask
    out[lay["controller"]] += nets.grad_params(problem.controller.net, states, cot_u)
    out[lay["controller"]] += nets.grad_params(
        problem.controller.net, dyn.x_star, -np.sum(cot_u, axis=0)
    )


def surrogate_loss(problem, x1_set, x2_set, cfg: LossConfig | None = None):
    """p-norm of positivity violations plus p-norm of decrease violations.

    Returns ``(loss, gradient)`` with the gradient over the flat parameter
    vector. Empty sets contribute zero. Saturated controller outputs and
    samples with zero violation block their gradient paths.
    """
    cfg = cfg or LossConfig()
    lay = certify.theta_layout(problem)
    x1 = _as_set(x1_set, problem.n_x)
    x2 = _as_set(x2_set, problem.n_x)

    s1 = certify.positivity_objective(problem, x1) if x1.size else np.zeros(0)
    s2 = certify.decrease_objective(problem, x2) if x2.size else np.zeros(0)
    eta1 = np.maximum(s1, 0.0)
    eta2 = np.maximum(s2, 0.0)
    loss = _pnorm(eta1, cfg.p) + _pnorm(eta2, cfg.p)

    grad = np.zeros(lay["total"])
    _push_eta1(problem, x1, _pnorm_weights(eta1, cfg.p) * (s1 > 0.0), grad, lay)
    _push_eta2(problem, x2, _pnorm_weights(eta2, cfg.p) * (s2 > 0.0), grad, lay)
    return loss, grad


# --- MIP-objective gradients ---------------------------------------------------


def _scalar_tensor(value, torch):
    if torch.is_tensor(value):
        return value
    return torch.tensor(float(value), dtype=torch.float64)


def mip_objective_gradient(
    model: MilpModel, result: solver.SolveResult, binding: certify.ThetaBinding
) -> np.ndarray:
    """Gradient of the MIP optimum in the flat parameter vector.

    With binaries frozen and the optimal active rows held fixed, the
    optimum is gamma = c^T A^{-1} b + d where every entry is an explicit
    function of the parameters. The binding re-encodes the model from an
    autograd vector, the rows named by the active-set certificate are
    reassembled from it, and one backward pass yields the gradient.

    Raises :class:`solver.DegenerateActiveSet` when no invertible active
    system exists at the optimum; callers skip the step in that case.
    """
    if result.status != "optimal":
        raise ValueError(f"gradient needs an optimal solve, got {result.status!r}")
    cert = solver.extract_active_set(model, result)

    import torch

    theta = torch.tensor(binding.theta, dtype=torch.float64, requires_grad=True)
    rebuilt = binding.rebuild(theta).model
    if (
        rebuilt.num_vars != model.num_vars
        or rebuilt.binaries != model.binaries
        or len(rebuilt.eq_rows) != len(model.eq_rows)
        or len(rebuilt.le_rows) != len(model.le_rows)
    ):
        raise RuntimeError("symbolic rebuild diverged from the solved model")

    beta_of = dict(zip(sorted(model.binaries), cert.binary_values))
    pos = {int(j): k for k, j in enumerate(cert.cont_index)}
    n = len(pos)
    zero = torch.tensor(0.0, dtype=torch.float64)

    def densify(expr):
        row = [zero] * n
        rhs = -_scalar_tensor(expr.const, torch)
        for var, coef in expr.coeffs.items():
            if var in beta_of:
                rhs = rhs - _scalar_tensor(coef, torch) * beta_of[var]
            else:
                row[pos[var]] = row[pos[var]] + _scalar_tensor(coef, torch)
        return row, rhs

    rows = []
    rhs = []
    for active in cert.rows:
        if active.kind == "eq":
            row, b = densify(rebuilt.eq_rows[active.index])
        elif active.kind == "le":
            row, b = densify(rebuilt.le_rows[active.index])
        else:
            # variable bounds are structural constants
            row = [zero] * n
            row[pos[active.index]] = torch.tensor(1.0, dtype=torch.float64)
            bound = rebuilt.lb if active.kind == "lo" else rebuilt.ub
            b = torch.tensor(float(bound[active.index]), dtype=torch.float64)
        rows.append(torch.stack(row))
        rhs.append(b)

    c_row, d_neg = densify(rebuilt.objective)
    d = -d_neg
    if n:
        a_mat = torch.stack(rows)
        b_vec = torch.stack(rhs)
        s = torch.linalg.solve(a_mat, b_vec)
        gamma = torch.dot(torch.stack(c_row), s) + d
    else:
        gamma = d
    replayed = float(gamma.detach()) if torch.is_tensor(gamma) else float(gamma)
    if abs(replayed - cert.objective) > 1e-5:
        raise RuntimeError(
            f"replayed optimum {replayed:g} disagrees with the certificate "
            f"({cert.objective:g})"
        )
    if not (torch.is_tensor(gamma) and gamma.requires_grad):
        return np.zeros(binding.theta.size)  # optimum does not touch theta
    gamma.backward()
    if theta.grad is None:
        return np.zeros(binding.theta.size)
    return theta.grad.detach().numpy().copy()


# --- shared outer-loop plumbing ------------------------------------------------


def _proved_satisfied(status: str, objective, bound, tol: float) -> bool:
    if status == "optimal":
        return objective is not None and objective <= tol
    return status == "bound_reached" and bound <= tol


def _solve_pair(jobs, workers: int):
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=2) as pool:
            return list(pool.map(lambda job: job(), jobs))
    return [job() for job in jobs]


def _append_counterexamples(target: list, outcome, problem, cfg: TrainConfig) -> int:
    """Clip, deduplicate, and append pooled violation states; returns count."""
    order = np.argsort(outcome.pool_values)[::-1]
    added = 0
    for idx in order:
        if added >= cfg.pool_cap:
            break
        x = np.clip(outcome.pool_states[idx], problem.box_lo, problem.box_hi)
        if any(np.max(np.abs(x - member)) <= cfg.dedup_tol for member in target):
            continue
        target.append(x)
        added += 1
    return added


def _opt_step(state: TrainState, grad: np.ndarray, cfg: LossConfig) -> None:
    if cfg.optimizer == "adam":
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        state.adam_steps += 1
        state.moment1 = beta1 * state.moment1 + (1.0 - beta1) * grad
        state.moment2 = beta2 * state.moment2 + (1.0 - beta2) * grad * grad
        m_hat = state.moment1 / (1.0 - beta1**state.adam_steps)
        v_hat = state.moment2 / (1.0 - beta2**state.adam_steps)
        update = m_hat / (np.sqrt(v_hat) + eps)
    else:
        update = grad
    state.theta = state.theta - cfg.learning_rate * update
    if not np.all(np.isfinite(state.theta)):
        raise FloatingPointError("parameters left the finite range during descent")


def _fit_counterexample_sets(problem, state: TrainState, cfg: TrainConfig):
    """Batched descent on the surrogate loss until the full sets are clean."""
    lossc = cfg.loss
    x1 = _as_set(state.x1_set, problem.n_x)
    x2 = _as_set(state.x2_set, problem.n_x)
    set_loss = surrogate_loss(problem, x1, x2, lossc)[0]
    def batch(rng, full):
        if not len(full):
            return full
        return full[rng.choice(len(full), min(lossc.batch_size, len(full)), replace=False)]

    for epoch in range(lossc.max_epochs):
        if set_loss <= 0.0:
            break
        rng = np.random.default_rng((state.seed, state.iteration, epoch))
        _, grad = surrogate_loss(problem, batch(rng, x1), batch(rng, x2), lossc)
        _opt_step(state, grad, lossc)
        problem = certify.with_theta(problem, state.theta)
        state.epochs_run += 1
        set_loss = surrogate_loss(problem, x1, x2, lossc)[0]
    return problem, set_loss


_CURVE_COLUMNS = ("iteration", "eta1_max", "eta2_max", "set1_size", "set2_size", "loss")


def _record(state: TrainState, cfg: TrainConfig, problem, row: dict) -> None:
    state.history.append(row)
    if cfg.checkpoint_dir is None:
        return
    root = pathlib.Path(cfg.checkpoint_dir)
    root.mkdir(parents=True, exist_ok=True)
    curve = root / "training_curve.csv"
    fresh = not curve.exists()
    with open(curve, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(_CURVE_COLUMNS)
        writer.writerow([row[k] for k in _CURVE_COLUMNS])
    snap = root / f"iter_{state.iteration:04d}"
    snap.mkdir(exist_ok=True)
    nets.save_weights(problem.controller.net, snap / "controller.json")
    nets.save_weights(problem.lyapunov.net, snap / "lyapunov.json")
    payload = {
        "r": problem.lyapunov.r.tolist(),
        "x1_set": [x.tolist() for x in state.x1_set],
        "x2_set": [x.tolist() for x in state.x2_set],
        "iteration": state.iteration,
        "epochs_run": state.epochs_run,
        "seed": state.seed,
        "converged": state.converged,
    }
    with open(snap / "state.json", "w") as fh:
        json.dump(payload, fh, indent=1)


# --- Algorithm 1: counter-example set growth ----------------------------------


def train_counterexamples(
    problem: certify.CertificationProblem,
    state: TrainState,
    cfg: TrainConfig | None = None,
) -> TrainState:
    """Alternate exact verification with surrogate fitting on the failures.

    Each iteration solves both condition MIPs. When both maxima sit at or
    below the tolerance the candidate is certified and the state returns
    with ``converged`` set. Otherwise every pooled violation joins the
    matching training set (capped, deduplicated, clipped to the box) and
    batched descent runs until the sets are violation-free or the epoch
    budget ends.
    """
    cfg = cfg or TrainConfig()
    problem = certify.with_theta(problem, state.theta)
    for _ in range(cfg.max_iterations):
        opts = solver.SolveOptions(
            node_budget=cfg.node_budget,
            pool_threshold=cfg.tolerance,
            stop_bound=cfg.tolerance,
        )
        bound_method = cfg.bound_method
        current = problem
        jobs = [
            lambda: certify._solve_build(
                certify.build_positivity_mip(current, bound_method), opts, cfg.tolerance
            ),
            lambda: certify._solve_build(
                certify.build_decrease_mip(current, bound_method), opts, cfg.tolerance
            ),
        ]
        out1, out2 = _solve_pair(jobs, cfg.workers)
        state.iteration += 1
        done1 = _proved_satisfied(out1.status, out1.objective, out1.bound, cfg.tolerance)
        done2 = _proved_satisfied(out2.status, out2.objective, out2.bound, cfg.tolerance)
        if done1 and done2:
            state.converged = True
            _record(state, cfg, problem, _curve_row(state, out1, out2, 0.0))
            return state

        pooled = 0
        if not done1:
            pooled += len(out1.pool_states)
            _append_counterexamples(state.x1_set, out1, problem, cfg)
        if not done2:
            pooled += len(out2.pool_states)
            _append_counterexamples(state.x2_set, out2, problem, cfg)
        if pooled == 0:
            # no violation above the tolerance was found, yet nothing was
            # proved either; only a larger search budget can break the tie
            raise IterationBudgetExceeded(
                "verification is inconclusive and produced no counter-examples; "
                "raise the node budget",
                state,
            )
        problem, set_loss = _fit_counterexample_sets(problem, state, cfg)
        _record(state, cfg, problem, _curve_row(state, out1, out2, set_loss))
    raise IterationBudgetExceeded(
        f"no certificate after {cfg.max_iterations} iterations", state
    )


def _curve_row(state: TrainState, out1, out2, loss: float) -> dict:
    def top(out):
        if out.objective is not None:
            return max(out.objective, 0.0)
        return max(out.bound, 0.0)

    return {
        "iteration": state.iteration,
        "eta1_max": top(out1),
        "eta2_max": top(out2),
        "set1_size": len(state.x1_set),
        "set2_size": len(state.x2_set),
        "loss": loss,
        "bound1": out1.bound,
        "bound2": out2.bound,
        "nodes": out1.node_count + out2.node_count,
        "wall": out1.wall_time + out2.wall_time,
    }


# --- Algorithm 2: min-max descent on the MIP optima ----------------------------


def train_minmax(
    problem: certify.CertificationProblem,
    state: TrainState,
    cfg: TrainConfig | None = None,
) -> TrainState:
    """Descend on the sum of violating verification optima.

    Each iteration solves both MIPs to optimality; for every maximum above
    the tolerance the parameters move against the optimum's closed-form
    gradient. Under the default "polyak" rule the step is the classic
    violation/|grad|^2 ratio (target value zero), capped at ``step_size``;
    that shrinks automatically near the optimum, where a fixed step would
    oscillate. A degenerate active set skips that term and halves the cap
    once per iteration (floored at ``min_step_size``). Bound tightening is
    fixed to interval arithmetic because the gradient replay must
    reproduce the solved model structure exactly.
    """
    cfg = cfg or TrainConfig()
    if cfg.step_rule not in ("polyak", "fixed"):
        raise ValueError("step_rule must be 'polyak' or 'fixed'")
    problem = certify.with_theta(problem, state.theta)
    step = state.step_size if state.step_size is not None else cfg.step_size
    builders = {
        "positivity": certify.build_positivity_mip,
        "decrease": certify.build_decrease_mip,
    }
    for _ in range(cfg.max_iterations):
        state.iteration += 1
        builds = {kind: fn(problem, "ia") for kind, fn in builders.items()}

        def run(kind):
            build = builds[kind]
            opts = solver.SolveOptions(
                node_budget=cfg.node_budget,
                pool_threshold=None,
                hint=build.hint,
                stop_bound=cfg.tolerance,
            )
            return solver.solve(build.model, opts)
        results = dict(zip(builds, _solve_pair([lambda k=k: run(k) for k in builds], cfg.workers)))

        satisfied = {
            kind: _proved_satisfied(res.status, res.objective, res.bound, cfg.tolerance)
            for kind, res in results.items()
        }
        row = _minmax_row(state, results, step)
        if all(satisfied.values()):
            state.converged = True
            state.step_size = step
            _record(state, cfg, problem, row)
            return state

        grad = np.zeros(state.theta.size)
        moved = False
        halved = False
        for kind, res in results.items():
            if satisfied[kind]:
                continue
            if res.status != "optimal":
                raise IterationBudgetExceeded(
                    f"{kind} search ended {res.status} before proving an optimum; "
                    "raise the node budget",
                    state,
                )
            binding = certify.make_theta_binding(problem, kind)
            try:
                grad += mip_objective_gradient(builds[kind].model, res, binding)
                moved = True
            except solver.DegenerateActiveSet:
                if not halved:
                    step = max(step / 2.0, cfg.min_step_size)
                    halved = True
        if moved:
            used = step
            if cfg.step_rule == "polyak":
                gnorm2 = float(grad @ grad)
                if gnorm2 > 0.0:
                    used = min(step, row["loss"] / gnorm2)
            state.theta = state.theta - used * grad
            if not np.all(np.isfinite(state.theta)):
                raise FloatingPointError("parameters left the finite range during descent")
            problem = certify.with_theta(problem, state.theta)
        state.step_size = step
        _record(state, cfg, problem, row)
    raise IterationBudgetExceeded(
        f"no certificate after {cfg.max_iterations} iterations", state
    )


def _minmax_row(state: TrainState, results: dict, step: float) -> dict:
    def top(res):
        if res.objective is not None:
            return max(res.objective, 0.0)
        return max(res.bound, 0.0)

    eta1 = top(results["positivity"])
    eta2 = top(results["decrease"])
    return {
        "iteration": state.iteration,
        "eta1_max": eta1,
        "eta2_max": eta2,
        "set1_size": len(state.x1_set),
        "set2_size": len(state.x2_set),
        "loss": eta1 + eta2,
        "bound1": results["positivity"].bound,
        "bound2": results["decrease"].bound,
        "nodes": sum(r.node_count for r in results.values()),
        "wall": sum(r.wall_time for r in results.values()),
        "step_size": step,
    }
