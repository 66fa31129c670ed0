import numpy as np
import pytest

from lyapsyn import certify, nets, solver, trainer
from lyapsyn.milp import LinExpr


def _linear_toy(gain=0.5, eps2=0.1, v_slope=0.0, eps1=0.01):
    """1D plant x+ = gain*x + u, zero controller, V = v_slope*x + |x|."""
    dyn_net = nets.exact_linear_network(np.array([[gain, 1.0]]), 0.1)
    dyn = certify.Dynamics(
        dyn_net, np.zeros(1), np.zeros(1), np.array([-1.0]), np.array([1.0])
    )
    ctrl = certify.Controller(nets.exact_linear_network(np.array([[0.0]]), 0.1))
    u, v, sg = certify.identity_factors(1)
    vnet = nets.exact_linear_network(np.array([[v_slope]]), 0.1)
    lyap = certify.LyapunovFunction(
        vnet, np.zeros(1), u, v, sg, np.array([np.sqrt(0.9)])
    )
    return certify.CertificationProblem(
        dyn, ctrl, lyap, np.array([-1.0]), np.array([1.0]), eps1=eps1, eps2=eps2
    )


def _random_problem(seed, n_x=2, n_u=1, scale=0.6, half_width=0.8):
    rng = np.random.default_rng(seed)
    dyn_net = nets.random_network((n_x + n_u, 4, n_x), 0.1, rng, scale=scale)
    x_star = rng.uniform(-0.2, 0.2, n_x)
    u_star = rng.uniform(-0.2, 0.2, n_u)
    dyn = certify.Dynamics(
        dyn_net, x_star, u_star, np.full(n_u, -2.0), np.full(n_u, 2.0)
    )
    ctrl = certify.Controller(nets.random_network((n_x, 3, n_u), 0.1, rng, scale=scale))
    qu, _ = np.linalg.qr(rng.standard_normal((n_x, n_x)))
    qv, _ = np.linalg.qr(rng.standard_normal((n_x, n_x)))
    lyap = certify.LyapunovFunction(
        nets.random_network((n_x, 4, 1), 0.1, rng, scale=scale),
        x_star, qu, qv, np.full(n_x, 0.1), rng.uniform(0.3, 1.0, n_x),
    )
    return certify.CertificationProblem(
        dyn, ctrl, lyap, x_star - half_width, x_star + half_width
    )


def test_loss_config_validation():
    with pytest.raises(ValueError):
        trainer.LossConfig(p=2.0)
    with pytest.raises(ValueError):
        trainer.LossConfig(batch_size=0)
    with pytest.raises(ValueError):
        trainer.LossConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        trainer.LossConfig(optimizer="sgd-with-restarts")
    assert trainer.LossConfig(p=1).p == 1.0
    assert np.isinf(trainer.LossConfig(p=float("inf")).p)


def test_violations_nonnegative_and_zero_at_equilibrium():
    rng = np.random.default_rng(0)
    for seed in (1, 2):
        prob = _random_problem(seed)
        xs = rng.uniform(prob.box_lo, prob.box_hi, (50, prob.n_x))
        assert np.all(trainer.violation_eta1(prob, xs) >= 0.0)
        assert np.all(trainer.violation_eta2(prob, xs) >= 0.0)
        assert trainer.violation_eta1(prob, prob.dynamics.x_star) == 0.0
        assert trainer.violation_eta2(prob, prob.dynamics.x_star) == 0.0


def test_violation_values_hand_computed():
    # V(x) = 0.4 and eps1 * |R (x - x*)|_1 = 0.5 at x = 1 leaves a 0.1 gap
    prob = _linear_toy(v_slope=-0.6, eps1=0.5)
    assert trainer.violation_eta1(prob, np.array([1.0])) == pytest.approx(0.1, abs=1e-12)
    # stable closed loop decays faster than the required rate everywhere
    stable = _linear_toy(gain=0.5, eps2=0.1)
    xs = np.linspace(-1.0, 1.0, 21)[:, None]
    assert np.all(trainer.violation_eta2(stable, xs) == 0.0)
    # doubling map: V(2x) - 0.9 V(x) at x = 1 with V = |x|
    unstable = _linear_toy(gain=2.0, eps2=0.1)
    assert trainer.violation_eta2(unstable, np.array([1.0])) == pytest.approx(
        1.1, abs=1e-9
    )


def test_violation_eta1_matches_state_fixed_mip():
    rng = np.random.default_rng(5)
    prob = _random_problem(9)
    for _ in range(3):
        x = rng.uniform(prob.box_lo, prob.box_hi, prob.n_x)
        build = certify.build_positivity_mip(prob)
        for j, var in enumerate(build.x_vars):
            build.model.add_eq(LinExpr.term(var) - x[j])
        res = solver.solve(build.model, solver.SolveOptions(pool_threshold=None))
        assert res.status == "optimal"
        want = trainer.violation_eta1(prob, x)
        assert max(res.objective, 0.0) == pytest.approx(want, abs=1e-7)


def test_surrogate_loss_empty_sets():
    prob = _random_problem(1)
    loss, grad = trainer.surrogate_loss(prob, [], [], trainer.LossConfig())
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_surrogate_loss_singleton_p1():
    prob = _random_problem(2)
    rng = np.random.default_rng(3)
    x1 = rng.uniform(prob.box_lo, prob.box_hi, prob.n_x)
    x2 = rng.uniform(prob.box_lo, prob.box_hi, prob.n_x)
    loss, _ = trainer.surrogate_loss(prob, [x1], [x2], trainer.LossConfig(p=1))
    want = trainer.violation_eta1(prob, x1) + trainer.violation_eta2(prob, x2)
    assert loss == pytest.approx(want, abs=1e-12)


def _fd_loss_errors(prob, x1, x2, cfg, coords, h=1e-6):
    theta0 = certify.get_theta(prob)
    _, grad = trainer.surrogate_loss(prob, x1, x2, cfg)
    errs = []
    for k in coords:
        d = np.zeros(theta0.size)
        d[k] = h
        hi = trainer.surrogate_loss(certify.with_theta(prob, theta0 + d), x1, x2, cfg)[0]
        lo = trainer.surrogate_loss(certify.with_theta(prob, theta0 - d), x1, x2, cfg)[0]
        fd = (hi - lo) / (2.0 * h)
        errs.append(abs(fd - grad[k]) / max(1.0, abs(fd)))
    return errs


def test_surrogate_gradient_matches_finite_differences():
    prob = _random_problem(7, scale=0.7)
    rng = np.random.default_rng(8)
    x1 = rng.uniform(prob.box_lo, prob.box_hi, (6, prob.n_x))
    x2 = rng.uniform(prob.box_lo, prob.box_hi, (6, prob.n_x))
    cfg = trainer.LossConfig(p=4.0)
    loss, _ = trainer.surrogate_loss(prob, x1, x2, cfg)
    assert loss > 0.0  # the check is vacuous on an all-clean sample
    lay = certify.theta_layout(prob)
    coords = rng.choice(lay["total"], min(40, lay["total"]), replace=False)
    errs = _fd_loss_errors(prob, x1, x2, cfg, coords)
    assert max(errs) <= 1e-4


def test_surrogate_gradient_other_norms():
    prob = _random_problem(7, scale=0.7)
    rng = np.random.default_rng(9)
    x1 = rng.uniform(prob.box_lo, prob.box_hi, (5, prob.n_x))
    x2 = rng.uniform(prob.box_lo, prob.box_hi, (5, prob.n_x))
    lay = certify.theta_layout(prob)
    for p in (1.0, float("inf")):
        cfg = trainer.LossConfig(p=p)
        coords = rng.choice(lay["total"], min(15, lay["total"]), replace=False)
        errs = _fd_loss_errors(prob, x1, x2, cfg, coords)
        assert max(errs) <= 1e-4, f"p={p}"


class _FrozenBinding:
    """Binding stub whose rebuild ignores the parameter vector."""

    def __init__(self, problem, which):
        self.problem = problem
        self.which = which
        self.theta = certify.get_theta(problem)

    def rebuild(self, flat):
        builder = (
            certify.build_positivity_mip
            if self.which == "positivity"
            else certify.build_decrease_mip
        )
        return builder(self.problem, "ia")


def test_mip_gradient_parameter_free_model_is_zero():
    prob = _linear_toy(gain=0.9, eps2=0.2)
    build = certify.build_decrease_mip(prob, "ia")
    res = solver.solve(
        build.model, solver.SolveOptions(hint=build.hint, pool_threshold=None)
    )
    assert res.status == "optimal" and res.objective > 1e-3
    grad = trainer.mip_objective_gradient(
        build.model, res, _FrozenBinding(prob, "decrease")
    )
    assert np.all(grad == 0.0)


def test_mip_gradient_matches_resolve_finite_differences():
    # central differences of the re-solved optimum, at parameters where the
    # perturbation keeps the optimal binary assignment
    checked = 0
    for seed in (3, 11, 21):
        prob = _random_problem(seed)
        for which, builder in (
            ("positivity", certify.build_positivity_mip),
            ("decrease", certify.build_decrease_mip),
        ):
            build = builder(prob, "ia")
            res = solver.solve(
                build.model, solver.SolveOptions(hint=build.hint, pool_threshold=None)
            )
            if res.status != "optimal" or res.objective <= 1e-4:
                continue
            binding = certify.make_theta_binding(prob, which)
            try:
                grad = trainer.mip_objective_gradient(build.model, res, binding)
            except solver.DegenerateActiveSet:
                continue
            theta0 = binding.theta
            coords = np.nonzero(np.abs(grad) > 1e-7)[0]
            rng = np.random.default_rng(seed + 100)
            h = 1e-6
            for k in rng.choice(coords, min(6, coords.size), replace=False):
                d = np.zeros(theta0.size)
                d[k] = h
                vals = []
                for sign in (1.0, -1.0):
                    pert = builder(certify.with_theta(prob, theta0 + sign * d), "ia")
                    sol = solver.solve(
                        pert.model,
                        solver.SolveOptions(hint=pert.hint, pool_threshold=None),
                    )
                    assert sol.status == "optimal"
                    vals.append(sol.objective)
                fd = (vals[0] - vals[1]) / (2.0 * h)
                assert abs(fd - grad[k]) / max(1e-8, abs(fd)) <= 1e-3
                checked += 1
    assert checked >= 12


def test_mip_gradient_envelope_agreement_at_pinned_corner():
    # when the optimizer sits at a box corner, the optimum's gradient equals
    # the pointwise objective gradient at that fixed state; 1D boxes pin the
    # argmax completely whenever it lands on the boundary
    matched = 0
    for seed in (1, 2, 4, 7):
        prob = _random_problem(seed, n_x=1, n_u=1)
        lay = certify.theta_layout(prob)
        for which, builder, push in (
            ("positivity", certify.build_positivity_mip, trainer._push_eta1),
            ("decrease", certify.build_decrease_mip, trainer._push_eta2),
        ):
            build = builder(prob, "ia")
            res = solver.solve(
                build.model, solver.SolveOptions(hint=build.hint, pool_threshold=None)
            )
            if res.status != "optimal" or res.objective <= 1e-4:
                continue
            x_hat = res.point[build.x_vars]
            corner = np.minimum(
                np.abs(x_hat - prob.box_lo), np.abs(x_hat - prob.box_hi)
            )
            if np.max(corner) > 1e-9:
                continue
            try:
                grad = trainer.mip_objective_gradient(
                    build.model, res, certify.make_theta_binding(prob, which)
                )
            except solver.DegenerateActiveSet:
                continue
            expected = np.zeros(lay["total"])
            push(prob, x_hat[None, :], np.ones(1), expected, lay)
            np.testing.assert_allclose(grad, expected, atol=1e-7)
            matched += 1
    assert matched >= 5


def test_train_counterexamples_certified_input_returns_unchanged():
    prob = _linear_toy(gain=0.5, eps2=0.1)
    state = trainer.init_state(prob, seed=1)
    theta0 = state.theta.copy()
    state = trainer.train_counterexamples(prob, state, trainer.TrainConfig())
    assert state.converged
    assert state.iteration == 1
    assert state.epochs_run == 0
    assert state.x1_set == [] and state.x2_set == []
    np.testing.assert_array_equal(state.theta, theta0)


def test_train_counterexamples_toy_converges_to_certificate():
    prob = _linear_toy(gain=0.9, eps2=0.2)
    assert certify.verify(prob).status == "falsified"
    state = trainer.init_state(prob, seed=3)
    cfg = trainer.TrainConfig(
        loss=trainer.LossConfig(
            p=4.0, learning_rate=1e-2, max_epochs=300, optimizer="adam"
        ),
        max_iterations=30,
    )
    state = trainer.train_counterexamples(prob, state, cfg)
    assert state.converged
    assert state.epochs_run > 0
    assert len(state.x2_set) > 0
    fixed = certify.with_theta(prob, state.theta)
    assert certify.verify(fixed).certified
    # counter-examples live inside the box
    for x in state.x1_set + state.x2_set:
        assert np.all(x >= prob.box_lo - 1e-12) and np.all(x <= prob.box_hi + 1e-12)
    # set sizes in the history never shrink
    sizes = [(row["set1_size"], row["set2_size"]) for row in state.history]
    assert all(a[0] <= b[0] and a[1] <= b[1] for a, b in zip(sizes, sizes[1:]))


def test_train_counterexamples_budget_error_carries_state():
    prob = _linear_toy(gain=0.9, eps2=0.2)
    state = trainer.init_state(prob, seed=0)
    cfg = trainer.TrainConfig(
        loss=trainer.LossConfig(learning_rate=1e-12, max_epochs=2),
        max_iterations=2,
    )
    with pytest.raises(trainer.IterationBudgetExceeded) as info:
        trainer.train_counterexamples(prob, state, cfg)
    assert info.value.state.iteration == 2
    assert len(info.value.state.x2_set) > 0


def test_train_minmax_certified_input_returns_unchanged():
    prob = _linear_toy(gain=0.5, eps2=0.1)
    state = trainer.init_state(prob, seed=1)
    theta0 = state.theta.copy()
    state = trainer.train_minmax(prob, state, trainer.TrainConfig())
    assert state.converged
    assert state.iteration == 1
    np.testing.assert_array_equal(state.theta, theta0)


def test_train_minmax_toy_converges_to_certificate():
    prob = _linear_toy(gain=0.9, eps2=0.2)
    state = trainer.init_state(prob, seed=0)
    cfg = trainer.TrainConfig(step_size=2e-2, max_iterations=60)
    state = trainer.train_minmax(prob, state, cfg)
    assert state.converged
    fixed = certify.with_theta(prob, state.theta)
    assert certify.verify(fixed).certified
    assert state.history[-1]["loss"] <= state.history[0]["loss"]


def test_checkpoints_and_training_curve(tmp_path):
    prob = _linear_toy(gain=0.9, eps2=0.2)
    state = trainer.init_state(prob, seed=3)
    cfg = trainer.TrainConfig(
        loss=trainer.LossConfig(
            p=4.0, learning_rate=1e-2, max_epochs=300, optimizer="adam"
        ),
        max_iterations=30,
        checkpoint_dir=str(tmp_path),
    )
    state = trainer.train_counterexamples(prob, state, cfg)
    assert state.converged
    curve = tmp_path / "training_curve.csv"
    lines = curve.read_text().strip().splitlines()
    assert lines[0] == "iteration,eta1_max,eta2_max,set1_size,set2_size,loss"
    assert len(lines) == state.iteration + 1
    snap = tmp_path / f"iter_{state.iteration:04d}"
    reloaded = nets.load_weights(snap / "lyapunov.json")
    final = certify.with_theta(prob, state.theta)
    np.testing.assert_array_equal(
        nets.parameter_vector(reloaded), nets.parameter_vector(final.lyapunov.net)
    )
    import json

    payload = json.loads((snap / "state.json").read_text())
    assert payload["converged"] is True
    np.testing.assert_allclose(payload["r"], final.lyapunov.r)
