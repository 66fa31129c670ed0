import numpy as np
import pytest

from lyapsyn import milp, nets, solver
from lyapsyn.milp import LinExpr, MilpModel


def _pin(model, expr, value):
    model.add_eq(expr - value)


def _mip_extremes(model, expr):
    model.set_objective_max(expr)
    hi = solver.solve(model)
    model.set_objective_max(-1.0 * expr)
    lo = solver.solve(model)
    assert hi.status == "optimal" and lo.status == "optimal"
    return -lo.objective, hi.objective


def test_linexpr_algebra():
    e = 2.0 * LinExpr.term(0) + LinExpr.term(1, -1.0) + 0.5
    e = e - 3.0 * LinExpr.term(1)
    assert e.coeffs[0] == pytest.approx(2.0)
    assert e.coeffs[1] == pytest.approx(-4.0)
    assert e.const == pytest.approx(0.5)
    assert float(e.value(np.array([1.0, 0.25]))) == pytest.approx(2.0 - 1.0 + 0.5)
    lo, up = e.interval([0.0, -1.0], [1.0, 1.0])
    assert lo == pytest.approx(-4.0 + 0.5)
    assert up == pytest.approx(2.0 + 4.0 + 0.5)


def test_interval_bounds_single_neuron():
    net = nets.FeedforwardNetwork(
        (np.array([[1.0, -1.0]]), np.array([[1.0]])),
        (np.array([0.5]), np.zeros(1)),
        0.1,
    )
    nb = milp.interval_bounds(net, [-1.0, -1.0], [1.0, 1.0])
    assert float(nb.pre_lo[0][0]) == pytest.approx(-1.5)
    assert float(nb.pre_up[0][0]) == pytest.approx(2.5)
    # sigma is monotone, so activation bounds are its values at the ends
    assert float(nb.out_lo[0]) == pytest.approx(-0.15)
    assert float(nb.out_up[0]) == pytest.approx(2.5)


def test_interval_bounds_contain_samples():
    rng = np.random.default_rng(21)
    for _ in range(5):
        net = nets.random_network([2, 4, 3, 2], 0.1, rng)
        lo = rng.uniform(-2, 0, size=2)
        up = rng.uniform(0.5, 2, size=2)
        nb = milp.interval_bounds(net, list(lo), list(up))
        for _ in range(100):
            x = rng.uniform(lo, up)
            out, pre = nets.forward(net, x)
            for k, p in enumerate(pre):
                assert np.all(p >= np.asarray(nb.pre_lo[k]) - 1e-9)
                assert np.all(p <= np.asarray(nb.pre_up[k]) + 1e-9)
            assert np.all(out >= np.asarray(nb.out_lo) - 1e-9)
            assert np.all(out <= np.asarray(nb.out_up) + 1e-9)


def test_lp_bounds_tighten_and_stay_sound():
    rng = np.random.default_rng(22)
    net = nets.random_network([2, 5, 4, 1], 0.1, rng)
    lo, up = [-1.5, -1.0], [1.0, 2.0]
    ia = milp.interval_bounds(net, lo, up)
    lp = milp.lp_bounds(net, lo, up)
    tightened = 0
    for k in range(len(ia.pre_lo)):
        for i in range(len(ia.pre_lo[k])):
            assert float(lp.pre_lo[k][i]) >= float(ia.pre_lo[k][i]) - 1e-9
            assert float(lp.pre_up[k][i]) <= float(ia.pre_up[k][i]) + 1e-9
            if (float(lp.pre_lo[k][i]) > float(ia.pre_lo[k][i]) + 1e-9
                    or float(lp.pre_up[k][i]) < float(ia.pre_up[k][i]) - 1e-9):
                tightened += 1
    assert tightened > 0  # the deeper layer should tighten on generic nets
    for _ in range(200):
        x = rng.uniform(lo, up)
        _, pre = nets.forward(net, x)
        for k, p in enumerate(pre):
            assert np.all(p >= np.asarray(lp.pre_lo[k], dtype=float) - 1e-8)
            assert np.all(p <= np.asarray(lp.pre_up[k], dtype=float) + 1e-8)


def test_encode_relu_forces_unique_completion():
    model = MilpModel()
    y = LinExpr.term(model.add_var("y", -1.0, 1.0))
    w_expr, beta = milp.encode_relu(model, y, -1.0, 1.0, 0.1, "n")
    assert beta is not None
    _pin(model, y, 0.5)
    lo, hi = _mip_extremes(model, w_expr)
    assert lo == pytest.approx(0.5, abs=1e-8)
    assert hi == pytest.approx(0.5, abs=1e-8)
    bmin, bmax = _mip_extremes(model, LinExpr.term(beta))
    assert bmin == pytest.approx(1.0, abs=1e-8)  # beta = 1 is forced
    assert bmax == pytest.approx(1.0, abs=1e-8)


def test_encode_relu_negative_side():
    model = MilpModel()
    y = LinExpr.term(model.add_var("y", -1.0, 1.0))
    w_expr, beta = milp.encode_relu(model, y, -1.0, 1.0, 0.1, "n")
    _pin(model, y, -0.5)
    lo, hi = _mip_extremes(model, w_expr)
    assert lo == pytest.approx(-0.05, abs=1e-8)
    assert hi == pytest.approx(-0.05, abs=1e-8)
    bmin, bmax = _mip_extremes(model, LinExpr.term(beta))
    assert bmax == pytest.approx(0.0, abs=1e-8)


def test_encode_relu_phase_elision():
    for y_lo, y_up, slope in ((0.2, 1.0, 1.0), (-1.0, -0.1, 0.1), (0.0, 1.0, 1.0), (-1.0, 0.0, 0.1)):
        model = MilpModel()
        y = LinExpr.term(model.add_var("y", y_lo, y_up))
        w_expr, beta = milp.encode_relu(model, y, y_lo, y_up, 0.1, "n")
        assert beta is None
        assert model.num_vars == 1 and not model.binaries
        assert w_expr.coeffs[0] == pytest.approx(slope)
    model = MilpModel()
    y = LinExpr.term(model.add_var("y", 0.2, 1.0))
    w_expr, beta = milp.encode_relu(model, y, 0.2, 1.0, 0.1, "n", elide=False)
    assert beta is not None and len(model.binaries) == 1


def test_encode_relu_exact_on_grid():
    for y_val in np.linspace(-1.0, 1.0, 9):
        model = MilpModel()
        y = LinExpr.term(model.add_var("y", -1.0, 1.0))
        w_expr, _ = milp.encode_relu(model, y, -1.0, 1.0, 0.1, "n")
        _pin(model, y, float(y_val))
        lo, hi = _mip_extremes(model, w_expr)
        want = max(y_val, 0.1 * y_val)
        assert lo == pytest.approx(want, abs=1e-8)
        assert hi == pytest.approx(want, abs=1e-8)


def _encode_net_model(net, lo, up, bounds=None, elide=True):
    model = MilpModel()
    xs = [LinExpr.term(model.add_var(f"x{j}", lo[j], up[j])) for j in range(net.input_dim)]
    nb = bounds or milp.interval_bounds(net, lo, up)
    outs = milp.encode_relu_network(model, net, xs, nb, elide=elide)
    return model, xs, outs


def test_network_encoding_witness_feasible():
    rng = np.random.default_rng(30)
    for _ in range(3):
        net = nets.random_network([2, 4, 3, 2], 0.1, rng)
        lo, up = [-1.0, -1.5], [1.5, 1.0]
        model, xs, outs = _encode_net_model(net, lo, up)
        nb = milp.interval_bounds(net, lo, up)
        for _ in range(50):
            x = rng.uniform(lo, up)
            point = _witness_point(model, net, x, nb)
            assert model.point_violation(point) <= 1e-9


def _witness_point(model, net, x, nb):
    # replay the forward pass into a full variable assignment
    point = np.zeros(model.num_vars)
    point[0 : net.input_dim] = x
    out, pre = nets.forward(net, x)
    by_name = {name: j for j, name in enumerate(model.names)}
    for k, p in enumerate(pre):
        for i, y in enumerate(p):
            wname = f"n_l{k}n{i}_w"
            if wname in by_name:
                point[by_name[wname]] = max(y, net.leak * y)
                point[by_name[f"n_l{k}n{i}_beta"]] = 1.0 if y >= 0 else 0.0
    for i, v in enumerate(out):
        point[by_name[f"n_out{i}"]] = v
    return point


def test_network_encoding_matches_forward():
    rng = np.random.default_rng(31)
    net = nets.random_network([2, 3, 2, 1], 0.1, rng)
    lo, up = [-1.0, -1.0], [1.0, 1.0]
    for _ in range(5):
        x = rng.uniform(lo, up)
        model, xs, outs = _encode_net_model(net, lo, up)
        for j in range(2):
            _pin(model, xs[j], float(x[j]))
        want = nets.forward(net, x)[0][0]
        olo, ohi = _mip_extremes(model, outs[0])
        assert olo == pytest.approx(want, abs=1e-7)
        assert ohi == pytest.approx(want, abs=1e-7)


def test_network_encoding_binary_count_matches_crossings():
    rng = np.random.default_rng(32)
    net = nets.random_network([2, 5, 4, 2], 0.1, rng)
    lo, up = [-1.0, -0.5], [0.5, 1.0]
    nb = milp.interval_bounds(net, lo, up)
    crossings = sum(
        1
        for k in range(len(nb.pre_lo))
        for i in range(len(nb.pre_lo[k]))
        if float(nb.pre_lo[k][i]) < 0.0 < float(nb.pre_up[k][i])
    )
    model, _, _ = _encode_net_model(net, lo, up)
    assert len(model.binaries) == crossings
    model_full, _, _ = _encode_net_model(net, lo, up, elide=False)
    assert len(model_full.binaries) == 5 + 4


def test_encode_l1_forces_alpha():
    model = MilpModel()
    x = LinExpr.term(model.add_var("x", -2.0, 3.0))
    y = milp.encode_l1(model, [x], [-2.0], [3.0])
    assert len(model.binaries) == 1
    _pin(model, x, 1.5)
    alpha = model.binaries[0]
    bmin, bmax = _mip_extremes(model, LinExpr.term(alpha))
    assert bmin == pytest.approx(1.0, abs=1e-8)
    ylo, yhi = _mip_extremes(model, y)
    assert ylo == pytest.approx(1.5, abs=1e-8)
    assert yhi == pytest.approx(1.5, abs=1e-8)


def test_encode_l1_matches_abs_on_grid():
    rng = np.random.default_rng(33)
    for _ in range(3):
        r = rng.normal(size=(2, 2))
        lo, up = [-1.0, -1.0], [1.0, 1.0]
        for _ in range(5):
            x = rng.uniform(lo, up)
            model = MilpModel()
            xs = [LinExpr.term(model.add_var(f"x{j}", lo[j], up[j])) for j in range(2)]
            elems = []
            for i in range(2):
                e = LinExpr()
                for j in range(2):
                    e = e + r[i, j] * xs[j]
                elems.append(e)
            elem_lo, elem_up = zip(*[e.interval(model.lb, model.ub) for e in elems])
            y = milp.encode_l1(model, elems, list(elem_lo), list(elem_up))
            for j in range(2):
                _pin(model, xs[j], float(x[j]))
            want = np.sum(np.abs(r @ x))
            ylo, yhi = _mip_extremes(model, y)
            assert ylo == pytest.approx(want, abs=1e-7)
            assert yhi == pytest.approx(want, abs=1e-7)


def test_encode_l1_sign_fixed_is_linear():
    model = MilpModel()
    x = LinExpr.term(model.add_var("x", 0.5, 2.0))
    y = milp.encode_l1(model, [x], [0.5], [2.0])
    assert not model.binaries
    model2 = MilpModel()
    x2 = LinExpr.term(model2.add_var("x", -2.0, -0.5))
    y2 = milp.encode_l1(model2, [x2], [-2.0], [-0.5])
    assert not model2.binaries
    _pin(model2, x2, -1.25)
    ylo, yhi = _mip_extremes(model2, y2)
    assert ylo == pytest.approx(1.25, abs=1e-8)


def test_encode_clamp_matches_clip():
    for x_val in np.linspace(-3.0, 3.0, 13):
        model = MilpModel()
        x = LinExpr.term(model.add_var("x", -3.0, 3.0))
        y = milp.encode_clamp(model, x, -3.0, 3.0, -1.0, 1.0)
        _pin(model, x, float(x_val))
        ylo, yhi = _mip_extremes(model, y)
        want = float(np.clip(x_val, -1.0, 1.0))
        assert ylo == pytest.approx(want, abs=1e-8)
        assert yhi == pytest.approx(want, abs=1e-8)


def test_encode_clamp_inactive_adds_no_binaries():
    model = MilpModel()
    x = LinExpr.term(model.add_var("x", -0.5, 0.5))
    y = milp.encode_clamp(model, x, -0.5, 0.5, -1.0, 1.0)
    assert not model.binaries and model.num_vars == 1
    assert y.coeffs[0] == pytest.approx(1.0)
    assert float(y.const) == pytest.approx(0.0)
    # saturated from above over the whole range
    model2 = MilpModel()
    x2 = LinExpr.term(model2.add_var("x", 2.0, 3.0))
    y2 = milp.encode_clamp(model2, x2, 2.0, 3.0, -1.0, 1.0)
    assert not model2.binaries
    for xv in (2.0, 2.5, 3.0):
        assert float(y2.value(np.array([xv]))) == pytest.approx(1.0)


def test_point_violation_reports_worst():
    model = MilpModel()
    x = model.add_var("x", 0.0, 1.0)
    b = model.add_binary("b")
    model.add_le(LinExpr.term(x) - 0.5)
    model.add_eq(LinExpr.term(x) + LinExpr.term(b) - 1.0)
    ok = np.array([0.4, 0.6])
    assert model.point_violation(ok) >= 0.4  # binary fractional
    good = np.array([0.0, 1.0])
    assert model.point_violation(good) <= 1e-12
    bad = np.array([0.9, 1.0])
    assert model.point_violation(bad) >= 0.4
