"""Mixed-integer linear model container and exact piecewise-linear encoders.

Models are built from :class:`LinExpr` affine expressions over integer
variable ids. Coefficients and constants are "scalar generic": they may be
python floats or 0-d autograd tensors, as long as they support ``+ - *``
and a float conversion. Branch decisions inside the encoders (phase
elision, sign splits in interval arithmetic) always go through
:func:`scalar_float`, so replaying an encoding with tensor parameters at
the same numeric point produces a structurally identical model with
differentiable coefficients.

Variable bounds are structural and must be plain floats: box limits for
states, saturation limits for inputs, [0, 1] for binaries. Derived
quantities get free variables whose range is implied by rows, which keeps
the set of potentially active constraints independent of the parameters.

The encoders are exact: for inputs inside the propagated bounds, the
feasible completions of the added variables agree with the encoded
function, and phase-fixed pieces are elided without adding binaries.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from lyapsyn import nets


def scalar_float(v) -> float:
    """``float()`` that detaches 0-d autograd tensors first."""
    detach = getattr(v, "detach", None)
    return float(detach()) if detach is not None else float(v)


class LinExpr:
    """Affine expression ``sum_i coeffs[i] * var_i + const``."""

    __slots__ = ("coeffs", "const")

    def __init__(self, coeffs=None, const=0.0):
        self.coeffs = dict(coeffs) if coeffs else {}
        self.const = const

    @staticmethod
    def term(var: int, coef=1.0) -> "LinExpr":
        return LinExpr({var: coef})

    @staticmethod
    def constant(value) -> "LinExpr":
        return LinExpr(None, value)

    def copy(self) -> "LinExpr":
        return LinExpr(self.coeffs, self.const)

    def __add__(self, other):
        out = self.copy()
        if isinstance(other, LinExpr):
            for v, c in other.coeffs.items():
                out.coeffs[v] = out.coeffs[v] + c if v in out.coeffs else c
            out.const = out.const + other.const
        else:
            out.const = out.const + other
        return out

    __radd__ = __add__

    def __neg__(self):
        return LinExpr({v: -c for v, c in self.coeffs.items()}, -self.const)

    def __sub__(self, other):
        return self + (-other if isinstance(other, LinExpr) else -1.0 * other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, scalar):
        if isinstance(scalar, LinExpr):
            raise TypeError("LinExpr supports scaling by scalars only")
        return LinExpr({v: c * scalar for v, c in self.coeffs.items()}, self.const * scalar)

    __rmul__ = __mul__

    def value(self, point):
        """Evaluate at ``point`` (indexable by variable id)."""
        acc = self.const
        for v, c in self.coeffs.items():
            acc = acc + c * point[v]
        return acc

    def interval(self, lb, ub):
        """Interval of the expression given per-variable bounds."""
        lo = self.const
        up = self.const
        for v, c in self.coeffs.items():
            if scalar_float(c) >= 0.0:
                lo = lo + c * lb[v]
                up = up + c * ub[v]
            else:
                lo = lo + c * ub[v]
                up = up + c * lb[v]
        return lo, up

    def __repr__(self):
        parts = [f"{scalar_float(c):+g}*v{v}" for v, c in sorted(self.coeffs.items())]
        parts.append(f"{scalar_float(self.const):+g}")
        return " ".join(parts)


@dataclasses.dataclass
class ModelArrays:
    """Float snapshot of a model for the LP machinery (objective is maximized)."""

    c: np.ndarray
    d: float
    a_ub: np.ndarray
    b_ub: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    binaries: np.ndarray


class MilpModel:
    """Container for variables, rows ``expr <= 0`` / ``expr == 0``, and a
    maximization objective."""

    def __init__(self):
        self.names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.binaries: list[int] = []
        self.eq_rows: list[LinExpr] = []
        self.le_rows: list[LinExpr] = []
        self.objective: LinExpr = LinExpr()
        # optional feasible-assignment tracker: encoders fill in the value of
        # every variable they add, evaluated at the inputs' witness values
        self.witness: list[float] | None = None

    @property
    def num_vars(self) -> int:
        return len(self.names)

    def start_witness(self) -> None:
        if self.num_vars:
            raise ValueError("witness tracking must start before variables exist")
        self.witness = []

    def set_witness(self, idx: int, value) -> None:
        if self.witness is not None:
            self.witness[idx] = scalar_float(value)

    def add_var(self, name: str, lo: float = -math.inf, hi: float = math.inf) -> int:
        lo = float(lo)
        hi = float(hi)
        if lo > hi:
            raise ValueError(f"variable {name}: empty bound range [{lo}, {hi}]")
        self.names.append(name)
        self.lb.append(lo)
        self.ub.append(hi)
        if self.witness is not None:
            self.witness.append(math.nan)
        return len(self.names) - 1

    def add_binary(self, name: str) -> int:
        idx = self.add_var(name, 0.0, 1.0)
        self.binaries.append(idx)
        return idx

    def add_eq(self, expr: LinExpr) -> None:
        self.eq_rows.append(expr)

    def add_le(self, expr: LinExpr) -> None:
        self.le_rows.append(expr)

    def set_objective_max(self, expr: LinExpr) -> None:
        self.objective = expr

    def to_arrays(self) -> ModelArrays:
        n = self.num_vars
        c = np.zeros(n)
        for v, coef in self.objective.coeffs.items():
            c[v] += float(coef)
        d = float(self.objective.const)

        def rows_to_dense(rows):
            a = np.zeros((len(rows), n))
            b = np.zeros(len(rows))
            for i, expr in enumerate(rows):
                for v, coef in expr.coeffs.items():
                    a[i, v] += float(coef)
                b[i] = -float(expr.const)
            return a, b

        a_ub, b_ub = rows_to_dense(self.le_rows)
        a_eq, b_eq = rows_to_dense(self.eq_rows)
        mask = np.zeros(n, dtype=bool)
        mask[self.binaries] = True
        return ModelArrays(
            c, d, a_ub, b_ub, a_eq, b_eq,
            np.array(self.lb, dtype=float), np.array(self.ub, dtype=float), mask,
        )

    def point_violation(self, point, integrality_tol: float = 1e-6) -> float:
        """Worst constraint violation of ``point`` (0 means feasible)."""
        point = np.asarray(point, dtype=float)
        worst = 0.0
        for expr in self.eq_rows:
            worst = max(worst, abs(float(expr.value(point))))
        for expr in self.le_rows:
            worst = max(worst, float(expr.value(point)))
        for j in range(self.num_vars):
            worst = max(worst, self.lb[j] - point[j], point[j] - self.ub[j])
        for j in self.binaries:
            frac = abs(point[j] - round(point[j]))
            if frac > integrality_tol:
                worst = max(worst, frac)
        return worst

    def lp_text(self) -> str:
        """Readable listing of the model for debugging."""
        lines = [f"maximize {self.objective!r}", "subject to"]
        for expr in self.eq_rows:
            lines.append(f"  {expr!r} == 0")
        for expr in self.le_rows:
            lines.append(f"  {expr!r} <= 0")
        lines.append("bounds")
        for j, name in enumerate(self.names):
            kind = " (binary)" if j in set(self.binaries) else ""
            lines.append(f"  {self.lb[j]:g} <= {name} [v{j}] <= {self.ub[j]:g}{kind}")
        return "\n".join(lines)


@dataclasses.dataclass
class NeuronBounds:
    """Per-hidden-neuron preactivation intervals plus output intervals.

    ``pre_lo[k][i]`` bounds neuron ``i`` of hidden layer ``k``. Entries are
    scalars (floats or tensors) so the trainer can replay them.
    """

    pre_lo: list
    pre_up: list
    out_lo: list
    out_up: list


def scalar_max(a, b):
    return a if scalar_float(a) >= scalar_float(b) else b


def scalar_min(a, b):
    return a if scalar_float(a) <= scalar_float(b) else b


def _leaky(y, c):
    return scalar_max(y, c * y)


def _affine_interval(w_row, b, lo, up):
    acc_lo = b
    acc_up = b
    for j in range(len(lo)):
        coef = w_row[j]
        if scalar_float(coef) >= 0.0:
            acc_lo = acc_lo + coef * lo[j]
            acc_up = acc_up + coef * up[j]
        else:
            acc_lo = acc_lo + coef * up[j]
            acc_up = acc_up + coef * lo[j]
    return acc_lo, acc_up


def _layers_of(net, leak):
    if isinstance(net, nets.FeedforwardNetwork):
        return list(zip(net.weights, net.biases)), net.leak
    if leak is None:
        raise ValueError("leak slope required when passing raw layers")
    return list(net), leak


def interval_bounds(net, in_lo, in_up, leak=None) -> NeuronBounds:
    """Interval-arithmetic bounds through the network for inputs in a box.

    ``in_lo``/``in_up`` are per-input scalars. Monotonicity of the leaky
    ReLU makes image intervals of the activation exact per neuron.
    """
    layers, c = _layers_of(net, leak)
    lo = list(in_lo)
    up = list(in_up)
    pre_lo, pre_up = [], []
    for li, (w, b) in enumerate(layers):
        rows = len(b)
        y_lo = []
        y_up = []
        for i in range(rows):
            a, z = _affine_interval(w[i], b[i], lo, up)
            y_lo.append(a)
            y_up.append(z)
        if li < len(layers) - 1:
            pre_lo.append(y_lo)
            pre_up.append(y_up)
            lo = [_leaky(v, c) for v in y_lo]
            up = [_leaky(v, c) for v in y_up]
        else:
            return NeuronBounds(pre_lo, pre_up, y_lo, y_up)
    raise AssertionError("unreachable")


def lp_bounds(net, in_lo, in_up, leak=None) -> NeuronBounds:
    """Tightened preactivation bounds from layerwise LP relaxations.

    Runs two LPs per hidden neuron over the relaxed encoding of the layers
    before it and intersects the result with interval arithmetic, so the
    output never loosens the sound interval bounds. Float path only.
    """
    from lyapsyn import solver

    layers, c = _layers_of(net, leak)
    base = interval_bounds(net, in_lo, in_up, leak)
    pre_lo = [list(layer) for layer in base.pre_lo]
    pre_up = [list(layer) for layer in base.pre_up]
    for k in range(len(pre_lo)):
        if k == 0:
            continue  # one affine layer over a box: interval bounds are exact
        model = MilpModel()
        xs = [
            LinExpr.term(model.add_var(f"x{j}", float(in_lo[j]), float(in_up[j])))
            for j in range(len(in_lo))
        ]
        acts = xs
        for li in range(k):
            w, b = layers[li]
            pre_exprs = []
            for i in range(len(b)):
                e = LinExpr.constant(float(b[i]))
                for j, a in enumerate(acts):
                    e = e + float(w[i][j]) * a
                pre_exprs.append(e)
            acts = [
                encode_relu(
                    model, pre_exprs[i], float(pre_lo[li][i]), float(pre_up[li][i]),
                    c, f"l{li}n{i}",
                )[0]
                for i in range(len(pre_exprs))
            ]
        w, b = layers[k]
        for i in range(len(b)):
            e = LinExpr.constant(float(b[i]))
            for j, a in enumerate(acts):
                e = e + float(w[i][j]) * a
            for sense in (1.0, -1.0):
                model.set_objective_max(sense * e)
                res = solver.lp_solve(model)
                if res.status != "optimal":
                    continue
                if sense > 0:
                    pre_up[k][i] = min(float(pre_up[k][i]), res.objective)
                else:
                    pre_lo[k][i] = max(float(pre_lo[k][i]), -res.objective)
        # downstream interval propagation restarts from the tightened layer
        act_lo = [_leaky(v, c) for v in pre_lo[k]]
        act_up = [_leaky(v, c) for v in pre_up[k]]
        for li in range(k + 1, len(pre_lo) + 1):
            w, b = layers[li]
            y_lo, y_up = [], []
            for i in range(len(b)):
                a, z = _affine_interval(w[i], b[i], act_lo, act_up)
                y_lo.append(a)
                y_up.append(z)
            if li < len(pre_lo):
                pre_lo[li] = [scalar_max(pre_lo[li][i], y_lo[i]) for i in range(len(y_lo))]
                pre_up[li] = [scalar_min(pre_up[li][i], y_up[i]) for i in range(len(y_up))]
                act_lo = [_leaky(v, c) for v in pre_lo[li]]
                act_up = [_leaky(v, c) for v in pre_up[li]]
            else:
                base.out_lo = y_lo
                base.out_up = y_up
    base.pre_lo = pre_lo
    base.pre_up = pre_up
    return base


def encode_relu(model, y_expr, y_lo, y_up, leak, name, elide=True):
    """Exact encoding of ``w = max(y, leak * y)`` for ``y in [y_lo, y_up]``.

    Returns ``(w_expr, binary_index_or_None)``. With ``elide`` (default),
    a neuron whose preactivation interval fixes the phase is replaced by
    the single active linear piece and no variables are added. Otherwise
    a free variable ``w`` and a binary select the piece through four
    big-M rows; both choices of the binary reproduce the respective piece
    exactly at its boundary.
    """
    if scalar_float(y_lo) > scalar_float(y_up):
        raise ValueError(f"{name}: empty preactivation interval")
    if elide:
        if scalar_float(y_lo) >= 0.0:
            return y_expr, None
        if scalar_float(y_up) <= 0.0:
            return y_expr * leak, None
    w = model.add_var(f"{name}_w")
    beta = model.add_binary(f"{name}_beta")
    wt = LinExpr.term(w)
    bt = LinExpr.term(beta)
    model.add_le(y_expr - wt)
    model.add_le(y_expr * leak - wt)
    model.add_le(wt - y_expr * leak + bt * ((leak - 1.0) * y_up))
    model.add_le(wt - y_expr + (bt - 1.0) * ((leak - 1.0) * y_lo))
    if model.witness is not None:
        y_val = scalar_float(y_expr.value(model.witness))
        model.set_witness(w, max(y_val, leak * y_val))
        model.set_witness(beta, 1.0 if y_val >= 0.0 else 0.0)
    return wt, beta


def encode_relu_network(model, net, inputs, bounds: NeuronBounds, *, leak=None,
                        prefix="n", elide=True):
    """Append an exact encoding of the network applied to ``inputs``.

    ``inputs`` are affine expressions whose ranges are consistent with
    ``bounds`` (typically from :func:`interval_bounds` over the same input
    box). Adds one output variable per output neuron tied by an equality
    row and returns their expressions.
    """
    layers, c = _layers_of(net, leak)
    if len(bounds.pre_lo) != len(layers) - 1:
        raise ValueError("bounds do not match the network depth")
    acts = list(inputs)
    for li, (w, b) in enumerate(layers[:-1]):
        if len(acts) != len(w[0]):
            raise ValueError(f"layer {li}: got {len(acts)} inputs for fan-in {len(w[0])}")
        nxt = []
        for i in range(len(b)):
            e = LinExpr.constant(b[i])
            for j, a in enumerate(acts):
                e = e + w[i][j] * a
            we, _ = encode_relu(
                model, e, bounds.pre_lo[li][i], bounds.pre_up[li][i], c,
                f"{prefix}_l{li}n{i}", elide=elide,
            )
            nxt.append(we)
        acts = nxt
    w, b = layers[-1]
    outs = []
    for i in range(len(b)):
        e = LinExpr.constant(b[i])
        for j, a in enumerate(acts):
            e = e + w[i][j] * a
        v = model.add_var(f"{prefix}_out{i}")
        vt = LinExpr.term(v)
        model.add_eq(vt - e)
        if model.witness is not None:
            model.set_witness(v, scalar_float(e.value(model.witness)))
        outs.append(vt)
    return outs


def encode_l1(model, elems, elem_lo, elem_up, *, prefix="l1", elide=True):
    """Exact encoding of ``y = sum_i |elems[i]|`` given element intervals.

    Elements whose interval does not cross zero contribute linearly. A
    crossing element ``e in [l, u]`` (l < 0 < u) gets a free magnitude
    variable ``z`` and a binary ``alpha`` with rows ``z >= e``, ``z >= -e``,
    ``z <= e + 2 l (alpha - 1)``, ``z <= 2 u alpha - e``. Returns the
    expression of the 1-norm variable ``y``.
    """
    total = LinExpr()
    for i, e in enumerate(elems):
        lo, up = elem_lo[i], elem_up[i]
        if scalar_float(lo) > scalar_float(up):
            raise ValueError(f"{prefix}[{i}]: empty element interval")
        if elide and scalar_float(lo) >= 0.0:
            total = total + e
            continue
        if elide and scalar_float(up) <= 0.0:
            total = total - e
            continue
        z = model.add_var(f"{prefix}_z{i}")
        alpha = model.add_binary(f"{prefix}_a{i}")
        zt = LinExpr.term(z)
        at = LinExpr.term(alpha)
        model.add_le(e - zt)
        model.add_le(-e - zt)
        model.add_le(zt - e - at * (2.0 * lo) + 2.0 * lo)
        model.add_le(zt + e - at * (2.0 * up))
        if model.witness is not None:
            e_val = scalar_float(e.value(model.witness))
            model.set_witness(z, abs(e_val))
            model.set_witness(alpha, 1.0 if e_val >= 0.0 else 0.0)
        total = total + zt
    y = model.add_var(f"{prefix}_y")
    yt = LinExpr.term(y)
    model.add_eq(yt - total)
    if model.witness is not None:
        model.set_witness(y, scalar_float(total.value(model.witness)))
    return yt


def encode_clamp(model, x_expr, x_lo, x_up, lo, up, *, prefix="clamp", elide=True):
    """Exact encoding of ``y = min(max(x, lo), up)`` via two ReLU pieces.

    Uses ``y = up - relu(up - (relu(x - lo) + lo))`` with interval
    propagation of the intermediate arguments; inactive pieces elide.
    ``lo``/``up`` are float saturation limits, ``x_lo``/``x_up`` bound the
    argument. Returns the clamped expression.
    """
    if not (math.isfinite(lo) and math.isfinite(up) and lo <= up):
        raise ValueError(f"{prefix}: invalid clamp range [{lo}, {up}]")
    t, _ = encode_relu(model, x_expr - lo, x_lo - lo, x_up - lo, 0.0,
                       f"{prefix}_lo", elide=elide)
    t_lo = _leaky_zero(x_lo - lo)
    t_up = _leaky_zero(x_up - lo)
    arg = up - (t + lo)
    v, _ = encode_relu(model, arg, up - lo - t_up, up - lo - t_lo, 0.0,
                       f"{prefix}_up", elide=elide)
    return up - v


def _leaky_zero(y):
    return scalar_max(y, 0.0 * y)
