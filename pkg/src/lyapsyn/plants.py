"""Benchmark plants, dynamics-network regression, and closed-loop rollout.

The ground-truth plants integrate their equations of motion with a fixed
RK4 step; the learned dynamics network approximates exactly that one-step
map, so certified properties transfer to rollouts of the network and can
be compared against rollouts of the true integrator.
"""

import csv
import dataclasses
import math
import pathlib

import numpy as np

from lyapsyn import certify, nets


def _rk4(derivative, x, u, dt):
    k1 = derivative(x, u)
    k2 = derivative(x + 0.5 * dt * k1, u)
    k3 = derivative(x + 0.5 * dt * k2, u)
    k4 = derivative(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclasses.dataclass(frozen=True)
class PendulumPlant:
    """Damped torque-driven pendulum; angle pi is the upright equilibrium."""

    mass: float = 1.0
    length: float = 1.0
    damping: float = 0.1
    gravity: float = 9.81
    dt: float = 0.01

    def __post_init__(self):
        if self.mass <= 0 or self.length <= 0 or self.dt <= 0:
            raise ValueError("mass, length, and dt must be positive")

    @property
    def n_x(self) -> int:
        return 2

    @property
    def n_u(self) -> int:
        return 1

    @property
    def x_star(self) -> np.ndarray:
        return np.array([math.pi, 0.0])

    @property
    def u_star(self) -> np.ndarray:
        return np.zeros(1)

    def derivative(self, x, u):
        theta, omega = x
        torque = u[0] if np.ndim(u) else float(u)
        alpha = (
            torque
            - self.damping * omega
            - self.mass * self.gravity * self.length * math.sin(theta)
        ) / (self.mass * self.length**2)
        return np.array([omega, alpha])

    def step(self, x, u):
        """One RK4 step of the equations of motion under a held torque."""
        return _rk4(self.derivative, np.asarray(x, dtype=np.float64), u, self.dt)

    def energy(self, x) -> float:
        """Kinetic plus potential energy; conserved when undamped, unforced."""
        theta, omega = x
        return (
            0.5 * self.mass * self.length**2 * omega**2
            - self.mass * self.gravity * self.length * math.cos(theta)
        )


@dataclasses.dataclass(frozen=True)
class Quadrotor2D:
    """Planar quadrotor with two rotor thrusts, hovering at the origin.

    State (x, z, theta, xdot, zdot, thetadot); available when the config
    enables it, and not part of the mandatory pipeline.
    """

    mass: float = 0.486
    arm_length: float = 0.25
    inertia: float = 0.00383
    gravity: float = 9.81
    dt: float = 0.01

    def __post_init__(self):
        if self.mass <= 0 or self.arm_length <= 0 or self.inertia <= 0 or self.dt <= 0:
            raise ValueError("mass, arm length, inertia, and dt must be positive")

    @property
    def n_x(self) -> int:
        return 6

    @property
    def n_u(self) -> int:
        return 2

    @property
    def x_star(self) -> np.ndarray:
        return np.zeros(6)

    @property
    def u_star(self) -> np.ndarray:
        hover = 0.5 * self.mass * self.gravity
        return np.array([hover, hover])

    def derivative(self, x, u):
        theta = x[2]
        thrust = u[0] + u[1]
        return np.array(
            [
                x[3],
                x[4],
                x[5],
                -thrust * math.sin(theta) / self.mass,
                thrust * math.cos(theta) / self.mass - self.gravity,
                self.arm_length * (u[0] - u[1]) / self.inertia,
            ]
        )

    def step(self, x, u):
        return _rk4(self.derivative, np.asarray(x, dtype=np.float64), u, self.dt)


@dataclasses.dataclass(frozen=True)
class LinearPlant:
    """Discrete map x+ = A x + B u with the origin as equilibrium.

    Useful as a toy whose one-step map a network can represent exactly.
    """

    a: np.ndarray
    b: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("state matrix must be square")
        if b.ndim != 2 or b.shape[0] != a.shape[0]:
            raise ValueError("input matrix rows must match the state dimension")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    @property
    def n_u(self) -> int:
        return self.b.shape[1]

    @property
    def x_star(self) -> np.ndarray:
        return np.zeros(self.n_x)

    @property
    def u_star(self) -> np.ndarray:
        return np.zeros(self.n_u)

    def step(self, x, u):
        return self.a @ np.asarray(x, dtype=np.float64) + self.b @ np.atleast_1d(u)

    def exact_network(self, leak: float = 0.1) -> nets.FeedforwardNetwork:
        """Network representing the map exactly, for regression-free runs."""
        return nets.exact_linear_network(np.hstack([self.a, self.b]), leak)


# --- dynamics regression -------------------------------------------------------


@dataclasses.dataclass
class FitResult:
    """Best network found by regression, with its error report."""

    net: nets.FeedforwardNetwork
    train_mse: float
    holdout_mse: float
    epochs_run: int
    converged: bool  # holdout error reached the target


def sample_transitions(plant, sample_box, sample_count: int, rng: np.random.Generator,
                       near_fraction: float = 0.1):
    """Uniform (x, u) samples over the box, a fraction drawn near the
    equilibrium, each paired with the plant's one-step successor."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in sample_box)
    dim = plant.n_x + plant.n_u
    if lo.shape != (dim,) or hi.shape != (dim,):
        raise ValueError(f"sample box must bound all {dim} input coordinates")
    if sample_count <= 0:
        raise ValueError("sample count must be positive")
    n_near = int(round(near_fraction * sample_count))
    uniform = rng.uniform(lo, hi, (sample_count - n_near, dim))
    center = np.concatenate([plant.x_star, plant.u_star])
    spread = 0.05 * (hi - lo)
    near = np.clip(center + spread * rng.standard_normal((n_near, dim)), lo, hi)
    inputs = np.vstack([uniform, near])
    targets = np.array([plant.step(row[: plant.n_x], row[plant.n_x :]) for row in inputs])
    return inputs, targets


def fit_network_to_data(
    inputs,
    targets,
    net_shape,
    rng,
    *,
    leak: float = 0.1,
    target_mse: float = 1e-5,
    max_epochs: int = 5000,
    learning_rate: float = 1e-2,
    holdout_fraction: float = 0.2,
) -> FitResult:
    """Regress paired samples onto a leaky-ReLU network.

    ``net_shape`` lists the hidden widths. Full-batch adaptive descent
    with halving on plateau; training stops once the held-out error
    reaches ``target_mse``, otherwise the best held-out snapshot is
    returned with ``converged`` unset.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    perm = rng.permutation(len(inputs))
    n_hold = max(1, int(round(holdout_fraction * len(inputs))))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    if train_idx.size == 0:
        raise ValueError("not enough samples to split off a holdout set")

    sizes = (inputs.shape[1], *net_shape, targets.shape[1])
    start = nets.random_network(sizes, leak, rng)

    import torch

    x_train = torch.from_numpy(inputs[train_idx])
    y_train = torch.from_numpy(targets[train_idx])
    x_hold = torch.from_numpy(inputs[hold_idx])
    y_hold = torch.from_numpy(targets[hold_idx])
    params = [
        torch.tensor(arr, dtype=torch.float64, requires_grad=True)
        for pair in zip(start.weights, start.biases)
        for arr in pair
    ]

    def hidden_features(ps, xs):
        a = xs
        for i in range(0, len(ps) - 2, 2):
            a = torch.nn.functional.leaky_relu(
                a @ ps[i].T + ps[i + 1], negative_slope=leak
            )
        return a

    def net_forward(ps, xs):
        return hidden_features(ps, xs) @ ps[-2].T + ps[-1]

    def mse(ps, xs, ys):
        with torch.no_grad():
            return float(torch.mean((net_forward(ps, xs) - ys) ** 2))

    def polished(ps):
        # the output layer is linear in its parameters, so refit it in
        # closed form on the current hidden features
        with torch.no_grad():
            feats = hidden_features(ps, x_train)
            ones = torch.ones(len(feats), 1, dtype=feats.dtype)
            sol = torch.linalg.lstsq(torch.cat([feats, ones], dim=1), y_train).solution
            out = [p.detach().clone() for p in ps]
            out[-2] = sol[:-1].T.contiguous()
            out[-1] = sol[-1].clone()
            return out

    opt = torch.optim.Adam(params, lr=learning_rate)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, factor=0.5, patience=150, min_lr=1e-8
    )
    best = (mse(params, x_hold, y_hold), [p.detach().clone() for p in params])
    train_mse = math.inf
    epochs = 0
    for epochs in range(1, max_epochs + 1):
        opt.zero_grad()
        loss = torch.mean((net_forward(params, x_train) - y_train) ** 2)
        loss.backward()
        opt.step()
        train_mse = float(loss.detach())
        hold_mse = mse(params, x_hold, y_hold)
        sched.step(hold_mse)
        if hold_mse < best[0]:
            best = (hold_mse, [p.detach().clone() for p in params])
        if epochs % 50 == 0 or hold_mse <= target_mse or epochs == max_epochs:
            cand = polished(params)
            cand_mse = mse(cand, x_hold, y_hold)
            if cand_mse < best[0]:
                best = (cand_mse, cand)
        if best[0] <= target_mse:
            break

    tensors = [np.ascontiguousarray(t.numpy()) for t in best[1]]
    net = nets.FeedforwardNetwork(tuple(tensors[0::2]), tuple(tensors[1::2]), leak)
    return FitResult(net, train_mse, best[0], epochs, best[0] <= target_mse)


def fit_dynamics_network(
    plant,
    sample_box,
    sample_count: int,
    net_shape,
    seed: int,
    **kwargs,
) -> FitResult:
    """Regress the plant's one-step map onto a leaky-ReLU network, sampling
    (x, u) over the given box. Keyword options as in fit_network_to_data."""
    rng = np.random.default_rng(seed)
    inputs, targets = sample_transitions(plant, sample_box, sample_count, rng)
    return fit_network_to_data(inputs, targets, net_shape, rng, **kwargs)


def save_dataset(path, inputs, targets) -> None:
    """Columnar text dataset: one row per sample, inputs then targets."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape[0] != targets.shape[0]:
        raise ValueError("inputs and targets must pair up row by row")
    header = f"transition dataset: {inputs.shape[1]} inputs, {targets.shape[1]} targets"
    np.savetxt(path, np.hstack([inputs, targets]), header=header)


def load_dataset(path):
    with open(path) as fh:
        header = fh.readline()
    words = header.split()
    n_in = int(words[words.index("inputs,") - 1])
    data = np.loadtxt(path, ndmin=2)
    return data[:, :n_in], data[:, n_in:]


# --- closed-loop simulation -----------------------------------------------------


@dataclasses.dataclass
class TrajectoryRecord:
    """Closed-loop rollout log.

    ``states`` has one more row than ``controls``; ``vvalues`` aligns with
    ``states``. ``converged`` marks the final state within tolerance of
    the equilibrium; ``truncated`` marks an aborted blow-up.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    vvalues: np.ndarray
    converged: bool
    truncated: bool

    def __post_init__(self):
        if not np.all(np.diff(self.times) > 0):
            raise ValueError("times must increase strictly")
        if len(self.times) != len(self.states) or len(self.times) != len(self.vvalues):
            raise ValueError("times, states, and V values must align")
        if len(self.controls) != len(self.states) - 1:
            raise ValueError("need exactly one control per transition")


def simulate(
    problem: certify.CertificationProblem,
    x0,
    horizon: int,
    *,
    plant=None,
    dt: float | None = None,
    convergence_tol: float = 1e-3,
    blowup_limit: float = 1e6,
) -> TrajectoryRecord:
    """Roll out the saturated network policy from ``x0``.

    With ``plant=None`` the successor comes from the learned network (the
    map the certificate speaks about); passing a plant integrates its true
    equations instead, keeping the same controller and Lyapunov readout.
    Nonfinite or huge states abort the rollout and flag it truncated.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    step_dt = dt if dt is not None else getattr(plant, "dt", 1.0)
    states = [x0]
    controls = []
    truncated = False
    x = x0
    for _ in range(horizon):
        u = certify.eval_controller(problem.dynamics, problem.controller, x)
        nxt = (
            certify.step(problem.dynamics, problem.controller, x)
            if plant is None
            else plant.step(x, u)
        )
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > blowup_limit:
            truncated = True
            break
        controls.append(u)
        states.append(nxt)
        x = nxt
    states = np.asarray(states)
    times = step_dt * np.arange(len(states))
    vvalues = certify.eval_lyapunov(problem.lyapunov, states)
    gap = np.linalg.norm(states[-1] - problem.lyapunov.x_star)
    return TrajectoryRecord(
        times, states, np.asarray(controls).reshape(len(states) - 1, problem.n_u),
        vvalues, bool(gap <= convergence_tol and not truncated), truncated,
    )


def rollout_batch(problem, x0s, horizon: int, **kwargs) -> list:
    """Independent rollouts from several initial states."""
    return [simulate(problem, x0, horizon, **kwargs) for x0 in np.asarray(x0s)]


def save_trajectory(path, record: TrajectoryRecord, n_u: int | None = None) -> None:
    """CSV with columns t, x0.., u0.., v; the final row has no control."""
    n_u = record.controls.shape[1] if n_u is None else n_u
    n_x = record.states.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["t", *(f"x{i}" for i in range(n_x)), *(f"u{i}" for i in range(n_u)), "v"]
        )
        for k in range(len(record.times)):
            u_row = record.controls[k] if k < len(record.controls) else [math.nan] * n_u
            writer.writerow(
                [record.times[k], *record.states[k], *u_row, record.vvalues[k]]
            )


def load_trajectory(path) -> TrajectoryRecord:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    with open(path) as fh:
        names = fh.readline().strip().split(",")
    n_x = sum(1 for n in names if n.startswith("x"))
    times = data[:, 0]
    states = data[:, 1 : 1 + n_x]
    controls = data[:-1, 1 + n_x : -1]
    vvalues = data[:, -1]
    return TrajectoryRecord(times, states, controls, vvalues, False, False)


# --- linear-quadratic baseline ---------------------------------------------------


def linearize_step(source, x, u, h: float = 1e-6):
    """Central-difference Jacobians (A, B) of the one-step map at (x, u)."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    n_x, n_u = x.size, u.size
    a = np.zeros((n_x, n_x))
    b = np.zeros((n_x, n_u))
    for j in range(n_x):
        d = np.zeros(n_x)
        d[j] = h
        a[:, j] = (source.step(x + d, u) - source.step(x - d, u)) / (2.0 * h)
    for j in range(n_u):
        d = np.zeros(n_u)
        d[j] = h
        b[:, j] = (source.step(x, u + d) - source.step(x, u - d)) / (2.0 * h)
    return a, b


def lqr_gain(a, b, q=None, r=None) -> np.ndarray:
    """Discrete-time LQR feedback K for x+ = A x + B u with u = -K x."""
    from scipy import linalg

    n_x, n_u = b.shape
    q = np.eye(n_x) if q is None else np.asarray(q, dtype=np.float64)
    r = np.eye(n_u) if r is None else np.asarray(r, dtype=np.float64)
    p = linalg.solve_discrete_are(a, b, q, r)
    return np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)


def lqr_controller(k, leak: float = 0.1) -> certify.Controller:
    """Exact network embedding of the feedback u = -K x.

    Composed with the equilibrium-offset construction this realizes
    u = u* - K (x - x*) before saturation.
    """
    return certify.Controller(nets.exact_linear_network(-np.asarray(k), leak))
