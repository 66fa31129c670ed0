"""Figure rendering for run reports.

Every function draws onto a headless canvas and writes an image file,
returning its path; the delimited data the figures summarize is written
separately by the command-line layer.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from lyapsyn import certify


def _finish(fig, path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def training_curve_figure(history, path) -> str:
    """Violation levels and surrogate loss per outer iteration."""
    if not history:
        raise ValueError("history is empty")
    its = [row["iteration"] for row in history]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for key, label in (("eta1_max", "positivity violation"),
                       ("eta2_max", "decrease violation"),
                       ("loss", "surrogate loss")):
        vals = np.array([max(row.get(key, 0.0), 0.0) for row in history])
        ax.plot(its, np.maximum(vals, 1e-12), marker="o", label=label)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("level")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _finish(fig, path)


def fit_error_figure(errors, path) -> str:
    """Histogram of per-sample one-step prediction error norms."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("no errors to plot")
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.hist(errors, bins=40, color="tab:blue", alpha=0.8)
    ax.set_xlabel("one-step error norm")
    ax.set_ylabel("samples")
    ax.grid(True, alpha=0.3)
    return _finish(fig, path)


def _require_planar(problem):
    if problem.n_x != 2:
        raise ValueError("landscape figures need a two-dimensional state")


def lyapunov_heatmap_figure(problem, rho, path, grid: int = 101) -> str:
    """V over the box, optionally with the sublevel boundary V = rho."""
    _require_planar(problem)
    xs = np.linspace(problem.box_lo[0], problem.box_hi[0], grid)
    ys = np.linspace(problem.box_lo[1], problem.box_hi[1], grid)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    vals = certify.eval_lyapunov(problem.lyapunov, pts).reshape(gx.shape)
    fig, ax = plt.subplots(figsize=(6.0, 4.8))
    mesh = ax.pcolormesh(gx, gy, vals, shading="auto", cmap="viridis")
    fig.colorbar(mesh, ax=ax, label="V")
    if rho is not None and rho > 0:
        ax.contour(gx, gy, vals, levels=[rho], colors="white", linewidths=2.0)
    ax.plot(*problem.lyapunov.x_star, "r*", markersize=12)
    ax.set_xlabel("x[0]")
    ax.set_ylabel("x[1]")
    return _finish(fig, path)


def phase_figure(problem, records, path, rho=None, grid: int = 101) -> str:
    """State trajectories over the certified box; starts marked."""
    _require_planar(problem)
    fig, ax = plt.subplots(figsize=(6.0, 4.8))
    lo, hi = problem.box_lo, problem.box_hi
    ax.add_patch(plt.Rectangle(lo, *(hi - lo), fill=False, linestyle="--", color="gray"))
    if rho is not None and rho > 0:
        xs = np.linspace(lo[0], hi[0], grid)
        ys = np.linspace(lo[1], hi[1], grid)
        gx, gy = np.meshgrid(xs, ys)
        vals = certify.eval_lyapunov(
            problem.lyapunov, np.column_stack([gx.ravel(), gy.ravel()])
        ).reshape(gx.shape)
        ax.contour(gx, gy, vals, levels=[rho], colors="tab:orange", linewidths=1.5)
    for rec in records:
        ax.plot(rec.states[:, 0], rec.states[:, 1], lw=0.9)
        ax.plot(rec.states[0, 0], rec.states[0, 1], "k.", markersize=5)
    ax.plot(*problem.lyapunov.x_star, "r*", markersize=12)
    margin = 0.05 * (hi - lo)
    ax.set_xlim(lo[0] - margin[0], hi[0] + margin[0])
    ax.set_ylim(lo[1] - margin[1], hi[1] + margin[1])
    ax.set_xlabel("x[0]")
    ax.set_ylabel("x[1]")
    return _finish(fig, path)


def value_along_trajectories_figure(records, path, eps2=None) -> str:
    """V against time for each rollout, with the certified decay envelope."""
    if not records:
        raise ValueError("no trajectories to plot")
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for rec in records:
        ax.plot(rec.times, np.maximum(rec.vvalues, 1e-16), lw=0.9)
    if eps2 is not None and records:
        top = max(rec.vvalues[0] for rec in records)
        steps = max(len(rec.times) for rec in records)
        ref = next(rec.times for rec in records if len(rec.times) == steps)
        envelope = top * (1.0 - eps2) ** np.arange(steps)
        ax.plot(ref, np.maximum(envelope, 1e-16), "k--", lw=1.2, label="certified decay")
        ax.legend()
    ax.set_yscale("log")
    ax.set_xlabel("time")
    ax.set_ylabel("V")
    ax.grid(True, alpha=0.3)
    return _finish(fig, path)
