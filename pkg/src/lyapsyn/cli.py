"""Command-line front end for the synthesis pipeline.

Subcommands: fit (regress the dynamics network), synthesize (train a
controller and Lyapunov candidate until certification), verify (re-check
an existing checkpoint), roa (certified sublevel radius), and simulate
(closed-loop rollouts under the network or the true plant). Every JSON
artifact embeds the resolved config and the content hashes of the weight
files it consumed.
"""

import argparse
import csv
import dataclasses
import json
import math
import os
import pathlib
import sys

import numpy as np

from lyapsyn import certify, config as configmod, nets, plants, plots, solver, trainer

EXIT_OK = 0
EXIT_UNMET = 1  # command ran, but its primary contract did not hold
EXIT_USAGE = 2  # bad config, bad arguments, unreadable inputs


def _env_workers() -> int:
    raw = os.environ.get("LYAPSYN_WORKERS", "")
    try:
        return max(int(raw), 0)
    except ValueError:
        return 0


def _write_json(path, doc) -> None:
    def default(value):
        if isinstance(value, np.ndarray):
            return value.tolist()
        if isinstance(value, (np.floating, np.integer)):
            return value.item()
        if value is math.inf:
            return "inf"
        raise TypeError(f"not JSON-serializable: {type(value)}")

    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, default=default)
        fh.write("\n")


def _outcome_dict(out: certify.MipOutcome) -> dict:
    return {
        "status": out.status,
        "objective": out.objective,
        "bound": out.bound if math.isfinite(out.bound) else None,
        "state": None if out.state is None else out.state.tolist(),
        "node_count": out.node_count,
        "wall_time": out.wall_time,
    }


def _report_dict(report: certify.VerificationReport) -> dict:
    return {
        "status": report.status,
        "certified": report.certified,
        "tolerance": report.tolerance,
        "positivity": _outcome_dict(report.positivity),
        "decrease": _outcome_dict(report.decrease),
    }


def _out_dir(cfg, override) -> pathlib.Path:
    path = pathlib.Path(override if override else cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _apply_overrides(cfg, args) -> "configmod.ExperimentConfig":
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "algorithm", None) is not None:
        updates["algorithm"] = args.algorithm
    return cfg.copy_with(**updates) if updates else cfg


def _solve_options(cfg) -> solver.SolveOptions:
    return solver.SolveOptions(node_budget=cfg.resolved["train"]["node_budget"])


def _check_dims(problem, plant, what: str) -> None:
    if problem.n_x != plant.n_x or problem.n_u != plant.n_u:
        raise configmod.ConfigError(
            f"{what}: checkpoint is {problem.n_x} states / {problem.n_u} controls, "
            f"but the configured plant has {plant.n_x} / {plant.n_u}"
        )


# --- fit -------------------------------------------------------------------


def _sample_box(cfg, plant):
    lo, hi = cfg.box
    u_min, u_max = cfg.control_limits
    if lo.size != plant.n_x:
        raise configmod.ConfigError(
            f"box: {lo.size} coordinates for a plant with {plant.n_x} states"
        )
    if u_min.size != plant.n_u:
        raise configmod.ConfigError(
            f"control_limits: {u_min.size} coordinates for a plant with {plant.n_u} controls"
        )
    return np.concatenate([lo, u_min]), np.concatenate([hi, u_max])


def cmd_fit(cfg, out_dir) -> int:
    plant = configmod.build_plant(cfg)
    fit_cfg = cfg.resolved["fit"]
    weights_path = out_dir / "dynamics.json"
    if fit_cfg["method"] == "exact-linear":
        net = plant.exact_network(cfg.leak)
        report = {"train_mse": 0.0, "holdout_mse": 0.0, "epochs_run": 0, "converged": True}
    else:
        lo, hi = _sample_box(cfg, plant)
        fit = plants.fit_dynamics_network(
            plant, (lo, hi), fit_cfg["sample_count"],
            cfg.resolved["networks"]["dynamics_hidden"], cfg.seed,
            leak=cfg.leak, target_mse=fit_cfg["target_mse"],
            max_epochs=fit_cfg["max_epochs"], learning_rate=fit_cfg["learning_rate"],
        )
        net = fit.net
        report = {
            "train_mse": fit.train_mse, "holdout_mse": fit.holdout_mse,
            "epochs_run": fit.epochs_run, "converged": fit.converged,
        }
    nets.save_weights(net, weights_path)

    # residuals on a fresh sample, as delimited data plus a rendered figure
    lo, hi = _sample_box(cfg, plant)
    rng = np.random.default_rng(cfg.seed + 1)
    inputs, targets = plants.sample_transitions(plant, (lo, hi), 500, rng)
    pred, _ = nets.forward(net, inputs)
    errors = np.linalg.norm(pred - targets, axis=1)
    np.savetxt(out_dir / "fit_errors.csv", errors, header="one_step_error_norm")
    plots.fit_error_figure(errors, out_dir / "fit_errors.png")

    report.update(
        target_mse=fit_cfg["target_mse"],
        weights=str(weights_path),
        weight_hashes={"dynamics.json": configmod.file_sha256(weights_path)},
        config=cfg.resolved,
    )
    _write_json(out_dir / "fit_report.json", report)
    print(f"fit: holdout MSE {report['holdout_mse']:.3e} "
          f"(target {fit_cfg['target_mse']:.1e}) -> {weights_path}")
    return EXIT_OK if report["converged"] else EXIT_UNMET


# --- synthesize --------------------------------------------------------------


def _scaled_output(net: nets.FeedforwardNetwork, scale: float) -> nets.FeedforwardNetwork:
    weights = list(net.weights)
    biases = list(net.biases)
    weights[-1] = weights[-1] * scale
    biases[-1] = biases[-1] * scale
    return nets.FeedforwardNetwork(tuple(weights), tuple(biases), net.leak)


def _lqr_controller_net(cfg, plant, rng) -> nets.FeedforwardNetwork:
    """Regress the configured controller shape onto the LQR feedback law."""
    a, b = plants.linearize_step(plant, plant.x_star, plant.u_star)
    k = plants.lqr_gain(a, b)
    lo, hi = cfg.box
    states = rng.uniform(lo, hi, (cfg.resolved["init"]["lqr_samples"], plant.n_x))
    targets = plant.u_star - (states - plant.x_star) @ k.T
    fit = plants.fit_network_to_data(
        states, targets, cfg.resolved["networks"]["controller_hidden"], rng,
        leak=cfg.leak, target_mse=1e-10, max_epochs=2000,
    )
    return fit.net


def _initial_problem(cfg, plant, dyn_net) -> certify.CertificationProblem:
    lo, hi = cfg.box
    u_min, u_max = cfg.control_limits
    dyn = certify.Dynamics(dyn_net, plant.x_star, plant.u_star, u_min, u_max)
    init = cfg.resolved["init"]
    if init["warm_start"]:
        previous, _ = configmod.load_checkpoint(init["warm_start"])
        _check_dims(previous, plant, "init.warm_start")
        ctrl, lyap = previous.controller, previous.lyapunov
    else:
        rng = np.random.default_rng(cfg.seed)
        nw = cfg.resolved["networks"]
        if init["controller"] == "lqr":
            ctrl_net = _lqr_controller_net(cfg, plant, rng)
        else:
            ctrl_net = _scaled_output(
                nets.random_network(
                    (plant.n_x, *nw["controller_hidden"], plant.n_u), cfg.leak, rng
                ),
                init["net_scale"],
            )
        lyap_net = _scaled_output(
            nets.random_network((plant.n_x, *nw["lyapunov_hidden"], 1), cfg.leak, rng),
            init["net_scale"],
        )
        u_f, v_f, sigma = certify.identity_factors(plant.n_x)
        ctrl = certify.Controller(ctrl_net)
        lyap = certify.LyapunovFunction(
            lyap_net, plant.x_star, u_f, v_f, sigma,
            np.full(plant.n_x, init["r_value"]),
        )
    return certify.CertificationProblem(
        dyn, ctrl, lyap, lo, hi, eps1=cfg.resolved["eps1"], eps2=cfg.resolved["eps2"]
    )


def _load_schedule(path, cfg) -> list:
    with open(path) as fh:
        doc = json.load(fh)
    boxes = doc["boxes"] if isinstance(doc, dict) else doc
    if not isinstance(boxes, list) or not boxes:
        raise configmod.ConfigError(f"{path}: expected a nonempty list of boxes")
    out = []
    for i, box in enumerate(boxes):
        lo = np.asarray(box.get("lo"), dtype=np.float64)
        hi = np.asarray(box.get("hi"), dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1 or np.any(lo >= hi):
            raise configmod.ConfigError(f"{path}: box {i} needs lo strictly below hi")
        if out and (np.any(lo > out[-1][0]) or np.any(hi < out[-1][1])):
            raise configmod.ConfigError(f"{path}: box {i} must contain box {i - 1}")
        out.append((lo, hi))
    final_lo, final_hi = cfg.box
    if out[-1][0].shape != final_lo.shape:
        raise configmod.ConfigError(f"{path}: boxes must match the config state dimension")
    return out


def cmd_synthesize(cfg, out_dir, dynamics_path, schedule_path, allow_uncertified) -> int:
    plant = configmod.build_plant(cfg)
    weights_file = pathlib.Path(dynamics_path) if dynamics_path else out_dir / "dynamics.json"
    if not weights_file.exists():
        raise configmod.ConfigError(
            f"dynamics weights not found at {weights_file}; run fit first or pass --dynamics"
        )
    dyn_net = nets.load_weights(weights_file)
    if dyn_net.input_dim != plant.n_x + plant.n_u or dyn_net.output_dim != plant.n_x:
        raise configmod.ConfigError(
            f"{weights_file}: network maps {dyn_net.input_dim} -> {dyn_net.output_dim}, "
            f"but the plant needs {plant.n_x + plant.n_u} -> {plant.n_x}"
        )
    hashes = {"dynamics.json": configmod.file_sha256(weights_file)}

    problem = _initial_problem(cfg, plant, dyn_net)
    stages = (
        _load_schedule(schedule_path, cfg) if schedule_path else [cfg.box]
    )
    ckpt_dir = out_dir / "checkpoints"
    train_cfg = configmod.to_train_config(cfg, checkpoint_dir=str(ckpt_dir))
    workers = _env_workers()
    if workers:
        train_cfg.workers = workers

    state = trainer.init_state(problem, cfg.seed)
    budget_hit = False
    for idx, (lo, hi) in enumerate(stages):
        problem = dataclasses.replace(problem, box_lo=lo, box_hi=hi)
        state.converged = False
        algorithm = (
            trainer.train_counterexamples if cfg.algorithm == 1 else trainer.train_minmax
        )
        try:
            state = algorithm(problem, state, train_cfg)
        except trainer.IterationBudgetExceeded as exc:
            state = exc.state
            budget_hit = True
            print(f"stage {idx}: iteration budget exceeded before certification",
                  file=sys.stderr)
            break
        print(f"stage {idx}: certified over box {lo.tolist()} .. {hi.tolist()}")

    problem = certify.with_theta(problem, state.theta)
    report = certify.verify(problem, solve_options=_solve_options(cfg))
    certified = report.certified and not budget_hit

    meta = {
        "certified": certified,
        "algorithm": cfg.algorithm,
        "iterations": state.iteration,
        "epochs": state.epochs_run,
        "config": cfg.resolved,
        "weight_hashes": hashes,
    }
    configmod.save_checkpoint(out_dir / "checkpoint.json", problem, meta)
    _write_json(
        out_dir / "report.json",
        {**_report_dict(report), "budget_exceeded": budget_hit,
         "config": cfg.resolved, "weight_hashes": hashes},
    )
    if state.history:
        plots.training_curve_figure(state.history, out_dir / "training_curve.png")
    print(f"synthesize: {report.status} after {state.iteration} iterations "
          f"-> {out_dir / 'checkpoint.json'}")
    if certified:
        return EXIT_OK
    return EXIT_OK if allow_uncertified else EXIT_UNMET


# --- verify / roa -------------------------------------------------------------


def cmd_verify(cfg, out_dir, checkpoint_path) -> int:
    problem, _ = configmod.load_checkpoint(checkpoint_path)
    _check_dims(problem, configmod.build_plant(cfg), "verify")
    report = certify.verify(problem, solve_options=_solve_options(cfg))
    hashes = {"checkpoint.json": configmod.file_sha256(checkpoint_path)}
    _write_json(
        out_dir / "verify_report.json",
        {**_report_dict(report), "config": cfg.resolved, "weight_hashes": hashes},
    )
    if problem.n_x == 2:
        plots.lyapunov_heatmap_figure(problem, None, out_dir / "lyapunov.png")
    print(f"verify: {report.status} "
          f"(positivity {report.positivity.status}, decrease {report.decrease.status})")
    return EXIT_OK if report.certified else EXIT_UNMET


def cmd_roa(cfg, out_dir, checkpoint_path) -> int:
    problem, _ = configmod.load_checkpoint(checkpoint_path)
    _check_dims(problem, configmod.build_plant(cfg), "roa")
    workers = _env_workers() or cfg.resolved["train"]["workers"]
    result = certify.roa_level(
        problem, solve_options=_solve_options(cfg), workers=workers
    )
    hashes = {"checkpoint.json": configmod.file_sha256(checkpoint_path)}
    _write_json(
        out_dir / "roa.json",
        {
            "rho": result.rho,
            "exact": result.exact,
            "minimizer": None if result.minimizer is None else result.minimizer.tolist(),
            "faces": [dataclasses.asdict(f) for f in result.faces],
            "config": cfg.resolved,
            "weight_hashes": hashes,
        },
    )
    with open(out_dir / "roa_faces.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dim", "side", "value", "exact"])
        for face in result.faces:
            writer.writerow([face.dim, face.side, face.value, face.exact])
    if problem.n_x == 2:
        plots.lyapunov_heatmap_figure(problem, result.rho, out_dir / "roa_heatmap.png")
    print(f"roa: rho = {result.rho:.6g} ({'exact' if result.exact else 'lower bound'})")
    return EXIT_OK if result.rho > 0 else EXIT_UNMET


# --- simulate -----------------------------------------------------------------


def _parse_states(args, n_x) -> np.ndarray:
    rows = []
    for text in args.x0 or []:
        row = [float(tok) for tok in text.replace(",", " ").split()]
        rows.append(row)
    if args.x0_file:
        data = np.loadtxt(args.x0_file, ndmin=2)
        rows.extend(data.tolist())
    if not rows:
        raise configmod.ConfigError("simulate: provide at least one --x0 or an --x0-file")
    states = np.asarray(rows, dtype=np.float64)
    if states.shape[1] != n_x:
        raise configmod.ConfigError(
            f"simulate: initial states have {states.shape[1]} coordinates, expected {n_x}"
        )
    return states


def cmd_simulate(cfg, out_dir, checkpoint_path, args) -> int:
    problem, _ = configmod.load_checkpoint(checkpoint_path)
    plant = configmod.build_plant(cfg)
    _check_dims(problem, plant, "simulate")
    states = _parse_states(args, problem.n_x)
    sources = {"network": None, "plant": plant}
    if args.source != "both":
        sources = {args.source: sources[args.source]}
    hashes = {"checkpoint.json": configmod.file_sha256(checkpoint_path)}

    summary = []
    all_ok = True
    for name, source in sources.items():
        records = []
        for i, x0 in enumerate(states):
            rec = plants.simulate(
                problem, x0, args.horizon,
                plant=source, dt=getattr(plant, "dt", 1.0),
                convergence_tol=args.convergence_tol,
            )
            records.append(rec)
            path = out_dir / f"trajectory_{name}_{i:03d}.csv"
            plants.save_trajectory(path, rec, n_u=problem.n_u)
            summary.append(
                {
                    "source": name,
                    "x0": x0.tolist(),
                    "file": path.name,
                    "converged": rec.converged,
                    "truncated": rec.truncated,
                    "v_first": float(rec.vvalues[0]),
                    "v_last": float(rec.vvalues[-1]),
                }
            )
            all_ok = all_ok and not rec.truncated
        plots.value_along_trajectories_figure(
            records, out_dir / f"v_along_{name}.png", eps2=problem.eps2
        )
        if problem.n_x == 2:
            plots.phase_figure(problem, records, out_dir / f"phase_{name}.png")
    _write_json(
        out_dir / "simulate_summary.json",
        {"runs": summary, "config": cfg.resolved, "weight_hashes": hashes},
    )
    done = sum(1 for row in summary if row["converged"])
    print(f"simulate: {done}/{len(summary)} rollouts converged "
          f"-> {out_dir / 'simulate_summary.json'}")
    return EXIT_OK if all_ok else EXIT_UNMET


# --- entry point ----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lyapsyn",
        description="Synthesize and certify neural Lyapunov controllers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="experiment JSON document")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint JSON file")

    p_fit = sub.add_parser("fit", help="regress the dynamics network")
    common(p_fit)

    p_syn = sub.add_parser("synthesize", help="train until certification")
    common(p_syn)
    p_syn.add_argument("--algorithm", type=int, choices=(1, 2),
                       help="override the config algorithm")
    p_syn.add_argument("--dynamics", help="dynamics weight file (default: OUT/dynamics.json)")
    p_syn.add_argument("--box-schedule", dest="box_schedule",
                       help="JSON list of nested boxes to certify in sequence")
    p_syn.add_argument("--allow-uncertified", action="store_true",
                       help="exit 0 even when certification was not reached")

    p_ver = sub.add_parser("verify", help="re-check a checkpoint")
    common(p_ver, checkpoint=True)

    p_roa = sub.add_parser("roa", help="certified sublevel radius of a checkpoint")
    common(p_roa, checkpoint=True)

    p_sim = sub.add_parser("simulate", help="closed-loop rollouts from a checkpoint")
    common(p_sim, checkpoint=True)
    p_sim.add_argument("--x0", action="append",
                       help="initial state, comma-separated (repeatable)")
    p_sim.add_argument("--x0-file", dest="x0_file",
                       help="text file with one initial state per row")
    p_sim.add_argument("--horizon", type=int, default=1000)
    p_sim.add_argument("--source", choices=("network", "plant", "both"), default="both")
    p_sim.add_argument("--convergence-tol", dest="convergence_tol",
                       type=float, default=1e-2)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = configmod.load_config(args.config)
        cfg = _apply_overrides(cfg, args)
        out_dir = _out_dir(cfg, args.out)
        if args.command == "fit":
            return cmd_fit(cfg, out_dir)
        if args.command == "synthesize":
            return cmd_synthesize(
                cfg, out_dir, args.dynamics, args.box_schedule, args.allow_uncertified
            )
        if args.command == "verify":
            return cmd_verify(cfg, out_dir, args.checkpoint)
        if args.command == "roa":
            return cmd_roa(cfg, out_dir, args.checkpoint)
        return cmd_simulate(cfg, out_dir, args.checkpoint, args)
    except (configmod.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
