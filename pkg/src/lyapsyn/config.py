"""Experiment configuration schema and checkpoint serialization.

One JSON document defines an experiment end to end: the plant, control
limits, the box to certify over, network shapes, the training algorithm
and its budgets. Every artifact written by the command line embeds the
resolved document verbatim so runs stay reproducible.
"""

import copy
import dataclasses
import hashlib
import json
import math

import numpy as np

from lyapsyn import certify, nets, plants, trainer


class ConfigError(ValueError):
    """Raised when a config document fails validation."""


# Table of hidden-layer defaults per plant kind: dynamics, controller, Lyapunov.
NETWORK_DEFAULTS = {
    "pendulum": ([5, 5], [2, 2], [8, 4, 4]),
    "quadrotor2d": ([7, 7], [6, 4], [10, 10, 4]),
    "linear": ([4], [2], [4]),
}

_PLANT_FIELDS = {
    "pendulum": {"mass": 1.0, "length": 1.0, "damping": 0.1, "gravity": 9.81, "dt": 0.01},
    "quadrotor2d": {
        "mass": 0.486, "arm_length": 0.25, "inertia": 0.00383, "gravity": 9.81, "dt": 0.01,
    },
    "linear": {"a": None, "b": None, "dt": 1.0},
}

_TRAIN_DEFAULTS = {
    "p": 4.0,
    "batch_size": 32,
    "learning_rate": 1e-3,
    "max_epochs": 200,
    "optimizer": "adam",
    "max_iterations": 50,
    "step_size": 1e-2,
    "pool_cap": 50,
    "node_budget": 500_000,
    "workers": 1,
}

_FIT_DEFAULTS = {
    "sample_count": 2000,
    "target_mse": 1e-5,
    "max_epochs": 5000,
    "learning_rate": 1e-2,
    "method": "regress",  # or "exact-linear" for linear plants
}

_INIT_DEFAULTS = {
    "controller": "random",  # or "lqr"
    "lqr_samples": 500,
    "net_scale": 0.1,
    "r_value": 0.5,
    "warm_start": None,  # checkpoint path to resume from
}


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where}: missing required field '{key}'")
    return doc[key]


def _check_keys(doc: dict, allowed, where: str) -> None:
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")


def _floats(value, where: str) -> list:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{where}: expected a nonempty list of finite numbers")
    return [float(v) for v in arr]


def _positive(value, where: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a number") from None
    if not (out > 0 and math.isfinite(out)):
        raise ConfigError(f"{where}: must be positive and finite")
    return out


def _count(doc: dict, key: str, where: str) -> None:
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
        raise ConfigError(f"{where}.{key}: must be a positive integer")


def _hidden(value, where: str) -> list:
    if (
        not isinstance(value, (list, tuple))
        or not value
        or not all(isinstance(v, int) and v > 0 for v in value)
    ):
        raise ConfigError(f"{where}: expected a nonempty list of positive layer widths")
    return list(value)


def _validate_plant(doc, features) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError("plant: expected an object")
    kind = _require(doc, "kind", "plant")
    if kind not in _PLANT_FIELDS:
        raise ConfigError(f"plant.kind: unknown plant '{kind}'")
    if kind == "quadrotor2d" and not features.get("quadrotor2d", False):
        raise ConfigError("plant.kind: quadrotor2d requires features.quadrotor2d = true")
    defaults = _PLANT_FIELDS[kind]
    _check_keys(doc, {"kind", *defaults}, "plant")
    out = {"kind": kind}
    for field, default in defaults.items():
        if field in ("a", "b"):
            raw = _require(doc, field, "plant") if default is None else doc.get(field, default)
            mat = np.asarray(raw, dtype=np.float64)
            if mat.ndim != 2 or not np.all(np.isfinite(mat)):
                raise ConfigError(f"plant.{field}: expected a finite matrix")
            out[field] = mat.tolist()
        elif field == "damping":
            try:
                value = float(doc.get(field, default))
            except (TypeError, ValueError):
                raise ConfigError("plant.damping: expected a number") from None
            if not math.isfinite(value) or value < 0:
                raise ConfigError("plant.damping: must be nonnegative")
            out[field] = value
        else:
            out[field] = _positive(doc.get(field, default), f"plant.{field}")
    return out


def validate_config(doc: dict) -> dict:
    """Check a parsed config document and fill in defaults.

    Returns the fully resolved document; raises ConfigError naming the
    offending field otherwise.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    allowed = {
        "plant", "control_limits", "box", "eps1", "eps2", "networks",
        "fit", "algorithm", "train", "init", "seed", "out", "features",
    }
    _check_keys(doc, allowed, "config")
    out = {}
    features = doc.get("features", {})
    if not isinstance(features, dict):
        raise ConfigError("features: expected an object of booleans")
    _check_keys(features, {"quadrotor2d"}, "features")
    out["features"] = {"quadrotor2d": bool(features.get("quadrotor2d", False))}

    out["plant"] = _validate_plant(_require(doc, "plant", "config"), out["features"])
    kind = out["plant"]["kind"]

    limits = _require(doc, "control_limits", "config")
    _check_keys(limits, {"min", "max"}, "control_limits")
    u_min = _floats(_require(limits, "min", "control_limits"), "control_limits.min")
    u_max = _floats(_require(limits, "max", "control_limits"), "control_limits.max")
    if len(u_min) != len(u_max) or any(a >= b for a, b in zip(u_min, u_max)):
        raise ConfigError("control_limits: min must lie strictly below max")
    out["control_limits"] = {"min": u_min, "max": u_max}

    box = _require(doc, "box", "config")
    _check_keys(box, {"lo", "hi"}, "box")
    lo = _floats(_require(box, "lo", "box"), "box.lo")
    hi = _floats(_require(box, "hi", "box"), "box.hi")
    if len(lo) != len(hi) or any(a >= b for a, b in zip(lo, hi)):
        raise ConfigError("box: lo must lie strictly below hi")
    out["box"] = {"lo": lo, "hi": hi}

    out["eps1"] = _positive(doc.get("eps1", 0.01), "eps1")
    out["eps2"] = _positive(doc.get("eps2", 0.01), "eps2")
    if out["eps2"] >= 1.0:
        raise ConfigError("eps2: must be below 1")

    dyn_h, ctrl_h, lyap_h = NETWORK_DEFAULTS[kind]
    networks = doc.get("networks", {})
    _check_keys(
        networks,
        {"dynamics_hidden", "controller_hidden", "lyapunov_hidden", "leak"},
        "networks",
    )
    out["networks"] = {
        "dynamics_hidden": _hidden(networks.get("dynamics_hidden", dyn_h), "networks.dynamics_hidden"),
        "controller_hidden": _hidden(networks.get("controller_hidden", ctrl_h), "networks.controller_hidden"),
        "lyapunov_hidden": _hidden(networks.get("lyapunov_hidden", lyap_h), "networks.lyapunov_hidden"),
        "leak": _positive(networks.get("leak", 0.1), "networks.leak"),
    }
    if out["networks"]["leak"] >= 1.0:
        raise ConfigError("networks.leak: must be below 1")

    algorithm = _require(doc, "algorithm", "config")
    if isinstance(algorithm, bool) or algorithm not in (1, 2):
        raise ConfigError("algorithm: must be 1 (counter-example sets) or 2 (min-max)")
    out["algorithm"] = algorithm

    fit = dict(_FIT_DEFAULTS)
    given = doc.get("fit", {})
    _check_keys(given, fit, "fit")
    fit.update(given)
    if fit["method"] not in ("regress", "exact-linear"):
        raise ConfigError("fit.method: must be 'regress' or 'exact-linear'")
    if fit["method"] == "exact-linear" and kind != "linear":
        raise ConfigError("fit.method: exact-linear only applies to linear plants")
    _count(fit, "sample_count", "fit")
    _count(fit, "max_epochs", "fit")
    fit["target_mse"] = _positive(fit["target_mse"], "fit.target_mse")
    fit["learning_rate"] = _positive(fit["learning_rate"], "fit.learning_rate")
    out["fit"] = fit

    train = dict(_TRAIN_DEFAULTS)
    given = doc.get("train", {})
    _check_keys(given, train, "train")
    train.update(given)
    # the infinity norm is spelled "inf" so the resolved document stays
    # plain JSON when embedded into artifacts
    if train["p"] != "inf" and float(train["p"]) not in (1.0, 4.0):
        raise ConfigError("train.p: must be 1, 4, or 'inf'")
    if train["optimizer"] not in ("gd", "adam"):
        raise ConfigError("train.optimizer: must be 'gd' or 'adam'")
    for key in ("batch_size", "max_epochs", "max_iterations", "pool_cap", "node_budget", "workers"):
        _count(train, key, "train")
    train["learning_rate"] = _positive(train["learning_rate"], "train.learning_rate")
    train["step_size"] = _positive(train["step_size"], "train.step_size")
    out["train"] = train

    init = dict(_INIT_DEFAULTS)
    given = doc.get("init", {})
    _check_keys(given, init, "init")
    init.update(given)
    if init["controller"] not in ("random", "lqr"):
        raise ConfigError("init.controller: must be 'random' or 'lqr'")
    _count(init, "lqr_samples", "init")
    init["net_scale"] = _positive(init["net_scale"], "init.net_scale")
    init["r_value"] = _positive(init["r_value"], "init.r_value")
    if init["warm_start"] is not None and not isinstance(init["warm_start"], str):
        raise ConfigError("init.warm_start: must be null or a checkpoint path")
    out["init"] = init

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed: must be a nonnegative integer")
    out["seed"] = seed
    out["out"] = doc.get("out", "runs/experiment")
    if not isinstance(out["out"], str) or not out["out"]:
        raise ConfigError("out: must be a nonempty path string")
    return out


@dataclasses.dataclass
class ExperimentConfig:
    """Validated experiment document plus the verbatim resolved form."""

    resolved: dict

    @property
    def plant_kind(self) -> str:
        return self.resolved["plant"]["kind"]

    @property
    def seed(self) -> int:
        return self.resolved["seed"]

    @property
    def algorithm(self) -> int:
        return self.resolved["algorithm"]

    @property
    def out_dir(self) -> str:
        return self.resolved["out"]

    @property
    def box(self):
        b = self.resolved["box"]
        return np.array(b["lo"]), np.array(b["hi"])

    @property
    def control_limits(self):
        c = self.resolved["control_limits"]
        return np.array(c["min"]), np.array(c["max"])

    @property
    def leak(self) -> float:
        return self.resolved["networks"]["leak"]

    def copy_with(self, **updates) -> "ExperimentConfig":
        doc = copy.deepcopy(self.resolved)
        doc.update(updates)
        return ExperimentConfig(validate_config(doc))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return ExperimentConfig(validate_config(doc))


def build_plant(cfg: ExperimentConfig):
    p = cfg.resolved["plant"]
    if p["kind"] == "pendulum":
        return plants.PendulumPlant(
            p["mass"], p["length"], p["damping"], p["gravity"], p["dt"]
        )
    if p["kind"] == "quadrotor2d":
        return plants.Quadrotor2D(
            p["mass"], p["arm_length"], p["inertia"], p["gravity"], p["dt"]
        )
    return plants.LinearPlant(np.array(p["a"]), np.array(p["b"]), p["dt"])


def to_train_config(cfg: ExperimentConfig, checkpoint_dir=None) -> trainer.TrainConfig:
    t = cfg.resolved["train"]
    loss = trainer.LossConfig(
        p=math.inf if t["p"] == "inf" else float(t["p"]),
        batch_size=t["batch_size"],
        learning_rate=t["learning_rate"],
        max_epochs=t["max_epochs"],
        optimizer=t["optimizer"],
    )
    return trainer.TrainConfig(
        loss=loss,
        max_iterations=t["max_iterations"],
        pool_cap=t["pool_cap"],
        step_size=t["step_size"],
        node_budget=t["node_budget"],
        checkpoint_dir=checkpoint_dir,
        workers=t["workers"],
    )


# --- checkpoint files -------------------------------------------------------

CHECKPOINT_FORMAT = "lyapsyn-checkpoint-1"


def _net_to_dict(net: nets.FeedforwardNetwork) -> dict:
    return {
        "leak_slope": net.leak,
        "layers": [
            {"weight": w.tolist(), "bias": b.tolist()}
            for w, b in zip(net.weights, net.biases)
        ],
    }


def _net_from_dict(doc: dict) -> nets.FeedforwardNetwork:
    weights = tuple(np.array(layer["weight"], dtype=np.float64) for layer in doc["layers"])
    biases = tuple(np.array(layer["bias"], dtype=np.float64) for layer in doc["layers"])
    return nets.FeedforwardNetwork(weights, biases, doc["leak_slope"])


def problem_to_dict(problem: certify.CertificationProblem) -> dict:
    dyn, ctrl, lyap = problem.dynamics, problem.controller, problem.lyapunov
    return {
        "dynamics": {
            "net": _net_to_dict(dyn.net),
            "x_star": dyn.x_star.tolist(),
            "u_star": dyn.u_star.tolist(),
            "u_min": dyn.u_min.tolist(),
            "u_max": dyn.u_max.tolist(),
        },
        "controller": {"net": _net_to_dict(ctrl.net)},
        "lyapunov": {
            "net": _net_to_dict(lyap.net),
            "x_star": lyap.x_star.tolist(),
            "u_factor": lyap.u_factor.tolist(),
            "v_factor": lyap.v_factor.tolist(),
            "sigma": lyap.sigma.tolist(),
            "r": lyap.r.tolist(),
        },
        "box_lo": problem.box_lo.tolist(),
        "box_hi": problem.box_hi.tolist(),
        "eps1": problem.eps1,
        "eps2": problem.eps2,
    }


def problem_from_dict(doc: dict) -> certify.CertificationProblem:
    d = doc["dynamics"]
    dyn = certify.Dynamics(
        _net_from_dict(d["net"]),
        np.array(d["x_star"]), np.array(d["u_star"]),
        np.array(d["u_min"]), np.array(d["u_max"]),
    )
    ctrl = certify.Controller(_net_from_dict(doc["controller"]["net"]))
    ly = doc["lyapunov"]
    lyap = certify.LyapunovFunction(
        _net_from_dict(ly["net"]),
        np.array(ly["x_star"]),
        np.array(ly["u_factor"]), np.array(ly["v_factor"]),
        np.array(ly["sigma"]), np.array(ly["r"]),
    )
    return certify.CertificationProblem(
        dyn, ctrl, lyap,
        np.array(doc["box_lo"]), np.array(doc["box_hi"]),
        eps1=doc["eps1"], eps2=doc["eps2"],
    )


def save_checkpoint(path, problem: certify.CertificationProblem, meta: dict) -> None:
    doc = {"format": CHECKPOINT_FORMAT, "problem": problem_to_dict(problem), "meta": meta}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (problem, meta). Rejects files in any other format."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a checkpoint file")
    return problem_from_dict(doc["problem"]), doc.get("meta", {})


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()
