"""Stochastic-gradient training loop over all variational parameters.

Each step rebuilds a fresh tape, draws one (or S) Monte Carlo ELBO
estimates, backpropagates, and applies a functional Adam update to every
raw parameter array. Divergent solves and non-finite gradients skip the
update, halve the learning rate once (floored), and are logged as events
in the trace.

Checkpoints are versioned JSON bundles holding every parameter tensor,
the optimizer moments, all RNG substream states, and a hash of the
configuration; restoring one and taking a step reproduces an
uninterrupted run bit for bit.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .errors import ContractError, DimensionError, NumericalError
from .rng import get_state, make_streams, set_state

CHECKPOINT_FORMAT = "gpode-checkpoint"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    steps: int
    seed: int = 0
    learning_rate: float = 0.01
    n_samples: int = 1
    objective: str = "vanilla"
    m_inducing: int = 16
    fourier_count: int = 256
    solver: models.SolverSettings = field(default_factory=models.SolverSettings)
    shooting_tolerance: float = models.DEFAULT_SHOOTING_TOLERANCE
    t_start: float = 0.0
    checkpoint_interval: int = 0
    lr_floor: float = 1e-4

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ContractError("learning rate must be positive")
        if self.objective not in ("vanilla", "shooting"):
            raise ContractError(f"unknown objective {self.objective!r}")

    def hash(self):
        # The step budget and checkpoint cadence do not change what is being
        # optimized, so extending a run keeps the same identity.
        ident = {**asdict(self), "solver": asdict(self.solver)}
        ident.pop("steps")
        ident.pop("checkpoint_interval")
        blob = json.dumps(ident, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def adam_init(params):
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params, grads, state, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """One bias-corrected Adam update; returns new (params, state)."""
    for k, g in grads.items():
        if k not in params or params[k].shape != np.asarray(g).shape:
            raise DimensionError(f"gradient for {k!r} does not match parameter shape")
    t = state["step"] + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = beta1 * state["m"][k] + (1.0 - beta1) * g
        v = beta2 * state["v"][k] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_params, {"step": t, "m": new_m, "v": new_v}


@dataclass
class TrainResult:
    params: dict
    trace: list
    config: TrainConfig
    final_lr: float
    events: list


def _objective_fn(name):
    return models.elbo_vanilla if name == "vanilla" else models.elbo_shooting


def train(config, traj, checkpoint_path=None, resume_from=None, init_params=None):
    """Run the optimization loop and return the trained parameter bundle.

    `checkpoint_path` (optional) receives a bundle every
    `checkpoint_interval` steps and at the end. `resume_from` restores a
    bundle and continues to `config.steps` as if never interrupted.
    """
    streams = make_streams(config.seed)
    if resume_from is not None:
        bundle = load_checkpoint(resume_from)
        if bundle["config_hash"] != config.hash():
            raise ContractError("checkpoint was produced by a different config")
        params = bundle["params"]
        adam_state = bundle["adam_state"]
        set_state(streams, bundle["rng_state"])
        lr = bundle["lr"]
        start_step = bundle["step"]
        trace, events = [], list(bundle.get("events", []))
    else:
        params = (
            {k: np.asarray(v, dtype=np.float64).copy() for k, v in init_params.items()}
            if init_params is not None
            else models.init_parameters(
                traj, config.m_inducing, streams.init, objective=config.objective
            )
        )
        adam_state = adam_init(params)
        lr = config.learning_rate
        start_step = 0
        trace, events = [], []

    elbo_fn = _objective_fn(config.objective)
    for step in range(start_step + 1, config.steps + 1):
        tick = time.perf_counter()
        event = ""
        try:
            tape = ad.Tape()
            handles = models.materialize(params, tape, config.shooting_tolerance)
            total, diag = elbo_fn(
                traj,
                handles.inducing,
                handles.hyper,
                handles.state_post,
                handles.noise,
                streams,
                n_samples=config.n_samples,
                fourier_count=config.fourier_count,
                solver=config.solver,
                t_start=config.t_start,
            )
            raw = tape.backward(total)
            grads = {}
            for name, leaf in handles.leaves.items():
                g = raw[leaf.nid]
                if not np.isfinite(g).all():
                    raise NumericalError(f"non-finite gradient for {name!r}")
                grads[name] = -g  # Adam minimizes; we maximize the bound.
            elbo_val = total.item()
            if not np.isfinite(elbo_val):
                raise NumericalError("non-finite objective value")
        except NumericalError as e:
            lr = max(lr / 2.0, config.lr_floor)
            event = f"skipped: {e}"
            events.append({"step": step, "event": event})
            trace.append(
                {
                    "step": step,
                    "wall_clock": time.perf_counter() - tick,
                    "elbo": float("-inf"),
                    "lr": lr,
                    "event": event,
                }
            )
            continue

        params, adam_state = adam_step(params, grads, adam_state, lr)
        row = {
            "step": step,
            "wall_clock": time.perf_counter() - tick,
            "elbo": elbo_val,
            "lr": lr,
            "event": event,
        }
        row.update(diag)
        trace.append(row)
        if (
            checkpoint_path is not None
            and config.checkpoint_interval > 0
            and step % config.checkpoint_interval == 0
        ):
            save_checkpoint(
                checkpoint_path, config, params, adam_state, streams, step, lr, events
            )

    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path, config, params, adam_state, streams, config.steps, lr, events
        )
    return TrainResult(params, trace, config, lr, events)


def _encode_array(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii"),
    }


def _decode_array(spec):
    arr = np.frombuffer(base64.b64decode(spec["data"]), dtype=np.float64)
    return arr.reshape(spec["shape"]).copy()


def save_checkpoint(path, config, params, adam_state, streams, step, lr, events=()):
    bundle = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": config.hash(),
        "config": {**asdict(config), "solver": asdict(config.solver)},
        "step": step,
        "lr": lr,
        "params": {k: _encode_array(v) for k, v in params.items()},
        "adam": {
            "step": adam_state["step"],
            "m": {k: _encode_array(v) for k, v in adam_state["m"].items()},
            "v": {k: _encode_array(v) for k, v in adam_state["v"].items()},
        },
        "rng_state": get_state(streams),
        "events": list(events),
    }
    with open(path, "w") as fh:
        json.dump(bundle, fh)


def load_checkpoint(path):
    with open(path) as fh:
        bundle = json.load(fh)
    if bundle.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if bundle.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {bundle.get('version')}")
    return {
        "config_hash": bundle["config_hash"],
        "config": bundle["config"],
        "step": bundle["step"],
        "lr": bundle["lr"],
        "params": {k: _decode_array(v) for k, v in bundle["params"].items()},
        "adam_state": {
            "step": bundle["adam"]["step"],
            "m": {k: _decode_array(v) for k, v in bundle["adam"]["m"].items()},
            "v": {k: _decode_array(v) for k, v in bundle["adam"]["v"].items()},
        },
        "rng_state": bundle["rng_state"],
        "events": bundle["events"],
    }
