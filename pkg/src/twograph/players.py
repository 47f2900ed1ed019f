"""Player state, first-order optimizers, rounds of play and ``arglocopt``.

A player only ever sees its own state and the response the protocol delivers
to it. ``run_round`` is the sole place where the two meet.
"""

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonFiniteError, ShapeError
from .graph import CLONE, NOISE, Protocol, query_sweep, response_sweep
from .operators import mlp_param_count
from .tensor import Rng, as_tensor

OPTIMIZERS = ("sgd", "sgd-momentum")


@dataclass
class PlayerState:
    params: np.ndarray
    lr: float = 0.01
    momentum: float = 0.0
    optimizer: str = "sgd"
    velocity: np.ndarray | None = None

    def __post_init__(self):
        self.params = as_tensor(self.params).copy()
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.optimizer == "sgd" and self.momentum != 0.0:
            raise ValueError("plain sgd takes no momentum; use optimizer='sgd-momentum'")
        if self.velocity is None:
            self.velocity = np.zeros_like(self.params)
        elif np.shape(self.velocity) != self.params.shape:
            raise ShapeError(f"velocity shape {np.shape(self.velocity)} differs from params {self.params.shape}")


def sgd_step(state: PlayerState, delta) -> PlayerState:
    """One descent step along ``delta``; returns a new state."""
    delta = as_tensor(delta)
    if delta.shape != state.params.shape:
        raise ShapeError(f"response shape {delta.shape} does not match parameters {state.params.shape}")
    if state.momentum == 0.0:
        return replace(state, params=state.params - state.lr * delta, velocity=np.zeros_like(state.params))
    velocity = state.momentum * state.velocity + delta
    return replace(state, params=state.params - state.lr * velocity, velocity=velocity)


@dataclass(frozen=True)
class StopRule:
    max_rounds: int = 1000
    tol: float = 1e-6
    window: int = 20

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


# --------------------------------------------------------------------------
# initialization


def gaussian_init(shape, fan_in, rng: Rng, scale=0.1):
    return rng.normal(size=shape) * (scale / math.sqrt(fan_in))


def positive_uniform_init(shape, fan_in, rng: Rng, scale=0.2):
    # all-positive weights make a rectifier net coherent
    return rng.uniform(0.0, scale / math.sqrt(fan_in), size=shape)


def mlp_init(widths, rng: Rng, bias=True, scale=0.1):
    """Flat parameters for the ``mlp`` kernel: Gaussian weights, zero biases."""
    pieces = []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        pieces.append(gaussian_init(n_in * n_out, n_in, rng, scale))
        if bias:
            pieces.append(np.zeros(n_out))
    out = np.concatenate(pieces)
    assert out.size == mlp_param_count(widths, bias)
    return out


def init_states(protocol: Protocol, rng: Rng, lr=0.01, momentum=0.0, overrides=None) -> dict:
    """Initial PlayerState per player. ``overrides[name]`` may set lr/momentum/params."""
    overrides = overrides or {}
    states = {}
    for spec in protocol.players:
        o = dict(overrides.get(spec.name, {}))
        params = o.pop("params", None)
        if params is None:
            params = spec.init(rng.spawn(spec.name)) if spec.init else np.zeros(spec.shape)
        mom = o.get("momentum", momentum)
        opt = o.get("optimizer", "sgd-momentum" if mom else "sgd")
        states[spec.name] = PlayerState(params, lr=o.get("lr", lr), momentum=mom, optimizer=opt)
    return states


# --------------------------------------------------------------------------
# rounds


def sample_noise(protocol: Protocol, rng: Rng, batch: int) -> dict:
    out = {}
    for n in protocol.query.of_kind(NOISE):
        shape = tuple(batch if d == "B" else d for d in n.attrs["shape"])
        out[n.id] = rng.normal(size=shape) * n.attrs.get("std", 1.0)
    return out


def current_clones(protocol: Protocol, states) -> dict:
    return {n.id: states[n.attrs["source"]].params.copy() for n in protocol.query.of_kind(CLONE)}


def run_round(protocol: Protocol, states: dict, env, rng: Rng, clones=None):
    """One query sweep, one response sweep, then every player steps at once."""
    protocol.require_valid()
    params = {name: s.params for name, s in states.items()}
    batch = protocol.batch_size
    noise = sample_noise(protocol, rng, batch)
    policy = protocol.meta.get("policy")
    act = policy(protocol, params) if policy else None
    nature = env.sample(rng, batch, act=act, noise=noise)
    trace = query_sweep(protocol, params, nature, noise, clones)
    deltas = response_sweep(protocol, trace)
    new_states, norms = {}, {}
    for spec in protocol.players:
        d = deltas[spec.name]
        norms[spec.name] = float(np.linalg.norm(d))
        new_states[spec.name] = sgd_step(states[spec.name], -d if spec.maximize else d)
    metrics = {
        "objective": trace.objective(protocol),
        "monitors": {f"{m[0]}:{m[1]}" if m[1] else m[0]: float(np.mean(trace[tuple(m)])) for m in protocol.query.monitors},
        "delta_norm": norms,
    }
    return new_states, metrics


@dataclass
class History:
    rounds: list = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self):
        return len(self.rounds)

    def objectives(self) -> np.ndarray:
        return np.array([m["objective"] for m in self.rounds])


def arglocopt(protocol: Protocol, states: dict, env, rng: Rng, stop: StopRule = StopRule()):
    """Play rounds until every player's smoothed response norm drops below tolerance.

    Returns the final states (the learned representation) and the history.
    Cloned parameters are refreshed every ``protocol.clone_period`` rounds.
    """
    protocol.require_valid()
    clones = current_clones(protocol, states)
    windows = {p.name: deque(maxlen=stop.window) for p in protocol.players}
    history = History()
    for t in range(stop.max_rounds):
        if t and clones and t % protocol.clone_period == 0:
            clones = current_clones(protocol, states)
        states, metrics = run_round(protocol, states, env, rng, clones)
        metrics["round"] = t
        if not math.isfinite(metrics["objective"]):
            raise NonFiniteError(f"objective became non-finite at round {t}: {metrics}", node=protocol.query.objective[0])
        history.rounds.append(metrics)
        for name, v in metrics["delta_norm"].items():
            windows[name].append(v)
        if t + 1 >= stop.window and all(np.mean(w) < stop.tol for w in windows.values()):
            history.stopped_early = True
            break
    return states, history
