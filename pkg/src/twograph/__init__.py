"""Two-graph protocols: query graphs compute, response graphs tell players how to move."""

from .errors import (
    ConfigError,
    DomainError,
    MissingValueError,
    NonFiniteError,
    ShapeError,
    TwoGraphError,
    ValidationError,
)
from .graph import (
    Node,
    PlayerSpec,
    Protocol,
    QueryGraph,
    ResponseGraph,
    Trace,
    ValidationReport,
    derive_chain_rule_response,
    export_dot,
    query_sweep,
    response_sweep,
    validate,
)
from .players import PlayerState, StopRule, arglocopt, init_states, run_round, sgd_step
from .protocols import build_backprop, build_dac, build_gan, build_kickback, build_protocol, build_vae
from .tensor import Rng

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DomainError",
    "MissingValueError",
    "Node",
    "NonFiniteError",
    "PlayerSpec",
    "PlayerState",
    "Protocol",
    "QueryGraph",
    "ResponseGraph",
    "Rng",
    "ShapeError",
    "StopRule",
    "Trace",
    "TwoGraphError",
    "ValidationError",
    "ValidationReport",
    "arglocopt",
    "build_backprop",
    "build_dac",
    "build_gan",
    "build_kickback",
    "build_protocol",
    "build_vae",
    "derive_chain_rule_response",
    "export_dot",
    "init_states",
    "query_sweep",
    "response_sweep",
    "run_round",
    "sgd_step",
    "validate",
]
