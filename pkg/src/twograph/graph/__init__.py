"""Two-graph machinery: query/response DAGs, sweeps, chain-rule derivation, DOT export."""

from .derive import derive_chain_rule_response
from .dot import export_dot
from .model import (
    CHAIN,
    CLONE,
    CONSTANT,
    NATURE,
    NEG,
    NOISE,
    OPERATOR,
    ORACLE,
    PLAYER,
    READ,
    SUM,
    ZERO,
    Node,
    PlayerSpec,
    Protocol,
    QueryGraph,
    ResponseGraph,
    Trace,
    ValidationReport,
    infer_query_shapes,
    ref,
    structural_diff,
    topological_order,
    validate,
)
from .sweep import evaluate_query, objective_value, query_sweep, response_sweep, response_values

__all__ = [
    "CHAIN",
    "CLONE",
    "CONSTANT",
    "NATURE",
    "NEG",
    "NOISE",
    "OPERATOR",
    "ORACLE",
    "PLAYER",
    "READ",
    "SUM",
    "ZERO",
    "Node",
    "PlayerSpec",
    "Protocol",
    "QueryGraph",
    "ResponseGraph",
    "Trace",
    "ValidationReport",
    "derive_chain_rule_response",
    "evaluate_query",
    "export_dot",
    "infer_query_shapes",
    "objective_value",
    "query_sweep",
    "ref",
    "response_sweep",
    "response_values",
    "structural_diff",
    "topological_order",
    "validate",
]
