"""Query and response sweeps: evaluate a graph once in topological order."""

import numpy as np

from ..errors import MissingValueError, NonFiniteError, ShapeError
from ..operators import KernelCall, get_kernel
from ..tensor import as_tensor
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
    Protocol,
    Trace,
)


def _finite(values, node_id, graph):
    for v in values:
        if isinstance(v, np.ndarray) and not np.all(np.isfinite(v)):
            raise NonFiniteError(f"{graph} node {node_id!r} produced NaN or Inf", node=node_id)
    return values


def _gather(values, node):
    out = []
    for src, port in node.inputs:
        # reading a value that has not been written would mean the order is wrong
        assert src in values, f"node {node.id!r} read {src!r} before it was evaluated"
        out.append(values[src][port])
    return tuple(out)


def _nature_value(node, supplied):
    if node.id not in supplied:
        raise MissingValueError(f"no sample supplied for nature node {node.id!r}")
    v = supplied[node.id]
    if isinstance(v, dict):
        try:
            v = tuple(v[name] for name, _ in node.attrs["ports"])
        except KeyError as exc:
            raise MissingValueError(f"nature node {node.id!r} is missing port {exc.args[0]!r}") from None
    elif not isinstance(v, tuple):
        v = (v,)
    if len(v) != len(node.attrs["ports"]):
        raise MissingValueError(f"nature node {node.id!r} expects {len(node.attrs['ports'])} ports, got {len(v)}")
    return tuple(as_tensor(x) for x in v)


def evaluate_query(query, params, nature=None, noise=None, clones=None, targets=None) -> dict:
    """Evaluate query nodes; with ``targets`` only their ancestors are computed."""
    nature, noise, clones = nature or {}, noise or {}, clones or {}
    needed = None
    if targets is not None:
        needed = set(targets)
        for t in targets:
            needed |= query.ancestors(t)
    values = {}
    for node_id in query.order:
        if needed is not None and node_id not in needed:
            continue
        n = query.node(node_id)
        if n.kind == PLAYER:
            if node_id not in params:
                raise MissingValueError(f"no parameters supplied for player {node_id!r}")
            p = as_tensor(params[node_id])
            if p.shape != tuple(n.attrs["shape"]):
                raise ShapeError(f"player {node_id!r}: parameters have shape {p.shape}, expected {tuple(n.attrs['shape'])}")
            out = (p,)
        elif n.kind == NATURE:
            out = _nature_value(n, nature)
        elif n.kind == NOISE:
            if node_id not in noise:
                raise MissingValueError(f"no sample supplied for noise node {node_id!r}")
            out = (as_tensor(noise[node_id]),)
        elif n.kind == CLONE:
            src = n.attrs["source"]
            out = (as_tensor(clones[node_id] if node_id in clones else params[src]),)
        elif n.kind == CONSTANT:
            out = (as_tensor(n.value),)
        else:
            spec = get_kernel(n.kernel)
            out = tuple(spec.forward(n.attrs, *_gather(values, n)))
        values[node_id] = _finite(out, node_id, "query")
    return values


def query_sweep(protocol: Protocol, params, nature=None, noise=None, clones=None) -> Trace:
    """Run the query graph once.

    ``nature`` maps nature node ids to a tuple of port samples (or a dict by
    port name); ``noise`` maps noise node ids to arrays; ``clones`` maps clone
    node ids to frozen parameter copies (default: the live parameters).
    """
    protocol.require_valid()
    values = evaluate_query(protocol.query, params, nature, noise, clones)
    samples = {"nature": dict(nature or {}), "noise": dict(noise or {})}
    return Trace(values, samples)


def response_values(protocol: Protocol, trace: Trace) -> dict:
    """Evaluate every response node; returns node id -> tuple of outputs."""
    q, r = protocol.query, protocol.response
    values = {}
    for node_id in r.order:
        n = r.node(node_id)
        ins = _gather(values, n)
        if n.kind == CONSTANT:
            out = (as_tensor(n.value),)
        elif n.kind in (READ, ZERO):
            src, port = n.attrs["target"]
            if src not in trace:
                raise MissingValueError(f"trace has no entry for {src!r} (read by {node_id!r})")
            v = trace.values[src][port]
            out = (np.zeros_like(v) if n.kind == ZERO else v,)
        elif n.kind == ORACLE:
            target = n.attrs["target"]
            t = q.node(target)
            if target not in trace:
                raise MissingValueError(f"trace has no entry for operator {target!r}")
            call = KernelCall(get_kernel(t.kernel), t.attrs, tuple(trace.values[s][p] for s, p in t.inputs), trace.values[target])
            out = (call,)
        elif n.kind == CHAIN:
            call = ins[0]
            grads = [None] * len(call.outputs)
            for port, d in zip(n.attrs["ports"], ins[1:]):
                grads[port] = d if grads[port] is None else grads[port] + d
            full = call.vjp(grads)
            out = tuple(np.zeros_like(call.inputs[k]) if full[k] is None else full[k] for k in n.attrs["wrt"])
        elif n.kind == SUM:
            total = ins[0]
            for x in ins[1:]:
                total = total + x
            out = (total,)
        elif n.kind == NEG:
            out = (-ins[0],)
        elif n.kind == OPERATOR:
            out = tuple(get_kernel(n.kernel).forward(n.attrs, *ins))
        else:  # pragma: no cover - validate rejects unknown kinds
            raise ValueError(f"unknown response node kind {n.kind!r}")
        values[node_id] = _finite(out, node_id, "response")
    return values


def response_sweep(protocol: Protocol, trace: Trace) -> dict:
    """Run the response graph on a trace; returns player name -> delta."""
    protocol.require_valid()
    values = response_values(protocol, trace)
    return {name: values[src][port] for name, (src, port) in protocol.response.outputs.items()}


def objective_value(protocol: Protocol, params, nature=None, noise=None, clones=None) -> float:
    """The traced scalar objective, computing only what it depends on."""
    obj, port = protocol.query.objective
    values = evaluate_query(protocol.query, params, nature, noise, clones, targets=[obj])
    return float(values[obj][port])
