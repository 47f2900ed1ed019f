"""Derive the reverse-mode (chain rule) response graph of a query graph."""

import numpy as np

from ..errors import ShapeError
from ..operators import get_kernel
from .model import CHAIN, CONSTANT, OPERATOR, ORACLE, PLAYER, SUM, ZERO, Node, QueryGraph, ResponseGraph, infer_query_shapes

SEED = "seed"


def oracle_id(node_id: str) -> str:
    return f"oracle[{node_id}]"


def chain_id(node_id: str) -> str:
    return f"*[{node_id}]"


def derive_chain_rule_response(query: QueryGraph) -> ResponseGraph:
    """One oracle and one ``*`` node per query operator on a player-to-objective path.

    Deltas flow in reverse topological order; a value read by several
    operators collects its contributions at a ``+`` node. Players that do not
    influence the objective receive a zero response.
    """
    shapes = infer_query_shapes(query)
    obj, obj_port = query.objective
    if shapes[obj][obj_port] != ():
        raise ShapeError(f"objective {obj!r} must be a scalar, has shape {shapes[obj][obj_port]}")

    players = set(query.player_ids)
    relevant = (query.descendants(players) | players) & (query.ancestors(obj) | {obj})

    nodes = [Node(SEED, CONSTANT, value=np.asarray(1.0))]
    contributions = {(obj, obj_port): [(SEED, 0)]}

    def delta_ref(key):
        refs = contributions.get(key, [])
        if len(refs) == 1:
            return refs[0]
        sid = f"+[{key[0]}:{key[1]}]" if key[0] not in players else f"+[{key[0]}]"
        nodes.append(Node(sid, SUM, inputs=tuple(refs)))
        return (sid, 0)

    for node_id in reversed(query.order):
        n = query.node(node_id)
        if n.kind != OPERATOR or node_id not in relevant:
            continue
        ports = sorted(p for (nid, p) in contributions if nid == node_id)
        if not ports:
            continue
        spec = get_kernel(n.kernel)
        wrt = tuple(
            k for k, (src, _) in enumerate(n.inputs) if k not in spec.nondiff and src in relevant
        )
        if not wrt:
            continue
        if spec.vjp is None:
            raise TypeError(f"kernel {n.kernel!r} of operator {node_id!r} has no registered partials")
        deltas = [delta_ref((node_id, p)) for p in ports]
        nodes.append(Node(oracle_id(node_id), ORACLE, attrs={"target": node_id}))
        nodes.append(
            Node(chain_id(node_id), CHAIN, inputs=((oracle_id(node_id), 0), *deltas), attrs={"ports": tuple(ports), "wrt": wrt})
        )
        for k, slot in enumerate(wrt):
            contributions.setdefault(n.inputs[slot], []).append((chain_id(node_id), k))

    outputs = {}
    for name in query.player_ids:
        if contributions.get((name, 0)):
            outputs[name] = delta_ref((name, 0))
        else:
            zid = f"zero[{name}]"
            nodes.append(Node(zid, ZERO, attrs={"target": (name, 0)}))
            outputs[name] = (zid, 0)
    return ResponseGraph(tuple(nodes), outputs)
