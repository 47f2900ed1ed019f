"""Deterministic Graphviz DOT rendering of query and response graphs."""

from .model import CHAIN, CLONE, CONSTANT, NATURE, NEG, NOISE, OPERATOR, ORACLE, PLAYER, READ, SUM, ZERO, Protocol

_QUERY_STYLE = {
    PLAYER: ("box", "red"),
    NATURE: ("box", "yellow"),
    NOISE: ("box", "yellow"),
    CLONE: ("box", "pink"),
    CONSTANT: ("ellipse", "lightgrey"),
    OPERATOR: ("ellipse", "white"),
}

_RESPONSE_STYLE = {
    ORACLE: "diamond",
    CHAIN: "circle",
    SUM: "circle",
    NEG: "circle",
    READ: "ellipse",
    ZERO: "ellipse",
    CONSTANT: "ellipse",
    OPERATOR: "ellipse",
}


def _q(s: str) -> str:
    # labels may carry DOT escapes such as \n, so only quotes are escaped
    return '"' + str(s).replace('"', '\\"') + '"'


def _label(n) -> str:
    if n.kind == OPERATOR:
        return f"{n.id}\\n{n.kernel}"
    if n.kind == NATURE:
        return f"{n.id}\\n(" + ", ".join(name for name, _ in n.attrs["ports"]) + ")"
    if n.kind == CHAIN:
        return "*"
    if n.kind == SUM:
        return "+"
    if n.kind == NEG:
        return "-1"
    if n.kind == ORACLE:
        return f"oracle\\n{n.attrs['target']}"
    if n.kind == READ:
        return f"read {n.attrs['target'][0]}"
    return n.id


def _edge(src, port, dst, slot, n_inputs):
    attrs = []
    if port or n_inputs > 1:
        attrs.append(f"label={_q(f'{port}:{slot}')}")
    tail = f" [{', '.join(attrs)}]" if attrs else ""
    return f"  {_q(src)} -> {_q(dst)}{tail};"


def export_dot(protocol: Protocol, which: str = "query") -> str:
    """Render one graph; output depends only on the protocol (byte-stable)."""
    protocol.require_valid()
    if which not in ("query", "response"):
        raise ValueError(f"which must be 'query' or 'response', got {which!r}")
    lines = [f"digraph {_q(protocol.name + '_' + which)} {{", "  rankdir=LR;", '  node [fontname="Helvetica"];']
    if which == "query":
        graph = protocol.query
        for n in graph.nodes:
            shape, color = _QUERY_STYLE[n.kind]
            extra = ", peripheries=2" if (n.id, 0) == tuple(graph.objective) else ""
            lines.append(f"  {_q(n.id)} [label={_q(_label(n))}, shape={shape}, style=filled, fillcolor={color}{extra}];")
        for n in graph.nodes:
            for slot, (src, port) in enumerate(n.inputs):
                lines.append(_edge(src, port, n.id, slot, len(n.inputs)))
    else:
        graph = protocol.response
        for n in graph.nodes:
            shape = _RESPONSE_STYLE[n.kind]
            lines.append(f"  {_q(n.id)} [label={_q(_label(n))}, shape={shape}, style=filled, fillcolor=green];")
        for name in protocol.player_names:
            lines.append(f"  {_q('player:' + name)} [label={_q(name)}, shape=box, style=filled, fillcolor=red];")
        for n in graph.nodes:
            for slot, (src, port) in enumerate(n.inputs):
                lines.append(_edge(src, port, n.id, slot, len(n.inputs)))
        for name in protocol.player_names:
            src, port = graph.outputs[name]
            lines.append(_edge(src, port, "player:" + name, 0, 1))
    lines.append("}")
    return "\n".join(lines) + "\n"
